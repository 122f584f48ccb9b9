from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from asymptotics import (
    alpha_constants,
    alpha_split,
    beta2_10,
    beta2_1,
    cauchy_riemann_residual,
    complex_step_derivative,
    convolution_decay_check,
    fd_derivative_check,
    frame_field,
    g_remainder,
    handle_r_term,
    loglog_slope,
    phi_sum,
    split_windows,
    swz_series,
    theta_norm,
    x_coords,
)
from conftest import EPSILON, T_REGULAR
from defining_equations import ReducedSystem
from fermi_errors import NotContracting, StepTooLarge
from freecurve import KPoint, line_intersection, sign
from lattice_fourier import FourierField, build_model, field_from_entries
from operator_core import make_window

SPLIT_RADIUS = 8.0


@pytest.fixture
def regular_system(small_model, regular_k):
    window = make_window(small_model.lattice, 4.0, [(0, 0)])
    return ReducedSystem(window, regular_k.shifted((0.004, -0.002)), small_model.A, small_model.q, EPSILON)


def test_split_windows_partition(regular_system):
    splits = split_windows(regular_system, (0, 0), SPLIT_RADIUS)
    total = len(regular_system.gprime)
    assert len(splits.g1) + len(splits.g2) == total
    assert len(splits.g3) + len(splits.g4) == total
    assert len(splits.g1) == 8
    assert set(splits.g1) <= set(splits.g3)
    assert_allclose(splits.g3[splits.g1_in_g3], splits.g1)


def test_swz_series_sums_to_inverse():
    rng = np.random.default_rng(7)
    X = 0.05 * rng.standard_normal((5, 5)) / 5
    Y = 0.1 * (rng.standard_normal((5, 5)) + 1j * rng.standard_normal((5, 5))) / 5
    series = swz_series(X, Y)
    expected = np.linalg.inv(np.eye(5) - X - Y)
    assert_allclose(series.S, np.linalg.inv(np.eye(5) - Y), atol=1e-13)
    assert_allclose(series.S + series.W + series.Z, expected, atol=1e-11)
    assert series.tail < 1e-13


def test_swz_series_requires_contraction():
    with pytest.raises(NotContracting):
        swz_series(np.zeros((2, 2)), 1.5 * np.eye(2))
    with pytest.raises(NotContracting):
        swz_series(0.6 * np.eye(2), 0.5 * np.eye(2))


@pytest.mark.parametrize("nu", [1, 2])
def test_alpha_pieces_reassemble_phi(small_model, regular_system, nu):
    field = frame_field(small_model.A, nu)
    pieces = alpha_split(regular_system, field, field, nu, (0, 0), SPLIT_RADIUS)
    whole = phi_sum(regular_system, field, field, (0, 0), (0, 0))
    assert pieces.total == pytest.approx(whole, rel=1e-9, abs=1e-18)
    assert pieces.refined == pytest.approx(pieces.z * pieces.a1, rel=1e-9, abs=1e-18)
    assert set(pieces.remainders) == {"R1", "R2", "R3", "R4"}


def test_alpha10_below_constant(small_model, regular_system):
    field = frame_field(small_model.A, 1)
    pieces = alpha_split(regular_system, field, field, 1, (0, 0), SPLIT_RADIUS)
    c0, c1, c2 = alpha_constants(field, field, small_model.A, 1, EPSILON)
    assert abs(pieces.a10) <= c0
    assert c0 > 0 and c1 > 0 and c2 > 0


def test_alpha_constants_without_a(lattice):
    zero = FourierField.zeros(lattice, 2)
    f = field_from_entries(lattice, [[1, 0, 0.1, 0.0]])
    c0, c1, c2 = alpha_constants(f, f, zero, 1, EPSILON)
    assert theta_norm(zero, 1) == 0.0
    assert c0 == pytest.approx(0.01 / (2 * lattice.lam))
    assert c1 == pytest.approx(EPSILON / (2 * lattice.lam**2) * 0.01)
    assert c2 == 0.0


def test_beta2_10(lattice, small_model):
    assert beta2_10(lattice, FourierField.zeros(lattice, 2), SPLIT_RADIUS, 1) == 0.0
    # G'_1 is empty when R/4 does not exceed the shortest dual vector
    assert beta2_10(lattice, small_model.A, 4.0, 1) == 0.0
    for nu in (1, 2):
        value = beta2_10(lattice, small_model.A, SPLIT_RADIUS, nu)
        assert abs(value) < EPSILON**2 / (100 * lattice.lam)


def test_g_remainder_reassembles(regular_system):
    remainder = g_remainder(regular_system, "regular", 1, SPLIT_RADIUS)
    assert remainder.reassembly_residual < 1e-10
    assert remainder.w == pytest.approx(0.004 + 0.002j)
    with pytest.raises(ValueError):
        g_remainder(regular_system, "sideways", 1, SPLIT_RADIUS)


def test_handle_coordinates_track_w(small_model):
    d = (0, 4)
    window = make_window(small_model.lattice, 4.0, [(0, 0), d])
    k = line_intersection((0.0, 0.0), (0.0, 4.0)).shifted((0.003, 0.001))
    system = ReducedSystem(window, k, small_model.A, small_model.q, EPSILON)
    x1, x2 = x_coords(system, 1, d)
    assert abs(x1 - (0.003 - 0.001j)) < EPSILON / 8
    assert abs(x2 - (0.003 + 0.001j)) < EPSILON / 8


def test_handle_r_term_leading_coefficients(lattice):
    c = 2e-4
    V = field_from_entries(lattice, [[0, 4, c / 4, 0.0], [0, -4, c / 4, 0.0]])
    model = build_model(lattice, V=V, epsilon=EPSILON, window_radius=4.0)
    d = (0, 4)
    window = make_window(lattice, 4.0, [(0, 0), d])
    k = line_intersection((0.0, 0.0), (0.0, 4.0)).shifted((0.002, 0.0))
    term = handle_r_term(ReducedSystem(window, k, model.A, model.q, EPSILON), 1, d)
    assert term.c1 == pytest.approx(c / 4)
    assert term.c2 == pytest.approx(c / 4)
    assert abs(term.p1) <= 1e-9 * abs(term.c1)
    assert abs(term.p2) <= 1e-9 * abs(term.c2)
    assert term.r == pytest.approx(-term.c1 * term.c2 / (term.z1 * term.z2), rel=1e-6)


def _analytic(k: KPoint) -> complex:
    return np.exp(k.k1) * k.k2**2


def test_fd_derivative_check_on_analytic_function():
    k = KPoint(0.3 + 0.1j, 1.2)
    first = fd_derivative_check(_analytic, k, 1, 0)
    assert first.value == pytest.approx(_analytic(k), rel=1e-6)
    mixed = fd_derivative_check(_analytic, k, 1, 1)
    assert mixed.value == pytest.approx(2 * np.exp(k.k1) * k.k2, rel=1e-6)
    with pytest.raises(ValueError):
        fd_derivative_check(_analytic, k, 0, 0)


def test_fd_derivative_check_flags_coarse_steps():
    with pytest.raises(StepTooLarge):
        fd_derivative_check(lambda k: np.sin(1000 * k.k1), KPoint(0, 0), 1, 0, step=1e-2)


def test_cauchy_riemann_residual():
    k = KPoint(0.3 + 0.1j, 1.2)
    assert cauchy_riemann_residual(_analytic, k, 0) < 1e-6
    assert cauchy_riemann_residual(lambda p: np.conj(p.k1), k, 0) == pytest.approx(2.0)


def test_loglog_slope_and_decay(lattice):
    xs = np.array([1.0, 2.0, 4.0, 8.0])
    assert loglog_slope(xs, 3.0 * xs**-4) == pytest.approx(-4.0)
    c = 2e-4
    g = field_from_entries(lattice, [[0, n, c / n, 0.0] for n in (4, 8, 16, 32)])
    delta = field_from_entries(lattice, [[0, 0, 1.0, 0.0]])
    report = convolution_decay_check(delta, g, [(0, n) for n in (4, 8, 16, 32)], 1.0)
    assert report.slope == pytest.approx(-1.0)
    assert report.constant == pytest.approx(c)


def _on_sheet(model, y, nu, shift=(0.0, 0.0)):
    window = make_window(model.lattice, 4.0, [(0, 0)])
    k = KPoint(-1j * sign(nu) * y, y).shifted(shift)
    return ReducedSystem(window, k, model.A, model.q, EPSILON)


@pytest.mark.parametrize("nu", [1, 2])
def test_beta2_10_is_the_leading_alpha_term(lattice, small_model, nu):
    system = _on_sheet(small_model, T_REGULAR, nu, (0.004, -0.002))
    field = frame_field(small_model.A, nu)
    pieces = alpha_split(system, field, field, nu, (0, 0), SPLIT_RADIUS)
    value = beta2_10(lattice, small_model.A, SPLIT_RADIUS, nu)
    assert abs(value) > 0.0
    assert value == pytest.approx(-pieces.a10, rel=1e-9)


def test_beta2_10_is_the_limit_of_z_alpha1(lattice, small_model):
    value = beta2_10(lattice, small_model.A, SPLIT_RADIUS, 1)
    errors = []
    for y in (T_REGULAR, 40.25):
        system = _on_sheet(small_model, y, 1)
        field = frame_field(small_model.A, 1)
        pieces = alpha_split(system, field, field, 1, (0, 0), SPLIT_RADIUS)
        assert beta2_1(system, 1, (0, 0), SPLIT_RADIUS) == pytest.approx(-pieces.a1)
        errors.append(abs(-pieces.z * pieces.a1 - value) / abs(value))
    assert errors[1] < 0.1
    assert errors[1] < errors[0]


def test_beta2_10_of_a_single_cosine_mode_vanishes(lattice):
    # θ'(b) is odd, so the ±b0 pair cancels at second order and no third-order path exists
    A = FourierField(lattice, np.array([[1, 0], [-1, 0]]), np.array([[3e-4, 0.0], [3e-4, 0.0]]), 2)
    for nu in (1, 2):
        assert abs(beta2_10(lattice, A, SPLIT_RADIUS, nu)) < 1e-20


def test_alpha_pieces_decay_along_the_sheet(small_model):
    field = frame_field(small_model.A, 1)
    sizes, first, second = [], [], []
    for y in (20.25, 40.25, 80.25, 160.25):
        pieces = alpha_split(_on_sheet(small_model, y, 1), field, field, 1, (0, 0), SPLIT_RADIUS)
        sizes.append(abs(pieces.z))
        first.append(abs(pieces.a1))
        second.append(abs(pieces.a2))
    assert loglog_slope(sizes, first) == pytest.approx(-1.0, abs=0.1)
    assert loglog_slope(sizes, second) == pytest.approx(-2.0, abs=0.15)


def test_complex_step_derivative():
    k = KPoint(0.3 + 0.1j, 1.2)
    assert complex_step_derivative(_analytic, k, 0, 0.1) == pytest.approx(_analytic(k), rel=1e-9)
    assert complex_step_derivative(_analytic, k, 1, 0.1) == pytest.approx(2 * np.exp(k.k1) * k.k2, rel=1e-9)


def _normalized(target, k):
    scale = abs(complex(target(k))) or 1.0
    return lambda p: target(p) / scale


@pytest.mark.parametrize("axis", [0, 1])
def test_alpha_and_remainder_are_holomorphic(small_model, regular_system, axis):
    window = regular_system.window
    field = frame_field(small_model.A, 1)
    k = regular_system.k

    def system_at(p):
        return ReducedSystem(window, p, small_model.A, small_model.q, EPSILON)

    targets = {
        "a1": lambda p: alpha_split(system_at(p), field, field, 1, (0, 0), SPLIT_RADIUS).a1,
        "a2": lambda p: alpha_split(system_at(p), field, field, 1, (0, 0), SPLIT_RADIUS).a2,
        "beta2_1": lambda p: beta2_1(system_at(p), 1, (0, 0), SPLIT_RADIUS),
        "g": lambda p: g_remainder(system_at(p), "regular", 1, SPLIT_RADIUS).value,
    }
    for name, target in targets.items():
        residual = cauchy_riemann_residual(_normalized(target, k), k, axis, step=1e-5)
        assert residual < 1e-7, name
