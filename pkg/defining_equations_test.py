from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from asymptotics import cauchy_riemann_residual, loglog_slope
from conftest import EPSILON, TWO_PI, small_potentials
from defining_equations import (
    ReducedSystem,
    bc_coefficients,
    d_entry,
    f_handle,
    f_regular,
    field_values,
    frame_matrix,
    jklm,
    schur_oracle,
    wz_frame,
)
from fermi_errors import RegionViolation
from freecurve import KPoint, active_tubes, line_intersection, n_full, sign, z_coordinate
from lattice_fourier import build_lattice, build_model
from operator_core import make_window

HANDLE_D = (0, 4)


def handle_k(offset=(0.01, 0.005)):
    return line_intersection((0.0, 0.0), (0.0, 4.0)).shifted(offset)


def test_frame_inverts_wz_coordinates():
    for nu in (1, 2):
        s = -1 if nu == 1 else 1
        forward = np.array([[1.0, 1j * s], [1.0, -1j * s]])
        assert_allclose(frame_matrix(nu) @ forward, np.eye(2), atol=1e-15)


def test_wz_frame_values(regular_k):
    frame = wz_frame(regular_k, 1, (0.0, 0.0))
    assert frame.w == pytest.approx(0.0)
    assert frame.z == pytest.approx(20.5j)


def test_field_values_rejects_vector_field(small_model):
    with pytest.raises(ValueError):
        field_values(small_model.A, np.zeros((1, 2), dtype=np.int64))


def test_free_regular_equation_is_free_symbol(free_model, regular_k):
    window = make_window(free_model.lattice, 4.0, [(0, 0)])
    k = regular_k.shifted((0.01, -0.02))
    value = f_regular(k, window, free_model.A, free_model.q, EPSILON)
    assert value == pytest.approx(complex(n_full(np.zeros(2), k)))
    assert f_regular(regular_k, window, free_model.A, free_model.q, EPSILON) == pytest.approx(0.0)


def test_free_handle_equation_is_product(free_model):
    window = make_window(free_model.lattice, 4.0, [(0, 0), HANDLE_D])
    k = handle_k()
    expected = complex(n_full(np.zeros(2), k) * n_full(np.array([0.0, 4.0]), k))
    assert f_handle(k, HANDLE_D, window, free_model.A, free_model.q, EPSILON) == pytest.approx(expected)


def test_regular_equation_matches_schur_oracle(small_model, regular_k):
    window = make_window(small_model.lattice, 4.0, [(0, 0)])
    k = regular_k.shifted((0.003, 0.001))
    value = f_regular(k, window, small_model.A, small_model.q, EPSILON)
    oracle = schur_oracle(window, k, small_model.A, small_model.V, small_model.q)
    assert oracle.shape == (1, 1)
    assert value == pytest.approx(oracle[0, 0], rel=1e-9, abs=1e-12)


def test_handle_reduced_matrix_matches_schur_oracle(small_model):
    window = make_window(small_model.lattice, 4.0, [(0, 0), HANDLE_D])
    k = handle_k()
    system = ReducedSystem(window, k, small_model.A, small_model.q, EPSILON)
    reduced = system.reduced_matrix()
    oracle = schur_oracle(window, k, small_model.A, small_model.V, small_model.q)
    assert_allclose(reduced, oracle, rtol=1e-9, atol=1e-12)
    value = f_handle(k, HANDLE_D, window, small_model.A, small_model.q, EPSILON)
    assert value == pytest.approx(np.linalg.det(reduced), rel=1e-9, abs=1e-12)


def test_coefficients_reproduce_d_entry(small_model, regular_k):
    window = make_window(small_model.lattice, 4.0, [(0, 0)])
    k = regular_k.shifted((0.002, -0.001))
    direct = d_entry((0, 0), (0, 0), k, window, small_model.A, small_model.q, EPSILON)
    coeffs = bc_coefficients(window, (0, 0), (0, 0), k, small_model.A, small_model.q, EPSILON)
    assert coeffs.evaluate(k) == pytest.approx(direct, rel=1e-9, abs=1e-13)


@pytest.mark.parametrize("nu", [1, 2])
def test_jklm_matches_coefficients_in_frame(small_model, nu):
    window = make_window(small_model.lattice, 4.0, [(0, 0), HANDLE_D])
    k = handle_k()
    lattice = small_model.lattice
    for dprime, dsecond in [((0, 0), (0, 0)), ((0, 0), HANDLE_D), (HANDLE_D, HANDLE_D)]:
        coeffs = bc_coefficients(window, dprime, dsecond, k, small_model.A, small_model.q, EPSILON)
        rewritten = jklm(window, dprime, dsecond, nu, k, small_model.A, small_model.q, EPSILON)
        frame = wz_frame(k, nu, lattice.vec(dprime))
        assert rewritten.evaluate(frame.w, frame.z) == pytest.approx(coeffs.evaluate(k), rel=1e-9, abs=1e-13)


def test_equations_check_their_region(free_model, regular_k):
    handle_window = make_window(free_model.lattice, 4.0, [(0, 0), HANDLE_D])
    with pytest.raises(RegionViolation):
        f_regular(regular_k, handle_window, free_model.A, free_model.q, EPSILON)
    window = make_window(free_model.lattice, 4.0, [(0, 0)])
    with pytest.raises(RegionViolation):
        f_regular(KPoint(0.5 + 10j, 0.5), window, free_model.A, free_model.q, EPSILON)
    with pytest.raises(RegionViolation):
        f_handle(regular_k, (0, 5), handle_window, free_model.A, free_model.q, EPSILON)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(8.0, 30.0),
    st.floats(-0.03, 0.03),
    st.floats(-0.03, 0.03),
    st.floats(0.1, 1.0),
    st.sampled_from([1, 2]),
)
def test_regular_equation_matches_oracle_everywhere(y, shift1, shift2, amplitude, nu):
    lattice = build_lattice((TWO_PI, 0.0), (0.0, TWO_PI))
    A, V = small_potentials(lattice)
    model = build_model(lattice, A.scaled(amplitude), V.scaled(amplitude), epsilon=EPSILON, window_radius=4.0)
    k = KPoint(-1j * sign(nu) * y, y).shifted((shift1, shift2))
    tubes = active_tubes(k, lattice, EPSILON, 4.0 + k.norm_u + k.norm_v)
    assume({tube.b for tube in tubes} == {(0, 0)})
    window = make_window(lattice, 4.0, [(0, 0)])
    value = f_regular(k, window, model.A, model.q, EPSILON)
    oracle = schur_oracle(window, k, model.A, model.V, model.q)
    assert value == pytest.approx(oracle[0, 0], rel=1e-9, abs=1e-12)


def _inverse_fifth_power(labels):
    return (1.0 + np.linalg.norm(np.asarray(labels, dtype=float), axis=-1)) ** -5


def test_off_diagonal_phi_decays_with_the_handle(small_model):
    lattice = small_model.lattice
    sizes, values = [], []
    for n in (4, 6, 8, 10):
        d = (0, n)
        window = make_window(lattice, 3.0, [(0, 0), d])
        k = line_intersection((0.0, 0.0), (0.0, float(n))).shifted((0.003, 0.001))
        system = ReducedSystem(window, k, small_model.A, small_model.q, EPSILON)
        values.append(abs(system.phi(small_model.q, _inverse_fifth_power, (0, 0), d)))
        sizes.append(abs(z_coordinate(k, 2, lattice.vec(d))))
    assert min(values) > 0.0
    assert loglog_slope(sizes, values) <= -2.9


def _normalized(target, k):
    scale = abs(complex(target(k))) or 1.0
    return lambda p: target(p) / scale


@pytest.mark.parametrize("name", ["B11", "B22", "B12plus21", "C1", "C2", "C0"])
def test_coefficients_are_holomorphic(small_model, regular_k, name):
    window = make_window(small_model.lattice, 4.0, [(0, 0)])
    k = regular_k.shifted((0.002, -0.001))

    def coefficient(p):
        return getattr(bc_coefficients(window, (0, 0), (0, 0), p, small_model.A, small_model.q, EPSILON), name)

    for axis in (0, 1):
        assert cauchy_riemann_residual(_normalized(coefficient, k), k, axis, step=1e-5) < 1e-7
