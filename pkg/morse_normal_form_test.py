from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fermi_errors import HypothesisFail
from morse_normal_form import PolynomialMap, estimate_bounds, morse_solve, taylor_coefficients

DELTA = 0.4


def product(x1, x2):
    return x1 * x2


def cubic(x1, x2):
    return x1 * x2 + 0.005 * (x1**3 + x2**3) + 0.001 * x1 + 0.002 * x2


def test_taylor_coefficients_of_polynomial():
    coeffs = taylor_coefficients(lambda z1, z2: z1**2 * z2 + 3.0 * z1 + 2.0, 0.5, 4)
    expected = np.zeros((5, 5), dtype=complex)
    expected[2, 1], expected[1, 0], expected[0, 0] = 1.0, 3.0, 2.0
    assert_allclose(coeffs, expected, atol=1e-12)
    with pytest.raises(ValueError):
        taylor_coefficients(product, 0.5, 4, size=4)


def test_polynomial_map_and_jacobian():
    first = np.zeros((3, 3), dtype=complex)
    second = np.zeros((3, 3), dtype=complex)
    first[1, 0], first[0, 2] = 1.0, 1.0
    second[0, 1] = 1.0
    phi = PolynomialMap(first, second)
    x1, x2 = phi(0.2, 0.3)
    assert x1 == pytest.approx(0.2 + 0.09)
    assert x2 == pytest.approx(0.3)
    assert_allclose(phi.jacobian(0.2, 0.3), [[1.0, 0.6], [0.0, 1.0]])
    assert phi.resized(5).degree == 5


def test_bounds_vanish_for_pure_product():
    a, b = estimate_bounds(product, DELTA)
    assert a == pytest.approx(0.0, abs=1e-12)
    assert b == pytest.approx(0.0, abs=1e-12)


def test_pure_product_is_its_own_normal_form():
    result = morse_solve(product, DELTA, 0.0, 0.0)
    assert_allclose(result.xi, [0.0, 0.0], atol=1e-14)
    assert result.c == pytest.approx(0.0, abs=1e-14)
    assert result.iterations == 0
    assert result.dphi_deviation < 1e-12
    assert result.domain_radius == pytest.approx(DELTA)


def test_translated_product():
    p, q, t = 0.05, -0.03j, 0.002

    def shifted(x1, x2):
        return (x1 - p) * (x2 - q) + t

    a, b = estimate_bounds(shifted, DELTA)
    assert a == pytest.approx(0.05, rel=1e-9)
    assert b == pytest.approx(0.0, abs=1e-12)
    result = morse_solve(shifted, DELTA, a, b)
    assert_allclose(result.xi, [p, q], atol=1e-12)
    assert result.c == pytest.approx(t)
    assert result.s == pytest.approx(0.05)
    assert result.c_within_bound


def test_cubic_perturbation_normal_form():
    a, b = estimate_bounds(cubic, DELTA)
    assert a < DELTA and b < 1 / 55
    result = morse_solve(cubic, DELTA, a, b)
    assert result.composition_residual < 1e-9
    assert result.grad_residual < 1e-12
    assert result.c_within_bound
    assert result.dphi_within_bound
    rng = np.random.default_rng(0)
    z = 0.5 * result.domain_radius * rng.uniform(-1, 1, (6, 2)) * np.exp(2j * np.pi * rng.uniform(size=(6, 2)))
    x1, x2 = result.phi(z[:, 0], z[:, 1])
    assert_allclose(cubic(x1, x2), result.c + z[:, 0] * z[:, 1], atol=1e-8)


def test_hypotheses_are_checked():
    with pytest.raises(HypothesisFail):
        morse_solve(product, 1.5, 0.0, 0.0)
    with pytest.raises(HypothesisFail):
        morse_solve(product, DELTA, DELTA, 0.0)
    with pytest.raises(HypothesisFail):
        morse_solve(product, DELTA, 0.0, 0.02)


def test_understated_second_derivative_bound_is_rejected():
    def skewed(x1, x2):
        return x1 * x2 + 0.005 * x1**2

    a, b = estimate_bounds(skewed, DELTA)
    assert b > 1e-3
    with pytest.raises(HypothesisFail, match="18b"):
        morse_solve(skewed, DELTA, a, 1e-6)
    assert morse_solve(skewed, DELTA, a, b).dphi_within_bound


@pytest.mark.parametrize("seed", range(20))
def test_critical_point_is_unique_on_the_bidisc(seed):
    rng = np.random.default_rng(seed)
    linear = 0.01 * (rng.uniform(-1, 1, 3) + 1j * rng.uniform(-1, 1, 3))
    quadratic = 0.001 * (rng.uniform(-1, 1, 3) + 1j * rng.uniform(-1, 1, 3))
    cubic_terms = 0.001 * (rng.uniform(-1, 1, 2) + 1j * rng.uniform(-1, 1, 2))

    def perturbed(x1, x2):
        r = linear[0] + linear[1] * x1 + linear[2] * x2
        r = r + quadratic[0] * x1**2 + quadratic[1] * x2**2 + quadratic[2] * x1 * x2
        return x1 * x2 + r + cubic_terms[0] * x1**3 + cubic_terms[1] * x2**3

    a, b = estimate_bounds(perturbed, DELTA)
    assert a < DELTA and b < 1 / 55
    first = morse_solve(perturbed, DELTA, a, b)
    second = morse_solve(perturbed, DELTA, a, b, start=(0.2, -0.2j))
    assert_allclose(first.xi, second.xi, atol=1e-10)
    assert first.c == pytest.approx(second.c, abs=1e-12)
    assert first.c_within_bound
    assert abs(first.c - first.r00) <= a**2
