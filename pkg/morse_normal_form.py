from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from numpy.polynomial import polynomial as poly
from scipy.linalg import LinAlgError

from fermi_errors import HypothesisFail, NewtonDiverged, NormalFormStall

log = logging.getLogger("morse_normal_form")

BivariateFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

DEFAULT_DEGREE = 8
_MAX_DEGREE = 24
_MAX_NEWTON_ITER = 60
_MAX_NORMAL_FORM_ITER = 40


# ----------------------------
# Torus sampling
# ----------------------------
def _torus(radius: float, size: int, offset: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    ring = radius * np.exp(1j * (2.0 * np.pi * np.arange(size) / size + offset))
    return np.meshgrid(ring, ring, indexing="ij")


def taylor_coefficients(func: BivariateFunction, radius: float, degree: int, size: Optional[int] = None) -> np.ndarray:
    """c[i, j] of z1^i z2^j about 0 from samples on the torus |z1| = |z2| = radius."""
    size = size or 2 * (degree + 1)
    if size <= degree:
        raise ValueError(f"torus grid {size} cannot resolve degree {degree}")
    z1, z2 = _torus(radius, size)
    values = np.asarray(func(z1, z2), dtype=complex)
    coeffs = np.fft.fft2(values) / size**2
    scale = radius ** -np.arange(degree + 1, dtype=float)
    return coeffs[: degree + 1, : degree + 1] * scale[:, None] * scale[None, :]


def _pad(coeffs: np.ndarray, degree: int) -> np.ndarray:
    out = np.zeros((degree + 1, degree + 1), dtype=complex)
    n = min(degree + 1, coeffs.shape[0])
    out[:n, :n] = coeffs[:n, :n]
    return out


@dataclass(frozen=True, eq=False)
class PolynomialMap:
    """Φ(z) = (Σ c1[i,j] z1^i z2^j, Σ c2[i,j] z1^i z2^j)."""

    first: np.ndarray
    second: np.ndarray

    @property
    def degree(self) -> int:
        return self.first.shape[0] - 1

    def __call__(self, z1, z2) -> Tuple[np.ndarray, np.ndarray]:
        return poly.polyval2d(z1, z2, self.first), poly.polyval2d(z1, z2, self.second)

    def jacobian(self, z1, z2) -> np.ndarray:
        """Array (..., 2, 2) of ∂Φ_i/∂z_j."""
        rows = []
        for component in (self.first, self.second):
            rows.append([
                poly.polyval2d(z1, z2, poly.polyder(component, axis=0)),
                poly.polyval2d(z1, z2, poly.polyder(component, axis=1)),
            ])
        out = np.empty(np.shape(z1) + (2, 2), dtype=complex)
        for i in range(2):
            for j in range(2):
                out[..., i, j] = rows[i][j]
        return out

    def resized(self, degree: int) -> "PolynomialMap":
        return PolynomialMap(_pad(self.first, degree), _pad(self.second, degree))


# ----------------------------
# Critical point
# ----------------------------
def _critical_point(coeffs: np.ndarray, start: Sequence[complex]) -> Tuple[np.ndarray, float, int]:
    d1 = poly.polyder(coeffs, axis=0)
    d2 = poly.polyder(coeffs, axis=1)
    d11 = poly.polyder(d1, axis=0)
    d12 = poly.polyder(d1, axis=1)
    d22 = poly.polyder(d2, axis=1)
    x = np.asarray(start, dtype=complex).reshape(2).copy()
    grad = np.zeros(2, dtype=complex)
    for iteration in range(1, _MAX_NEWTON_ITER + 1):
        grad = np.array([poly.polyval2d(x[0], x[1], d1), poly.polyval2d(x[0], x[1], d2)])
        hess = np.array([
            [poly.polyval2d(x[0], x[1], d11), poly.polyval2d(x[0], x[1], d12)],
            [poly.polyval2d(x[0], x[1], d12), poly.polyval2d(x[0], x[1], d22)],
        ])
        try:
            step = scipy.linalg.solve(hess, grad)
        except LinAlgError as exc:
            raise NewtonDiverged(f"Singular Hessian at x={x}", last_iterate=x, residual=float(np.linalg.norm(grad))) from exc
        x = x - step
        log.debug("critical point iter %d: |step|=%.3e", iteration, np.linalg.norm(step))
        if np.linalg.norm(step) <= 1e-15 * (1.0 + np.linalg.norm(x)):
            break
    else:
        raise NewtonDiverged("Critical point Newton did not converge", last_iterate=x, residual=float(np.linalg.norm(grad)))
    grad = np.array([poly.polyval2d(x[0], x[1], d1), poly.polyval2d(x[0], x[1], d2)])
    return x, float(np.max(np.abs(grad))), iteration


def _quadratic_normalizer(coeffs: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Matrix L with z = L y turning the Hessian quadratic at ξ into z1 z2."""
    d11 = poly.polyder(coeffs, axis=0, m=2)
    d12 = poly.polyder(poly.polyder(coeffs, axis=0), axis=1)
    d22 = poly.polyder(coeffs, axis=1, m=2)
    alpha = poly.polyval2d(xi[0], xi[1], d11) / 2.0
    beta = poly.polyval2d(xi[0], xi[1], d12)
    gamma = poly.polyval2d(xi[0], xi[1], d22) / 2.0
    root = np.sqrt(beta * beta - 4.0 * alpha * gamma + 0j)
    lam = (beta + root) / 2.0 if abs(beta + root) >= abs(beta - root) else (beta - root) / 2.0
    if lam == 0:
        raise HypothesisFail("Degenerate Hessian at the critical point.")
    return np.sqrt(lam) * np.array([[1.0, gamma / lam], [alpha / lam, 1.0]], dtype=complex)


def _homological(h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """φ with z2 φ1 + z1 φ2 = −h for every monomial but the constant."""
    size = h.shape[0]
    phi1 = np.zeros_like(h)
    phi2 = np.zeros_like(h)
    for i in range(size):
        for j in range(size):
            value = h[i, j]
            if value == 0 or (i == 0 and j == 0):
                continue
            if i and j:
                phi1[i, j - 1] -= 0.5 * value
                phi2[i - 1, j] -= 0.5 * value
            elif j:
                phi1[0, j - 1] -= value
            else:
                phi2[i - 1, 0] -= value
    return phi1, phi2


# ----------------------------
# Morse normal form
# ----------------------------
@dataclass
class MorseResult:
    xi: Tuple[complex, complex]
    c: complex
    grad_residual: float
    dphi_deviation: float
    composition_residual: float
    r00: complex
    a_bound: float
    b_bound: float
    domain_radius: float
    degree: int
    iterations: int
    phi: PolynomialMap

    @property
    def s(self) -> float:
        return max(abs(self.xi[0]), abs(self.xi[1]))

    @property
    def c_within_bound(self) -> bool:
        return abs(self.c - self.r00) <= self.a_bound**2 * (1.0 + 1e-9) + 1e-15

    @property
    def dphi_within_bound(self) -> bool:
        return self.dphi_deviation <= 18.0 * self.b_bound + 1e-12


def estimate_bounds(f: BivariateFunction, delta: float, degree: int = DEFAULT_DEGREE) -> Tuple[float, float]:
    """Sampled sup of |∂r/∂x_i| and of the Hessian norm of r = f − x1x2 on the torus of radius δ."""
    coeffs = taylor_coefficients(f, delta, degree)
    coeffs[1, 1] -= 1.0
    z1, z2 = _torus(delta, 2 * (degree + 1), offset=np.pi / (2 * (degree + 1)))
    g1 = poly.polyval2d(z1, z2, poly.polyder(coeffs, axis=0))
    g2 = poly.polyval2d(z1, z2, poly.polyder(coeffs, axis=1))
    a = float(max(np.max(np.abs(g1)), np.max(np.abs(g2))))
    h11 = poly.polyval2d(z1, z2, poly.polyder(coeffs, axis=0, m=2))
    h12 = poly.polyval2d(z1, z2, poly.polyder(poly.polyder(coeffs, axis=0), axis=1))
    h22 = poly.polyval2d(z1, z2, poly.polyder(coeffs, axis=1, m=2))
    hess = np.stack([np.stack([h11, h12], axis=-1), np.stack([h12, h22], axis=-1)], axis=-2)
    b = float(np.max(np.linalg.norm(hess, ord=2, axis=(-2, -1))))
    return a, b


def morse_solve(
    f: BivariateFunction,
    delta: float,
    a_bound: float,
    b_bound: float,
    start: Sequence[complex] = (0.0, 0.0),
    degree: int = DEFAULT_DEGREE,
    tol: float = 1e-9,
) -> MorseResult:
    """Critical point, critical value and normal-form map of f = x1x2 + r on the bidisc D_δ.

    ``f`` must accept broadcastable complex arrays. The map Φ is built by
    Newton-type homological corrections composed on a degree-``degree``
    polynomial map until |f∘Φ − z1z2 − c| < tol on the certified torus.
    """
    if not 0 < delta < 1:
        raise HypothesisFail(f"delta={delta} must lie in (0, 1)")
    if not a_bound < delta:
        raise HypothesisFail(f"first-derivative bound a={a_bound:.4g} is not below delta={delta:.4g}")
    if not b_bound < 1.0 / 55.0:
        raise HypothesisFail(f"second-derivative bound b={b_bound:.4g} is not below 1/55")

    coeffs = taylor_coefficients(f, delta, degree)
    xi, grad_residual, newton_iters = _critical_point(coeffs, start)
    c = complex(f(np.asarray(xi[0]), np.asarray(xi[1])))
    r00 = complex(f(np.asarray(0j), np.asarray(0j)))
    s = float(np.max(np.abs(xi)))
    radius = (delta - s) * (1.0 - 19.0 * b_bound)
    log.debug("Morse critical point ξ=%s after %d steps, c=%s, domain radius %.4g", xi, newton_iters, c, radius)

    inverse = np.linalg.inv(_quadratic_normalizer(coeffs, xi))
    first = np.zeros((degree + 1, degree + 1), dtype=complex)
    second = np.zeros((degree + 1, degree + 1), dtype=complex)
    first[0, 0], first[1, 0], first[0, 1] = xi[0], inverse[0, 0], inverse[0, 1]
    second[0, 0], second[1, 0], second[0, 1] = xi[1], inverse[1, 0], inverse[1, 1]
    phi = PolynomialMap(first, second)

    def composed(z1, z2):
        x1, x2 = phi(z1, z2)
        return f(x1, x2) - c - z1 * z2

    def residual() -> float:
        size = 2 * (phi.degree + 1)
        z1, z2 = _torus(radius, size, offset=np.pi / size)
        return float(np.max(np.abs(composed(z1, z2))))

    current = residual()
    best = current
    stalls = 0
    iterations = 0
    while current >= tol:
        if iterations >= _MAX_NORMAL_FORM_ITER:
            raise NormalFormStall(f"composition residual {current:.3e} after {iterations} corrections")
        iterations += 1
        h = taylor_coefficients(composed, radius, phi.degree, size=4 * (phi.degree + 1))
        phi1, phi2 = _homological(h)
        step = PolynomialMap(phi1, phi2)
        previous = phi

        def updated(z1, z2, previous=previous, step=step):
            d1, d2 = step(z1, z2)
            return previous(z1 + d1, z2 + d2)

        size = 4 * (phi.degree + 1)
        first = taylor_coefficients(lambda z1, z2: updated(z1, z2)[0], radius, phi.degree, size=size)
        second = taylor_coefficients(lambda z1, z2: updated(z1, z2)[1], radius, phi.degree, size=size)
        phi = PolynomialMap(first, second)
        current = residual()
        log.debug("normal form step %d: degree %d residual %.3e", iterations, phi.degree, current)
        if current > 0.5 * best:
            stalls += 1
            if phi.degree + 4 > _MAX_DEGREE:
                if current >= tol:
                    raise NormalFormStall(f"composition residual plateaued at {current:.3e} (degree {phi.degree})")
            else:
                phi = phi.resized(phi.degree + 4)
                current = residual()
        best = min(best, current)

    z1, z2 = _torus(radius, 2 * (phi.degree + 1))
    deviation = phi.jacobian(z1, z2) - np.eye(2)
    dphi_deviation = float(np.max(np.linalg.norm(deviation, ord=2, axis=(-2, -1))))
    result = MorseResult(
        xi=(complex(xi[0]), complex(xi[1])),
        c=c,
        grad_residual=grad_residual,
        dphi_deviation=dphi_deviation,
        composition_residual=current,
        r00=r00,
        a_bound=float(a_bound),
        b_bound=float(b_bound),
        domain_radius=radius,
        degree=phi.degree,
        iterations=iterations,
        phi=phi,
    )
    if not result.dphi_within_bound:
        raise HypothesisFail(
            f"‖DΦ − I‖={dphi_deviation:.3e} exceeds 18b={18.0 * b_bound:.3e}; the second-derivative bound is understated"
        )
    return result


__all__ = [
    "BivariateFunction",
    "DEFAULT_DEGREE",
    "taylor_coefficients",
    "PolynomialMap",
    "MorseResult",
    "estimate_bounds",
    "morse_solve",
]
