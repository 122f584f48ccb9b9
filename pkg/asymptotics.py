from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from defining_equations import FieldLike, ReducedSystem, field_values
from fermi_errors import NotContracting, RegionViolation, StepTooLarge
from freecurve import KPoint, n_full, partner, sign, theta, w_coordinate, z_coordinate
from lattice_fourier import FourierField, Label, Lattice, enumerate_dual, weighted_l1
from operator_core import schur_norm, w_entries

log = logging.getLogger("asymptotics")

_SERIES_TOL = 1e-16
_MAX_SERIES_TERMS = 5000


# ----------------------------
# Index splits about d'
# ----------------------------
@dataclass(frozen=True, eq=False)
class SplitWindows:
    """Positions into ``system.gprime``: G'_1 (|b−d'| < R/4), G'_3 (< R/2) and their complements."""

    dprime: Label
    split_radius: float
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    g4: np.ndarray

    @property
    def g1_in_g3(self) -> np.ndarray:
        return np.searchsorted(self.g3, self.g1)


def split_windows(system: ReducedSystem, dprime: Label, split_radius: float) -> SplitWindows:
    lattice = system.window.lattice
    distance = np.linalg.norm(lattice.vec(system.gprime - np.asarray(dprime, dtype=np.int64)), axis=1)
    everything = np.arange(len(system.gprime))
    near1 = distance < split_radius / 4.0
    near3 = distance < split_radius / 2.0
    return SplitWindows(
        dprime=(int(dprime[0]), int(dprime[1])),
        split_radius=float(split_radius),
        g1=everything[near1],
        g2=everything[~near1],
        g3=everything[near3],
        g4=everything[~near3],
    )


def phi_sum(system: ReducedSystem, f: FieldLike, g: FieldLike, dprime: Label, dprimeprime: Label) -> complex:
    return system.phi(f, g, dprime, dprimeprime)


def frame_field(A: FourierField, mu: int) -> FourierField:
    """Â1 + i(−1)^μ Â2, the contraction that carries the z² coefficient in frame μ."""
    return A.dot((1.0, 1j * sign(mu)))


# ----------------------------
# X/Y split of T on G'_3
# ----------------------------
def t_block(system: ReducedSystem, positions: np.ndarray) -> np.ndarray:
    labels = system.gprime[positions]
    return -w_entries(labels, labels, system.k, system.A, system.q) / system.denominators[positions][None, :]


def xy_matrices(system: ReducedSystem, splits: SplitWindows, mu: int) -> Tuple[np.ndarray, np.ndarray]:
    lattice = system.window.lattice
    labels = system.gprime[splits.g3]
    dpoint = lattice.vec(splits.dprime)
    w = w_coordinate(system.k, mu, dpoint)
    z = z_coordinate(system.k, mu, dpoint)
    a_diff = system.A.at(labels[:, None, :] - labels[None, :, :])
    q_diff = system.q.at(labels[:, None, :] - labels[None, :, :])
    offsets = lattice.vec(labels) - dpoint
    denominators = system.denominators[splits.g3][None, :]
    numerator_x = 2.0 * np.einsum("rci,ci->rc", a_diff, offsets) - q_diff - 2j * theta(mu, a_diff) * w
    numerator_y = -2j * theta(partner(mu), a_diff) * z
    return numerator_x / denominators, numerator_y / denominators


@dataclass(frozen=True, eq=False)
class SWZ:
    S: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    terms: int
    tail: float


def swz_series(X: np.ndarray, Y: np.ndarray, tol: float = _SERIES_TOL) -> SWZ:
    """(I − X − Y)⁻¹ = S + W + Z with S = (I−Y)⁻¹, W first order in X and Z the rest."""
    size = X.shape[0]
    x_norm = schur_norm(X)
    y_norm = schur_norm(Y)
    if y_norm >= 1.0:
        raise NotContracting(f"‖Y‖={y_norm:.4g} is not below 1")
    if x_norm + y_norm >= 1.0:
        raise NotContracting(f"‖X+Y‖ bound {x_norm + y_norm:.4g} is not below 1")
    identity = np.eye(size, dtype=complex)
    S = scipy.linalg.solve(identity - Y, identity)
    total = X + Y
    single = X.copy()
    y_power = identity.copy()
    power = total.copy()
    W = X.copy()
    Z = np.zeros((size, size), dtype=complex)
    rate = x_norm + y_norm
    j = 1
    while True:
        single_tail = (j + 1) * x_norm * y_norm**j / max(1.0 - y_norm, 1e-300) if x_norm else 0.0
        mixed_tail = rate ** (j + 1) / (1.0 - rate) if x_norm else 0.0
        if max(single_tail, mixed_tail) < tol or j >= _MAX_SERIES_TERMS:
            break
        j += 1
        y_power = y_power @ Y
        single = single @ Y + y_power @ X
        power = power @ total
        W = W + single
        Z = Z + (power - single - y_power @ Y)
    log.debug("S/W/Z series: %d terms, ‖X‖=%.3e ‖Y‖=%.3e", j, x_norm, y_norm)
    return SWZ(S=S, W=W, Z=Z, terms=j, tail=max(single_tail, mixed_tail))


# ----------------------------
# α pieces
# ----------------------------
@dataclass
class AlphaPieces:
    a1: complex
    a2: complex
    a3: complex
    a10: complex
    a11: complex
    a12: complex
    a13: complex
    w: complex
    z: complex
    remainders: Dict[str, complex] = field(default_factory=dict)
    series_terms: int = 0

    @property
    def total(self) -> complex:
        return self.a1 + self.a2 + self.a3

    @property
    def refined(self) -> complex:
        return self.a10 + self.a11 + self.a12 + self.a13


def _eta(offsets: np.ndarray, mu: int, w: complex, z: complex) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """z/N_c = η⁰ + η^w + η^z for offsets c − d'."""
    a = 2j * theta(partner(mu), offsets)
    bb = 2j * theta(mu, offsets)
    return -1.0 / a, w / (a * (w - a)), bb / ((w - a) * (z - bb))


def alpha_split(
    system: ReducedSystem,
    f: FieldLike,
    g: FieldLike,
    mu: int,
    dprime: Label,
    split_radius: float,
    tol: float = _SERIES_TOL,
) -> AlphaPieces:
    """Split Φ_{d',d'}(f, g) into the near-diagonal series pieces and explicit remainders."""
    lattice = system.window.lattice
    splits = split_windows(system, dprime, split_radius)
    dpoint = lattice.vec(dprime)
    w = w_coordinate(system.k, mu, dpoint)
    z = z_coordinate(system.k, mu, dpoint)

    base = np.asarray(dprime, dtype=np.int64)
    f_raw = field_values(f, base - system.gprime)
    g_raw = field_values(g, system.gprime - base)
    f_row = f_raw / system.denominators
    inverse = system.inverse.inverse

    X, Y = xy_matrices(system, splits, mu)
    series = swz_series(X, Y, tol)
    size3 = len(splits.g3)
    dense33 = scipy.linalg.solve(np.eye(size3) - X - Y, np.eye(size3, dtype=complex)) if size3 else np.zeros((0, 0), complex)
    inner = splits.g1_in_g3
    g1 = splits.g1
    f1 = f_row[g1]
    gv1 = g_raw[g1]

    def near(matrix: np.ndarray) -> complex:
        return complex(f1 @ matrix[np.ix_(inner, inner)] @ gv1)

    a1 = near(series.S)
    a2 = near(series.W)
    remainders = {
        "R1": complex(f1 @ inverse[np.ix_(g1, splits.g2)] @ g_raw[splits.g2]),
        "R2": complex(f_row[splits.g2] @ inverse[splits.g2, :] @ g_raw),
        "R3": complex(f1 @ (inverse[np.ix_(g1, g1)] - dense33[np.ix_(inner, inner)]) @ gv1),
        "R4": near(series.Z),
    }
    a3 = sum(remainders.values())

    offsets = lattice.vec(system.gprime[splits.g3]) - dpoint
    eta0, eta_w, eta_z = _eta(offsets, mu, w, z)
    labels3 = system.gprime[splits.g3]
    coupling = -2j * theta(partner(mu), system.A.at(labels3[:, None, :] - labels3[None, :, :]))
    y0 = coupling * eta0[None, :]
    yw = coupling * eta_w[None, :]
    yz = coupling * eta_z[None, :]
    identity = np.eye(size3, dtype=complex)
    k0 = eta0[:, None] * (identity + y0)
    k1 = eta0[:, None] * yw + eta_w[:, None] * (identity + y0 + yw)
    k2 = (eta0 + eta_w)[:, None] * (Y @ Y @ series.S)
    k3 = (eta0 + eta_w)[:, None] * yz + eta_z[:, None] * series.S
    f_near = f_raw[g1]

    def refined(matrix: np.ndarray) -> complex:
        return complex(f_near @ matrix[np.ix_(inner, inner)] @ gv1)

    pieces = AlphaPieces(
        a1=a1,
        a2=a2,
        a3=complex(a3),
        a10=refined(k0),
        a11=refined(k1),
        a12=refined(k2),
        a13=refined(k3),
        w=complex(w),
        z=complex(z),
        remainders=remainders,
        series_terms=series.terms,
    )
    log.debug("α split at k=%s: |α1|=%.3e |α2|=%.3e |α3|=%.3e", system.k, abs(a1), abs(a2), abs(a3))
    return pieces


def theta_norm(A: FourierField, mu: int) -> float:
    """Σ_{b≠0} |θ_{μ'}(Â(b))|."""
    if not len(A.support):
        return 0.0
    keep = np.any(A.support != 0, axis=1)
    return float(np.sum(np.abs(theta(partner(mu), A.values[keep]))))


def _l1(f: FieldLike) -> float:
    if isinstance(f, FourierField):
        return weighted_l1(f)
    raise ValueError("alpha_constants needs Fourier fields to measure ‖f‖ and ‖g‖.")


def alpha_constants(f: FieldLike, g: FieldLike, A: FourierField, mu: int, epsilon: float) -> Tuple[float, float, float]:
    """Explicit bounds C0, C1, C2 on |α^{(1,0)}|, |α^{(1,1)}| and |α^{(1,2)}|."""
    lam = A.lattice.lam
    t = theta_norm(A, mu)
    fg = _l1(f) * _l1(g)
    c0 = (1.0 / (2 * lam)) * (1.0 + t / (2 * lam)) * fg
    c1 = (epsilon / (2 * lam**2)) * (1.0 + 7.0 * t / (6 * lam)) * fg
    c2 = (64.0 / lam**3) * t**2 * fg
    return c0, c1, c2


def beta2_10(lattice: Lattice, A: FourierField, split_radius: float, nu: int) -> complex:
    """2i Σ_{b,c∈G'_1} θ'(Â(−b))/θ'(b) [δ_bc + θ'(Â(b−c))/θ'(c)] θ'(Â(c)) with θ' = θ_{ν'} and G'_1 = {0 < |b| < R/4}."""
    labels = enumerate_dual(lattice, split_radius / 4.0)
    points = lattice.vec(labels)
    radius = np.linalg.norm(points, axis=1)
    keep = np.any(labels != 0, axis=1) & (radius < split_radius / 4.0)
    labels, points = labels[keep], points[keep]
    if not len(labels) or A.is_zero:
        return 0.0j
    other = partner(nu)
    th = theta(other, points)
    left = theta(other, A.at(-labels)) / th
    right = theta(other, A.at(labels))
    middle = np.eye(len(labels)) + theta(other, A.at(labels[:, None, :] - labels[None, :, :])) / th[None, :]
    return complex(2j * (left @ middle @ right))


def beta2_1(system: ReducedSystem, nu: int, dprime: Label, split_radius: float) -> complex:
    """The α^{(1)} part of the z² coefficient J_ν in frame (ν, d')."""
    field = frame_field(system.A, nu)
    return -alpha_split(system, field, field, nu, dprime, split_radius).a1


# ----------------------------
# Remainders of the local equations
# ----------------------------
@dataclass
class GRemainder:
    kind: str
    value: complex
    f_over_z: complex
    w: complex
    z: complex
    beta2_1: complex
    terms: Dict[str, complex]
    reassembly_residual: float


def _frame(kind: str, nu: int, d: Optional[Label]) -> Tuple[int, Label]:
    if kind in ("regular", "handle1"):
        return nu, (0, 0)
    if kind == "handle2":
        if d is None:
            raise RegionViolation("handle2 remainder needs the partner d")
        return partner(nu), (int(d[0]), int(d[1]))
    raise ValueError(f"Unknown remainder kind {kind!r}")


def g_remainder(
    system: ReducedSystem,
    kind: str,
    nu: int,
    split_radius: float,
    d: Optional[Label] = None,
) -> GRemainder:
    """g = (N + D)/z − w − β_2^{(1)} z assembled from the J/K/L/M coefficients."""
    mu, dprime = _frame(kind, nu, d)
    lattice = system.window.lattice
    dpoint = lattice.vec(dprime)
    w = complex(w_coordinate(system.k, mu, dpoint))
    z = complex(z_coordinate(system.k, mu, dpoint))
    coeffs = system.jklm(dprime, dprime, mu)
    b21 = beta2_1(system, mu, dprime, split_radius)
    q0 = complex(system.q.value((0, 0)))
    terms = {
        "beta1": coeffs.J_nuprime * w**2 / z,
        "beta2_rest": (coeffs.J_nu - b21) * z,
        "beta3": coeffs.K * w,
        "beta4": coeffs.L_nuprime * w / z,
        "beta5": coeffs.L_nu,
        "beta6": (coeffs.M - q0) / z,
        "q0": q0 / z,
    }
    value = complex(sum(terms.values()))
    direct = (complex(n_full(dpoint, system.k)) + system.d_entry(dprime, dprime)) / z
    residual = abs(direct - (w + b21 * z + value))
    return GRemainder(kind, value, direct, w, z, b21, terms, residual)


def x_coords(system: ReducedSystem, nu: int, d: Label) -> Tuple[complex, complex]:
    """x1 = (N_0 + D_00)/z_{ν,0} and x2 = (N_d + D_dd)/z_{ν',d}."""
    lattice = system.window.lattice
    dpoint = lattice.vec(d)
    z1 = complex(z_coordinate(system.k, nu, (0.0, 0.0)))
    z2 = complex(z_coordinate(system.k, partner(nu), dpoint))
    x1 = (complex(n_full(np.zeros(2), system.k)) + system.d_entry((0, 0), (0, 0))) / z1
    x2 = (complex(n_full(dpoint, system.k)) + system.d_entry(d, d)) / z2
    return x1, x2


@dataclass
class HandleRTerm:
    r: complex
    c1: complex
    c2: complex
    p1: complex
    p2: complex
    z1: complex
    z2: complex


def handle_r_term(system: ReducedSystem, nu: int, d: Label) -> HandleRTerm:
    """r = −D_{0,d} D_{d,0}/(z1 z2) with the leading Fourier terms c1, c2 split off."""
    lattice = system.window.lattice
    dpoint = lattice.vec(d)
    minus = (-int(d[0]), -int(d[1]))
    z1 = complex(z_coordinate(system.k, nu, (0.0, 0.0)))
    z2 = complex(z_coordinate(system.k, partner(nu), dpoint))
    d0d = system.d_entry((0, 0), d)
    dd0 = system.d_entry(d, (0, 0))
    c1 = complex(system.q.value(minus) - 2.0 * dpoint @ system.A.value(minus))
    c2 = complex(system.q.value(d) + 2.0 * dpoint @ system.A.value(d))
    return HandleRTerm(r=-d0d * dd0 / (z1 * z2), c1=c1, c2=c2, p1=d0d - c1, p2=dd0 - c2, z1=z1, z2=z2)


# ----------------------------
# Derivatives and fits
# ----------------------------
@dataclass
class DerivativeReport:
    n: int
    m: int
    value: complex
    error_estimate: float
    step: float


def _central(target: Callable[[KPoint], complex], k: KPoint, n: int, m: int, h: float) -> complex:
    base = k.as_array()
    total = 0.0j
    for i in range(n + 1):
        for j in range(m + 1):
            weight = (-1) ** (i + j) * math.comb(n, i) * math.comb(m, j)
            point = base + np.array([(n / 2 - i) * h, (m / 2 - j) * h])
            total += weight * complex(target(KPoint.from_array(point)))
    return total / h ** (n + m)


_CONTOUR_POINTS = 8


def complex_step_derivative(
    target: Callable[[KPoint], complex], k: KPoint, axis: int, step: float, points: int = _CONTOUR_POINTS
) -> complex:
    """∂f/∂k_axis from samples on the circle |k_axis − k| = step.

    The trapezoid rule on the circle is exact for Taylor terms of degree
    below ``points``, so the truncation error is O(step^points).
    """
    roots = np.exp(2j * np.pi * np.arange(points) / points)
    unit = np.zeros(2, dtype=complex)
    unit[axis] = 1.0
    base = k.as_array()
    values = np.array([complex(target(KPoint.from_array(base + step * root * unit))) for root in roots])
    return complex(np.sum(values / roots) / (points * step))


def fd_derivative_check(
    target: Callable[[KPoint], complex],
    k: KPoint,
    n: int,
    m: int,
    step: float = 1e-3,
    relative_limit: float = 0.1,
) -> DerivativeReport:
    """∂^{n+m}/∂k1^n∂k2^m of a holomorphic target.

    First derivatives use the complex-step contour at radii ``step`` and
    ``step/2``; higher and mixed orders use central differences with a
    Richardson error estimate.
    """
    if n < 0 or m < 0 or n + m == 0:
        raise ValueError(f"Derivative order (n, m) = ({n}, {m}) must be non-negative and not both zero.")
    if n + m == 1:
        axis = 0 if n else 1
        coarse = complex_step_derivative(target, k, axis, step)
        estimate = complex_step_derivative(target, k, axis, step / 2)
        error = abs(estimate - coarse)
    else:
        coarse = _central(target, k, n, m, step)
        fine = _central(target, k, n, m, step / 2)
        estimate = fine + (fine - coarse) / 3.0
        error = abs(fine - coarse) / 3.0
    scale = abs(complex(target(k)))
    floor = 1e3 * np.finfo(float).eps * max(scale, 1e-300) / (step / 2) ** (n + m)
    if error > relative_limit * abs(estimate) and error > floor:
        raise StepTooLarge(f"finite-difference error {error:.3e} exceeds {relative_limit:.0%} of |∂|={abs(estimate):.3e}")
    return DerivativeReport(n, m, complex(estimate), float(error), step)


def cauchy_riemann_residual(target: Callable[[KPoint], complex], k: KPoint, axis: int, step: float = 1e-4) -> float:
    """Relative mismatch of the real and imaginary directional derivatives."""
    unit = np.zeros(2, dtype=complex)
    unit[axis] = 1.0
    base = k.as_array()

    def at(offset: complex) -> complex:
        return complex(target(KPoint.from_array(base + offset * unit)))

    along_real = (at(step) - at(-step)) / (2 * step)
    along_imag = (at(1j * step) - at(-1j * step)) / (2j * step)
    return abs(along_real - along_imag) / max(1.0, abs(along_real))


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


@dataclass
class DecayReport:
    sizes: List[float]
    values: List[float]
    slope: float
    constant: float


def convolution_decay_check(f: FourierField, g: FourierField, d_values: Sequence[Label], beta: float) -> DecayReport:
    """|Σ_b f(b) g(d−b)| against C/|d|^β with C fitted as the worst ratio."""
    lattice = f.lattice
    sizes, values = [], []
    for d in d_values:
        label = np.asarray(d, dtype=np.int64)
        conv = complex(np.sum(f.values * g.at(label - f.support))) if len(f.support) else 0.0j
        sizes.append(float(np.linalg.norm(lattice.vec(label))))
        values.append(abs(conv))
    positive = [(s, v) for s, v in zip(sizes, values) if v > 0 and s > 0]
    slope = loglog_slope(*zip(*positive)) if len(positive) >= 2 else float("-inf")
    constant = max((v * s**beta for s, v in zip(sizes, values)), default=0.0)
    return DecayReport(sizes, values, slope, constant)


__all__ = [
    "SplitWindows",
    "split_windows",
    "phi_sum",
    "frame_field",
    "t_block",
    "xy_matrices",
    "SWZ",
    "swz_series",
    "AlphaPieces",
    "alpha_split",
    "theta_norm",
    "alpha_constants",
    "beta2_10",
    "beta2_1",
    "GRemainder",
    "g_remainder",
    "x_coords",
    "HandleRTerm",
    "handle_r_term",
    "DerivativeReport",
    "complex_step_derivative",
    "fd_derivative_check",
    "cauchy_riemann_residual",
    "loglog_slope",
    "DecayReport",
    "convolution_decay_check",
]
