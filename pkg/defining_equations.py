from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg
from scipy.linalg import LinAlgError

from fermi_errors import NumericallySingular, RegionViolation
from freecurve import KPoint, active_tubes, n_full, sign
from lattice_fourier import FourierField, Label
from operator_core import IndexWindow, RggInverse, hk_matrix, invert_rgg, tail_budget, w_entries

log = logging.getLogger("defining_equations")

FieldLike = Union[FourierField, Callable[[np.ndarray], np.ndarray]]


def field_values(f: FieldLike, labels: np.ndarray) -> np.ndarray:
    if isinstance(f, FourierField):
        if f.rank != 1:
            raise ValueError("Only scalar fields enter the Φ sums; contract vector fields first.")
        return f.at(labels)
    return np.asarray(f(labels), dtype=complex)


def _label(point: Sequence[int]) -> np.ndarray:
    return np.asarray(point, dtype=np.int64).reshape(1, 2)


# ----------------------------
# Coefficient containers
# ----------------------------
@dataclass(frozen=True)
class CoefficientSet:
    """D_{d',d''}(k) = B11 k1² + B22 k2² + (B12+B21) k1k2 + C1 k1 + C2 k2 + C0."""

    B11: complex
    B22: complex
    B12plus21: complex
    C1: complex
    C2: complex
    C0: complex

    def evaluate(self, k: KPoint) -> complex:
        k1, k2 = k.k1, k.k2
        return self.B11 * k1**2 + self.B22 * k2**2 + self.B12plus21 * k1 * k2 + self.C1 * k1 + self.C2 * k2 + self.C0


@dataclass(frozen=True)
class WZFrame:
    nu: int
    dprime: tuple
    w: complex
    z: complex


@dataclass(frozen=True)
class JKLMSet:
    """D_{d',d''} = J_{ν'} w² + J_ν z² + K wz + L_{ν'} w + L_ν z + M in the frame (ν, d')."""

    nu: int
    J_nu: complex
    J_nuprime: complex
    K: complex
    L_nu: complex
    L_nuprime: complex
    M: complex

    def evaluate(self, w: complex, z: complex) -> complex:
        return self.J_nuprime * w**2 + self.J_nu * z**2 + self.K * w * z + self.L_nuprime * w + self.L_nu * z + self.M


def wz_frame(k: KPoint, nu: int, dprime_point: Sequence[float]) -> WZFrame:
    d = np.asarray(dprime_point, dtype=float)
    s = sign(nu)
    shift1 = k.k1 + d[0]
    shift2 = k.k2 + d[1]
    return WZFrame(nu, tuple(d.tolist()), shift1 + 1j * s * shift2, shift1 - 1j * s * shift2)


def frame_matrix(nu: int) -> np.ndarray:
    """Columns map (w, z) increments to k increments: k = −d' + P (w, z)."""
    s = sign(nu)
    return np.array([[0.5, 0.5], [-0.5j * s, 0.5j * s]], dtype=complex)


# ----------------------------
# Feshbach reduced system at one k
# ----------------------------
class ReducedSystem:
    """All G'-sums at a fixed momentum share one inverse of R_{G'G'}."""

    def __init__(
        self,
        window: IndexWindow,
        k: KPoint,
        A: FourierField,
        q: FourierField,
        epsilon: float,
        force: bool = False,
    ) -> None:
        self.window = window
        self.k = k
        self.A = A
        self.q = q
        self.epsilon = epsilon
        self.inverse: RggInverse = invert_rgg(window, k, A, q, epsilon, force=force)
        self.gprime = window.gprime
        self.denominators = n_full(window.lattice.vec(self.gprime), k)

    @cached_property
    def tail_budget(self) -> float:
        return tail_budget(self.window, self.k, self.A, self.q, self.epsilon)

    def phi(self, f: FieldLike, g: FieldLike, dprime: Label, dprimeprime: Label) -> complex:
        """Σ_{b,c∈G'} f(d'−b)/N_b (R⁻¹)_{bc} g(c−d'')."""
        if not len(self.gprime):
            return 0.0j
        left = field_values(f, _label(dprime) - self.gprime) / self.denominators
        right = field_values(g, self.gprime - _label(dprimeprime))
        return complex(left @ self.inverse.inverse @ right)

    def d_entry(self, dprime: Label, dprimeprime: Label) -> complex:
        row = _label(dprime)
        col = _label(dprimeprime)
        direct = complex(w_entries(row, col, self.k, self.A, self.q)[0, 0])
        if not len(self.gprime):
            return direct
        left = w_entries(row, self.gprime, self.k, self.A, self.q)[0] / self.denominators
        right = w_entries(self.gprime, col, self.k, self.A, self.q)[:, 0]
        return direct - complex(left @ self.inverse.inverse @ right)

    def reduced_matrix(self) -> np.ndarray:
        """[N_{d'} δ + D_{d',d''}] over G in window order."""
        labels = [tuple(int(x) for x in row) for row in self.window.g_set]
        size = len(labels)
        out = np.zeros((size, size), dtype=complex)
        diagonal = n_full(self.window.lattice.vec(self.window.g_set), self.k) if size else np.zeros(0)
        for i, first in enumerate(labels):
            for j, second in enumerate(labels):
                out[i, j] = self.d_entry(first, second) + (diagonal[i] if i == j else 0.0)
        return out

    def coefficients(self, dprime: Label, dprimeprime: Label) -> CoefficientSet:
        A, q = self.A, self.q
        lattice = A.lattice
        d1 = lattice.vec(dprime)
        d2 = lattice.vec(dprimeprime)
        a1, a2 = A.component(0), A.component(1)

        def p_field(x: np.ndarray) -> np.ndarray:
            ax = A.at(x)
            return q.at(x) - 2.0 * ax @ d1 + 2.0 * np.einsum("...i,...i->...", lattice.vec(x), ax)

        def q_side(y: np.ndarray) -> np.ndarray:
            return q.at(y) - 2.0 * A.at(y) @ d2

        gap = np.asarray(dprime) - np.asarray(dprimeprime)
        a_gap = A.value(gap)
        c1 = -2.0 * a_gap[0] + 2.0 * self.phi(p_field, a1, dprime, dprimeprime) + 2.0 * self.phi(a1, q_side, dprime, dprimeprime)
        c2 = -2.0 * a_gap[1] + 2.0 * self.phi(p_field, a2, dprime, dprimeprime) + 2.0 * self.phi(a2, q_side, dprime, dprimeprime)
        c0 = q.value(gap) - 2.0 * complex(a_gap @ d2) - self.phi(p_field, q_side, dprime, dprimeprime)
        return CoefficientSet(
            B11=-4.0 * self.phi(a1, a1, dprime, dprimeprime),
            B22=-4.0 * self.phi(a2, a2, dprime, dprimeprime),
            B12plus21=-4.0 * (self.phi(a1, a2, dprime, dprimeprime) + self.phi(a2, a1, dprime, dprimeprime)),
            C1=c1,
            C2=c2,
            C0=c0,
        )

    def jklm(self, dprime: Label, dprimeprime: Label, nu: int) -> JKLMSet:
        """Rewrite the (k1, k2) quadratic in the frame k = −d' + P(w, z)."""
        coeffs = self.coefficients(dprime, dprimeprime)
        quadratic = np.array(
            [[coeffs.B11, 0.5 * coeffs.B12plus21], [0.5 * coeffs.B12plus21, coeffs.B22]],
            dtype=complex,
        )
        linear = np.array([coeffs.C1, coeffs.C2], dtype=complex)
        base = -self.A.lattice.vec(dprime).astype(complex)
        frame = frame_matrix(nu)
        second = frame.T @ quadratic @ frame
        first = 2.0 * frame.T @ quadratic @ base + frame.T @ linear
        constant = base @ quadratic @ base + linear @ base + coeffs.C0
        return JKLMSet(
            nu=nu,
            J_nu=complex(second[1, 1]),
            J_nuprime=complex(second[0, 0]),
            K=complex(2.0 * second[0, 1]),
            L_nu=complex(first[1]),
            L_nuprime=complex(first[0]),
            M=complex(constant),
        )


def d_entry(
    dprime: Label,
    dprimeprime: Label,
    k: KPoint,
    window: IndexWindow,
    A: FourierField,
    q: FourierField,
    epsilon: float,
) -> complex:
    return ReducedSystem(window, k, A, q, epsilon).d_entry(dprime, dprimeprime)


def bc_coefficients(
    window: IndexWindow,
    dprime: Label,
    dprimeprime: Label,
    k: KPoint,
    A: FourierField,
    q: FourierField,
    epsilon: float,
) -> CoefficientSet:
    return ReducedSystem(window, k, A, q, epsilon).coefficients(dprime, dprimeprime)


def jklm(
    window: IndexWindow,
    dprime: Label,
    dprimeprime: Label,
    nu: int,
    k: KPoint,
    A: FourierField,
    q: FourierField,
    epsilon: float,
) -> JKLMSet:
    return ReducedSystem(window, k, A, q, epsilon).jklm(dprime, dprimeprime, nu)


# ----------------------------
# Local defining equations
# ----------------------------
def _require_tubes(k: KPoint, window: IndexWindow, epsilon: float, expected: set) -> None:
    tubes = active_tubes(k, window.lattice, epsilon, window.radius + float(np.linalg.norm(window.lattice.vec(window.g_set), axis=1).max(initial=0.0)))
    found = {tube.b for tube in tubes}
    if found != expected:
        raise RegionViolation(f"k={k} lies in tubes about {sorted(found)}, expected {sorted(expected)}")


def f_regular(
    k: KPoint,
    window: IndexWindow,
    A: FourierField,
    q: FourierField,
    epsilon: float,
    force: bool = False,
) -> complex:
    """N_0(k) + D_{0,0}(k); vanishes exactly where the truncated H_k has a kernel."""
    if {tuple(int(x) for x in row) for row in window.g_set} != {(0, 0)}:
        raise RegionViolation("f_regular needs the window built with G = {0}.")
    if not force:
        _require_tubes(k, window, epsilon, {(0, 0)})
    system = ReducedSystem(window, k, A, q, epsilon, force=force)
    return complex(n_full(np.zeros(2), k)) + system.d_entry((0, 0), (0, 0))


def f_handle(
    k: KPoint,
    d: Label,
    window: IndexWindow,
    A: FourierField,
    q: FourierField,
    epsilon: float,
    force: bool = False,
) -> complex:
    """(N_0 + D_00)(N_d + D_dd) − D_0d D_d0."""
    d = (int(d[0]), int(d[1]))
    if {tuple(int(x) for x in row) for row in window.g_set} != {(0, 0), d}:
        raise RegionViolation(f"f_handle needs the window built with G = {{0, {d}}}.")
    if not force:
        _require_tubes(k, window, epsilon, {(0, 0), d})
    system = ReducedSystem(window, k, A, q, epsilon, force=force)
    n0 = complex(n_full(np.zeros(2), k))
    nd = complex(n_full(window.lattice.vec(d), k))
    first = n0 + system.d_entry((0, 0), (0, 0))
    second = nd + system.d_entry(d, d)
    return first * second - system.d_entry((0, 0), d) * system.d_entry(d, (0, 0))


def schur_oracle(
    window: IndexWindow,
    k: KPoint,
    A: FourierField,
    V: FourierField,
    q: Optional[FourierField] = None,
) -> np.ndarray:
    """H_GG − H_GG' H_G'G'⁻¹ H_G'G from the dense truncated operator."""
    dense = hk_matrix(window, k, A, V, q).entries
    g = window.g_positions
    rest = window.gprime_positions
    block = dense[np.ix_(g, g)]
    if not len(rest):
        return block
    try:
        solved = scipy.linalg.solve(dense[np.ix_(rest, rest)], dense[np.ix_(rest, g)])
    except LinAlgError as exc:
        raise NumericallySingular(f"H_G'G' is singular at k={k}") from exc
    return block - dense[np.ix_(g, rest)] @ solved


__all__ = [
    "FieldLike",
    "field_values",
    "CoefficientSet",
    "WZFrame",
    "JKLMSet",
    "wz_frame",
    "frame_matrix",
    "ReducedSystem",
    "d_entry",
    "bc_coefficients",
    "jklm",
    "f_regular",
    "f_handle",
    "schur_oracle",
]
