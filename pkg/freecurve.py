from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fermi_errors import InvalidParameters, MultipleExceptional, RegionViolation, RelationViolated, TripleTube
from lattice_fourier import Label, Lattice, ModelParams, enumerate_dual, enumerate_dual_near

log = logging.getLogger("freecurve")


# ----------------------------
# Points and tube labels
# ----------------------------
@dataclass(frozen=True)
class KPoint:
    k1: complex
    k2: complex

    def __post_init__(self) -> None:
        object.__setattr__(self, "k1", complex(self.k1))
        object.__setattr__(self, "k2", complex(self.k2))

    @classmethod
    def from_array(cls, values: Sequence[complex]) -> "KPoint":
        values = np.asarray(values, dtype=complex).reshape(2)
        return cls(values[0], values[1])

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2], dtype=complex)

    @cached_property
    def u(self) -> np.ndarray:
        return np.array([self.k1.real, self.k2.real])

    @cached_property
    def v(self) -> np.ndarray:
        return np.array([self.k1.imag, self.k2.imag])

    @property
    def norm_u(self) -> float:
        return float(np.linalg.norm(self.u))

    @property
    def norm_v(self) -> float:
        return float(np.linalg.norm(self.v))

    def shifted(self, b: Sequence[float]) -> "KPoint":
        """k + b for a Cartesian (real or complex) 2-vector b."""
        return KPoint.from_array(self.as_array() + np.asarray(b, dtype=complex))


@dataclass(frozen=True)
class TubeIndex:
    b: Label
    nu: int

    def __post_init__(self) -> None:
        if self.nu not in (1, 2):
            raise InvalidParameters(f"nu must be 1 or 2, got {self.nu}")
        object.__setattr__(self, "b", (int(self.b[0]), int(self.b[1])))


def sign(nu: int) -> int:
    """(−1)^ν."""
    if nu not in (1, 2):
        raise InvalidParameters(f"nu must be 1 or 2, got {nu}")
    return -1 if nu == 1 else 1


def partner(nu: int) -> int:
    return 2 if nu == 1 else 1


# ----------------------------
# Line and tube formulas (Cartesian b, vectorized over leading axes)
# ----------------------------
def n_line(b, nu: int, k: KPoint) -> complex | np.ndarray:
    b = np.asarray(b, dtype=complex)
    return (k.k1 + b[..., 0]) + 1j * sign(nu) * (k.k2 + b[..., 1])


def n_full(b, k: KPoint) -> complex | np.ndarray:
    return n_line(b, 1, k) * n_line(b, 2, k)


def theta(nu: int, b) -> complex | np.ndarray:
    """θ_ν(b) = ½((−1)^ν b2 + i b1); b may be complex (used on Â values)."""
    b = np.asarray(b, dtype=complex)
    return 0.5 * (sign(nu) * b[..., 1] + 1j * b[..., 0])


def in_tube(b, nu: int, k: KPoint, epsilon: float) -> bool | np.ndarray:
    return np.abs(n_line(b, nu, k)) < epsilon


def line_intersection(b, c) -> KPoint:
    """The point of N_1(b) ∩ N_2(c)."""
    t1 = theta(1, c)
    t2 = theta(2, b)
    return KPoint(1j * t1 + 1j * t2, t1 - t2)


def w_coordinate(k: KPoint, nu: int, dprime) -> complex:
    dprime = np.asarray(dprime, dtype=float)
    return (k.k1 + dprime[0]) + 1j * sign(nu) * (k.k2 + dprime[1])


def z_coordinate(k: KPoint, nu: int, dprime) -> complex:
    dprime = np.asarray(dprime, dtype=float)
    return (k.k1 + dprime[0]) - 1j * sign(nu) * (k.k2 + dprime[1])


def _tube_center(k: KPoint, nu: int) -> np.ndarray:
    # |N_{b,ν}(k)| = |b − center| for real b
    c = k.k1 + 1j * sign(nu) * k.k2
    return np.array([-c.real, -sign(nu) * c.imag])


# ----------------------------
# Singular index classification
# ----------------------------
def active_tubes(k: KPoint, lattice: Lattice, epsilon: float, window_radius: float) -> List[TubeIndex]:
    found: List[TubeIndex] = []
    for nu in (1, 2):
        candidates = enumerate_dual_near(lattice, _tube_center(k, nu), epsilon)
        for label in candidates:
            point = lattice.vec(label)
            if np.linalg.norm(point) <= window_radius and in_tube(point, nu, k, epsilon):
                found.append(TubeIndex((int(label[0]), int(label[1])), nu))
    distinct = {tube.b for tube in found}
    if len(distinct) > 2:
        raise TripleTube(f"k={k} lies in tubes about {sorted(distinct)}; check epsilon and the window.")
    found.sort(key=lambda tube: (tube.b, tube.nu))
    return found


def exceptional_b(k: KPoint, lattice: Lattice) -> Optional[Label]:
    """The unique b ≠ 0 with |N_b(k)| < (Λ/2)(|v| + |u+b|), if any."""
    lam = lattice.lam
    if k.norm_v <= 2 * lam:
        raise InvalidParameters(f"|v|={k.norm_v:.6g} must exceed 2Λ={2 * lam:.6g}")
    radius = k.norm_u + k.norm_v + lam
    labels = enumerate_dual(lattice, radius)
    labels = labels[np.any(labels != 0, axis=1)]
    points = lattice.vec(labels)
    values = np.abs(n_full(points, k))
    lower = 0.5 * lam * (k.norm_v + np.linalg.norm(points + k.u, axis=1))
    hits = labels[values < lower]
    if len(hits) > 1:
        raise MultipleExceptional(f"Several exceptional dual vectors at k={k}: {hits.tolist()}")
    if not len(hits):
        return None
    label = (int(hits[0][0]), int(hits[0][1]))
    log.debug("Exceptional b=%s at k=%s", label, k)
    point = lattice.vec(label)
    if not (np.linalg.norm(point) > k.norm_v and abs(np.linalg.norm(point + k.u) - k.norm_v) < lam):
        raise RegionViolation(
            f"Exceptional b={label} at k={k} misses |b| > |v| and ||u+b| − |v|| < Λ"
        )
    return label


@dataclass
class OrderReport:
    nu: int
    ratios: Dict[str, float] = field(default_factory=dict)


def order_relations(k: KPoint, nu: int, d: Optional[Sequence[float]] = None) -> OrderReport:
    """Check the comparability of |v|, |k2|, |z_{ν,0}| and, with a partner d, |d| and |z_{ν',d}|."""
    v = k.norm_v
    z = abs(z_coordinate(k, nu, (0.0, 0.0)))
    report = OrderReport(nu=nu)
    report.ratios["v_over_z"] = v / z if z else float("inf")
    report.ratios["k2_over_v"] = abs(k.k2) / v if v else float("inf")
    if not (z <= 3 * v * (1 + 1e-12) and v <= z * (1 + 1e-12)):
        raise RelationViolated(f"|z|={z:.6g} is not within [|v|, 3|v|] for |v|={v:.6g}")
    if not (v / 8 <= abs(k.k2) * (1 + 1e-12) and abs(k.k2) <= 4 * v * (1 + 1e-12)):
        raise RelationViolated(f"|k2|={abs(k.k2):.6g} is not within [|v|/8, 4|v|] for |v|={v:.6g}")
    if d is not None:
        d = np.asarray(d, dtype=float)
        z2 = abs(z_coordinate(k, partner(nu), d))
        size = float(np.linalg.norm(d))
        report.ratios["d_over_z2"] = size / z2 if z2 else float("inf")
        if not (0.5 * z2 <= size * (1 + 1e-12) and size <= 2 * z2 * (1 + 1e-12)):
            raise RelationViolated(f"|d|={size:.6g} is not within [|z2|/2, 2|z2|] for |z2|={z2:.6g}")
    return report


def classify_point(k: KPoint, lattice: Lattice, params: ModelParams) -> str:
    """compact, free, regular or handle."""
    if k.norm_v <= params.rho:
        return "compact"
    radius = k.norm_u + k.norm_v + params.epsilon + lattice.alpha
    tubes = active_tubes(k, lattice, params.epsilon, radius)
    distinct = {tube.b for tube in tubes}
    if not distinct:
        return "free"
    return "regular" if len(distinct) == 1 else "handle"


# ----------------------------
# Real slice of the free curve
# ----------------------------
def real_slice(lattice: Lattice, radius: float, k2_values: Sequence[float]) -> Tuple[List[dict], List[dict]]:
    """Points (i·k1, k2) of the free curve with k1 imaginary and k2 real, plus line intersections.

    Only lines N_ν(b) with b1 = 0 meet that slice; on them i·k1 = (−1)^ν (k2 + b2).
    """
    labels = enumerate_dual(lattice, radius)
    points = lattice.vec(labels)
    vertical = np.abs(points[:, 0]) < 1e-12
    k2 = np.asarray(k2_values, dtype=float)
    rows: List[dict] = []
    for label, point in zip(labels[vertical], points[vertical]):
        for nu in (1, 2):
            for value in k2:
                rows.append({
                    "b1": int(label[0]),
                    "b2": int(label[1]),
                    "nu": nu,
                    "ik1": sign(nu) * (value + point[1]),
                    "k2": float(value),
                })
    crossings: List[dict] = []
    for label, point in zip(labels[vertical], points[vertical]):
        if not np.any(label):
            continue
        for kind, (first, second) in (("N1(0)&N2(d)", (np.zeros(2), point)), ("N1(-d)&N2(0)", (-point, np.zeros(2)))):
            k = line_intersection(first, second)
            crossings.append({
                "d1": int(label[0]),
                "d2": int(label[1]),
                "kind": kind,
                "ik1": float((1j * k.k1).real),
                "k2": float(k.k2.real),
            })
    return rows, crossings


__all__ = [
    "KPoint",
    "TubeIndex",
    "sign",
    "partner",
    "n_line",
    "n_full",
    "theta",
    "in_tube",
    "line_intersection",
    "w_coordinate",
    "z_coordinate",
    "active_tubes",
    "exceptional_b",
    "OrderReport",
    "order_relations",
    "classify_point",
    "real_slice",
]
