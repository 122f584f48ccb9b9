from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from fermi_errors import DegenerateLattice, InvalidParameters, SmallnessViolated

log = logging.getLogger("lattice_fourier")

Label = Tuple[int, int]

_DUALITY_TOL = 1e-12
_ENUM_TOL = 1e-12
_MAX_REDUCTION_STEPS = 10000


# ----------------------------
# Lattice
# ----------------------------
@dataclass(frozen=True, eq=False)
class Lattice:
    """Period lattice Γ together with its dual Γ^# and derived constants.

    Dual points are addressed by integer labels (n1, n2) meaning
    n1*dual1 + n2*dual2; ``vec`` turns labels into Cartesian vectors.
    """

    gamma1: np.ndarray
    gamma2: np.ndarray
    dual1: np.ndarray
    dual2: np.ndarray
    lam: float
    alpha: float
    cell_area: float

    @cached_property
    def dual_basis(self) -> np.ndarray:
        return np.vstack([self.dual1, self.dual2])

    @cached_property
    def label_transform(self) -> np.ndarray:
        return np.linalg.inv(self.dual_basis)

    def vec(self, labels) -> np.ndarray:
        return np.asarray(labels, dtype=float) @ self.dual_basis

    def label_of(self, point) -> Label:
        raw = np.asarray(point, dtype=float) @ self.label_transform
        rounded = np.rint(raw)
        if np.max(np.abs(raw - rounded)) > 1e-8:
            raise InvalidParameters(f"Point {tuple(point)} is not a dual lattice vector.")
        return int(rounded[0]), int(rounded[1])


def _gauss_reduce(u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Lagrange-Gauss reduction of a planar basis; returns (shortest, second)."""
    if np.dot(u, u) > np.dot(v, v):
        u, v = v, u
    for _ in range(_MAX_REDUCTION_STEPS):
        x = int(round(np.dot(u, v) / np.dot(u, u)))
        v = v - x * u
        if np.dot(v, v) >= np.dot(u, u):
            return u, v
        u, v = v, u
    raise DegenerateLattice(f"Gaussian basis not found after {_MAX_REDUCTION_STEPS} iterations")


def _shortest_norm(u: np.ndarray, v: np.ndarray) -> float:
    combos = np.array([c for c in itertools.product(range(-3, 4), repeat=2) if c != (0, 0)], dtype=float)
    return float(np.min(np.linalg.norm(combos @ np.vstack([u, v]), axis=1)))


def _voronoi_circumradius(u: np.ndarray, v: np.ndarray) -> float:
    """Largest distance from 0 to a vertex of the Voronoi cell of the lattice."""
    combos = np.array([c for c in itertools.product(range(-2, 3), repeat=2) if c != (0, 0)], dtype=float)
    neighbors = combos @ np.vstack([u, v])
    half = 0.5 * np.sum(neighbors**2, axis=1)
    scale = float(np.max(half))
    best = 0.0
    for p, q in itertools.combinations(range(len(neighbors)), 2):
        pair = neighbors[[p, q]]
        if abs(np.linalg.det(pair)) < 1e-12 * scale:
            continue
        vertex = np.linalg.solve(pair, half[[p, q]])
        if np.all(neighbors @ vertex <= half + 1e-9 * scale):
            best = max(best, float(np.linalg.norm(vertex)))
    return best


def build_lattice(gamma1: Sequence[float], gamma2: Sequence[float]) -> Lattice:
    g1 = np.asarray(gamma1, dtype=float).reshape(2)
    g2 = np.asarray(gamma2, dtype=float).reshape(2)
    generators = np.column_stack([g1, g2])
    det = float(np.linalg.det(generators))
    if abs(det) < 1e-12 * np.linalg.norm(g1) * np.linalg.norm(g2) or det == 0.0:
        raise DegenerateLattice(f"Generators {tuple(g1)} and {tuple(g2)} are linearly dependent.")

    dual = 2.0 * np.pi * np.linalg.inv(generators).T
    dual1, dual2 = dual[:, 0].copy(), dual[:, 1].copy()
    pairing = np.vstack([dual1, dual2]) @ generators
    if np.max(np.abs(pairing / (2.0 * np.pi) - np.eye(2))) > _DUALITY_TOL * 100:
        raise DegenerateLattice("Dual basis fails the 2π pairing; generators are too ill-conditioned.")

    u, v = _gauss_reduce(dual1, dual2)
    shortest = _shortest_norm(u, v)
    alpha = _voronoi_circumradius(u, v)
    lattice = Lattice(
        gamma1=g1,
        gamma2=g2,
        dual1=dual1,
        dual2=dual2,
        lam=shortest / 2.0,
        alpha=alpha,
        cell_area=abs(det),
    )
    log.debug("Lattice built: Λ=%.6g α=%.6g |Γ|=%.6g", lattice.lam, lattice.alpha, lattice.cell_area)
    return lattice


def enumerate_dual_near(lattice: Lattice, center: Sequence[float], radius: float) -> np.ndarray:
    """Labels of the dual points within ``radius`` of a Cartesian ``center``, lexicographically ordered."""
    if radius < 0:
        raise InvalidParameters(f"radius must be non-negative, got {radius}")
    center = np.asarray(center, dtype=float).reshape(2)
    inv = lattice.label_transform
    middle = center @ inv
    reach = radius * np.linalg.norm(inv, axis=0) + 1e-9
    lo = np.floor(middle - reach).astype(np.int64)
    hi = np.ceil(middle + reach).astype(np.int64)
    n1, n2 = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
    labels = np.column_stack([n1.ravel(), n2.ravel()])
    dist = np.linalg.norm(lattice.vec(labels) - center, axis=1)
    labels = labels[dist <= radius * (1.0 + _ENUM_TOL) + _ENUM_TOL]
    order = np.lexsort((labels[:, 1], labels[:, 0]))
    return labels[order]


def enumerate_dual(lattice: Lattice, radius: float) -> np.ndarray:
    return enumerate_dual_near(lattice, (0.0, 0.0), radius)


# ----------------------------
# Fourier fields
# ----------------------------
@dataclass(frozen=True, eq=False)
class FourierField:
    """Finitely supported map from dual points to scalars (rank 1) or 2-vectors (rank 2)."""

    lattice: Lattice
    support: np.ndarray
    values: np.ndarray
    rank: int = 1
    zero_mean: bool = False

    def __post_init__(self) -> None:
        support = np.asarray(self.support, dtype=np.int64).reshape(-1, 2)
        values = np.asarray(self.values, dtype=complex)
        if self.rank not in (1, 2):
            raise InvalidParameters(f"rank must be 1 or 2, got {self.rank}")
        expected = (len(support),) if self.rank == 1 else (len(support), 2)
        values = values.reshape(expected)
        if len(support) and len(np.unique(support, axis=0)) != len(support):
            raise InvalidParameters("Duplicate support points in Fourier field.")
        if self.zero_mean and len(support):
            at_zero = np.all(support == 0, axis=1)
            if np.any(at_zero) and np.any(values[at_zero] != 0):
                raise InvalidParameters("Zero-mean field carries a nonzero value at b = 0.")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, lattice: Lattice, rank: int = 1) -> "FourierField":
        shape = (0,) if rank == 1 else (0, 2)
        return cls(lattice, np.zeros((0, 2), dtype=np.int64), np.zeros(shape, dtype=complex), rank)

    @classmethod
    def from_mapping(cls, lattice: Lattice, entries: Mapping[Label, object], rank: int = 1) -> "FourierField":
        labels = list(entries.keys())
        values = [entries[label] for label in labels]
        if not labels:
            return cls.zeros(lattice, rank)
        return cls(lattice, np.array(labels, dtype=np.int64), np.array(values, dtype=complex), rank)

    @cached_property
    def points(self) -> np.ndarray:
        return self.lattice.vec(self.support)

    @cached_property
    def magnitudes(self) -> np.ndarray:
        if self.rank == 1:
            return np.abs(self.values)
        return np.sqrt(np.sum(np.abs(self.values) ** 2, axis=1))

    @cached_property
    def support_radius(self) -> float:
        if not len(self.support):
            return 0.0
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    @property
    def is_zero(self) -> bool:
        return not len(self.support) or not np.any(self.values)

    @cached_property
    def _dense(self) -> Tuple[np.ndarray, np.ndarray]:
        if not len(self.support):
            return np.zeros(2, dtype=np.int64), np.zeros((1, 1) if self.rank == 1 else (1, 1, 2), dtype=complex)
        lo = self.support.min(axis=0)
        hi = self.support.max(axis=0)
        shape = tuple(hi - lo + 1) + (() if self.rank == 1 else (2,))
        grid = np.zeros(shape, dtype=complex)
        grid[tuple((self.support - lo).T)] = self.values
        return lo, grid

    def at(self, labels) -> np.ndarray:
        """Vectorized lookup; labels has shape (..., 2) and absent points read as zero."""
        labels = np.asarray(labels, dtype=np.int64)
        lo, grid = self._dense
        shifted = labels - lo
        extent = np.array(grid.shape[:2])
        inside = np.all((shifted >= 0) & (shifted < extent), axis=-1)
        tail = () if self.rank == 1 else (2,)
        out = np.zeros(labels.shape[:-1] + tail, dtype=complex)
        if not len(self.support) or not np.any(inside):
            return out
        picked = shifted[inside]
        out[inside] = grid[picked[:, 0], picked[:, 1]]
        return out

    def value(self, label: Label) -> complex | np.ndarray:
        return self.at(np.asarray(label).reshape(1, 2))[0]

    def dot(self, vector: Sequence[complex]) -> "FourierField":
        """Rank-1 field b -> vector · f(b) (bilinear, no conjugation)."""
        if self.rank != 2:
            raise InvalidParameters("dot() needs a vector field.")
        vector = np.asarray(vector, dtype=complex).reshape(2)
        return FourierField(self.lattice, self.support, self.values @ vector, 1)

    def component(self, index: int) -> "FourierField":
        unit = np.zeros(2, dtype=complex)
        unit[index] = 1.0
        return self.dot(unit)

    def add(self, other: "FourierField") -> "FourierField":
        if other.rank != self.rank:
            raise InvalidParameters("Cannot add fields of different rank.")
        return _accumulate(self.lattice, [self.support, other.support], [self.values, other.values], self.rank)

    def scaled(self, factor: complex) -> "FourierField":
        return FourierField(self.lattice, self.support, self.values * factor, self.rank, self.zero_mean)


def _accumulate(lattice: Lattice, labels: Iterable[np.ndarray], values: Iterable[np.ndarray], rank: int) -> FourierField:
    labels = [np.asarray(item, dtype=np.int64).reshape(-1, 2) for item in labels]
    tail = () if rank == 1 else (2,)
    values = [np.asarray(item, dtype=complex).reshape((-1,) + tail) for item in values]
    all_labels = np.concatenate(labels, axis=0)
    if not len(all_labels):
        return FourierField.zeros(lattice, rank)
    all_values = np.concatenate(values, axis=0)
    unique, inverse = np.unique(all_labels, axis=0, return_inverse=True)
    summed = np.zeros((len(unique),) + tail, dtype=complex)
    np.add.at(summed, inverse.reshape(-1), all_values)
    return FourierField(lattice, unique, summed, rank)


def field_from_entries(lattice: Lattice, rows: Sequence[Sequence[float]]) -> FourierField:
    """Scalar field from (n1, n2, re, im) rows; repeated labels are rejected."""
    seen = set()
    labels, values = [], []
    for row in rows:
        if len(row) != 4:
            raise InvalidParameters(f"Fourier entry {row!r} must be [n1, n2, re, im].")
        label = (int(row[0]), int(row[1]))
        if label in seen:
            raise InvalidParameters(f"Duplicate Fourier entry at b = {label}.")
        seen.add(label)
        labels.append(label)
        values.append(complex(float(row[2]), float(row[3])))
    if not labels:
        return FourierField.zeros(lattice, 1)
    return FourierField(lattice, np.array(labels, dtype=np.int64), np.array(values, dtype=complex), 1)


def vector_field_from_entries(
    lattice: Lattice,
    rows1: Sequence[Sequence[float]],
    rows2: Sequence[Sequence[float]],
) -> FourierField:
    first = field_from_entries(lattice, rows1)
    second = field_from_entries(lattice, rows2)
    labels = [first.support, second.support]
    values = [
        np.column_stack([first.values, np.zeros(len(first.values), dtype=complex)]),
        np.column_stack([np.zeros(len(second.values), dtype=complex), second.values]),
    ]
    return _accumulate(lattice, labels, values, 2)


# ----------------------------
# Derived quantities
# ----------------------------
def q_field(A: FourierField, V: FourierField) -> FourierField:
    """q̂(b) = −b·Â(b) + Σ_c Â(c)·Â(b−c) + V̂(b)."""
    if A.rank != 2 or V.rank != 1:
        raise InvalidParameters("q_field expects a vector A and a scalar V.")
    labels = [V.support, A.support]
    values = [V.values, -np.einsum("ni,ni->n", A.points, A.values)]
    if len(A.support):
        labels.append((A.support[:, None, :] + A.support[None, :, :]).reshape(-1, 2))
        values.append(np.einsum("ai,bi->ab", A.values, A.values).reshape(-1))
    return _accumulate(V.lattice, labels, values, 1)


def weighted_l1(f: FourierField, beta: float = 0.0, exclude_zero: bool = False) -> float:
    """Σ_b (1+|b|^beta)|f(b)|, with weight 1 at beta = 0 (the plain l1 norm)."""
    if beta < 0:
        raise InvalidParameters(f"beta must be non-negative, got {beta}")
    if not len(f.support):
        return 0.0
    mags = f.magnitudes
    if exclude_zero:
        keep = np.any(f.support != 0, axis=1)
        mags = mags[keep]
        norms = np.linalg.norm(f.points[keep], axis=1)
    else:
        norms = np.linalg.norm(f.points, axis=1)
    if beta == 0:
        return float(np.sum(mags))
    return float(np.sum((1.0 + norms**beta) * mags))


@dataclass(frozen=True)
class SmallnessReport:
    passed: bool
    weighted_norm: float
    threshold: float
    slack: float


def check_smallness(A: FourierField, epsilon: float) -> SmallnessReport:
    """Compare ‖(1+b²)Â(b)‖_{l¹(b≠0)} against 2ε/63."""
    if not 0 < epsilon < A.lattice.lam / 6:
        raise InvalidParameters(f"epsilon={epsilon} must lie in (0, Λ/6) with Λ={A.lattice.lam:.6g}")
    norm = weighted_l1(A, 2.0, exclude_zero=True)
    threshold = 2.0 * epsilon / 63.0
    return SmallnessReport(passed=norm < threshold, weighted_norm=norm, threshold=threshold, slack=threshold - norm)


def radius_R(A: FourierField, q: FourierField, epsilon: float) -> float:
    lattice = A.lattice
    return max(
        1.0,
        lattice.alpha,
        2.0 * lattice.lam,
        140.0 * weighted_l1(A),
        (4.0 / epsilon) * weighted_l1(q, 2.0),
    )


def gauge_shift(A: FourierField, k: Sequence[complex]) -> Tuple[FourierField, np.ndarray]:
    """Move Â(0) into the momentum: returns (A − Â(0), k − Â(0))."""
    mean = np.asarray(A.value((0, 0)), dtype=complex)
    keep = np.any(A.support != 0, axis=1)
    shifted = FourierField(A.lattice, A.support[keep], A.values[keep], 2, zero_mean=True)
    return shifted, np.asarray(k, dtype=complex).reshape(2) - mean


def is_real_field(f: FourierField, tol: float = 1e-12) -> bool:
    """True when f̂(−b) = conj f̂(b) on the whole support."""
    if not len(f.support):
        return True
    mirrored = f.at(-f.support)
    scale = max(1.0, float(np.max(f.magnitudes)))
    return bool(np.max(np.abs(mirrored - np.conj(f.values))) <= tol * scale)


# ----------------------------
# Model parameters
# ----------------------------
@dataclass(frozen=True)
class ModelParams:
    epsilon: float
    rho: float
    radius_R: float
    window_radius: float

    def validate(self, lattice: Lattice) -> "ModelParams":
        if not 0 < self.epsilon < lattice.lam / 6:
            raise InvalidParameters(f"epsilon={self.epsilon} violates 0 < ε < Λ/6 (Λ={lattice.lam:.6g})")
        if self.rho < self.radius_R:
            raise InvalidParameters(f"rho={self.rho} violates ρ ≥ R (R={self.radius_R:.6g})")
        if self.window_radius <= 0:
            raise InvalidParameters(f"window_radius={self.window_radius} must be positive")
        return self


def make_params(
    A: FourierField,
    q: FourierField,
    epsilon: Optional[float] = None,
    rho: Optional[float] = None,
    window_radius: Optional[float] = None,
) -> ModelParams:
    """Fill unspecified parameters with defaults (ε = Λ/12, ρ = R, window = max(4R, 12Λ))."""
    lattice = A.lattice
    eps = lattice.lam / 12.0 if epsilon is None else float(epsilon)
    if not 0 < eps < lattice.lam / 6:
        raise InvalidParameters(f"epsilon={eps} violates 0 < ε < Λ/6 (Λ={lattice.lam:.6g})")
    big_r = radius_R(A, q, eps)
    params = ModelParams(
        epsilon=eps,
        rho=big_r if rho is None else float(rho),
        radius_R=big_r,
        window_radius=max(4.0 * big_r, 12.0 * lattice.lam) if window_radius is None else float(window_radius),
    )
    return params.validate(lattice)




@dataclass(frozen=True, eq=False)
class FermiModel:
    """Gauge-normalized inputs shared by every evaluation.

    ``A`` has Â(0) removed; user momenta map to internal ones by
    subtracting ``mean`` (H_k(A, V) = H_{k−Â(0)}(A − Â(0), V)).
    """

    lattice: Lattice
    A: FourierField
    V: FourierField
    q: FourierField
    params: ModelParams
    mean: np.ndarray
    smallness: SmallnessReport

    def to_internal(self, k: Sequence[complex]) -> np.ndarray:
        return np.asarray(k, dtype=complex).reshape(2) - self.mean

    def to_external(self, k: Sequence[complex]) -> np.ndarray:
        return np.asarray(k, dtype=complex).reshape(2) + self.mean

    def with_params(self, **changes) -> "FermiModel":
        params = replace(self.params, **changes).validate(self.lattice)
        return replace(self, params=params)


def build_model(
    lattice: Lattice,
    A: Optional[FourierField] = None,
    V: Optional[FourierField] = None,
    epsilon: Optional[float] = None,
    rho: Optional[float] = None,
    window_radius: Optional[float] = None,
    require_small: bool = True,
) -> FermiModel:
    A = FourierField.zeros(lattice, 2) if A is None else A
    V = FourierField.zeros(lattice, 1) if V is None else V
    shifted, minus_mean = gauge_shift(A, (0.0, 0.0))
    q = q_field(shifted, V)
    params = make_params(shifted, q, epsilon, rho, window_radius)
    report = check_smallness(shifted, params.epsilon)
    if not report.passed:
        message = f"‖(1+b²)Â‖={report.weighted_norm:.4g} is not below 2ε/63={report.threshold:.4g}"
        if require_small:
            raise SmallnessViolated(message)
        log.warning("%s; estimates are uncertified", message)
    log.info("Model ready: ε=%.4g ρ=%.4g R=%.4g window=%.4g", params.epsilon, params.rho, params.radius_R, params.window_radius)
    return FermiModel(lattice, shifted, V, q, params, -minus_mean, report)


__all__ = [
    "Label",
    "Lattice",
    "build_lattice",
    "enumerate_dual",
    "enumerate_dual_near",
    "FourierField",
    "field_from_entries",
    "vector_field_from_entries",
    "q_field",
    "weighted_l1",
    "SmallnessReport",
    "check_smallness",
    "radius_R",
    "gauge_shift",
    "is_real_field",
    "ModelParams",
    "make_params",
    "FermiModel",
    "build_model",
]
