from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.linalg import LinAlgError, LinAlgWarning

from fermi_errors import CertificateFail, NumericallySingular, RegionViolation, SingularDenominator
from freecurve import KPoint, n_full
from lattice_fourier import FourierField, Label, Lattice, enumerate_dual_near, q_field, weighted_l1

log = logging.getLogger("operator_core")

CONTRACTION_LIMIT = 17.0 / 18.0
_DENOMINATOR_FLOOR = 1e-12


# ----------------------------
# Index windows and matrices
# ----------------------------
@dataclass(frozen=True, eq=False)
class IndexWindow:
    """Finite truncation of Γ^# with the singular set G split off.

    The window is the union of discs of ``radius`` about each point of G
    (about 0 when G is empty), so handles with a large partner d keep both
    neighborhoods.
    """

    lattice: Lattice
    radius: float
    all_points: np.ndarray
    g_set: np.ndarray

    @cached_property
    def index(self) -> Dict[Label, int]:
        return {(int(a), int(b)): pos for pos, (a, b) in enumerate(self.all_points)}

    @cached_property
    def g_positions(self) -> np.ndarray:
        return np.array([self.index[(int(a), int(b))] for a, b in self.g_set], dtype=np.int64)

    @cached_property
    def gprime_positions(self) -> np.ndarray:
        mask = np.ones(len(self.all_points), dtype=bool)
        mask[self.g_positions] = False
        return np.flatnonzero(mask)

    @cached_property
    def gprime(self) -> np.ndarray:
        return self.all_points[self.gprime_positions]

    @cached_property
    def points(self) -> np.ndarray:
        return self.lattice.vec(self.all_points)

    def bind(self, k: KPoint, epsilon: float) -> "IndexWindow":
        """Check that every G' point keeps |N_b(k)| ≥ ε|v|."""
        if not len(self.gprime):
            return self
        values = np.abs(n_full(self.lattice.vec(self.gprime), k))
        floor = epsilon * k.norm_v
        worst = int(np.argmin(values))
        if values[worst] < floor:
            label = tuple(int(x) for x in self.gprime[worst])
            raise RegionViolation(f"|N_b(k)|={values[worst]:.3e} < ε|v|={floor:.3e} at b={label} outside G")
        return self

    def translated(self, d: Label) -> "IndexWindow":
        shift = np.asarray(d, dtype=np.int64)
        return IndexWindow(self.lattice, self.radius, self.all_points + shift, self.g_set + shift)


def make_window(lattice: Lattice, radius: float, g_set: Sequence[Label] = ()) -> IndexWindow:
    g_labels = np.asarray(list(g_set), dtype=np.int64).reshape(-1, 2)
    centers = g_labels if len(g_labels) else np.zeros((1, 2), dtype=np.int64)
    pieces = [enumerate_dual_near(lattice, lattice.vec(center), radius) for center in centers]
    all_points = np.unique(np.concatenate(pieces, axis=0), axis=0)
    log.debug("Window radius %.3g about %d centers: %d points", radius, len(centers), len(all_points))
    return IndexWindow(lattice, float(radius), all_points, g_labels)


@dataclass(frozen=True, eq=False)
class TruncatedOperator:
    rows: np.ndarray
    cols: np.ndarray
    entries: np.ndarray
    lattice: Optional[Lattice] = None

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1, 2)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1, 2)
        entries = np.asarray(self.entries, dtype=complex)
        if entries.shape != (len(rows), len(cols)):
            raise ValueError(f"entries shape {entries.shape} does not match {len(rows)}x{len(cols)} indices")
        if not np.all(np.isfinite(entries)):
            raise ValueError("TruncatedOperator entries must be finite.")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "entries", entries)


def _entries(op) -> np.ndarray:
    return op.entries if isinstance(op, TruncatedOperator) else np.asarray(op, dtype=complex)


def _differences(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.asarray(rows)[:, None, :] - np.asarray(cols)[None, :, :]


def _kronecker(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.all(np.asarray(rows)[:, None, :] == np.asarray(cols)[None, :, :], axis=-1).astype(complex)


def delta_matrix(window: IndexWindow, k: KPoint) -> TruncatedOperator:
    diagonal = n_full(window.points, k)
    return TruncatedOperator(window.all_points, window.all_points, np.diag(diagonal), window.lattice)


def w_entries(rows: np.ndarray, cols: np.ndarray, k: KPoint, A: FourierField, q: FourierField) -> np.ndarray:
    """w_{b,c} = −2(c+k)·Â(b−c) + q̂(b−c)."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1, 2)
    diff = _differences(rows, cols)
    shift = q.lattice.vec(cols) + k.as_array()
    h = -2.0 * np.einsum("rci,ci->rc", A.at(diff), shift)
    return h + q.at(diff)


def w_matrix(rows, cols, k: KPoint, A: FourierField, q: FourierField) -> TruncatedOperator:
    return TruncatedOperator(rows, cols, w_entries(rows, cols, k, A, q), q.lattice)


def _denominators(cols: np.ndarray, k: KPoint, lattice: Lattice) -> np.ndarray:
    values = n_full(lattice.vec(cols), k)
    if len(values) and np.min(np.abs(values)) < _DENOMINATOR_FLOOR:
        worst = tuple(int(x) for x in np.asarray(cols)[int(np.argmin(np.abs(values)))])
        raise SingularDenominator(f"N_c(k) vanishes at c={worst} for k={k}")
    return values


def r_entries(rows, cols, k: KPoint, A: FourierField, q: FourierField) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1, 2)
    denominators = _denominators(cols, k, q.lattice)
    return _kronecker(rows, cols) + w_entries(rows, cols, k, A, q) / denominators[None, :]


def r_matrix(rows, cols, k: KPoint, A: FourierField, q: FourierField) -> TruncatedOperator:
    return TruncatedOperator(rows, cols, r_entries(rows, cols, k, A, q), q.lattice)


def hk_matrix(window: IndexWindow, k: KPoint, A: FourierField, V: FourierField, q: Optional[FourierField] = None) -> TruncatedOperator:
    """Δ_k + h + q on the whole window."""
    q = q_field(A, V) if q is None else q
    labels = window.all_points
    entries = np.diag(n_full(window.points, k)) + w_entries(labels, labels, k, A, q)
    return TruncatedOperator(labels, labels, entries, window.lattice)


# ----------------------------
# Norms
# ----------------------------
def schur_norm(op) -> float:
    """max(largest row sum, largest column sum) of |T_bc|; bounds the operator norm."""
    mat = np.abs(_entries(op))
    if not mat.size:
        return 0.0
    return float(max(mat.sum(axis=1).max(), mat.sum(axis=0).max()))


def sigma_norm(op: TruncatedOperator, beta: float) -> float:
    """Schur-type norm with weight σ(|b−c|) = (1+|b−c|)^beta."""
    if op.lattice is None:
        raise ValueError("sigma_norm needs an operator carrying its lattice.")
    mat = np.abs(op.entries)
    if not mat.size:
        return 0.0
    distance = np.linalg.norm(op.lattice.vec(_differences(op.rows, op.cols)), axis=-1)
    weighted = mat * (1.0 + distance) ** beta
    return float(max(weighted.sum(axis=1).max(), weighted.sum(axis=0).max()))


def sigma_min(op) -> float:
    mat = _entries(op)
    if not mat.size:
        return float("inf")
    return float(scipy.linalg.svdvals(mat).min())


def rss_bound(k: KPoint, A: FourierField, q: FourierField, epsilon: float) -> float:
    """‖q̂‖/(ε|v|) + (14/ε)‖Â‖, valid for |u| ≤ 2|v| and |v| > 2Λ."""
    lam = A.lattice.lam
    if k.norm_u > 2 * k.norm_v or k.norm_v <= 2 * lam:
        raise RegionViolation(f"rss_bound needs |u| ≤ 2|v| and |v| > 2Λ; got |u|={k.norm_u:.4g}, |v|={k.norm_v:.4g}")
    return weighted_l1(q) / (epsilon * k.norm_v) + 14.0 * weighted_l1(A) / epsilon


def decay_certificate(m: int, beta: float, lattice: Lattice) -> float:
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    ceiling = math.ceil(beta)
    factor = 1.0
    if ceiling > 0:
        factor += (2 * lattice.lam) ** (beta - ceiling) * ceiling * m ** (ceiling - 1)
    return factor * CONTRACTION_LIMIT**m


# ----------------------------
# Inverse of R_{G'G'}
# ----------------------------
@dataclass(frozen=True, eq=False)
class RggInverse:
    labels: np.ndarray
    matrix: np.ndarray
    inverse: np.ndarray
    rss_bound: float
    measured_r: float
    measured_inv: float
    certified: bool

    @property
    def margin(self) -> float:
        return CONTRACTION_LIMIT - self.rss_bound

    @property
    def inverse_within_18x(self) -> bool:
        return self.measured_inv <= 18.0 * self.measured_r + 1e-14

    def as_operator(self, lattice: Lattice) -> TruncatedOperator:
        return TruncatedOperator(self.labels, self.labels, self.inverse, lattice)


def invert_rgg(
    window: IndexWindow,
    k: KPoint,
    A: FourierField,
    q: FourierField,
    epsilon: float,
    force: bool = False,
) -> RggInverse:
    """Dense inverse of R_{G'G'} with the contraction certificate attached.

    Outside the certified region the solve only runs with ``force`` and
    the result is marked uncertified.
    """
    try:
        window.bind(k, epsilon)
        bound = rss_bound(k, A, q, epsilon)
    except RegionViolation:
        if not force:
            raise
        bound = float("inf")
    certified = bound < CONTRACTION_LIMIT
    if not certified and not force:
        raise CertificateFail(f"rss_bound={bound:.4g} is not below 17/18 at k={k}")

    labels = window.gprime
    size = len(labels)
    if size == 0:
        empty = np.zeros((0, 0), dtype=complex)
        return RggInverse(labels, empty, empty, bound, 0.0, 0.0, certified)

    matrix = r_entries(labels, labels, k, A, q)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            inverse = scipy.linalg.inv(matrix)
    except (LinAlgError, LinAlgWarning, ValueError) as exc:
        raise NumericallySingular(f"R_G'G' is singular at k={k}: {exc}") from exc

    identity = np.eye(size)
    result = RggInverse(
        labels=labels,
        matrix=matrix,
        inverse=inverse,
        rss_bound=bound,
        measured_r=schur_norm(matrix - identity),
        measured_inv=schur_norm(inverse - identity),
        certified=certified,
    )
    if not certified:
        log.warning("Uncertified inverse at k=%s (rss_bound=%.4g)", k, bound)
    log.debug("R_G'G' inverted: size=%d bound=%.3e measured=%.3e", size, bound, result.measured_r)
    return result


def neumann_partial_sums(perturbation: np.ndarray, terms: int) -> List[np.ndarray]:
    """Partial sums Σ_{j<J} (−P)^j of (I + P)^{-1}, for J = 1..terms."""
    perturbation = _entries(perturbation)
    size = perturbation.shape[0]
    current = np.eye(size, dtype=complex)
    total = np.eye(size, dtype=complex)
    sums = [total.copy()]
    for _ in range(1, terms):
        current = -perturbation @ current
        total = total + current
        sums.append(total.copy())
    return sums


def tail_budget(window: IndexWindow, k: KPoint, A: FourierField, q: FourierField, epsilon: float) -> float:
    """Estimate of the G' contributions dropped by truncating at the window edge.

    Paths leaving the window need at least radius/s couplings of length s,
    each contracting by the rss_bound.
    """
    reach = max(q.support_radius, A.support_radius)
    if reach == 0.0:
        return 0.0
    try:
        rate = rss_bound(k, A, q, epsilon)
    except RegionViolation:
        return float("inf")
    if rate >= 1.0:
        return float("inf")
    steps = int(window.radius // reach)
    extent = float(np.max(np.linalg.norm(window.points, axis=1)))
    k_size = float(np.linalg.norm(k.as_array()))
    w_max = weighted_l1(q) + 2.0 * (k_size + extent + reach) * weighted_l1(A)
    return w_max**2 / (epsilon * k.norm_v) * rate**steps / (1.0 - rate)


def bd1_triple(rows, cols, k: KPoint, A: FourierField, q: FourierField) -> List[Tuple[str, float, float]]:
    """Measured Schur norms of π_B qΔ⁻¹π_C, π_B(A·i∇)Δ⁻¹π_C, π_B(k·A)Δ⁻¹π_C and their bounds."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1, 2)
    lattice = q.lattice
    denominators = _denominators(cols, k, lattice)
    diff = _differences(rows, cols)
    a_diff = A.at(diff)
    col_points = lattice.vec(cols)
    q_term = q.at(diff) / denominators[None, :]
    grad_term = -np.einsum("rci,ci->rc", a_diff, col_points) / denominators[None, :]
    k_term = np.einsum("rci,i->rc", a_diff, k.as_array()) / denominators[None, :]
    inv_sup = float(np.max(1.0 / np.abs(denominators))) if len(cols) else 0.0
    c_sup = float(np.max(np.linalg.norm(col_points, axis=1) / np.abs(denominators))) if len(cols) else 0.0
    a_norm = weighted_l1(A)
    return [
        ("q_delta_inv", schur_norm(q_term), weighted_l1(q) * inv_sup),
        ("a_grad_delta_inv", schur_norm(grad_term), a_norm * c_sup),
        ("k_a_delta_inv", schur_norm(k_term), a_norm * float(np.linalg.norm(k.as_array())) * inv_sup),
    ]


def dump_matrix(op: TruncatedOperator, path: Path) -> Path:
    """Row-major CSV of (b_row, b_col, re, im)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row_n1", "row_n2", "col_n1", "col_n2", "re", "im"])
        for i, row in enumerate(op.rows):
            for j, col in enumerate(op.cols):
                value = op.entries[i, j]
                writer.writerow([int(row[0]), int(row[1]), int(col[0]), int(col[1]), repr(float(value.real)), repr(float(value.imag))])
    log.info("Matrix dump written to %s", path)
    return path


__all__ = [
    "CONTRACTION_LIMIT",
    "IndexWindow",
    "make_window",
    "TruncatedOperator",
    "delta_matrix",
    "w_entries",
    "w_matrix",
    "r_entries",
    "r_matrix",
    "hk_matrix",
    "schur_norm",
    "sigma_norm",
    "sigma_min",
    "rss_bound",
    "decay_certificate",
    "RggInverse",
    "invert_rgg",
    "neumann_partial_sums",
    "tail_budget",
    "bd1_triple",
    "dump_matrix",
]
