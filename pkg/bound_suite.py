from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from asymptotics import (
    alpha_constants,
    alpha_split,
    beta2_10,
    convolution_decay_check,
    fd_derivative_check,
    frame_field,
    loglog_slope,
    x_coords,
)
from curve_analysis import default_split_radius
from defining_equations import ReducedSystem
from fermi_errors import FermiError, RegionViolation, SmallnessViolated
from freecurve import (
    KPoint,
    active_tubes,
    exceptional_b,
    in_tube,
    line_intersection,
    n_full,
    n_line,
    order_relations,
    partner,
    sign,
    z_coordinate,
)
from lattice_fourier import FermiModel, FourierField, Label, weighted_l1
from operator_core import (
    CONTRACTION_LIMIT,
    IndexWindow,
    TruncatedOperator,
    bd1_triple,
    decay_certificate,
    make_window,
    neumann_partial_sums,
    schur_norm,
    sigma_norm,
)

log = logging.getLogger("bound_suite")

_RELATIVE_SLACK = 1e-12
_MAX_RESAMPLE = 200
DECAY_POWERS = (1, 2, 3)
DECAY_BETA = 2.0
RATE_SLACK = 0.15
PHI_DECAY_POWER = 2.9
RAY_SCALES = (2.0, 4.0, 8.0)
FAMILY_MULTIPLES = (1, 2, 3)
NEUMANN_TERMS = 8


@dataclass(frozen=True)
class BoundRow:
    bound: str
    region: str
    measured: float
    certified: float
    strict: bool = False

    @property
    def margin(self) -> float:
        return self.certified - self.measured

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.measured):
            return False
        if self.strict:
            return self.measured < self.certified
        return self.measured <= self.certified * (1.0 + _RELATIVE_SLACK)


def _failure(bound: str, region: str, exc: Exception) -> BoundRow:
    log.warning("Bound %s at %s could not be measured: %s", bound, region, exc)
    return BoundRow(bound, f"{region} ({type(exc).__name__})", float("inf"), 0.0)


def _region(k: KPoint) -> str:
    return f"k=({k.k1:.6g}, {k.k2:.6g})"


def _slope_row(name: str, region: str, sizes: Sequence[float], values: Sequence[float], power: float) -> BoundRow:
    """Fitted log-log slope of values against sizes; it must fall at least like sizes^−power."""
    pairs = [(s, v) for s, v in zip(sizes, values) if v > 0.0]
    if not pairs:
        return BoundRow(name, f"{region} (vanishes)", 0.0, 0.0)
    if len(pairs) < 2:
        return _failure(name, region, RegionViolation("a single nonzero value leaves no slope to fit"))
    return BoundRow(name, region, loglog_slope(*zip(*pairs)), -power + RATE_SLACK)


def _ratio_row(name: str, region: str, near: float, far: float, scale: float, power: float) -> BoundRow:
    """Growth of the fitted constant of a C/x^power bound when x grows by ``scale``."""
    if near == 0.0:
        return BoundRow(name, region, far, 0.0)
    return BoundRow(name, region, far * scale**power / near, scale**RATE_SLACK)


def _ray_point(model: FermiModel, k: KPoint, nu: int, scale: float) -> Optional[KPoint]:
    """k moved along N_ν(0) to |v| ≈ scale·|v(k)| with w kept, avoiding every other tube."""
    eps = model.params.epsilon
    for attempt in range(8):
        delta = (scale - 1.0) * k.norm_v + 0.125 * attempt
        point = KPoint(k.k1 - 1j * sign(nu) * delta, k.k2 + delta)
        tubes = active_tubes(point, model.lattice, eps, model.params.window_radius + point.norm_u + point.norm_v)
        if {tube.b for tube in tubes} == {(0, 0)}:
            return point
    return None


def _cosine_field(model: FermiModel, label: Label = (1, 0)) -> FourierField:
    minus = (-int(label[0]), -int(label[1]))
    return FourierField.from_mapping(model.lattice, {tuple(label): 1.0, minus: 1.0})


# ----------------------------
# Sampling
# ----------------------------
def sample_regular_points(model: FermiModel, count: int, rng: np.random.Generator, nu: int = 1) -> List[KPoint]:
    """Points of T_ν(0) lying in no other tube, with |v| in [2ρ, 4ρ] and above 4Λ."""
    eps = model.params.epsilon
    low = max(2.0 * model.params.rho, 4.0 * model.lattice.lam)
    points: List[KPoint] = []
    for _ in range(count * _MAX_RESAMPLE):
        if len(points) == count:
            break
        y = rng.uniform(low, 2.0 * low)
        offset = 0.5 * eps * np.sqrt(rng.uniform()) * np.exp(2j * np.pi * rng.uniform())
        k = KPoint(-1j * sign(nu) * y + offset, y)
        tubes = active_tubes(k, model.lattice, eps, model.params.window_radius + k.norm_u + k.norm_v)
        if {tube.b for tube in tubes} == {(0, 0)}:
            points.append(k)
    if len(points) < count:
        log.warning("Only %d of %d regular samples found", len(points), count)
    return points


def sample_handle_points(model: FermiModel, d: Label, count: int, rng: np.random.Generator) -> List[KPoint]:
    """Perturbations of N_1(0) ∩ N_2(d) that stay in T_1(0) ∩ T_2(d)."""
    eps = model.params.epsilon
    point = model.lattice.vec(d)
    center = line_intersection(np.zeros(2), point).as_array()
    points: List[KPoint] = []
    for _ in range(count * _MAX_RESAMPLE):
        if len(points) == count:
            break
        shift = 0.125 * eps * rng.uniform(-1, 1, 2) * np.exp(2j * np.pi * rng.uniform(size=2))
        k = KPoint.from_array(center + shift)
        if in_tube(np.zeros(2), 1, k, eps) and in_tube(point, 2, k, eps):
            points.append(k)
    return points


# ----------------------------
# Rows per sample
# ----------------------------
def operator_rows(model: FermiModel, window: IndexWindow, k: KPoint) -> List[BoundRow]:
    """Free-curve, truncated-operator and inverse bounds at one regular point."""
    region = _region(k)
    eps = model.params.epsilon
    lam = model.lattice.lam
    rows: List[BoundRow] = []

    labels = window.all_points
    points = model.lattice.vec(labels)
    values = np.abs(n_full(points, k))
    in_tubes = np.abs(n_line(points, 1, k)) < eps
    in_tubes |= np.abs(n_line(points, 2, k)) < eps
    outside = values[~in_tubes]
    if len(outside):
        rows.append(BoundRow("tube_dichotomy_out", region, float(np.max(eps * k.norm_v / outside)), 1.0))
    inside = values[in_tubes]
    if len(inside):
        rows.append(BoundRow("tube_dichotomy_in", region, float(np.max(inside)), eps * (2 * k.norm_v + eps)))

    try:
        special = exceptional_b(k, model.lattice)
        keep = np.any(labels != 0, axis=1)
        if special is not None:
            keep &= np.any(labels != np.asarray(special), axis=1)
        lower = 0.5 * lam * (k.norm_v + np.linalg.norm(points[keep] + k.u, axis=1))
        rows.append(BoundRow("Nb_lower", region, float(np.max(lower / values[keep])), 1.0))
    except FermiError as exc:
        rows.append(_failure("Nb_lower", region, exc))

    z = abs(z_coordinate(k, 1, (0.0, 0.0)))
    rows.append(BoundRow("order_z_over_v", region, z / k.norm_v, 3.0))
    rows.append(BoundRow("order_v_over_z", region, k.norm_v / z, 1.0))
    rows.append(BoundRow("order_v_over_k2", region, k.norm_v / abs(k.k2), 8.0))

    gprime = window.gprime
    for name, measured, bound in bd1_triple(gprime, gprime, k, model.A, model.q):
        rows.append(BoundRow(f"bd1_{name}", region, measured, bound))

    try:
        system = ReducedSystem(window, k, model.A, model.q, eps)
    except FermiError as exc:
        rows.append(_failure("bdR", region, exc))
        return rows
    inverse = system.inverse
    rows.append(BoundRow("bdR", region, inverse.measured_r, inverse.rss_bound))
    rows.append(BoundRow("invR_contraction", region, inverse.rss_bound, CONTRACTION_LIMIT, strict=True))
    rows.append(BoundRow("invR", region, inverse.measured_inv, 18.0 * inverse.measured_r))

    t_matrix = np.eye(len(gprime)) - inverse.matrix
    distance = np.linalg.norm(model.lattice.vec(gprime[:, None, :] - gprime[None, :, :]), axis=-1)
    power = np.eye(len(gprime), dtype=complex)
    for m in range(1, max(DECAY_POWERS) + 1):
        power = power @ t_matrix
        if m in DECAY_POWERS:
            measured = float(np.max(np.abs(power) * (1.0 + distance**DECAY_BETA))) if power.size else 0.0
            rows.append(BoundRow(f"decayT_m{m}", region, measured, decay_certificate(m, DECAY_BETA, model.lattice)))

    operator = TruncatedOperator(gprime, gprime, t_matrix, model.lattice)
    square = TruncatedOperator(gprime, gprime, t_matrix @ t_matrix, model.lattice)
    sigma = sigma_norm(operator, DECAY_BETA)
    rows.append(BoundRow("sigma_submultiplicative", region, sigma_norm(square, DECAY_BETA), sigma * sigma))
    rows.extend(sigma_rows(operator, region))
    rows.extend(neumann_rows(t_matrix, inverse.inverse, region))
    return rows


def sigma_rows(op: TruncatedOperator, region: str, beta: float = DECAY_BETA) -> List[BoundRow]:
    """‖T‖ ≤ ‖T‖_{σ≡1} ≤ ‖T‖_σ, |T_bc|σ(|b−c|) ≤ ‖T‖_σ and, for a contraction, ‖(I−T)⁻¹‖_σ ≤ 1/(1−‖T‖_σ)."""
    if not op.entries.size:
        return []
    sigma = sigma_norm(op, beta)
    flat = sigma_norm(op, 0.0)
    rows = [
        BoundRow("sigma_opnorm", region, float(np.linalg.norm(op.entries, ord=2)), flat),
        BoundRow("sigma_one", region, flat, sigma),
    ]
    distance = np.linalg.norm(op.lattice.vec(op.rows[:, None, :] - op.cols[None, :, :]), axis=-1)
    weighted = np.abs(op.entries) * (1.0 + distance) ** beta
    rows.append(BoundRow("sigma_entrywise", region, float(weighted.max()), sigma))
    if sigma < 1.0 and op.entries.shape[0] == op.entries.shape[1]:
        inverse = np.linalg.inv(np.eye(op.entries.shape[0]) - op.entries)
        inverse_op = TruncatedOperator(op.rows, op.cols, inverse, op.lattice)
        rows.append(BoundRow("sigma_inverse", region, sigma_norm(inverse_op, beta), 1.0 / (1.0 - sigma)))
    return rows


def neumann_rows(t_matrix: np.ndarray, inverse: np.ndarray, region: str, terms: int = NEUMANN_TERMS) -> List[BoundRow]:
    """Σ_{j<J} T^j against (I − T)⁻¹, with the geometric tail rate^J/(1 − rate) in the σ≡1 norm."""
    rate = schur_norm(t_matrix)
    if not t_matrix.size or rate >= 1.0:
        return []
    sums = neumann_partial_sums(-t_matrix, terms)
    roundoff = 1e3 * np.finfo(float).eps * schur_norm(inverse)
    rows = []
    for count in sorted({1, max(1, terms // 2), terms}):
        measured = schur_norm(sums[count - 1] - inverse)
        rows.append(BoundRow(f"neumann_J{count}", region, measured, rate**count / (1.0 - rate) + roundoff))
    return rows


def asymptotic_rows(model: FermiModel, window: IndexWindow, k: KPoint, split_radius: float, nu: int = 1) -> List[BoundRow]:
    """α^{(1,j)} constants, the α identities and the second-order derivative constants."""
    region = _region(k)
    eps = model.params.epsilon
    lam = model.lattice.lam
    field = frame_field(model.A, nu)
    rows: List[BoundRow] = []
    try:
        system = ReducedSystem(window, k, model.A, model.q, eps)
        pieces = alpha_split(system, field, field, nu, (0, 0), split_radius)
    except FermiError as exc:
        return [_failure("alpha", region, exc)]
    c0, c1, c2 = alpha_constants(field, field, model.A, nu, eps)
    rows.append(BoundRow("alpha10", region, abs(pieces.a10), c0))
    rows.append(BoundRow("alpha11", region, abs(pieces.a11), c1))
    rows.append(BoundRow("alpha12", region, abs(pieces.a12), c2))

    whole = system.phi(field, field, (0, 0), (0, 0))
    scale = max(abs(whole), 1e-300)
    rows.append(BoundRow("alpha_sum_identity", region, abs(pieces.total - whole) / scale, 1e-9))
    zscale = max(abs(pieces.z * pieces.a1), 1e-300)
    rows.append(BoundRow("alpha_refined_identity", region, abs(pieces.z * pieces.a1 - pieces.refined) / zscale, 1e-9))

    norms = weighted_l1(field) ** 2
    gap = 2 * abs(pieces.z) - split_radius
    if norms == 0.0 or gap <= 0:
        return rows

    def alpha1(point: KPoint) -> complex:
        return alpha_split(ReducedSystem(window, point, model.A, model.q, eps), field, field, nu, (0, 0), split_radius).a1

    for (n, m), constant, power in (((1, 0), 13.0, 2), ((0, 1), 13.0, 2), ((1, 1), 65.0, 3)):
        name = f"der2_{n}{m}"
        try:
            report = fd_derivative_check(alpha1, k, n, m, step=1e-3 * eps)
        except FermiError as exc:
            rows.append(_failure(name, region, exc))
            continue
        rows.append(BoundRow(name, region, abs(report.value) * gap * lam**power / norms, constant))
    return rows


def decay_rows(model: FermiModel, window: IndexWindow, k: KPoint, split_radius: float, nu: int = 1) -> List[BoundRow]:
    """Decay of α^{(1)}, α^{(2)} and of the first derivatives of Φ_{0,0} as k runs out along N_ν(0)."""
    region = _region(k)
    eps = model.params.epsilon
    field = frame_field(model.A, nu)
    cosine = _cosine_field(model)

    def phi(point: KPoint) -> complex:
        return ReducedSystem(window, point, model.A, model.q, eps).phi(cosine, cosine, (0, 0), (0, 0))

    sizes: List[float] = []
    first: List[float] = []
    second: List[float] = []
    slopes: List[Tuple[float, float]] = []
    for scale in (1.0,) + RAY_SCALES:
        point = k if scale == 1.0 else _ray_point(model, k, nu, scale)
        if point is None:
            log.warning("No point off the other tubes at %g·|v| from %s", scale, region)
            continue
        try:
            pieces = alpha_split(ReducedSystem(window, point, model.A, model.q, eps), field, field, nu, (0, 0), split_radius)
            d1 = fd_derivative_check(phi, point, 1, 0, step=1e-3 * eps).value
            d2 = fd_derivative_check(phi, point, 0, 1, step=1e-3 * eps).value
        except FermiError as exc:
            return [_failure("alpha_decay", region, exc)]
        sizes.append(abs(pieces.z))
        first.append(abs(pieces.a1))
        second.append(abs(pieces.a2))
        slopes.append((abs(d1), abs(d2)))
    if len(sizes) < 2:
        return [_failure("alpha_decay", region, RegionViolation("fewer than two points on the ray"))]

    rows = [
        _slope_row("alpha1_decay", region, sizes, first, 1.0),
        _slope_row("alpha2_decay", region, sizes, second, 2.0),
    ]
    growth = sizes[-1] / sizes[0]
    for axis, name in enumerate(("der_phi_10", "der_phi_01")):
        rows.append(_ratio_row(name, region, slopes[0][axis], slopes[-1][axis], growth, 1.0))
    return rows


def handle_rows(model: FermiModel, d: Label, k: KPoint) -> List[BoundRow]:
    """|x_j − w_j| < ε/8 for the handle coordinates at a point of T_1(0) ∩ T_2(d)."""
    region = f"d={tuple(d)} {_region(k)}"
    eps = model.params.epsilon
    window = make_window(model.lattice, model.params.window_radius, [(0, 0), tuple(d)])
    try:
        system = ReducedSystem(window, k, model.A, model.q, eps)
        x1, x2 = x_coords(system, 1, d)
    except FermiError as exc:
        return [_failure("x_minus_w", region, exc)]
    w1 = n_line(np.zeros(2), 1, k)
    w2 = n_line(model.lattice.vec(d), partner(1), k)
    rows = [BoundRow("x_minus_w", region, float(max(abs(x1 - w1), abs(x2 - w2))), eps / 8.0, strict=True)]
    try:
        report = order_relations(k, 1, model.lattice.vec(d))
    except FermiError as exc:
        rows.append(_failure("order_d_over_z2", region, exc))
        return rows
    ratio = report.ratios["d_over_z2"]
    rows.append(BoundRow("order_d_over_z2", region, ratio, 2.0))
    rows.append(BoundRow("order_z2_over_d", region, 1.0 / ratio, 2.0))
    return rows


def handle_family_rows(model: FermiModel, d: Label, k: KPoint) -> List[BoundRow]:
    """Φ_{0,nd} and ∂Φ_{0,nd}/∂k1 at the same offset from the crossings of N_1(0) and N_2(nd).

    The n = 1 value times |z_{2,d}|^2.9 (resp. |d|^{1+β}) is the constant
    the larger multiples must stay under.
    """
    region = f"d={tuple(d)} {_region(k)}"
    eps = model.params.epsilon
    lattice = model.lattice
    offset = k.as_array() - line_intersection(np.zeros(2), lattice.vec(d)).as_array()
    values: List[float] = []
    slopes: List[float] = []
    for n in FAMILY_MULTIPLES:
        label = (n * int(d[0]), n * int(d[1]))
        point = lattice.vec(label)
        kn = KPoint.from_array(line_intersection(np.zeros(2), point).as_array() + offset)
        window = make_window(lattice, model.params.window_radius, [(0, 0), label])

        def phi(p: KPoint, window: IndexWindow = window, label: Label = label) -> complex:
            return ReducedSystem(window, p, model.A, model.q, eps).phi(model.q, model.q, (0, 0), label)

        try:
            value = abs(phi(kn))
            slope = abs(fd_derivative_check(phi, kn, 1, 0, step=1e-3 * eps).value)
        except FermiError as exc:
            log.warning("Multiple %d of d=%s skipped: %s", n, tuple(d), exc)
            continue
        values.append(value * abs(z_coordinate(kn, partner(1), point)) ** PHI_DECAY_POWER)
        slopes.append(slope * float(np.linalg.norm(point)) ** (1.0 + DECAY_BETA))
    if len(values) < 2:
        return [_failure("phi0d_decay", region, RegionViolation("fewer than two multiples of d were solvable"))]
    return [
        BoundRow("phi0d_decay", region, max(values[1:]), values[0]),
        BoundRow("der_phi0d_decay", region, max(slopes[1:]), slopes[0]),
    ]


# ----------------------------
# Suite
# ----------------------------
def global_rows(model: FermiModel, split_radius: float) -> List[BoundRow]:
    lam = model.lattice.lam
    eps = model.params.epsilon
    rows = [
        BoundRow("epsilon_range", "global", eps, lam / 6.0, strict=True),
        BoundRow("smallness", "global", model.smallness.weighted_norm, model.smallness.threshold, strict=True),
        BoundRow("rho_at_least_R", "global", model.params.radius_R, model.params.rho),
    ]
    for nu in (1, 2):
        value = beta2_10(model.lattice, model.A, split_radius, nu)
        rows.append(BoundRow(f"beta2_10_nu{nu}", "global", abs(value), eps**2 / (100.0 * lam), strict=True))
    rows.append(convolution_row(model.q))
    return rows


def convolution_row(f: FourierField, beta: float = DECAY_BETA, reach: int = 4) -> BoundRow:
    """|d|^β |f∗f(d)| ≤ 2^β ‖f‖_β ‖f‖ along the axes and the diagonal out to ``reach``."""
    labels = [label for n in range(1, reach + 1) for label in ((n, 0), (0, n), (n, n))]
    report = convolution_decay_check(f, f, labels, beta)
    certified = 2.0**beta * weighted_l1(f, beta) * weighted_l1(f)
    return BoundRow("convolution_decay", "global", report.constant, certified)


def run_bound_suite(
    model: FermiModel,
    samples: int = 10,
    seed: int = 0,
    d_list: Sequence[Label] = (),
    threads: int = 1,
    split_radius: Optional[float] = None,
    with_derivatives: bool = True,
) -> List[BoundRow]:
    """Every measurable bound at seeded sample points; rows come back in a deterministic order."""
    if not model.smallness.passed:
        raise SmallnessViolated(
            f"weighted ‖Â‖={model.smallness.weighted_norm:.4g} is not below 2ε/63={model.smallness.threshold:.4g}"
        )
    split_radius = split_radius or default_split_radius(model)
    rng = np.random.default_rng(seed)
    regular = sample_regular_points(model, samples, rng)
    handles = [(tuple(int(x) for x in d), k) for d in d_list for k in sample_handle_points(model, d, max(1, samples // 4), rng)]
    window = make_window(model.lattice, model.params.window_radius, [(0, 0)])

    jobs: List[Callable[[], List[BoundRow]]] = []
    for k in regular:
        jobs.append(lambda k=k: operator_rows(model, window, k))
        if with_derivatives:
            jobs.append(lambda k=k: asymptotic_rows(model, window, k, split_radius))
            jobs.append(lambda k=k: decay_rows(model, window, k, split_radius))
    for d, k in handles:
        jobs.append(lambda d=d, k=k: handle_rows(model, d, k))
        if with_derivatives:
            jobs.append(lambda d=d, k=k: handle_family_rows(model, d, k))

    rows = global_rows(model, split_radius)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for chunk in pool.map(lambda job: job(), jobs):
            rows.extend(chunk)
    failed = sum(not row.passed for row in rows)
    log.info("Bound suite: %d rows, %d failed", len(rows), failed)
    return rows


__all__ = [
    "BoundRow",
    "DECAY_BETA",
    "DECAY_POWERS",
    "sample_regular_points",
    "sample_handle_points",
    "operator_rows",
    "asymptotic_rows",
    "decay_rows",
    "sigma_rows",
    "neumann_rows",
    "handle_rows",
    "handle_family_rows",
    "global_rows",
    "convolution_row",
    "run_bound_suite",
]
