from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as poly
from scipy.spatial.distance import pdist

from asymptotics import beta2_10, handle_r_term, x_coords
from defining_equations import ReducedSystem, f_handle, f_regular
from fermi_errors import FermiError, NewtonDiverged, OracleMismatch, RegionExit, RegionViolation
from freecurve import KPoint, in_tube, line_intersection, partner, sign, theta, z_coordinate
from lattice_fourier import FermiModel, Label
from morse_normal_form import DEFAULT_DEGREE, MorseResult, estimate_bounds, morse_solve, taylor_coefficients
from operator_core import IndexWindow, make_window

log = logging.getLogger("curve_analysis")

_DERIVATIVE_STEP = 1e-6
_DERIVATIVE_LIMIT = 0.1
_ORACLE_RELATIVE = 1e-6
_ORACLE_ABSOLUTE = 1e-12


# ----------------------------
# Regular sheet tracer
# ----------------------------
@dataclass
class SheetPoint:
    y: complex
    eta: complex
    nu: int
    residual: float
    newton_iters: int
    status: str = "converged"
    reason: str = ""
    derivative: complex = 1.0 + 0.0j
    r_value: complex = 0.0j
    residual_history: List[float] = field(default_factory=list)

    @property
    def k(self) -> KPoint:
        return KPoint(self.eta, self.y)

    @property
    def eta_deviation(self) -> float:
        return abs(self.eta + 1j * sign(self.nu) * self.y)


def default_split_radius(model: FermiModel) -> float:
    """Radius whose quarter and half bound the near index sets G'_1 and G'_3."""
    return model.params.window_radius


def regular_window(model: FermiModel, window_radius: Optional[float] = None) -> IndexWindow:
    return make_window(model.lattice, window_radius or model.params.window_radius, [(0, 0)])


def admissibility(model: FermiModel, y: complex, nu: int, window: IndexWindow) -> str:
    """Empty when y lies in the admissible set; otherwise the violated condition."""
    rho = model.params.rho
    eps = model.params.epsilon
    if not 8 * abs(y) > rho:
        return f"8|y|={8 * abs(y):.4g} does not exceed rho={rho:.4g}"
    labels = window.all_points[np.any(window.all_points != 0, axis=1)]
    if len(labels):
        gaps = np.abs(y + sign(nu) * theta(nu, model.lattice.vec(labels)))
        worst = int(np.argmin(gaps))
        if gaps[worst] <= eps:
            label = tuple(int(x) for x in labels[worst])
            return f"|y+(-1)^nu theta_nu(b)|={gaps[worst]:.4g} <= epsilon at b={label}"
    return ""


def _sheet_function(model: FermiModel, window: IndexWindow, nu: int, y: complex):
    def evaluate(k1: complex) -> complex:
        k = KPoint(k1, y)
        z = z_coordinate(k, nu, (0.0, 0.0))
        return f_regular(k, window, model.A, model.q, model.params.epsilon) / z

    return evaluate


def _derivative(func, k1: complex) -> complex:
    h = _DERIVATIVE_STEP * max(1.0, abs(k1))
    return (func(k1 + h) - func(k1 - h)) / (2 * h)


def solve_sheet_point(
    model: FermiModel,
    y: complex,
    nu: int,
    window: IndexWindow,
    beta: complex,
    tol: float = 1e-12,
    max_iter: int = 30,
) -> SheetPoint:
    """Newton on k1 ↦ F(k1, y) from the affine seed −β_2^{(1,0)} − i(−1)^ν y."""
    y = complex(y)
    reason = admissibility(model, y, nu, window)
    seed = -beta - 1j * sign(nu) * y
    if reason:
        return SheetPoint(y, seed, nu, float("inf"), 0, status="skipped", reason=reason)
    func = _sheet_function(model, window, nu, y)
    k1 = seed
    history: List[float] = []
    try:
        for iteration in range(max_iter + 1):
            value = func(k1)
            history.append(abs(value))
            log.debug("sheet y=%s iter %d |F|=%.3e", y, iteration, abs(value))
            if abs(value) <= tol * max(1.0, abs(k1)):
                break
            if iteration == max_iter:
                raise NewtonDiverged(f"no convergence at y={y}", last_iterate=k1, residual=abs(value))
            step = value / _derivative(func, k1)
            k1 = k1 - step
            if not in_tube(np.zeros(2), nu, KPoint(k1, y), model.params.epsilon):
                raise RegionExit(f"iterate left T_nu(0) at y={y}", last_iterate=k1, residual=abs(value))
    except NewtonDiverged as exc:
        return SheetPoint(y, exc.last_iterate, nu, exc.residual, max_iter, status="diverged", reason=str(exc), residual_history=history)
    except RegionExit as exc:
        return SheetPoint(y, exc.last_iterate, nu, exc.residual, len(history), status="region_exit", reason=str(exc), residual_history=history)
    except FermiError as exc:
        return SheetPoint(y, k1, nu, float("inf"), len(history), status="region_exit", reason=str(exc), residual_history=history)
    point = SheetPoint(
        y=y,
        eta=k1,
        nu=nu,
        residual=history[-1],
        newton_iters=len(history) - 1,
        derivative=_derivative(func, k1),
        r_value=k1 + beta + 1j * sign(nu) * y,
        residual_history=history,
    )
    log.info("Sheet point y=%s solved in %d steps (residual %.2e)", y, point.newton_iters, point.residual)
    return point


def trace_sheet(
    model: FermiModel,
    y_samples: Sequence[complex],
    nu: int,
    window_radius: Optional[float] = None,
    split_radius: Optional[float] = None,
    tol: float = 1e-12,
) -> List[SheetPoint]:
    window = regular_window(model, window_radius)
    beta = beta2_10(model.lattice, model.A, split_radius or default_split_radius(model), nu)
    return [solve_sheet_point(model, y, nu, window, beta, tol) for y in y_samples]


def tune_rho(
    model: FermiModel,
    nu: int,
    window_radius: Optional[float] = None,
    samples: int = 8,
    max_doublings: int = 12,
) -> FermiModel:
    """Double ρ until |∂F/∂k1 − 1| < 0.1 at admissible samples on |y| = ρ."""
    window = regular_window(model, window_radius)
    beta = beta2_10(model.lattice, model.A, default_split_radius(model), nu)
    current = model
    for _ in range(max_doublings + 1):
        rho = current.params.rho
        worst = 0.0
        tested = 0
        for angle in 2 * np.pi * (np.arange(samples) + 0.5) / samples:
            y = rho * np.exp(1j * angle)
            if admissibility(current, y, nu, window):
                continue
            func = _sheet_function(current, window, nu, y)
            try:
                worst = max(worst, abs(_derivative(func, -beta - 1j * sign(nu) * y) - 1.0))
            except FermiError:
                worst = float("inf")
            tested += 1
        if tested and worst < _DERIVATIVE_LIMIT:
            log.info("rho tuned to %.4g (max |dF/dk1 - 1| = %.3e)", rho, worst)
            return current
        current = current.with_params(rho=2 * rho)
    raise NewtonDiverged(f"rho auto-tuning gave up at rho={current.params.rho:.4g}", last_iterate=current.params.rho)


@dataclass
class InjectivityReport:
    distinct: bool
    min_distance: float
    max_derivative_deviation: float
    derivative_bound: float
    fitted_constant: float


def injectivity_check(sheet: Sequence[SheetPoint], rho: float, tol: float = 1e-9) -> InjectivityReport:
    solved = [point for point in sheet if point.status == "converged"]
    bound = 1.0 / (7 * 3**4)
    if not solved:
        return InjectivityReport(True, float("inf"), 0.0, bound, 0.0)
    ks = np.array([[p.eta.real, p.eta.imag, p.y.real, p.y.imag] for p in solved])
    distances = pdist(ks) if len(ks) > 1 else np.array([np.inf])
    deviation = max(abs(p.derivative - 1.0) for p in solved)
    return InjectivityReport(
        distinct=bool(np.min(distances) > tol),
        min_distance=float(np.min(distances)),
        max_derivative_deviation=float(deviation),
        derivative_bound=bound,
        fitted_constant=max(0.0, (deviation - bound) * rho),
    )


# ----------------------------
# Handle coordinates
# ----------------------------
class HandleCoordinates:
    """x-coordinates of the handle at N_ν(0) ∩ N_ν'(p) and their inverse.

    For ν = 1 the partner p is d; for ν = 2 it is −d, so both charts
    describe the same handle up to translation by d.
    """

    def __init__(self, model: FermiModel, d: Label, nu: int, window_radius: Optional[float] = None) -> None:
        self.model = model
        self.d = (int(d[0]), int(d[1]))
        self.nu = nu
        self.partner = self.d if nu == 1 else (-self.d[0], -self.d[1])
        lattice = model.lattice
        self.window = make_window(lattice, window_radius or model.params.window_radius, [(0, 0), self.partner])
        point = lattice.vec(self.partner)
        self.center = line_intersection(np.zeros(2), point) if nu == 1 else line_intersection(point, np.zeros(2))
        s = sign(nu)
        self.offset = np.array([0.0, point[0] - 1j * s * point[1]])
        self.inverse_jacobian = 0.5 * np.array([[1.0, 1.0], [-1j * s, 1j * s]])

    def system(self, k: KPoint) -> ReducedSystem:
        return ReducedSystem(self.window, k, self.model.A, self.model.q, self.model.params.epsilon)

    def x_of_k(self, k: KPoint, system: Optional[ReducedSystem] = None) -> np.ndarray:
        system = system or self.system(k)
        return np.array(x_coords(system, self.nu, self.partner))

    def k_of_x(self, x: Sequence[complex], tol: float = 1e-14, max_iter: int = 50) -> Tuple[KPoint, ReducedSystem]:
        """Chord Newton with the free Jacobian; returns the point and its reduced system."""
        target = np.asarray(x, dtype=complex).reshape(2)
        k = self.inverse_jacobian @ (target - self.offset)
        scale = max(1.0, float(np.linalg.norm(k)))
        gap = np.inf
        for _ in range(max_iter):
            point = KPoint.from_array(k)
            system = self.system(point)
            gap_vector = self.x_of_k(point, system) - target
            gap = float(np.max(np.abs(gap_vector)))
            if gap <= tol * scale:
                return point, system
            k = k - self.inverse_jacobian @ gap_vector
        raise NewtonDiverged(f"x -> k inversion stalled at gap {gap:.3e}", last_iterate=k, residual=gap)

    def r_of_x(self, x: Sequence[complex]) -> complex:
        _, system = self.k_of_x(x)
        return handle_r_term(system, self.nu, self.partner).r

    def z_pair(self, k: KPoint) -> Tuple[complex, complex]:
        lattice = self.model.lattice
        return (
            complex(z_coordinate(k, self.nu, (0.0, 0.0))),
            complex(z_coordinate(k, partner(self.nu), lattice.vec(self.partner))),
        )

    def sampled(self, func):
        """Vectorize a scalar function of x over broadcast arrays."""

        def evaluate(x1, x2):
            x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=complex), np.asarray(x2, dtype=complex))
            out = np.empty(x1.shape, dtype=complex)
            for index in np.ndindex(x1.shape):
                out[index] = func((x1[index], x2[index]))
            return out

        return evaluate


# ----------------------------
# Handle analysis
# ----------------------------
@dataclass
class ChartResult:
    nu: int
    coords: HandleCoordinates
    morse: MorseResult
    c: complex
    r_coefficients: np.ndarray
    center: KPoint
    free_center: KPoint
    jacobian: np.ndarray

    def phi(self, z: Sequence[complex]) -> KPoint:
        x1, x2 = self.morse.phi(complex(z[0]), complex(z[1]))
        return self.coords.k_of_x((complex(x1), complex(x2)))[0]


@dataclass
class HandleRecord:
    d: Label
    t_d: complex
    c: complex
    center1: KPoint
    center2: KPoint
    free_center1: KPoint
    free_center2: KPoint
    center_deviation: float
    jac_deviation: float
    symmetry_residual: float
    oracle_t: complex
    oracle_gap: float
    delta: float
    c1: complex
    c2: complex
    grad_residual: float
    dphi_deviation: float
    composition_residual: float
    tail_budget: float
    chart: Optional[ChartResult] = None
    mirror: Optional[ChartResult] = None

    @property
    def abs_d(self) -> float:
        return float(np.linalg.norm(self.chart.coords.model.lattice.vec(self.d))) if self.chart else float("nan")


def morse_domain(model: FermiModel) -> float:
    return min(0.5 * model.params.epsilon, 0.9)


def _chart(model: FermiModel, d: Label, nu: int, degree: int, window_radius: Optional[float]) -> ChartResult:
    coords = HandleCoordinates(model, d, nu, window_radius)
    delta = morse_domain(model)
    r_coefficients = taylor_coefficients(coords.sampled(coords.r_of_x), delta, degree)

    def f_poly(x1, x2):
        return x1 * x2 + poly.polyval2d(x1, x2, r_coefficients)

    a_bound, b_bound = estimate_bounds(f_poly, delta, degree)
    morse = morse_solve(f_poly, delta, a_bound, b_bound, degree=degree)
    xi = morse.xi
    c = xi[0] * xi[1] + coords.r_of_x(xi)
    center, _ = coords.k_of_x(xi)
    jacobian = _x_jacobian(coords, center)
    return ChartResult(nu, coords, morse, complex(c), r_coefficients, center, coords.center, jacobian)


def _x_jacobian(coords: HandleCoordinates, k: KPoint, step: float = 1e-4) -> np.ndarray:
    base = k.as_array()
    columns = []
    for axis in range(2):
        unit = np.zeros(2, dtype=complex)
        unit[axis] = step
        plus = coords.x_of_k(KPoint.from_array(base + unit))
        minus = coords.x_of_k(KPoint.from_array(base - unit))
        columns.append((plus - minus) / (2 * step))
    return np.column_stack(columns)


def product_fit_oracle(chart: ChartResult, d: Label, radius_fraction: float = 0.25, points: int = 5) -> complex:
    """Critical value of x1x2 + (quadratic least-squares fit of f_handle/(z1z2) − x1x2)."""
    coords = chart.coords
    model = coords.model
    reach = radius_fraction * morse_domain(model)
    ring = reach * np.exp(2j * np.pi * np.arange(points) / points)
    samples = [(0j, 0j)] + [(a, b) for a in ring for b in ring[::2]] + [(a, 0j) for a in ring] + [(0j, b) for b in ring]
    rows, values = [], []
    for x in samples:
        k, _ = coords.k_of_x(x)
        x1, x2 = coords.x_of_k(k)
        z1, z2 = coords.z_pair(k)
        value = f_handle(k, coords.partner, coords.window, model.A, model.q, model.params.epsilon) / (z1 * z2)
        rows.append([1.0, x1, x2, x1 * x1, x1 * x2, x2 * x2])
        values.append(value - x1 * x2)
    fit = np.linalg.lstsq(np.array(rows, dtype=complex), np.array(values, dtype=complex), rcond=None)[0]
    c0, c1, c2, c11, c12, c22 = fit
    hessian = np.array([[2 * c11, 1 + c12], [1 + c12, 2 * c22]])
    critical = np.linalg.solve(hessian, -np.array([c1, c2]))
    x1, x2 = critical
    return complex(x1 * x2 + c0 + c1 * x1 + c2 * x2 + c11 * x1 * x1 + c12 * x1 * x2 + c22 * x2 * x2)


def analyze_handle(
    model: FermiModel,
    d: Label,
    degree: int = DEFAULT_DEGREE,
    window_radius: Optional[float] = None,
    symmetry_samples: int = 4,
) -> HandleRecord:
    """Normal form z1z2 = t_d of the handle about N_1(0) ∩ N_2(d), with the ν = 2 chart as mirror."""
    d = (int(d[0]), int(d[1]))
    size = float(np.linalg.norm(model.lattice.vec(d)))
    if not 2 * size > model.params.rho:
        raise RegionViolation(f"below rho: 2|d|={2 * size:.4g} does not exceed rho={model.params.rho:.4g}")
    chart = _chart(model, d, 1, degree, window_radius)
    mirror = _chart(model, d, 2, degree, window_radius)

    oracle_t = -product_fit_oracle(chart, d)
    t_d = -chart.c
    gap = abs(oracle_t - t_d)
    if gap > max(_ORACLE_RELATIVE * abs(t_d), _ORACLE_ABSOLUTE):
        raise OracleMismatch(f"handle d={d}: Morse t_d={t_d:.6e} and product fit {oracle_t:.6e} differ by {gap:.3e}")

    shift = model.lattice.vec(d)
    radius = 0.5 * min(chart.morse.domain_radius, mirror.morse.domain_radius)
    symmetry = 0.0
    for angle in 2 * np.pi * np.arange(symmetry_samples) / max(symmetry_samples, 1):
        z = (radius * np.exp(1j * angle), 0.5 * radius * np.exp(-2j * angle))
        first = chart.phi(z).as_array()
        second = mirror.phi((z[1], z[0])).as_array()
        symmetry = max(symmetry, float(np.max(np.abs(first - second + shift))))

    free_jacobian = np.array([[1.0, 1j * sign(1)], [1.0, -1j * sign(1)]])
    dk_dx = np.linalg.inv(chart.jacobian)
    dphi = chart.morse.phi.jacobian(0j, 0j)
    jac_deviation = float(np.linalg.norm(free_jacobian @ dk_dx @ dphi - np.eye(2), ord=2))
    center_deviation = float(np.max(np.abs(chart.center.as_array() - chart.free_center.as_array())))

    center_system = chart.coords.system(chart.center)
    term = handle_r_term(center_system, 1, d)
    tail = center_system.tail_budget
    record = HandleRecord(
        d=d,
        t_d=complex(t_d),
        c=chart.c,
        center1=chart.center,
        center2=mirror.center,
        free_center1=chart.free_center,
        free_center2=mirror.free_center,
        center_deviation=center_deviation,
        jac_deviation=jac_deviation,
        symmetry_residual=symmetry,
        oracle_t=oracle_t,
        oracle_gap=gap,
        delta=morse_domain(model),
        c1=term.c1,
        c2=term.c2,
        grad_residual=chart.morse.grad_residual,
        dphi_deviation=chart.morse.dphi_deviation,
        composition_residual=chart.morse.composition_residual,
        tail_budget=tail,
        chart=chart,
        mirror=mirror,
    )
    log.info("Handle d=%s: t_d=%s |t_d||d|^4=%.4g symmetry=%.2e", d, t_d, abs(t_d) * size**4, symmetry)
    return record


def handle_curve_points(record: HandleRecord, samples: int = 50) -> List[KPoint]:
    """Points of {z1 z2 = t_d} inside the chart, mapped back to momentum space."""
    if record.chart is None:
        raise ValueError("handle_curve_points needs a record produced by analyze_handle.")
    chart = record.chart
    top = 0.9 * chart.morse.domain_radius
    t = record.t_d
    angles_count = max(2, int(np.sqrt(samples)))
    magnitudes_count = max(1, samples // angles_count)
    points: List[KPoint] = []
    if abs(t) == 0.0:
        magnitudes = np.linspace(top / magnitudes_count, top, magnitudes_count)
        grid = [(m * np.exp(1j * a)) for m in magnitudes for a in 2 * np.pi * np.arange(angles_count) / angles_count]
        pairs = [(z, 0j) for z in grid[: (samples + 1) // 2]] + [(0j, z) for z in grid[: samples // 2]]
    else:
        low = max(abs(t) / top, 1e-300)
        if low >= top:
            raise RegionViolation(f"|t_d|={abs(t):.3e} leaves no room inside the chart of radius {top:.3e}")
        magnitudes = np.geomspace(low, top, magnitudes_count)
        pairs = []
        for m in magnitudes:
            for a in 2 * np.pi * np.arange(angles_count) / angles_count:
                z1 = m * np.exp(1j * a)
                pairs.append((z1, t / z1))
        pairs = pairs[:samples]
    for z in pairs:
        points.append(chart.phi(z))
    return points


__all__ = [
    "SheetPoint",
    "default_split_radius",
    "regular_window",
    "admissibility",
    "solve_sheet_point",
    "trace_sheet",
    "tune_rho",
    "InjectivityReport",
    "injectivity_check",
    "HandleCoordinates",
    "ChartResult",
    "HandleRecord",
    "morse_domain",
    "product_fit_oracle",
    "analyze_handle",
    "handle_curve_points",
]
