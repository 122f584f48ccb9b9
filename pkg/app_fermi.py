from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from itertools import groupby
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from dotenv import load_dotenv

from asymptotics import beta2_10
from bound_suite import BoundRow, run_bound_suite
from curve_analysis import (
    HandleRecord,
    analyze_handle,
    default_split_radius,
    handle_curve_points,
    injectivity_check,
    regular_window,
    solve_sheet_point,
    tune_rho,
)
from fermi_errors import FermiError
from fermi_io import RunConfig, header_lines, load_run_config, render_document, write_csv, write_document
from freecurve import KPoint, real_slice
from lattice_fourier import FermiModel, build_lattice, is_real_field
from operator_core import hk_matrix, make_window, sigma_min, tail_budget

load_dotenv()

_LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
logging.basicConfig(level=getattr(logging, _LOG_LEVEL, logging.INFO), format="%(levelname)s: %(message)s")
log = logging.getLogger("app_fermi")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2

_BOUND_FIELDS = ["bound", "region", "measured", "certified", "margin", "passed"]


def _pool_map(func: Callable, items: Sequence, threads: int) -> List:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(func, items))


def _bound_dicts(rows: Sequence[BoundRow]) -> List[Dict[str, object]]:
    return [
        {
            "bound": row.bound,
            "region": row.region,
            "measured": row.measured,
            "certified": row.certified,
            "margin": row.margin,
            "passed": int(row.passed),
        }
        for row in rows
    ]


def _reference_tail(model: FermiModel) -> float:
    """Tail budget of the regular window at the point of N_1(0) with k2 = 2ρ."""
    y = max(2.0 * model.params.rho, 4.0 * model.lattice.lam)
    window = regular_window(model)
    try:
        return tail_budget(window, KPoint(1j * y, y), model.A, model.q, model.params.epsilon)
    except FermiError:
        return float("inf")


def _external(model: FermiModel, k: KPoint) -> Tuple[complex, complex]:
    """Undo the gauge shift so written points can be fed back to `spectrum`."""
    k1, k2 = model.to_external(k.as_array())
    return complex(k1), complex(k2)


def _report_model(model: FermiModel) -> None:
    log.info(
        "Potential: A real=%s, V real=%s, Λ=%.4g, α=%.4g",
        is_real_field(model.A),
        is_real_field(model.V),
        model.lattice.lam,
        model.lattice.alpha,
    )


# ----------------------------
# Commands
# ----------------------------
def cmd_freecurve(config: RunConfig) -> int:
    lattice = build_lattice(config.gamma1, config.gamma2)
    rows, crossings = real_slice(lattice, config.freecurve_radius, config.k2_values())
    header = header_lines(config, config.freecurve_radius, 0.0)
    write_csv(config.out_dir / "freecurve_slice.csv", ["b1", "b2", "nu", "ik1", "k2"], rows, header)
    write_csv(config.out_dir / "freecurve_intersections.csv", ["d1", "d2", "kind", "ik1", "k2"], crossings, header)
    log.info("Free curve: %d slice points, %d intersections", len(rows), len(crossings))
    return EXIT_OK


def cmd_trace(config: RunConfig) -> int:
    model = config.model(require_small=True)
    _report_model(model)
    nu = config.nu
    if config.auto_rho:
        model = tune_rho(model, nu)
    window = regular_window(model)
    split = config.split_radius or default_split_radius(model)
    beta = beta2_10(model.lattice, model.A, split, nu)
    tol = config.tolerance("newton", 1e-12)
    # config y values are external k2; the sheet is solved in the gauge-shifted frame
    shift = complex(model.mean[1])
    sheet = _pool_map(lambda y: solve_sheet_point(model, y - shift, nu, window, beta, tol), config.y_samples(), config.threads)

    eps = model.params.epsilon
    lam = model.lattice.lam
    rows: List[BoundRow] = [BoundRow("beta2_10", "global", abs(beta), eps**2 / (100.0 * lam), strict=True)]
    failures: List[Dict[str, object]] = []
    tails = [0.0]
    for point in sheet:
        region = f"y={point.y + shift:.6g}"
        if point.status == "skipped":
            log.warning("Skipped y=%s: %s", point.y + shift, point.reason)
            continue
        if point.status != "converged":
            failures.append({"y_re": (point.y + shift).real, "y_im": (point.y + shift).imag, "status": point.status, "reason": point.reason})
            continue
        rows.append(BoundRow("residual", region, point.residual, tol * max(1.0, abs(point.eta))))
        rows.append(BoundRow("eta_deviation", region, point.eta_deviation, eps**2 / (40.0 * lam), strict=True))
        rows.append(BoundRow("r_y", region, abs(point.r_value), eps**3 / (50.0 * lam**2)))
        rows.append(BoundRow("dF_dk1", region, abs(point.derivative - 1.0), 1.0 / 567.0))
        tails.append(tail_budget(window, point.k, model.A, model.q, eps))
    injectivity = injectivity_check(sheet, model.params.rho)
    rows.append(BoundRow("injectivity_collisions", "sheet", float(not injectivity.distinct), 0.0))

    for row in rows:
        if not row.passed:
            failures.append({"y_re": "", "y_im": "", "status": row.bound, "reason": f"{row.region}: {float(row.measured)!r} vs {float(row.certified)!r}"})

    header = header_lines(config, window.radius, max(tails)) + [f"# rho: {float(model.params.rho)!r}", f"# nu: {nu}"]
    sheet_rows = []
    for p in sheet:
        eta, y = _external(model, p.k)
        sheet_rows.append({
            "y_re": y.real,
            "y_im": y.imag,
            "eta_re": eta.real,
            "eta_im": eta.imag,
            "residual": p.residual,
            "newton_iters": p.newton_iters,
            "status": p.status,
            "reason": p.reason,
        })
    write_csv(config.out_dir / "sheet.csv", ["y_re", "y_im", "eta_re", "eta_im", "residual", "newton_iters", "status", "reason"], sheet_rows, header)
    write_csv(config.out_dir / "trace_bounds.csv", _BOUND_FIELDS, _bound_dicts(rows), header)
    write_csv(config.out_dir / "trace_failures.csv", ["y_re", "y_im", "status", "reason"], failures, header)
    return EXIT_OK if not failures else EXIT_FAILED


def _handle_job(model: FermiModel, config: RunConfig, d) -> Dict[str, object]:
    size = float(np.linalg.norm(model.lattice.vec(d)))
    base = {"d1": d[0], "d2": d[1], "abs_d": size}
    if not 2 * size > model.params.rho:
        log.warning("Handle d=%s skipped: below rho", d)
        return {**base, "status": "skipped", "reason": "below rho"}
    try:
        record = analyze_handle(model, d, degree=config.morse_degree)
        points = handle_curve_points(record, config.handle_samples)
    except FermiError as exc:
        log.error("Handle d=%s failed: %s", d, exc)
        return {**base, "status": "failed", "reason": f"{type(exc).__name__}: {exc}"}
    window = record.chart.coords.window
    oracle = [sigma_min(hk_matrix(window, k, model.A, model.V, model.q)) for k in points]
    return {**base, "status": "ok", "reason": "", "record": record, "points": points, "sigma_min": oracle}


def cmd_handles(config: RunConfig) -> int:
    model = config.model(require_small=True)
    _report_model(model)
    results = _pool_map(lambda d: _handle_job(model, config, d), config.d_list, config.threads)
    summary = []
    failed = False
    tails = [0.0]
    kernel_tol = config.tolerance("kernel", 1e-6)
    for result in results:
        row = {key: result[key] for key in ("d1", "d2", "abs_d", "status", "reason")}
        record: Optional[HandleRecord] = result.get("record")
        if result["status"] == "failed":
            failed = True
        if record is not None:
            scaled = abs(record.t_d) * result["abs_d"] ** 4
            scale = [max(1.0, float(np.max(np.abs(k.as_array()))) ** 2) for k in result["points"]]
            worst = max((s / c for s, c in zip(result["sigma_min"], scale)), default=0.0)
            if worst >= kernel_tol:
                failed = True
                row["status"] = "failed"
                row["reason"] = f"kernel oracle {worst:.3e}"
            row.update({
                "t_d_re": record.t_d.real,
                "t_d_im": record.t_d.imag,
                "abs_t_d": abs(record.t_d),
                "scaled_t_d": scaled,
                "oracle_gap": record.oracle_gap,
                "symmetry_residual": record.symmetry_residual,
                "jac_deviation": record.jac_deviation,
                "kernel_oracle": worst,
            })
            tails.append(record.tail_budget)
            name = f"handle_{record.d[0]}_{record.d[1]}"
            document = render_document(
                "handle_record.md.j2",
                record=record,
                scaled=scaled,
                sha256=config.sha256,
                window_radius=record.chart.coords.window.radius,
            )
            write_document(config.out_dir / f"{name}.md", document)
            point_rows = []
            for k, s in zip(result["points"], result["sigma_min"]):
                k1, k2 = _external(model, k)
                point_rows.append({"k1_re": k1.real, "k1_im": k1.imag, "k2_re": k2.real, "k2_im": k2.imag, "sigma_min": s})
            write_csv(
                config.out_dir / f"{name}_points.csv",
                ["k1_re", "k1_im", "k2_re", "k2_im", "sigma_min"],
                point_rows,
                header_lines(config, model.params.window_radius, record.tail_budget),
            )
        summary.append(row)
    fields = ["d1", "d2", "abs_d", "t_d_re", "t_d_im", "abs_t_d", "scaled_t_d", "oracle_gap", "symmetry_residual", "jac_deviation", "kernel_oracle", "status", "reason"]
    write_csv(config.out_dir / "handles_summary.csv", fields, summary, header_lines(config, model.params.window_radius, max(tails)))
    return EXIT_FAILED if failed else EXIT_OK


def cmd_verify(config: RunConfig) -> int:
    model = config.model(require_small=False)
    _report_model(model)
    rows = run_bound_suite(
        model,
        samples=config.verify_samples,
        seed=config.seed,
        d_list=config.d_list,
        threads=config.threads,
        split_radius=config.split_radius,
    )
    header = header_lines(config, model.params.window_radius, _reference_tail(model))
    write_csv(config.out_dir / "verify.csv", _BOUND_FIELDS, _bound_dicts(rows), header)

    groups = []
    for name, members in groupby(sorted(rows, key=lambda row: row.bound), key=lambda row: row.bound):
        members = list(members)
        groups.append((name, {
            "count": len(members),
            "margin": min(row.margin for row in members),
            "passed": all(row.passed for row in members),
        }))
    failed = [row for row in rows if not row.passed]
    document = render_document(
        "verify_summary.md.j2",
        rows=rows,
        groups=groups,
        failed=failed,
        sha256=config.sha256,
        window_radius=model.params.window_radius,
    )
    write_document(config.out_dir / "verify_summary.md", document)
    return EXIT_OK if not failed else EXIT_FAILED


def cmd_spectrum(config: RunConfig) -> int:
    model = config.model(require_small=False)
    k = KPoint.from_array(model.to_internal(config.spectrum_k))
    window = make_window(model.lattice, model.params.window_radius)
    operator = hk_matrix(window, k, model.A, model.V, model.q)
    values = scipy.linalg.eigvals(operator.entries)
    order = np.lexsort((values.imag, values.real, np.abs(values)))
    rows = [
        {"index": i, "re": values[j].real, "im": values[j].imag, "abs": abs(values[j])}
        for i, j in enumerate(order)
    ]
    try:
        tail = tail_budget(window, k, model.A, model.q, model.params.epsilon)
    except FermiError:
        tail = float("inf")
    header = header_lines(config, window.radius, tail) + [f"# sigma_min: {float(sigma_min(operator))!r}"]
    write_csv(config.out_dir / "spectrum.csv", ["index", "re", "im", "abs"], rows, header)
    log.info("Spectrum at k=%s: %d eigenvalues, smallest |λ|=%.3e", k, len(rows), abs(values[order[0]]) if len(rows) else float("nan"))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "freecurve": cmd_freecurve,
    "trace": cmd_trace,
    "handles": cmd_handles,
    "verify": cmd_verify,
    "spectrum": cmd_spectrum,
}


# ----------------------------
# CLI
# ----------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Complex Fermi curves of two-dimensional periodic Schrödinger operators")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="JSON run configuration (schema version 1).")
    common.add_argument("--out", type=Path, default=None, help="Output directory (default: out).")
    common.add_argument("--threads", type=int, default=None, help="Worker threads for per-item work (default: 1).")
    common.add_argument("--seed", type=int, default=None, help="Sampling seed for the bound suite (default: 0).")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("freecurve", parents=[common], help="Real slice and intersection table of the free curve.")
    trace = sub.add_parser("trace", parents=[common], help="Trace the regular sheet over the configured y grid.")
    trace.add_argument("--nu", type=int, choices=(1, 2), default=None, help="Tube index (default: from config, else 1).")
    trace.add_argument("--auto-rho", action="store_true", default=None, help="Double rho until the derivative check passes.")
    handles = sub.add_parser("handles", parents=[common], help="Normal forms of the handles in the configured d-list.")
    handles.add_argument("--samples", type=int, default=None, help="Curve points per handle (default: 50).")
    verify = sub.add_parser("verify", parents=[common], help="Run the bound suite.")
    verify.add_argument("--samples", type=int, default=None, help="Regular sample points (default: 10).")
    spectrum = sub.add_parser("spectrum", parents=[common], help="Eigenvalues of the truncated H_k.")
    spectrum.add_argument("--k", type=float, nargs=4, metavar=("RE1", "IM1", "RE2", "IM2"), default=None, help="Momentum.")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides: Dict[str, object] = {
        "out_dir": args.out,
        "threads": args.threads,
        "seed": args.seed,
    }
    if args.command == "trace":
        overrides.update({"nu": args.nu, "auto_rho": args.auto_rho})
    elif args.command == "handles":
        overrides["handle_samples"] = args.samples
    elif args.command == "verify":
        overrides["verify_samples"] = args.samples
    elif args.command == "spectrum" and args.k is not None:
        overrides["spectrum_k"] = (complex(args.k[0], args.k[1]), complex(args.k[2], args.k[3]))
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config, _overrides(args))
        if config.threads < 1:
            config = replace(config, threads=1)
        code = COMMANDS[args.command](config)
    except (FermiError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    log.info("%s finished with exit code %d", args.command, code)
    return code


__all__ = [
    "EXIT_OK",
    "EXIT_FAILED",
    "EXIT_ERROR",
    "cmd_freecurve",
    "cmd_trace",
    "cmd_handles",
    "cmd_verify",
    "cmd_spectrum",
    "build_parser",
    "main",
]


if __name__ == "__main__":
    sys.exit(main())
