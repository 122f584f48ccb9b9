from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from fermi_errors import InvalidParameters
from lattice_fourier import FermiModel, Label, build_lattice, build_model, field_from_entries, vector_field_from_entries

log = logging.getLogger("fermi_io")

SCHEMA_VERSION = 1
_TEMPLATE_DIR = Path(__file__).parent


# ----------------------------
# Run configuration
# ----------------------------
@dataclass
class RunConfig:
    gamma1: Tuple[float, float]
    gamma2: Tuple[float, float]
    V: List[List[float]] = field(default_factory=list)
    A1: List[List[float]] = field(default_factory=list)
    A2: List[List[float]] = field(default_factory=list)
    epsilon: Optional[float] = None
    rho: Optional[float] = None
    window_radius: Optional[float] = None
    split_radius: Optional[float] = None
    nu: int = 1
    y_re: Tuple[float, float, int] = (8.0, 16.0, 9)
    y_im: Tuple[float, float, int] = (0.0, 0.0, 1)
    auto_rho: bool = False
    d_list: List[Label] = field(default_factory=list)
    handle_samples: int = 50
    morse_degree: int = 8
    verify_samples: int = 10
    spectrum_k: Tuple[complex, complex] = (0j, 0j)
    k2_range: Tuple[float, float, int] = (-3.0, 3.0, 61)
    freecurve_radius: float = 4.0
    tolerances: Dict[str, float] = field(default_factory=dict)
    out_dir: Path = Path("out")
    threads: int = 1
    seed: int = 0
    sha256: str = ""

    def model(self, require_small: bool = False) -> FermiModel:
        lattice = build_lattice(self.gamma1, self.gamma2)
        A = vector_field_from_entries(lattice, self.A1, self.A2)
        V = field_from_entries(lattice, self.V)
        return build_model(lattice, A, V, self.epsilon, self.rho, self.window_radius, require_small=require_small)

    def y_samples(self) -> List[complex]:
        re = np.linspace(*self.y_re[:2], int(self.y_re[2]))
        im = np.linspace(*self.y_im[:2], int(self.y_im[2]))
        grid = re[:, None] + 1j * im[None, :]
        return [complex(value) for value in grid.reshape(-1)]

    def k2_values(self) -> List[float]:
        return [float(x) for x in np.linspace(*self.k2_range[:2], int(self.k2_range[2]))]

    def tolerance(self, name: str, default: float) -> float:
        return float(self.tolerances.get(name, default))


def _pick(document: Mapping[str, Any], dotted: str) -> Any:
    node: Any = document
    for part in dotted.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return None
        node = node[part]
    return node


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError as exc:
        raise RuntimeError(f"Missing config file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidParameters(f"{path} is not valid JSON: {exc}") from exc


def load_potential_file(path: Path) -> Dict[str, Any]:
    """A JSON file carrying a "potential" section, or the section itself."""
    document = _read_json(path)
    return document.get("potential", document)


def _triple(value: Sequence[Any], name: str) -> Tuple[float, float, int]:
    if len(value) != 3:
        raise InvalidParameters(f"{name} must be [lo, hi, count], got {value!r}")
    return float(value[0]), float(value[1]), int(value[2])


def config_hash(document: Mapping[str, Any]) -> str:
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_run_config(path: Path, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Parse and validate a version-1 JSON run configuration.

    Missing keys are reported together; out-of-range ε and ρ are rejected
    here, before any command runs.
    """
    path = Path(path)
    document = _read_json(path)
    required = ["version", "lattice.gamma1", "lattice.gamma2"]
    missing = [name for name in required if _pick(document, name) is None]
    if missing:
        raise RuntimeError(f"Missing config keys: {', '.join(missing)}")
    if document["version"] != SCHEMA_VERSION:
        raise InvalidParameters(f"Unsupported config version {document['version']!r}; expected {SCHEMA_VERSION}")

    if "potential_file" in document:
        potential = load_potential_file(path.parent / document["potential_file"])
        document = {**document, "potential": potential}
    potential = document.get("potential", {})
    params = document.get("params", {})
    trace = document.get("trace", {})
    handles = document.get("handles", {})
    freecurve = document.get("freecurve", {})
    spectrum_k = document.get("spectrum", {}).get("k", [0.0, 0.0, 0.0, 0.0])
    if len(spectrum_k) != 4:
        raise InvalidParameters(f"spectrum.k must be [re1, im1, re2, im2], got {spectrum_k!r}")

    config = RunConfig(
        gamma1=tuple(float(x) for x in document["lattice"]["gamma1"]),
        gamma2=tuple(float(x) for x in document["lattice"]["gamma2"]),
        V=list(potential.get("V", [])),
        A1=list(potential.get("A1", [])),
        A2=list(potential.get("A2", [])),
        epsilon=params.get("epsilon"),
        rho=params.get("rho"),
        window_radius=params.get("window_radius"),
        split_radius=params.get("split_radius"),
        nu=int(trace.get("nu", 1)),
        y_re=_triple(trace.get("y_re", RunConfig.y_re), "trace.y_re"),
        y_im=_triple(trace.get("y_im", RunConfig.y_im), "trace.y_im"),
        auto_rho=bool(trace.get("auto_rho", False)),
        d_list=[(int(d[0]), int(d[1])) for d in handles.get("d_list", [])],
        handle_samples=int(handles.get("samples", 50)),
        morse_degree=int(handles.get("degree", 8)),
        verify_samples=int(document.get("verify", {}).get("samples", 10)),
        spectrum_k=(complex(spectrum_k[0], spectrum_k[1]), complex(spectrum_k[2], spectrum_k[3])),
        k2_range=_triple(freecurve.get("k2_range", RunConfig.k2_range), "freecurve.k2_range"),
        freecurve_radius=float(freecurve.get("radius", 4.0)),
        tolerances={str(k): float(v) for k, v in document.get("tolerances", {}).items()},
        sha256=config_hash(document),
    )
    if overrides:
        config = replace(config, **{key: value for key, value in overrides.items() if value is not None})
    if config.nu not in (1, 2):
        raise InvalidParameters(f"trace.nu must be 1 or 2, got {config.nu}")
    config.model(require_small=False)
    log.info("Config %s loaded (sha256 %s)", path, config.sha256[:12])
    return config


# ----------------------------
# CSV output
# ----------------------------
def header_lines(config: RunConfig, window_radius: float, tail_budget: float) -> List[str]:
    return [
        f"# config_sha256: {config.sha256}",
        f"# window_radius: {float(window_radius)!r}",
        f"# tail_budget: {float(tail_budget)!r}",
    ]


def _cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (complex, np.complexfloating)):
        return repr(complex(value))
    return value


def write_csv(
    path: Path,
    fieldnames: Sequence[str],
    rows: Iterable[Mapping[str, Any]],
    header: Sequence[str] = (),
) -> Path:
    """CSV with commented metadata lines first; floats use repr so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        for line in header:
            handle.write(line + "\n")
        writer = csv.DictWriter(handle, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(value) for key, value in row.items()})
    log.info("Wrote %s", path)
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    return list(csv.DictReader(lines))


# ----------------------------
# Rendered documents
# ----------------------------
def _environment() -> Environment:
    return Environment(
        loader=FileSystemLoader(str(_TEMPLATE_DIR)),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )


def render_document(template_name: str, **context: Any) -> str:
    return _environment().get_template(template_name).render(**context)


def write_document(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    log.info("Wrote %s", path)
    return path


__all__ = [
    "SCHEMA_VERSION",
    "RunConfig",
    "load_potential_file",
    "config_hash",
    "load_run_config",
    "header_lines",
    "write_csv",
    "read_csv",
    "render_document",
    "write_document",
]
