from __future__ import annotations

import copy
import json

import numpy as np
import pytest

from conftest import EPSILON, T_REGULAR
from bound_suite import BoundRow
from curve_analysis import HandleRecord
from fermi_errors import InvalidParameters
from fermi_io import (
    config_hash,
    header_lines,
    load_potential_file,
    load_run_config,
    read_csv,
    render_document,
    write_csv,
    write_document,
)
from freecurve import KPoint


def test_load_run_config(config_document, write_config):
    config = load_run_config(write_config(config_document))
    assert config.gamma1 == pytest.approx((2 * np.pi, 0.0))
    assert config.epsilon == EPSILON
    assert config.nu == 1
    assert config.d_list == [(0, 4)]
    assert config.morse_degree == 6
    assert config.verify_samples == 2
    assert config.spectrum_k == (0.5 + 0j, 0.25 + 0j)
    assert len(config.sha256) == 64
    int(config.sha256, 16)
    np.testing.assert_allclose(config.y_samples(), [T_REGULAR, 11.25, 12.25])
    assert config.k2_values() == [-2.0, -1.0, 0.0, 1.0, 2.0]


def test_model_from_config(config_document, write_config):
    model = load_run_config(write_config(config_document)).model(require_small=True)
    assert model.params.epsilon == EPSILON
    assert model.params.window_radius == 4.0
    assert len(model.V.support) == 4


def test_missing_keys_are_reported_together(config_document, write_config):
    del config_document["version"]
    del config_document["lattice"]["gamma2"]
    with pytest.raises(RuntimeError, match="version, lattice.gamma2"):
        load_run_config(write_config(config_document))


def test_missing_file(tmp_path):
    with pytest.raises(RuntimeError, match="Missing config file"):
        load_run_config(tmp_path / "absent.json")


@pytest.mark.parametrize(
    "section, key, value",
    [
        (None, "version", 2),
        ("trace", "nu", 3),
        ("params", "epsilon", 1.0),
        ("spectrum", "k", [0.0, 0.0]),
        ("trace", "y_re", [1.0, 2.0]),
    ],
)
def test_invalid_values(config_document, write_config, section, key, value):
    target = config_document if section is None else config_document[section]
    target[key] = value
    with pytest.raises(InvalidParameters):
        load_run_config(write_config(config_document))


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{", encoding="utf-8")
    with pytest.raises(InvalidParameters, match="not valid JSON"):
        load_run_config(path)


def test_potential_file(config_document, write_config, tmp_path):
    potential = config_document.pop("potential")
    (tmp_path / "potential.json").write_text(json.dumps({"potential": potential}), encoding="utf-8")
    config_document["potential_file"] = "potential.json"
    config = load_run_config(write_config(config_document))
    assert config.V == potential["V"]
    assert config.A1 == potential["A1"]
    assert load_potential_file(tmp_path / "potential.json") == potential


def test_overrides_skip_none(config_document, write_config, tmp_path):
    config = load_run_config(write_config(config_document), {"nu": 2, "threads": None, "out_dir": tmp_path})
    assert config.nu == 2
    assert config.threads == 1
    assert config.out_dir == tmp_path


def test_config_hash_ignores_key_order(config_document):
    reordered = copy.deepcopy(dict(reversed(list(config_document.items()))))
    assert config_hash(reordered) == config_hash(config_document)
    reordered["params"]["epsilon"] = 0.07
    assert config_hash(reordered) != config_hash(config_document)


def test_csv_round_trip(config_document, write_config, tmp_path):
    config = load_run_config(write_config(config_document))
    path = write_csv(
        tmp_path / "out" / "table.csv",
        ["name", "value", "z"],
        [{"name": "a", "value": 0.1, "z": 1 + 2j}, {"name": "b", "value": np.float64(1 / 3), "z": 0j}],
        header_lines(config, 4.0, 0.0),
    )
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == f"# config_sha256: {config.sha256}"
    assert lines[1] == "# window_radius: 4.0"
    assert lines[3] == "name,value,z"
    rows = read_csv(path)
    assert [row["name"] for row in rows] == ["a", "b"]
    assert float(rows[1]["value"]) == 1 / 3
    assert complex(rows[0]["z"]) == 1 + 2j


def test_verify_summary_document(tmp_path):
    rows = [BoundRow("alpha10", "global", 0.1, 1.0), BoundRow("alpha10", "v=1", 2.0, 1.0)]
    text = render_document(
        "verify_summary.md.j2",
        rows=rows,
        groups=[("alpha10", {"count": 2, "margin": -1.0, "passed": False})],
        failed=[rows[1]],
        sha256="abc",
        window_radius=4.0,
    )
    assert text.startswith("# Bound verification")
    assert "| alpha10 | 2 | -1.000e+00 | FAIL |" in text
    assert "- alpha10 at v=1: measured 2.000000e+00" in text
    path = write_document(tmp_path / "docs" / "summary.md", text)
    assert path.read_text(encoding="utf-8") == text


def test_handle_document():
    center = KPoint(-2j, -2.0)
    record = HandleRecord(
        d=(0, 4),
        t_d=-1.5e-10 + 0j,
        c=1.5e-10 + 0j,
        center1=center,
        center2=KPoint(-2j, 2.0),
        free_center1=center,
        free_center2=KPoint(-2j, 2.0),
        center_deviation=0.0,
        jac_deviation=1e-9,
        symmetry_residual=1e-12,
        oracle_t=-1.5e-10 + 0j,
        oracle_gap=1e-16,
        delta=0.04,
        c1=5e-5 + 0j,
        c2=5e-5 + 0j,
        grad_residual=0.0,
        dphi_deviation=1e-8,
        composition_residual=1e-13,
        tail_budget=0.0,
    )
    text = render_document("handle_record.md.j2", record=record, scaled=256 * 1.5e-10, sha256="abc", window_radius=3.0)
    assert text.startswith("# Handle d = (0, 4)")
    assert "| t_d | -1.500000000000e-10 +0.000000000000e+00i |" in text
    assert "- window_radius: 3.0" in text
