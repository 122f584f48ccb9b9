from __future__ import annotations

import pytest

from app_fermi import EXIT_ERROR, EXIT_OK, build_parser, main
from fermi_io import read_csv

FAMILY_C = 2e-4


def run(command, config_path, out_dir, *extra):
    return main([command, "--config", str(config_path), "--out", str(out_dir), *extra])


def header(path):
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.startswith("#")]


def test_parser_requires_config():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["trace"])
    args = build_parser().parse_args(["spectrum", "--config", "run.json", "--k", "1", "0", "2", "0"])
    assert args.k == [1.0, 0.0, 2.0, 0.0]


def test_freecurve(config_document, write_config, tmp_path):
    out = tmp_path / "out"
    assert run("freecurve", write_config(config_document), out) == EXIT_OK
    rows = read_csv(out / "freecurve_slice.csv")
    crossings = read_csv(out / "freecurve_intersections.csv")
    # labels (0, -2) .. (0, 2), both tubes, five k2 values
    assert len(rows) == 5 * 2 * 5
    assert len(crossings) == 4 * 2
    assert header(out / "freecurve_slice.csv")[0].startswith("# config_sha256: ")


def test_trace(config_document, write_config, tmp_path):
    out = tmp_path / "out"
    assert run("trace", write_config(config_document), out) == EXIT_OK
    sheet = read_csv(out / "sheet.csv")
    assert [row["status"] for row in sheet] == ["converged"] * 3
    for row in sheet:
        assert abs(float(row["eta_im"]) - float(row["y_re"])) < 1e-3
    assert read_csv(out / "trace_failures.csv") == []
    assert all(row["passed"] == "1" for row in read_csv(out / "trace_bounds.csv"))
    assert "# nu: 1" in header(out / "sheet.csv")


def test_trace_reruns_are_identical(config_document, write_config, tmp_path):
    path = write_config(config_document)
    assert run("trace", path, tmp_path / "first") == EXIT_OK
    assert run("trace", path, tmp_path / "second", "--threads", "2") == EXIT_OK
    first = (tmp_path / "first" / "sheet.csv").read_text(encoding="utf-8")
    second = (tmp_path / "second" / "sheet.csv").read_text(encoding="utf-8")
    assert first == second


def test_verify(config_document, write_config, tmp_path):
    out = tmp_path / "out"
    assert run("verify", write_config(config_document), out, "--samples", "2") == EXIT_OK
    rows = read_csv(out / "verify.csv")
    assert rows and all(row["passed"] == "1" for row in rows)
    summary = (out / "verify_summary.md").read_text(encoding="utf-8")
    assert summary.startswith("# Bound verification")
    assert "failed: 0" in summary


def test_verify_refuses_large_a(config_document, write_config, tmp_path):
    config_document["potential"]["A1"] = [[1, 0, 0.5, 0.0]]
    assert run("verify", write_config(config_document), tmp_path / "out") == EXIT_ERROR
    assert not (tmp_path / "out" / "verify.csv").exists()


def test_spectrum_of_free_operator(config_document, write_config, tmp_path):
    config_document["potential"] = {}
    out = tmp_path / "out"
    assert run("spectrum", write_config(config_document), out, "--k", "0.4", "0", "0.25", "0") == EXIT_OK
    rows = read_csv(out / "spectrum.csv")
    assert float(rows[0]["abs"]) == pytest.approx(0.4**2 + 0.25**2)
    assert float(rows[0]["im"]) == pytest.approx(0.0, abs=1e-12)
    assert [int(row["index"]) for row in rows] == list(range(len(rows)))
    assert any(line.startswith("# sigma_min: ") for line in header(out / "spectrum.csv"))


def test_handles(config_document, write_config, tmp_path):
    config_document["potential"] = {"V": [[0, 4, FAMILY_C / 4, 0.0], [0, -4, FAMILY_C / 4, 0.0]]}
    config_document["params"]["window_radius"] = 3.0
    out = tmp_path / "out"
    assert run("handles", write_config(config_document), out) == EXIT_OK
    (summary,) = read_csv(out / "handles_summary.csv")
    assert summary["status"] == "ok"
    assert float(summary["t_d_re"]) == pytest.approx(-(FAMILY_C / 4) ** 2 / 16, rel=1e-3)
    assert len(read_csv(out / "handle_0_4_points.csv")) == 8
    assert (out / "handle_0_4.md").read_text(encoding="utf-8").startswith("# Handle d = (0, 4)")


def test_errors_exit_with_code_two(config_document, write_config, tmp_path):
    del config_document["lattice"]
    assert run("trace", write_config(config_document), tmp_path / "out") == EXIT_ERROR
    assert run("trace", tmp_path / "absent.json", tmp_path / "out") == EXIT_ERROR


MEAN_A = {"A1": [[0, 0, 0.3, 0.0]], "A2": [[0, 0, -0.1, 0.0]]}


def test_trace_writes_external_momenta(config_document, write_config, tmp_path):
    config_document["potential"].update({
        "A1": config_document["potential"]["A1"] + MEAN_A["A1"],
        "A2": config_document["potential"]["A2"] + MEAN_A["A2"],
    })
    out = tmp_path / "out"
    assert run("trace", write_config(config_document), out) == EXIT_OK
    sheet = read_csv(out / "sheet.csv")
    assert [float(row["y_re"]) for row in sheet] == pytest.approx([10.25, 11.25, 12.25])
    for row in sheet:
        # internal η ≈ i·y_internal with η = η_ext − 0.3 and y_internal = y_ext + 0.1
        assert float(row["eta_re"]) == pytest.approx(0.3, abs=1e-3)
        assert float(row["eta_im"]) == pytest.approx(float(row["y_re"]) + 0.1, abs=1e-3)


def test_handle_points_feed_back_into_spectrum(config_document, write_config, tmp_path):
    config_document["potential"] = {"V": [[0, 4, FAMILY_C / 4, 0.0], [0, -4, FAMILY_C / 4, 0.0]], **MEAN_A}
    config_document["params"]["window_radius"] = 4.5
    path = write_config(config_document)
    assert run("handles", path, tmp_path / "handles") == EXIT_OK
    point = read_csv(tmp_path / "handles" / "handle_0_4_points.csv")[0]
    values = [repr(float(point[key])) for key in ("k1_re", "k1_im", "k2_re", "k2_im")]
    out = tmp_path / "spectrum"
    assert run("spectrum", path, out, "--k", *values) == EXIT_OK
    (line,) = [line for line in header(out / "spectrum.csv") if line.startswith("# sigma_min: ")]
    k = [complex(float(values[0]), float(values[1])), complex(float(values[2]), float(values[3]))]
    scale = max(1.0, max(abs(x) for x in k)) ** 2
    assert float(line.split(": ", 1)[1]) / scale < 1e-6
