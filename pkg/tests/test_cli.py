import csv
import json

import pytest
import yaml
from click.testing import CliRunner

from qdiffusion import cli
from qdiffusion.errors import ConfigError, MissingArtifact

SMALL_DIFFUSION = {
    "kind": "diffusion-constant",
    "seed": 4,
    "model": {"lattice": {"grid": 8}},
    "options": {"cases": [{"d": 1, "L": 16}], "n_traj": 3000, "n_samples": 16, "t_max_factor": 100.0},
}
SMALL_CLUSTER = {"kind": "cluster-suite", "options": {"n_sites": 4, "max_len": 2}}


def _write_spec(tmp_path, raw, name="spec.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def _rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.reader(lines))


def test_diffusion_run_writes_summary_and_manifest(tmp_path):
    res = cli.run(cli.spec_from_mapping(SMALL_DIFFUSION, out=tmp_path / "a"))
    header, *body = _rows(tmp_path / "a" / "summary.csv")
    assert header == ["d", "L", "grid", "D_gk", "D_msd", "D_msd_stderr", "D_curvature", "gibbs_rel_error"]
    assert len(body) == 1 and body[0][:3] == ["1", "16", "8"]
    text = (tmp_path / "a" / "summary.csv").read_text()
    assert f"# config_hash: {res.manifest['config_hash']}" in text and "# seed: 4" in text
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert {"config_hash", "seed", "versions", "wall_time_s", "checks"} <= set(manifest)
    assert [c["name"] for c in manifest["checks"]] == ["C1.d1", "C2.d1"]
    assert manifest["checks"][0]["passed"]


def test_runs_are_reproducible_across_threads(tmp_path):
    cli.run(cli.spec_from_mapping(SMALL_DIFFUSION, out=tmp_path / "a", threads=1))
    cli.run(cli.spec_from_mapping(SMALL_DIFFUSION, out=tmp_path / "b", threads=2))
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
    cli.run(cli.spec_from_mapping(SMALL_DIFFUSION, out=tmp_path / "c", seed=5))
    assert (tmp_path / "a" / "summary.csv").read_bytes() != (tmp_path / "c" / "summary.csv").read_bytes()


def test_config_hash_tracks_inputs():
    a = cli.spec_from_mapping(SMALL_DIFFUSION, out="x")
    assert a.config_hash() == cli.spec_from_mapping(SMALL_DIFFUSION, out="y").config_hash()
    assert a.config_hash() != cli.spec_from_mapping(SMALL_DIFFUSION, out="x", seed=9).config_hash()


def test_spec_errors(tmp_path):
    with pytest.raises(ConfigError):
        cli.spec_from_mapping({"kind": "teleport"}, out=tmp_path)
    with pytest.raises(ConfigError):
        cli.spec_from_mapping({"kind": "fiber-scan", "options": {"n_point": 3}}, out=tmp_path)
    with pytest.raises(ConfigError):
        cli.spec_from_mapping({"kind": "fiber-scan"})
    with pytest.raises(ConfigError):
        cli.spec_from_mapping({"kind": "fiber-scan", "caps": {"gpus": 1}}, out=tmp_path)
    with pytest.raises(ConfigError):
        cli.spec_from_mapping({"kind": "fiber-scan", "colour": 1}, out=tmp_path)
    with pytest.raises(ConfigError):
        cli.load_spec(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError):
        cli.run(cli.spec_from_mapping({"kind": "rg-flow", "options": {"flow": False, "suites": False}},
                                      out=tmp_path))


def test_model_file_is_resolved_relative_to_spec(tmp_path):
    (tmp_path / "model.yaml").write_text(yaml.safe_dump({"lattice": {"L": 24}}))
    spec = cli.load_spec(_write_spec(tmp_path, {"kind": "fiber-scan", "model": "model.yaml", "out": "runs"}))
    assert spec.model["lattice"]["L"] == 24
    assert spec.out == tmp_path / "runs"


def test_memory_cap(tmp_path):
    raw = dict(SMALL_DIFFUSION, caps={"memory_mb": 0.01})
    with pytest.raises(cli.ResourceCap):
        cli.run(cli.spec_from_mapping(raw, out=tmp_path))


def test_cli_run_report_and_overrides(tmp_path):
    runner = CliRunner()
    spec = _write_spec(tmp_path, SMALL_CLUSTER)
    res = runner.invoke(cli.main, ["run", str(spec), "--out", str(tmp_path / "runs" / "cluster")])
    assert res.exit_code == cli.EXIT_OK, res.output
    assert "C10" in res.output and "✓" in res.output

    res = runner.invoke(cli.main, ["report", str(tmp_path / "runs")])
    assert res.exit_code == cli.EXIT_OK
    assert "not run" in res.output

    res = runner.invoke(cli.main, ["report", str(tmp_path / "runs"), "--tol", "C10=1"])
    assert res.exit_code == cli.EXIT_FAILED
    assert "✗" in res.output

    res = runner.invoke(cli.main, ["report", str(tmp_path / "runs"), "--tol", "C10"])
    assert res.exit_code == cli.EXIT_ERROR


def test_cli_errors_exit_one(tmp_path):
    runner = CliRunner()
    bad = _write_spec(tmp_path, {"kind": "teleport", "out": "x"})
    res = runner.invoke(cli.main, ["run", str(bad)])
    assert res.exit_code == cli.EXIT_ERROR and "ConfigError" in res.output

    res = runner.invoke(cli.main, ["report", str(tmp_path / "empty")])
    assert res.exit_code == cli.EXIT_ERROR and "MissingArtifact" in res.output


def test_missing_csv_is_reported(tmp_path):
    cli.run(cli.spec_from_mapping(SMALL_CLUSTER, out=tmp_path))
    (tmp_path / "cluster.csv").unlink()
    with pytest.raises(MissingArtifact):
        cli.collect_checks(tmp_path)


def test_check_level_override_beats_criterion_level(tmp_path):
    cli.run(cli.spec_from_mapping({"kind": "dyson-convergence", "options": {"lambdas": [0.1, 0.05], "n_nodes": 8}},
                                  out=tmp_path))
    checks = {c.name: c for c in cli.collect_checks(tmp_path, {"C5": 1e-9, "C5.m1": 0.5})}
    assert checks["C5.m1"].threshold == 0.5 and checks["C5.m2"].threshold == 1e-9
    assert checks["C5.m1"].passed and not checks["C5.m2"].passed


def test_failed_check_exits_two(tmp_path):
    raw = {"kind": "dyson-convergence", "options": {"lambdas": [0.1, 0.05], "orders": [1], "n_nodes": 8,
                                                     "exponent_tol": 1e-9}}
    res = CliRunner().invoke(cli.main, ["run", str(_write_spec(tmp_path, raw)), "--out", str(tmp_path / "o")])
    assert res.exit_code == cli.EXIT_FAILED and "✗" in res.output


def test_parse_tolerances():
    assert cli.parse_tolerances(["C2=0.5", " C5.m1 = 1e-3"]) == {"C2": 0.5, "C5.m1": 1e-3}
    with pytest.raises(ConfigError):
        cli.parse_tolerances(["C2=abc"])


def test_shipped_configs_load():
    from pathlib import Path

    from qdiffusion.model import load_config

    root = Path(__file__).resolve().parents[1] / "configs"
    specs = sorted(root.glob("*-*.yaml"))
    assert {cli.load_spec(p).kind for p in specs} == set(cli.KINDS)
    assert load_config(root / "model.yaml") == load_config({})
