import csv
import logging
import os

import pytest

import harness
from harness import (
    SCHEMAS, emit_report, expand_columns, load_config, read_certificate, run, selftest_checks,
    write_csv,
)
from hypocert_base import TOOL_VERSION, ConfigError, ExitCode, SchemaError
from malliavin import ProbEstimate
from main import main

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")

TINY = """\
[experiment]
format_version = 1

[potential]
name = quadratic
dim = 1

[simulation]
dt = 0.05
t_final = 1
n_paths = 8
seed = 42
workers = 1
chunk_size = 4

[simulate]
z0 = point:1,0
record_times = 0,0.5,1
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY, encoding="utf-8")
    return str(path)


def _read(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def test_shipped_configs_load():
    for name in ("quadratic.cfg", "bump_double_well.cfg"):
        cfg = load_config(os.path.join(CONFIG_DIR, name))
        assert cfg.potential().dim == 1
        assert cfg.sim().n_paths > 0


def test_overrides_seed_and_out(tiny_config, tmp_path):
    cfg = load_config(tiny_config, ["simulation.dt=0.01", "metric.r=0.25"], seed=7, out=str(tmp_path))
    sim = cfg.sim()
    assert (sim.dt, sim.master_seed) == (0.01, 7)
    assert cfg.metric_values()["r"] == 0.25
    assert cfg.out == str(tmp_path)


def test_malformed_override(tiny_config):
    with pytest.raises(ConfigError):
        load_config(tiny_config, ["dt=0.01"])
    with pytest.raises(ConfigError):
        load_config(tiny_config, ["nowhere.dt=0.01"])


def test_unknown_section_reports_its_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[experiment]\nformat_version = 1\n\n[plots]\nkind = png\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    assert info.value.line == 4


def test_format_version_must_match(tmp_path):
    path = tmp_path / "old.cfg"
    path.write_text("[experiment]\nformat_version = 0\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    assert info.value.field == "experiment.format_version"
    assert info.value.line == 2


def test_invalid_value_names_the_field(tiny_config):
    cfg = load_config(tiny_config, ["simulation.n_paths=many"])
    with pytest.raises(ConfigError) as info:
        cfg.sim()
    assert info.value.field == "simulation.n_paths"


def test_missing_potential_name_is_a_usage_error(tmp_path, caplog):
    path = tmp_path / "nopot.cfg"
    path.write_text("[experiment]\nformat_version = 1\n", encoding="utf-8")
    with caplog.at_level(logging.ERROR):
        code = run("lyapunov", str(path), out=str(tmp_path / "out"))
    assert code == ExitCode.USAGE
    assert "potential.name" in caplog.text


def test_unknown_subcommand(tmp_path):
    assert run("plot", out=str(tmp_path)) == ExitCode.USAGE


def test_selftest_passes_and_writes_manifest(tmp_path):
    out = str(tmp_path / "self")
    assert run("selftest", out=out) == ExitCode.OK
    with open(os.path.join(out, "selftest.csv"), encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(SCHEMAS["selftest"])
    assert all(passed == "true" for _, passed in rows[1:])
    manifest = _read(os.path.join(out, "manifest.cfg"))
    assert f"tool_version = {TOOL_VERSION}" in manifest
    assert "subcommand = selftest" in manifest


def test_selftest_checks_all_pass():
    assert all(ok for _, ok in selftest_checks())


def test_simulate_writes_ensemble_csv(tiny_config, tmp_path):
    out = str(tmp_path / "sim")
    assert run("simulate", tiny_config, out=out) == ExitCode.OK
    text = _read(os.path.join(out, "ensemble.csv"))
    assert "\r" not in text
    lines = text.splitlines()
    assert lines[0] == "path_id,t,x_1,v_1"
    assert len(lines) == 1 + 8 * 3


def test_runs_are_reproducible_from_the_manifest(tiny_config, tmp_path):
    first = str(tmp_path / "first")
    assert run("simulate", tiny_config, out=first) == ExitCode.OK
    second = str(tmp_path / "second")
    code = run("simulate", os.path.join(first, "manifest.cfg"), overrides=["simulation.workers=4"], out=second)
    assert code == ExitCode.OK
    assert _read(os.path.join(first, "ensemble.csv")) == _read(os.path.join(second, "ensemble.csv"))


def test_schema_mismatch_is_rejected(tmp_path):
    path = str(tmp_path / "drift.csv")
    write_csv(path, expand_columns("drift", 1), [])
    write_csv(path, expand_columns("drift", 1), [["0.5", "0", "0", "1", "1", "1", "1", "true"]])
    with pytest.raises(SchemaError):
        write_csv(path, expand_columns("drift", 2), [])


def test_expand_columns():
    assert expand_columns("drift", 2)[:5] == ["t", "x_1", "x_2", "v_1", "v_2"]


def test_report_on_empty_directory(tmp_path):
    assert emit_report(str(tmp_path)) == "no artifacts"


def test_report_lists_constants_with_provenance(tiny_config, tmp_path):
    out = str(tmp_path / "sim")
    run("simulate", tiny_config, out=out)
    report = emit_report(out)
    assert report.splitlines()[0].split() == list(SCHEMAS["constants"])
    assert "n_paths" in report
    assert "configured" in report


def test_lyapunov_subcommand(tiny_config, tmp_path):
    out = str(tmp_path / "lyap")
    overrides = ["simulation.n_paths=1000", "lyapunov.times=0.5", "lyapunov.grid=3"]
    assert run("lyapunov", tiny_config, overrides, out=out) == ExitCode.OK
    with open(os.path.join(out, "drift.csv"), encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    assert all(r["pass"] == "true" for r in rows)


def test_coupling_subcommand(tiny_config, tmp_path):
    out = str(tmp_path / "coupling")
    overrides = ["coupling.n_pairs=20000", "coupling.R=2", "coupling.delta=0.5", "coupling.t=1"]
    assert run("coupling", tiny_config, overrides, out=out) == ExitCode.OK
    with open(os.path.join(out, "coupling.csv"), encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    assert all(float(r["ci_lo"]) > 0 for r in rows)


def test_coupling_without_rho_successes_is_inconclusive(tiny_config, tmp_path, monkeypatch):
    def euclidean_only(p, z1, z2, t, delta, cfg, mp, **kwargs):
        return ProbEstimate(z1.as_vector(), z2.as_vector(), t, delta, 100, 5, 0.05, 0.02, 0.1,
                            0, 0.0, 0.0, 0.03)

    monkeypatch.setattr(harness, "coupling_probability", euclidean_only)
    out = str(tmp_path / "coupling")
    assert run("coupling", tiny_config, out=out) == ExitCode.INCONCLUSIVE
    rows = _constants(out)
    assert rows["a_coupling"] == {"value": "0.0", "status": "inconclusive"}


def _constants(out):
    with open(os.path.join(out, "constants.csv"), encoding="utf-8", newline="") as fh:
        return {r["constant"]: {"value": r["value"], "status": r["status"]} for r in csv.DictReader(fh)}


def test_read_certificate(tmp_path):
    path = tmp_path / "certificate.txt"
    path.write_text("format_version=1\nlambda_final=0.25\n", encoding="utf-8")
    assert read_certificate(str(path)) == {"format_version": "1", "lambda_final": "0.25"}


def test_main_selftest(tmp_path, capsys):
    assert main(["selftest", "--out", str(tmp_path)]) == ExitCode.OK
    assert "no artifacts" in capsys.readouterr().out


def test_main_rejects_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["plot"])
    assert info.value.code == ExitCode.USAGE


def test_main_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert TOOL_VERSION in capsys.readouterr().out


def test_certify_without_coupling_successes_exits_inconclusive(tmp_path):
    out = str(tmp_path / "cert")
    overrides = ["simulation.n_paths=300", "simulation.dt=0.05", "certify.coupling_pairs=3",
                 "certify.pairing=independent"]
    assert run("certify", os.path.join(CONFIG_DIR, "quadratic.cfg"), overrides, out=out) == ExitCode.INCONCLUSIVE
    assert _constants(out)["stage_coupling"]["status"] == "inconclusive"
    assert not os.path.exists(os.path.join(out, "certificate.txt"))


def test_certify_reports_a_short_certification_time(tmp_path):
    out = str(tmp_path / "cert")
    overrides = ["simulation.n_paths=300", "simulation.dt=0.05", "certify.t_cert=5"]
    assert run("certify", os.path.join(CONFIG_DIR, "quadratic.cfg"), overrides, out=out) == ExitCode.FAILED
    assert _constants(out)["stage_small"]["status"] == "failed"


def _certify_end_to_end(tmp_path, overrides):
    out = str(tmp_path / "cert")
    assert run("certify", os.path.join(CONFIG_DIR, "quadratic.cfg"), overrides, out=out) == ExitCode.OK
    cert = read_certificate(os.path.join(out, "certificate.txt"))
    assert float(cert["lambda_final"]) > 0
    assert cert["soundness"] == "true"
    return _constants(out)


def test_certify_quadratic_end_to_end_reduced(tmp_path):
    constants = _certify_end_to_end(tmp_path, ["simulation.n_paths=1000", "simulation.dt=0.02",
                                               "certify.coupling_pairs=4000", "rate.n=512"])
    assert constants["mid_degenerate"]["status"] == "degenerate"
    assert constants["drift_fallback"] == {"value": "false", "status": "ok"}


@pytest.mark.slow
def test_certify_quadratic_end_to_end(tmp_path):
    _certify_end_to_end(tmp_path, [])
