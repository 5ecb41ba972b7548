import json
import math

import pytest

from thirdgrade import __version__
from thirdgrade.cli import DEFAULTS, ConfigError, config_hash, load_config, main, run, strip_volatile, validate

SMALL = {"grid": {"Lx": 2.0, "Ly": 1.0, "nx": 16, "ny": 8}, "basis": {"m": 8},
         "noise": {"n_modes": 4, "amplitude": 5.0},
         "calibrate": {"n_samples": 50, "n_trilinear": 10},
         "properties": {"n_fields": 20, "n_triples": 20, "n_lipschitz": 3}}


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_properties_default_config_passes(tmp_path):
    assert main(["properties", "--out", str(tmp_path), "--threads", "1"]) == 0
    rep = _report(tmp_path)
    suites = rep["result"]["suites"]
    for name in ("projection", "K_pairing", "K_identity", "convection_skew", "monotonicity", "lipschitz",
                 "zero_trajectory", "ou_shift"):
        assert suites[name]["passed"] == suites[name]["total"] > 0, name
    assert rep["code_version"] == __version__
    assert rep["config_hash"] == config_hash(rep["config"])
    assert (tmp_path / "suites.csv").exists()


def test_regime_boundary_is_rejected(tmp_path, capsys):
    nu, beta = 0.05, 0.01
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"params": {"nu": nu, "beta": beta, "alpha": math.sqrt(2 * nu * beta)}}))
    assert main(["properties", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "|alpha| < sqrt(2 nu beta)" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_validation_lists_every_violated_field():
    bad = {"kind": "nope", "grid": {"nx": 2}, "params": {"nu": -1.0}, "noise": {"seed": None, "s_exp": 0.5},
           "run": {"dt": 0.0, "horizons": [2.0, 1.0]}}
    with pytest.raises(ConfigError) as err:
        load_config(overrides=bad)
    fields = " ".join(err.value.errors)
    for name in ("kind", "grid.nx", "params.nu", "noise.seed", "noise.s_exp", "run.dt", "run.horizons"):
        assert name in fields, name
    assert validate(load_config()) == []


def test_same_config_gives_identical_reports(tmp_path):
    cfg = load_config(overrides=dict(SMALL, kind="properties"))
    assert run(cfg, tmp_path / "a", threads=1) == 0
    assert run(cfg, tmp_path / "b", threads=1) == 0
    a, b = _report(tmp_path / "a"), _report(tmp_path / "b")
    assert json.dumps(strip_volatile(a), sort_keys=True) == json.dumps(strip_volatile(b), sort_keys=True)
    assert (tmp_path / "a" / "suites.csv").read_bytes() == (tmp_path / "b" / "suites.csv").read_bytes()


def test_toml_and_json_configs_agree(tmp_path):
    (tmp_path / "c.toml").write_text('kind = "calibrate"\n[grid]\nnx = 16\nny = 8\nLx = 2.0\n[basis]\nm = 8\n'
                                     '[noise]\nn_modes = 4\n[calibrate]\nn_samples = 50\nn_trilinear = 10\n')
    (tmp_path / "c.json").write_text(json.dumps({"kind": "calibrate", "grid": {"nx": 16, "ny": 8, "Lx": 2.0},
                                                 "basis": {"m": 8}, "noise": {"n_modes": 4},
                                                 "calibrate": {"n_samples": 50, "n_trilinear": 10}}))
    assert load_config(tmp_path / "c.toml") == load_config(tmp_path / "c.json")


def test_seed_override_and_simulate_artifacts(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(SMALL, run={"dt": 0.01, "t_end": 0.1, "store_every": 2})))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed-override", "11"]) == 0
    rep = _report(tmp_path / "o")
    assert rep["config"]["noise"]["seed"] == 11
    assert rep["result"]["n_steps"] == 10
    for name in ("trajectory.csv", "ledger.csv", "final_v.json", "ledger.png"):
        assert (tmp_path / "o" / name).exists(), name
    assert list((tmp_path / "o" / "checkpoints").glob("*.json"))


def test_calibrate_writes_reusable_constants(tmp_path):
    cfg = load_config(overrides=dict(SMALL, kind="calibrate"))
    assert run(cfg, tmp_path / "cal", threads=1) == 0
    body = _report(tmp_path / "cal")["result"]
    assert body["lam_hat"] == body["mu_1"]
    reuse = load_config(overrides=dict(SMALL, kind="properties",
                                       calibrate={"constants_file": str(tmp_path / "cal" / "constants.json")}))
    assert run(reuse, tmp_path / "p", threads=1) == 0
    assert _report(tmp_path / "p")["result"]["constants"]["C_K"] == body["constants"]["C_K"]


def test_runtime_error_exit_code(tmp_path):
    cfg = load_config(overrides=dict(SMALL, kind="calibrate",
                                     calibrate={"constants_file": str(tmp_path / "missing.json")}))
    cfg["kind"] = "properties"
    assert run(cfg, tmp_path, threads=1) == 1
    rep = _report(tmp_path)
    assert rep["status"] == "error" and "missing.json" in rep["error"]


def test_property_violation_exit_code(tmp_path):
    # ten thousand relaxation times cannot be matched to 5% when only a handful are simulated
    cfg = load_config(overrides=dict(SMALL, kind="ou-diagnostics", ou={"relaxation_times": 5.0}))
    assert run(cfg, tmp_path, threads=1) == 2
    assert _report(tmp_path)["status"] == "property violated"


def test_defaults_are_not_mutated():
    before = json.dumps(DEFAULTS, sort_keys=True)
    load_config(overrides={"grid": {"nx": 32}})
    assert json.dumps(DEFAULTS, sort_keys=True) == before
