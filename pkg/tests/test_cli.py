import json
import subprocess
import sys

import pytest
import yaml

from pm_viab import __version__, experiments
from pm_viab.cli import main
from pm_viab.config import ConfigError, ExperimentConfig, load_config, parse_config

TINY = {
    "grid_n": 7,
    "beta_x": {"kind": "linear"},
    "f2": {"family": "decay", "params": {"c": 5.0}},
    "constraint": {"kind": "decay-epigraph"},
    "T": 0.05,
    "epsilons": [0.02, 0.01],
    "n_mc": 8,
    "seeds": [0, 1],
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(*args):
    return main([str(a) for a in args])


def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_config_round_trip():
    cfg = parse_config(yaml.safe_dump(TINY))
    text = cfg.dump()
    again = parse_config(text)
    assert again.dump() == text and again.digest() == cfg.digest()
    assert load_config(None) == ExperimentConfig()


@pytest.mark.parametrize("text", [
    "grid_n: [",
    "- a list",
    "grid_nn: 7",
    "stream_x: {name: vortex}",
    "constraint: {kind: half-space}",
    "epsilons: []",
    "c_values: ['2*lambda_mid']",
    "beta_x: {kind: cubic}",
])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "stream_x: {name: vortex}",
    "beta_x: {kind: sine, params: {a: 0.1, b: 1.0}}",
    "constraint: {kind: centered-ball, params: {radius: -1}}",
    "xi: {gauss: 1}",
])
def test_bad_config_exits_2(tmp_path, text):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    assert run("omega", "--config", cfg, "--out", tmp_path / "o") == 2
    assert run("omega", "--config", tmp_path / "missing.yaml", "--out", tmp_path / "o") == 2


def test_unwritable_output_exits_3(tiny, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("omega", "--config", tiny, "--out", blocker) == 3
    assert run("omega", "--config", tiny, "--out", blocker / "sub") == 3


def test_validate_operators_default_manifest(tmp_path):
    assert run("validate-operators", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "operators.json").read_text())
    assert doc["passed"] and len(doc["checks"]) >= 10
    for check in doc["checks"]:
        assert {"check", "measured", "tolerance", "passed"} <= set(check)
    assert (tmp_path / "operators.csv").read_text().count("\n") == len(doc["checks"]) + 5


def test_invariant_failure_exits_1(tiny, tmp_path, monkeypatch, capsys):
    failing = lambda ctx, **kw: [experiments._check("skew form", 1.0, 1e-9)]
    monkeypatch.setattr(experiments, "operator_checks", failing)
    assert run("validate-operators", "--config", tiny, "--out", tmp_path) == 1
    doc = json.loads((tmp_path / "operators.json").read_text())
    assert not doc["passed"] and doc["checks"][0]["check"] == "skew form"
    assert "operators.json" in capsys.readouterr().err


def test_rates_with_zero_forcing_report_na(tmp_path):
    cfg = tmp_path / "free.yaml"
    cfg.write_text(yaml.safe_dump({**TINY, "f2": {"family": "zero"}, "refine": 1,
                                   "epsilons": [0.004, 0.002, 0.001], "seeds": [3]}))
    assert run("rates", "--config", cfg, "--out", tmp_path) == 0
    rows = (tmp_path / "rates_prop2_seed3.csv").read_text().splitlines()[5:]
    assert rows and all(r.split(",")[1] == "0" for r in rows)
    summary = json.loads((tmp_path / "rates_summary.json").read_text())
    prop2 = [r for r in summary["reports"] if r["label"] == "prop2"][0]
    assert prop2["slope"] == "NA" and prop2["seeds"] == [3]
    assert {"slope", "intercept", "C_emp", "n_mc", "seeds"} <= set(prop2)


SUBCOMMANDS = ["validate-operators", "rates", "tangency", "approx-solve", "stabilize",
               "near-viability", "omega"]


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_reruns_are_byte_identical_and_carry_provenance(sub, tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(sub, "--config", tiny, "--out", a) == 0
    assert run(sub, "--config", tiny, "--out", b) == 0
    first = outputs(a)
    assert first and first == outputs(b)
    digest = load_config(tiny).digest()
    for name, blob in first.items():
        text = blob.decode()
        if name.endswith(".csv"):
            assert f'# config_sha256: "{digest}"' in text and "# seeds: [0, 1]" in text
            assert f'# version: "{__version__}"' in text
        else:
            prov = json.loads(text)["provenance"]
            assert prov == {"config_sha256": digest, "seeds": [0, 1], "version": __version__,
                            "subcommand": sub}


@pytest.mark.parametrize("sub", ["approx-solve", "stabilize"])
def test_worker_count_does_not_change_outputs(sub, tiny, tmp_path):
    assert run(sub, "--config", tiny, "--out", tmp_path / "one") == 0
    assert run(sub, "--config", tiny, "--out", tmp_path / "three", "--workers", 3) == 0
    assert outputs(tmp_path / "one") == outputs(tmp_path / "three")


def test_output_dir_precedence(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("PM_VIAB_OUT", str(tmp_path / "env"))
    assert run("omega", "--config", tiny) == 0
    assert (tmp_path / "env" / "omega.csv").exists()
    assert run("omega", "--config", tiny, "--out", tmp_path / "flag") == 0
    assert (tmp_path / "flag" / "omega.csv").exists()


def test_stabilize_summary_reports_both_regimes(tiny, tmp_path):
    assert run("stabilize", "--config", tiny, "--out", tmp_path) == 0
    cells = json.loads((tmp_path / "stabilize_summary.json").read_text())["cells"]
    by_spec = {}
    for c in cells:
        by_spec.setdefault(c["c_spec"], []).append(c)
    assert all(c["passed"] for c in by_spec["0.5*lambda_min"])
    assert all(not c["passed"] and c["first_violation"][0] == 1 for c in by_spec["4*lambda_max"])


def test_console_script(tiny, tmp_path):
    done = subprocess.run([sys.executable, "-m", "pm_viab.cli", "omega", "--config", str(tiny),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    header = (tmp_path / "omega.csv").read_text().splitlines()[4]
    assert header == "delta,omega,defect"
    bad = subprocess.run([sys.executable, "-m", "pm_viab.cli", "nonsense"], capture_output=True)
    assert bad.returncode == 2
