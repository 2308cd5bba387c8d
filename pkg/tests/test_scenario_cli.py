import csv
import json
import math
import re

import pytest
from conftest import box1

from rbsde import experiments
from rbsde.cli import main
from rbsde.exceptions import HypothesisError, ScenarioError
from rbsde.scenario import bundled, bundled_scenarios, parse_scenario, scenario_from_dict

MINIMAL = {"name": "ball", "m": 1, "d": 1,
           "region": {"family": "constant", "set": {"type": "ball", "center": [0.0], "radius": 1.0}},
           "terminal": {"family": "tanh", "scale": 0.5}}
SMALL = ["--paths", "1500", "--steps", "64"]


def write(tmp_path, raw, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw) if not isinstance(raw, str) else raw)
    return p


def rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# -- parsing -------------------------------------------------------------------

def test_minimal_scenario_gets_documented_defaults(tmp_path):
    sc = parse_scenario(write(tmp_path, MINIMAL))
    assert (sc.steps, sc.paths, sc.seed) == (200, 10_000, 42)
    # defaults are written back into the echoed configuration
    assert sc.config["grid"]["steps"] == 200 and sc.config["backend"]["kind"] == "regression"
    assert set(sc.validation) == {"H1", "H2", "H3", "H4"}


def test_overrides_are_applied_and_recorded(tmp_path):
    sc = parse_scenario(write(tmp_path, MINIMAL), {"seed": 7, "paths": 100, "steps": None})
    assert (sc.seed, sc.paths, sc.steps) == (7, 100, 200)
    assert sc.overrides == {"seed": 7, "paths": 100}


def test_terminal_outside_region_names_h1(tmp_path):
    raw = dict(MINIMAL, terminal={"family": "linear", "scale": 3.0})
    with pytest.raises(HypothesisError, match=r"\(H1\)"):
        parse_scenario(write(tmp_path, raw))


def test_margin_violation_names_h4_and_time(tmp_path):
    raw = dict(MINIMAL, region={"family": "moving_box", "witness": [0.9], "margin": 0.02},
               terminal={"family": "constant", "value": 0.9}, T=2.0)
    with pytest.raises(HypothesisError, match=r"\(H4\)") as info:
        parse_scenario(write(tmp_path, raw))
    # depth of 0.9 in [s - 1, s + 1] is 0.1 + s with s = sin(pi t); it reaches 0.02 at
    t_star = 1 + math.asin(0.08) / math.pi
    t = float(re.search(r"t=([0-9.]+)", str(info.value)).group(1))
    assert t_star <= t <= t_star + 2.0 / 200 + 1e-9


def test_lipschitz_violation_names_h3():
    raw = dict(MINIMAL, driver={"family": "sine", "a": 2.0, "mu": 0.5})
    with pytest.raises(HypothesisError, match=r"\(H3\)"):
        scenario_from_dict(raw)


def test_json_errors_carry_line_and_column(tmp_path):
    p = write(tmp_path, '{\n  "name": "x",\n  "m": 1,,\n}')
    with pytest.raises(ScenarioError, match=r"s\.json:3:10"):
        parse_scenario(p)


@pytest.mark.parametrize("raw, where", [
    (dict(MINIMAL, colour="red"), "unknown field"),
    (dict(MINIMAL, terminal={"family": "cubic"}), "terminal.family"),
    (dict(MINIMAL, driver={"family": "quadratic"}), "driver.family"),
    (dict(MINIMAL, region={"family": "spiral"}), "region.family"),
    (dict(MINIMAL, schemes={"penalized": [64, 32]}), "must increase"),
    ({k: v for k, v in MINIMAL.items() if k != "terminal"}, "missing field"),
])
def test_malformed_scenarios_are_rejected(raw, where):
    with pytest.raises(ScenarioError, match=where):
        scenario_from_dict(raw)


def test_bundled_corpus_validates():
    paths = bundled_scenarios()
    assert len(paths) >= 8
    for p in paths:
        sc = parse_scenario(p, {"paths": 300})
        assert sc.name == p.stem


# -- command line --------------------------------------------------------------

def test_validate_verb_prints_hypotheses(capsys):
    assert main(["validate", "constant-box-1d", "--paths", "300"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["H4"]["passed"] and out["H1"]["max_distance"] == 0.0


def test_cli_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, dict(MINIMAL, terminal={"family": "linear", "scale": 3.0}))
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "(H1)" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    assert main(["report", "constant-box-1d", "--out", str(tmp_path / "none")]) == 2
    with pytest.raises(SystemExit):
        main(["run", "constant-box-1d", "--seed", "-1"])


def test_constant_box_run_writes_check_rows(tmp_path):
    out = tmp_path / "cb"
    assert main(["run", "constant-box-1d", "--out", str(out), *SMALL]) == 0
    table = rows(out / "checks.csv")
    assert {r["scheme"] for r in table} == {"piecewise", "penalized"}
    names = {r["check"] for r in table}
    assert {"containment", "skorokhod", "jump_projection", "apriori.ratio"} <= names
    assert all(r["schema_version"] == experiments.SCHEMA_VERSION for r in table)
    assert all(r["passed"] in ("true", "report-only") for r in table)
    res = json.loads((out / "result.json").read_text())
    # the full resolved configuration and every override are echoed
    assert res["scenario"]["ensemble"] == {"seed": 42, "paths": 1500}
    assert res["overrides"] == {"paths": 1500, "steps": 64}


def test_expanding_jump_projection_row(tmp_path):
    out = tmp_path / "ej"
    assert main(["run", "expanding-jump-1d", "--out", str(out), *SMALL]) == 0
    jp = [r for r in rows(out / "checks.csv") if r["check"] == "jump_projection"]
    assert jp and all(float(r["statistic"]) <= 1e-10 for r in jp)


def test_unconstrained_has_no_reflection(tmp_path):
    out = tmp_path / "un"
    assert main(["run", "unconstrained", "--out", str(out), *SMALL]) == 0
    kv = [r for r in rows(out / "checks.csv") if r["check"] == "K_variation_max"]
    assert kv and all(float(r["statistic"]) == 0.0 for r in kv)


def test_reruns_are_byte_identical(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["sweep", "moving-box-1d", "--out", str(o), *SMALL]) == 0
    for name in ("checks.csv", "convergence.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_sweep_and_report(tmp_path, capsys):
    out = tmp_path / "mb"
    assert main(["sweep", "moving-box-1d", "--out", str(out), *SMALL]) == 0
    conv = rows(out / "convergence.csv")
    pen = [r for r in conv if r["scheme"] == "penalized"]
    assert [r["parameter"] for r in pen] == ["32", "64", "128", "256"]
    assert pen[0]["rate_containment"] == "nan"
    capsys.readouterr()
    assert main(["report", "moving-box-1d", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "containment" in text and "passed True" in text


def test_compare_adds_cross_scheme_row(tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "moving-box-1d", "--out", str(out), *SMALL]) == 0
    res = json.loads((out / "result.json").read_text())
    cross = res["cross_scheme"]
    assert 0.0 <= cross["delta_Y"] <= 1.0
    assert rows(out / "convergence.csv")[-1]["scheme"] == "piecewise-vs-penalized"


def test_identical_runs_have_zero_distances(tmp_path):
    raw = {"name": "twice", "m": 1, "d": 1, "region": {"family": "constant", "set": box1(-0.3, 0.3)},
           "terminal": {"family": "clamp", "lower": -0.3, "upper": 0.3},
           "schemes": {"penalized": [64, 64]}, "grid": {"steps": 32}, "ensemble": {"paths": 500}}
    res = experiments.run(scenario_from_dict(raw), mode="sweep")
    last = res.convergence[-1]
    assert (last["delta_Y"], last["delta_Z"], last["delta_K"]) == (0.0, 0.0, 0.0)


def test_bundled_lookup():
    assert bundled("unconstrained").name == "unconstrained.json"
    with pytest.raises(KeyError):
        bundled("nope")
