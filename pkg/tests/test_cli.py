import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from adweight.cli import main
from adweight.io import ad_to_dict, write_ad, write_ipd
from adweight.simulation import simulate_three_trial
from adweight.weights import AdSummary


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("three")
    trials = simulate_three_trial(600, 21)
    write_ipd(trials[1:], d / "ipd.csv")
    write_ad([AdSummary.from_trial(trials[0])], d / "ad.yaml")
    (d / "analysis.yaml").write_text(yaml.safe_dump({"ipd": "ipd.csv", "ad": "ad.yaml", "seed": 7}))
    return d


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_fit_json(inputs, capsys, tmp_path):
    code, out, _ = run(["fit", "--config", inputs / "analysis.yaml", "--format", "json",
                        "--output", tmp_path / "rep"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["seed"] == 7
    assert set(doc["pairs"]) == {"1,2", "1,3"}
    assert doc["inputs"]["ipd"][0]["n"] == 600
    # pooled estimate is the weighted sum of the pairwise ones
    w = doc["pool_weights"]
    for term in ("intercept", "treatment"):
        pooled = doc["trials"]["1"][term]["estimate"]
        combo = sum(w[k] * doc["pairs"][f"1,{k}"][term]["estimate"] for k in ("2", "3"))
        assert pooled == pytest.approx(combo, abs=1e-12)
        assert doc["trials"]["1"][term]["se"] > 0
    assert (tmp_path / "rep.json").exists() and (tmp_path / "rep.txt").exists()
    assert json.loads((tmp_path / "rep.json").read_text()) == doc


def test_fit_text_layout(inputs, capsys):
    code, out, _ = run(["fit", "--config", inputs / "analysis.yaml"], capsys)
    assert code == 0
    assert out.splitlines()[0].startswith("seed: 7")
    header = next(l for l in out.splitlines() if "pooled" in l)
    assert "phi[1,2]" in header and "phi[1,3]" in header and "phi[1] pooled" in header
    assert "weight diagnostics" in out


def test_deterministic(inputs, capsys):
    a = run(["fit", "--config", inputs / "analysis.yaml", "--format", "json"], capsys)[1]
    b = run(["fit", "--config", inputs / "analysis.yaml", "--format", "json"], capsys)[1]
    assert a == b


def test_flags_override_config(inputs, capsys):
    code, out, _ = run(["fit", "--config", inputs / "analysis.yaml", "--seed", "99", "--pooling", "equal",
                        "--strategy", "B", "--format", "json"], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["seed"] == 99 and doc["pooling"] == "equal" and doc["strategy"] == "B"
    assert doc["pool_weights"] == {"2": 0.5, "3": 0.5}


def test_validate(inputs, capsys):
    code, out, _ = run(["validate", "--ipd", inputs / "ipd.csv", "--ad", inputs / "ad.yaml"], capsys)
    assert code == 0 and out.strip().endswith("ok")
    assert "IPD trial 2: n=600" in out


def test_schema_error_exit_2(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("study,arm,outcome,age\n1,1,2,3\n1,0,0,4\n")
    code, _, err = run(["fit", "--ipd", tmp_path / "bad.csv"], capsys)
    assert code == 2
    rec = json.loads(err)["error"]
    assert rec["category"] == "schema" and "row 1" in rec["message"]


def test_unknown_config_key_exit_2(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("ipd: x.csv\nbogus: 1\n")
    assert run(["fit", "--config", tmp_path / "c.yaml"], capsys)[0] == 2


def test_convergence_exit_3(inputs, tmp_path, capsys):
    from dataclasses import replace
    trials = [replace(t, y=np.ones_like(t.y)) for t in simulate_three_trial(200, 2)]
    write_ipd(trials, tmp_path / "ipd.csv")
    code, _, err = run(["fit", "--ipd", tmp_path / "ipd.csv"], capsys)
    assert code == 3
    assert "constant" in json.loads(err)["error"]["message"]


def _edited_ad(inputs, tmp_path, mutate):
    doc = yaml.safe_load((inputs / "ad.yaml").read_text())
    mutate(doc["trials"][0]["arms"])
    (tmp_path / "ad.yaml").write_text(yaml.safe_dump(doc))
    return ["fit", "--ipd", inputs / "ipd.csv", "--ad", tmp_path / "ad.yaml"]


def test_overlap_exit_4(inputs, tmp_path, capsys):
    def far(arms):
        arms["treated"]["means"]["age"] = 250.0
    code, _, err = run(_edited_ad(inputs, tmp_path, far), capsys)
    assert code == 4
    assert json.loads(err)["error"]["category"] == "overlap"


def test_boundary_exit_5(inputs, tmp_path, capsys):
    def zero(arms):
        arms["control"]["y_mean"] = 0.0
    code, _, err = run(_edited_ad(inputs, tmp_path, zero), capsys)
    assert code == 5
    assert "boundary" in json.loads(err)["error"]["message"]


def test_simulate(capsys, tmp_path):
    code, out, _ = run(["simulate", "--n", 3000, "--reps", 3, "--seed", 5, "--format", "json",
                        "--output", tmp_path / "mc"], capsys)
    assert code == 0
    rows = json.loads(out)
    assert {r["parameter"] for r in rows} >= {"phibar1", "interaction"}
    saved = json.loads((tmp_path / "mc.json").read_text())
    assert saved["replications"] == 3 and saved["seed"] == 5


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "adweight", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout


def test_sigma_correction_shrinks_sigma(inputs, capsys):
    base = json.loads(run(["fit", "--config", inputs / "analysis.yaml", "--format", "json"], capsys)[1])
    corr = json.loads(run(["fit", "--config", inputs / "analysis.yaml", "--format", "json",
                           "--sigma-correction"], capsys)[1])
    assert corr["summary"]["Phi"] == base["summary"]["Phi"]
    S0, S1 = np.array(base["summary"]["Sigma"]), np.array(corr["summary"]["Sigma"])
    assert np.linalg.eigvalsh(S0 - S1).min() >= -1e-12
    assert np.trace(S1) < np.trace(S0)
