import csv
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from conftest import make_table
from leapsbounds.cli import algorithmic_fields, main
from leapsbounds.core import load_runtime_table, save_runtime_table

SCHEMA = json.loads((Path(__file__).parents[1] / "docs" / "report.schema.json").read_text())
RUN_FLAGS = ["--epsilon", "0.2", "--delta", "0.2", "--zeta", "0.1", "--multiplier", "1.25",
             "--stopping", "ebg", "--seed", "7"]


@pytest.fixture
def table_path(tmp_path):
    rng = np.random.default_rng(1)
    mus = np.array([2.5, 0.5, 1.5, 2.0, 3.0])[:, None]
    values = np.clip(rng.lognormal(mus, 0.6, size=(5, 400)), 1.0, 1e5)
    path = tmp_path / "t.csv"
    save_runtime_table(make_table(values, cap=1e5, kappa0=1.0), path)
    return path


def run_json(capsys, argv):
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out)


def test_run_report(capsys, table_path):
    report = run_json(capsys, ["run", "--table", str(table_path), *RUN_FLAGS])
    jsonschema.validate(report, SCHEMA)
    assert report["chosen_config"] == 1
    t = report["totals"]
    assert 0 < t["resume_seconds"] <= t["no_resume_seconds"]
    assert t["no_resume_cpu_days"] == pytest.approx(t["no_resume_seconds"] / 86400)
    assert report["params"]["multiplier"] == 1.25 and report["params"]["stopping_rule"] == "ebg"
    assert report["params"]["kappa0"] == 1.0  # read from the sidecar
    assert sum(p["work_no_resume"] for p in report["phases"]) == pytest.approx(t["no_resume_seconds"])


def test_run_out_and_trace(tmp_path, table_path):
    out, trace = tmp_path / "r.json", tmp_path / "trace.csv"
    assert main(["run", "--table", str(table_path), *RUN_FLAGS, "--out", str(out),
                 "--trace", str(trace), "--threads", "3"]) == 0
    report = json.loads(out.read_text())
    rows = list(csv.DictReader(trace.open()))
    assert len(rows) == 5 * report["final_phase"]
    assert {r["reason"] for r in rows} <= {"budget_exhausted", "all_samples", "lb_too_large",
                                           "bernstein_converged"}


def test_run_is_reproducible(capsys, table_path):
    a = run_json(capsys, ["run", "--table", str(table_path), *RUN_FLAGS])
    b = run_json(capsys, ["run", "--table", str(table_path), *RUN_FLAGS, "--threads", "2"])
    assert json.dumps(algorithmic_fields(a), sort_keys=True) == json.dumps(algorithmic_fields(b), sort_keys=True)


@pytest.mark.parametrize("bad", [["--epsilon", "0.4"], ["--delta", "1.0"], ["--zeta", "0"],
                                 ["--multiplier", "1.0"], ["--seed", "-1"], ["--threads", "0"],
                                 ["--stopping", "magic"]])
def test_invalid_flags_rejected(table_path, bad, capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "--table", str(table_path), *bad])
    assert info.value.code != 0


def test_missing_source_rejected(capsys):
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2


def test_process_exit_codes(tmp_path, table_path):
    ok = subprocess.run([sys.executable, "-m", "leapsbounds", "run", "--table", str(table_path),
                         "--out", str(tmp_path / "r.json")], capture_output=True, text=True)
    assert ok.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "leapsbounds", "run", "--table", str(table_path),
                          "--epsilon", "0.4"], capture_output=True, text=True)
    assert bad.returncode != 0 and "epsilon" in bad.stderr


def test_strict_censoring_diagnostic(tmp_path, capsys):
    path = tmp_path / "c.csv"
    save_runtime_table(make_table([[60.0] * 8, [60.0, 2.0] * 4], cap=60.0, kappa0=1.0), path)
    rc = main(["run", "--table", str(path), "--delta", "0.2", "--epsilon", "0.3"])
    err = capsys.readouterr().err
    assert rc == 1
    assert "config 0" in err and "phase" in err and "tau_k=" in err and "cap 60" in err
    assert "--censoring clamp" in err
    report = run_json(capsys, ["run", "--table", str(path), "--delta", "0.2", "--epsilon", "0.3",
                               "--censoring", "clamp"])
    assert report["chosen_config"] in (0, 1)


def test_sweep(tmp_path, table_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--table", str(table_path), *RUN_FLAGS, "--multipliers", "1.1,1.25,1.5,2.0",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [float(r["multiplier"]) for r in rows] == [1.1, 1.25, 1.5, 2.0]
    assert all(float(r["total_resume"]) <= float(r["total_no_resume"]) for r in rows)
    chosen = [r["chosen_config"] for r in rows]
    assert max(chosen.count(c) for c in chosen) >= 3


def test_single_multiplier_sweep_matches_run(tmp_path, table_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--table", str(table_path), *RUN_FLAGS, "--multipliers", "1.25",
                 "--out", str(out)]) == 0
    (row,) = list(csv.DictReader(out.open()))
    report = run_json(capsys, ["run", "--table", str(table_path), *RUN_FLAGS])
    assert float(row["total_no_resume"]) == report["totals"]["no_resume_seconds"]
    assert float(row["total_resume"]) == report["totals"]["resume_seconds"]
    assert int(row["chosen_config"]) == report["chosen_config"]
    assert int(row["phases"]) == report["final_phase"]


def test_verify_report(tmp_path, table_path, capsys):
    out = tmp_path / "r.json"
    main(["run", "--table", str(table_path), "--epsilon", "0.25", "--delta", "0.25", "--out", str(out)])
    witness = run_json(capsys, ["verify", "--report", str(out)])
    assert witness["is_optimal"] is True
    assert witness["config_id"] == 1 and witness["delta"] == 0.25
    assert witness["tail_prob_at_tau"] <= 0.25


def test_verify_argmin_config(table_path, capsys):
    table = load_runtime_table(table_path)
    best = int(np.argmin(table.values.mean(axis=1)))
    witness = run_json(capsys, ["verify", "--table", str(table_path), "--config", str(best),
                                "--epsilon", "0.01", "--delta", "0.0"])
    assert witness["is_optimal"] is True


def test_verify_curves(tmp_path, table_path):
    prefix = tmp_path / "fig"
    assert main(["verify", "--table", str(table_path), "--curve", "--deltas", "0,0.1,0.25",
                 "--out", str(prefix)]) == 0
    files = sorted(tmp_path.glob("fig_delta*.csv"))
    assert [f.name for f in files] == ["fig_delta0.1.csv", "fig_delta0.25.csv", "fig_delta0.csv"]
    for f in files:
        rows = list(csv.DictReader(f.open()))
        assert list(rows[0]) == ["config_rank", "config_id", "value"]
        values = [float(r["value"]) for r in rows]
        assert values == sorted(values) and len(rows) == 5
        assert [int(r["config_rank"]) for r in rows] == list(range(5))


def test_verify_needs_target(table_path):
    with pytest.raises(SystemExit) as info:
        main(["verify", "--table", str(table_path)])
    assert info.value.code == 2


@pytest.mark.parametrize("model,extra", [("constant", ["--mean", "2,3,4"]),
                                         ("lognormal", ["--mu", "0.5", "--sigma", "1.0"]),
                                         ("heavytail", ["--b", "100"])])
def test_gen(tmp_path, model, extra):
    out = tmp_path / "g.csv"
    assert main(["gen", "--model", model, "--configs", "3", "--instances", "50", "--cap", "500",
                 "--kappa0", "1", "--seed", "4", *extra, "--out", str(out)]) == 0
    table = load_runtime_table(out)
    assert table.values.shape == (3, 50) and table.cap == 500.0 and table.kappa0 == 1.0
    assert table.values.min() >= 1.0 and table.values.max() <= 500.0
    if model == "constant":
        np.testing.assert_array_equal(table.values.mean(axis=1), [2, 3, 4])


def test_gen_wrong_list_length(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["gen", "--model", "constant", "--mean", "1,2", "--configs", "3", "--instances", "5",
              "--out", str(tmp_path / "g.csv")])
    assert info.value.code == 2


@pytest.mark.slow
def test_subprocess_mode_end_to_end(tmp_path, capsys):
    inst = tmp_path / "inst"
    inst.mkdir()
    for name in "ab":
        (inst / name).write_text("")
    configs = tmp_path / "configs.json"
    configs.write_text(json.dumps([["0"], ["0.05"]]))
    # each phase costs about b * theta seconds of real time, so keep theta tiny
    report = run_json(capsys, ["run", "--exec-cmd", "sleep {flags}", "--instances-dir", str(inst),
                               "--configs-json", str(configs), "--kappa0", "0.003", "--wall-clock",
                               "--epsilon", "0.33", "--delta", "0.95", "--zeta", "0.95",
                               "--stopping", "fixed", "--max-phases", "4"])
    jsonschema.validate(report, SCHEMA)
    assert report["source"]["mode"] == "subprocess"
    assert report["chosen_config"] == 0 and report["chosen_label"] == "0"
