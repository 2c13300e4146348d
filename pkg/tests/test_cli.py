import io
import json

import pytest

from cfseq.cli import SpecError, parse_spec, run


def _spec(tmp_path, **over):
    spec = {
        "simulation": {"gamma": 2.0, "n_units": 40, "horizon": 8},
        "train": {"max_epochs": 2, "pretrain_epochs": 1, "gap_epoch": 1, "hidden_width": 8, "head_hidden": [8],
                  "batch_size": 8, "lambda": 0.01, "sga_min_group": 2},
        "evaluation": {"tau_max": 3},
        "seeds": [0],
        "out": str(tmp_path / "out"),
    }
    spec.update(over)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    return path


def _run(*argv):
    buf = io.StringIO()
    code = run(list(argv), stdout=buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 1
    return code, json.loads(lines[0])


def test_simulate_writes_requested_units(tmp_path):
    p = _spec(tmp_path, simulation={"gamma": 2.0, "n_units": 10, "horizon": 8})
    code, status = _run("simulate", "--spec", str(p), "--jobs", "1")
    assert code == 0 and status["status"] == "ok" and status["n_units"] == 10
    ds = json.loads((tmp_path / "out" / "simulate" / "dataset" / "dataset.json").read_text())
    assert ds["config_hash"] == status["config_hash"]


def test_train_then_oracle_evaluate_gives_zero(tmp_path):
    p = _spec(tmp_path, evaluation={"tau_max": 3, "oracle": True})
    assert _run("train", "--spec", str(p))[0] == 0
    code, status = _run("evaluate", "--spec", str(p))
    assert code == 0
    assert all(v == 0.0 for v in status["nrmse"].values())
    lines = (tmp_path / "out" / "evaluate" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 and all(line.endswith(status["config_hash"]) for line in lines[1:])


def test_invalid_spec_exit_two_with_field_messages(tmp_path):
    p = _spec(tmp_path, train={"lambda": -1, "gap_epoch": 0}, evaluation={"tau_max": 0, "bogus": 1})
    code, status = _run("train", "--spec", str(p))
    assert code == 2 and status["status"] == "invalid_spec"
    joined = " | ".join(status["errors"])
    for needle in ("train.lambda", "train.gap_epoch", "evaluation.tau_max", "evaluation.bogus"):
        assert needle in joined


def test_missing_spec_file_is_invalid(tmp_path):
    code, status = _run("simulate", "--spec", str(tmp_path / "nope.json"))
    assert code == 2


def test_runtime_failure_exit_one(tmp_path):
    p = _spec(tmp_path)
    code, status = _run("evaluate", "--spec", str(p))
    assert code == 1 and status["status"] == "error" and "checkpoint" in status["error"]


def test_env_overrides_seed_and_out_only(tmp_path):
    raw = json.loads(_spec(tmp_path).read_text())
    spec = parse_spec(raw, env={"CFSEQ_SEED": "7", "CFSEQ_OUT": str(tmp_path / "elsewhere")})
    assert spec.seeds == [7] and spec.simulation.seed == 7 and spec.out == tmp_path / "elsewhere"
    flagged = parse_spec(raw, seed=3, env={"CFSEQ_SEED": "7"})
    assert flagged.seeds == [3]
    assert parse_spec(raw, env={"CFSEQ_GAMMA": "9"}).simulation.gamma == 2.0
    with pytest.raises(SpecError):
        parse_spec({**raw, "seeds": []}, env={})


def test_rerun_is_byte_identical_and_report_checks_hashes(tmp_path):
    p = _spec(tmp_path)
    _run("train", "--spec", str(p))
    _run("audit", "--spec", str(p))
    first = (tmp_path / "out" / "audit" / "paired_distance.csv").read_bytes()
    _run("train", "--spec", str(p))
    _run("audit", "--spec", str(p))
    assert (tmp_path / "out" / "audit" / "paired_distance.csv").read_bytes() == first
    assert (tmp_path / "out" / "audit" / "attention.csv").exists()
    code, status = _run("report", "--spec", str(p))
    assert code == 0 and status["sources"] == 2
    code, status = _run("report", "--spec", str(p), "--seed", "5")
    assert code == 1 and "refusing" in status["error"]


def test_diagnose_bound_series(tmp_path):
    p = _spec(tmp_path)
    code, status = _run("diagnose-bound", "--spec", str(p))
    assert code == 0 and status["runs"] == ["control", "aligned"] and status["snapshots"] == 4
    assert (tmp_path / "out" / "diagnose-bound" / "bound_series.csv").exists()


def test_ablate_masking_grid(tmp_path):
    p = _spec(tmp_path, suite={"tables": ["table3"], "mask_prob": 0.2})
    code, status = _run("ablate", "--spec", str(p), "--jobs", "1")
    assert code == 0 and status["cells"] == 6 and status["failed"] == 0
    lines = (tmp_path / "out" / "ablate" / "table3_masking.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 3
