"""Command-line entry point: simulate, train, evaluate, ablate, diagnose-bound, audit, report.

A run is described by a JSON spec::

    {
      "simulation": {"gamma": 6, "n_units": 200, "horizon": 30},
      "train": {"lambda": 0.005, "max_epochs": 40, "mask": {"strategy": "gaussian", "prob": 0.05}},
      "evaluation": {"tau_max": 6, "counterfactual_only": false, "oracle": false},
      "suite": {"tables": ["all"], "lambda": 0.005, "mask_prob": 0.05},
      "seeds": [0, 1, 2],
      "out": "runs/example"
    }

Only ``CFSEQ_SEED`` and ``CFSEQ_OUT`` may override the spec from the environment.
stdout receives exactly one JSON status line; everything else goes to files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .clustering import assign_clusters, fit_clusters
from .evaluation import (
    SuiteSpec,
    ablation_suite,
    attention_audit,
    default_cells,
    default_jobs,
    eval_one_step,
    eval_sliding,
    write_table,
    OracleModel,
)
from .masking import MaskConfig, ConfigError as MaskConfigError
from .simulator import (
    SimulationConfig,
    generate_dataset,
    one_step_bundles,
    save_bundles,
    save_dataset,
    sliding_bundles,
)
from .training import (
    N_TREATMENTS,
    TrainConfig,
    config_hash,
    encode_split,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .transport import paired_distance_audit, write_rows_csv

SUBCOMMANDS = ("simulate", "train", "evaluate", "ablate", "diagnose-bound", "audit", "report")
EVAL_KEYS = {"tau_max", "counterfactual_only", "oracle", "anchor_stride"}
SUITE_KEYS = {"tables", "lambda", "mask_prob"}
TOP_KEYS = {"simulation", "train", "evaluation", "suite", "seeds", "out"}


class SpecError(ValueError):
    """Invalid experiment spec; ``errors`` holds one message per offending field."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class ExperimentSpec:
    simulation: SimulationConfig
    train: TrainConfig
    seeds: list[int]
    out: Path
    evaluation: dict = field(default_factory=dict)
    suite: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def hashable(self) -> dict:
        """Everything that determines artifact content (the output path does not)."""
        return {"simulation": self.simulation.to_dict(), "train": self.train.to_dict(),
                "evaluation": self.evaluation, "suite": self.suite, "seeds": self.seeds}

    @property
    def hash(self) -> str:
        return config_hash(self.hashable())


def _collect(errors: list[str], prefix: str, fn):
    try:
        return fn()
    except (ValueError, TypeError) as exc:
        errors.append(f"{prefix}: {exc}")
        return None


def parse_spec(raw: dict, seed: int | None = None, out: str | None = None, env=None) -> ExperimentSpec:
    """Validate a spec dict. Precedence for seed/out: flag, then environment, then the file."""
    env = os.environ if env is None else env
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise SpecError(["spec: top level must be a JSON object"])
    for k in sorted(set(raw) - TOP_KEYS):
        errors.append(f"{k}: unknown field")

    sim_raw = raw.get("simulation", {})
    sim = _collect(errors, "simulation", lambda: SimulationConfig.from_dict(sim_raw))
    if sim is not None:
        _collect(errors, "simulation", sim.validate)

    tr_raw = dict(raw.get("train", {}))
    if isinstance(tr_raw.get("mask"), dict):
        m = _collect(errors, "train.mask", lambda: MaskConfig(**tr_raw["mask"]))
        tr_raw["mask"] = m if m is not None else MaskConfig("none", 0.0)
    tcfg = None
    try:
        tcfg = TrainConfig.from_dict(tr_raw)
    except (ValueError, TypeError) as exc:
        errors.extend(f"train.{e}" for e in str(exc).split("; "))

    seeds = raw.get("seeds", [0])
    if seed is None and env.get("CFSEQ_SEED"):
        try:
            seed = int(env["CFSEQ_SEED"])
        except ValueError:
            errors.append("CFSEQ_SEED: must be an integer")
    if seed is not None:
        seeds = [seed]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        errors.append("seeds: must be a non-empty list of non-negative integers")

    out_dir = out or env.get("CFSEQ_OUT") or raw.get("out")
    if not out_dir:
        errors.append("out: output directory required (spec field, --out or CFSEQ_OUT)")

    ev = dict(raw.get("evaluation", {}))
    for k in sorted(set(ev) - EVAL_KEYS):
        errors.append(f"evaluation.{k}: unknown field")
    ev.setdefault("tau_max", 6)
    ev.setdefault("counterfactual_only", False)
    ev.setdefault("oracle", False)
    ev.setdefault("anchor_stride", 1)
    if not isinstance(ev["tau_max"], int) or ev["tau_max"] < 1:
        errors.append("evaluation.tau_max: must be a positive integer")
    elif sim is not None and ev["tau_max"] >= sim.horizon:
        errors.append("evaluation.tau_max: must be smaller than simulation.horizon")
    if not isinstance(ev["anchor_stride"], int) or ev["anchor_stride"] < 1:
        errors.append("evaluation.anchor_stride: must be a positive integer")

    su = dict(raw.get("suite", {}))
    for k in sorted(set(su) - SUITE_KEYS):
        errors.append(f"suite.{k}: unknown field")
    su.setdefault("tables", ["all"])
    su.setdefault("lambda", 0.005)
    su.setdefault("mask_prob", 0.05)
    allowed = {"all", "table1", "table2", "table3", "table4", "table6"}
    if not isinstance(su["tables"], list) or set(su["tables"]) - allowed:
        errors.append(f"suite.tables: entries must come from {sorted(allowed)}")

    if errors:
        raise SpecError(errors)
    if sim is not None:
        sim = replace(sim, seed=seeds[0])
    return ExperimentSpec(sim, tcfg, seeds, Path(out_dir), ev, su)


def load_spec(path, seed=None, out=None, env=None) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SpecError([f"spec: file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise SpecError([f"spec: invalid JSON ({exc})"])
    return parse_spec(raw, seed, out, env)


# ---------------------------------------------------------------------------
# subcommands


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    return path


def cmd_simulate(spec: ExperimentSpec, jobs: int) -> dict:
    ds = generate_dataset(spec.simulation)
    out = spec.out / "simulate"
    files = save_dataset(ds, out / "dataset", spec.hash)
    test = ds.split("test")
    tau = spec.evaluation["tau_max"]
    save_bundles(one_step_bundles(test, spec.simulation), out / "bundles_one_step.json", spec.hash)
    save_bundles(sliding_bundles(test, spec.simulation, tau), out / "bundles_sliding.json", spec.hash)
    return {"n_units": len(ds.trajectories), "splits": {k: len(v) for k, v in ds.splits.items()},
            "files": sorted(str(p) for p in files.values())}


def _train_cfg(spec: ExperimentSpec, **kw) -> TrainConfig:
    return replace(spec.train, seed=spec.seed, **kw)


def cmd_train(spec: ExperimentSpec, jobs: int) -> dict:
    ds = generate_dataset(spec.simulation)
    model, record = train(ds, _train_cfg(spec))
    record.config_hash = spec.hash
    out = spec.out / "train"
    record.write_jsonl(out / "run.jsonl")
    digest = save_checkpoint(model, out / "checkpoint.json", spec.hash)
    if record.status != "ok":
        raise RuntimeError(f"training {record.status}: {record.diagnostic}")
    return {"best_epoch": record.best_epoch, "best_val_rmse": record.best_val_rmse, "checkpoint_hash": digest}


def _load_model(spec: ExperimentSpec):
    path = spec.out / "train" / "checkpoint.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run `train` first")
    model, blob = load_checkpoint(path)
    if blob.get("config_hash") != spec.hash:
        raise RuntimeError(f"checkpoint config hash {blob.get('config_hash')} does not match spec {spec.hash}")
    return model


def cmd_evaluate(spec: ExperimentSpec, jobs: int) -> dict:
    ds = generate_dataset(spec.simulation)
    oracle = bool(spec.evaluation["oracle"])
    model = OracleModel(spec.simulation) if oracle else _load_model(spec)
    test = ds.split("test")
    tau, stride = spec.evaluation["tau_max"], spec.evaluation["anchor_stride"]
    T = spec.simulation.horizon
    one = one_step_bundles(test, spec.simulation, range(1, T, stride))
    rows = [eval_one_step(model, one, test, spec.evaluation["counterfactual_only"], spec.simulation.v_max)]
    if tau >= 2:
        slide = sliding_bundles(test, spec.simulation, tau, range(1, T - tau + 1, stride))
        rows += eval_sliding(model, slide, test, tau, spec.simulation.v_max)
    method = "oracle" if oracle else "model"
    table = [{"gamma": spec.simulation.gamma, "method": method, "seed": spec.seed, **r} for r in rows]
    path = write_table(table, spec.out / "evaluate" / "metrics.csv", spec.hash)
    return {"metrics": str(path), "nrmse": {r["tau"]: r["nrmse"] for r in rows}}


def cmd_ablate(spec: ExperimentSpec, jobs: int) -> dict:
    base = replace(spec.train, seed=spec.seed)
    cells = default_cells(base, spec.suite["lambda"], spec.suite["mask_prob"], spec.suite["tables"])
    suite = SuiteSpec(spec.simulation, cells, spec.seeds, spec.evaluation["tau_max"],
                      spec.evaluation["counterfactual_only"], jobs, spec.evaluation["anchor_stride"])
    res = ablation_suite(suite, spec.out / "ablate", spec.hash)
    failed = [c for c in res["manifest"]["cells"] if c["status"] != "ok"]
    return {"cells": len(res["results"]), "failed": len(failed), "tables": sorted(res["manifest"]["tables"])}


def cmd_diagnose_bound(spec: ExperimentSpec, jobs: int) -> dict:
    """Alignment-report series per epoch for the configured run and its lambda = 0 control."""
    ds = generate_dataset(spec.simulation)
    every = spec.train.snapshot_every or 1
    rows, reports = [], []
    runs = [("control", 0.0), ("aligned", spec.train.lam)] if spec.train.lam > 0 else [("control", 0.0)]
    for name, lam in runs:
        _, rec = train(ds, _train_cfg(spec, lam=lam, snapshot_every=every))
        for snap in rec.snapshots:
            rows.append({"run": name, "lambda": lam, **{k: snap[k] for k in (
                "epoch", "marginal_w1", "weighted_subgroup_sum", "delta_c", "epsilon", "inequality_slack",
                "cf_risk_proxy")}})
            reports.append({"run": name, **snap})
    out = spec.out / "diagnose-bound"
    write_rows_csv(rows, out / "bound_series.csv", spec.hash)
    _write_json(out / "bound_series.json", {"config_hash": spec.hash, "reports": reports})
    return {"snapshots": len(rows), "runs": [r[0] for r in runs]}


def cmd_audit(spec: ExperimentSpec, jobs: int) -> dict:
    ds = generate_dataset(spec.simulation)
    model = _load_model(spec)
    test = ds.split("test")
    reps, batch = encode_split(model, test)
    T = reps.shape[1]
    K = max(2, spec.train.K)
    reps_by_t = {}
    for t in sorted({T // 4, T // 2, (3 * T) // 4, T - 1}):
        if len(set(batch.treatment_index[:, t].tolist())) < 2:
            continue  # the paired comparison needs two arms
        rng = np.random.default_rng([spec.seed, 6, t])
        fitted = fit_clusters(reps[:, t], K, spec.train.cluster_algorithm, rng)
        reps_by_t[t] = (reps[:, t], assign_clusters(fitted, reps[:, t]), batch.treatment_index[:, t])
    paired = paired_distance_audit(reps_by_t, K, N_TREATMENTS) if reps_by_t else []
    out = spec.out / "audit"
    write_rows_csv(paired, out / "paired_distance.csv", spec.hash)
    result = {"paired_rows": len(paired),
              "paired_lt_nonpaired": float(np.mean([r["paired_lt_nonpaired"] for r in paired])) if paired else None}
    if model.variant == "attention":
        attn = [{"t": t, "past_mass": a["past_mass"], "current_mass": a["current_mass"]}
                for t in range(T) for a in [attention_audit(model, test, t)]]
        write_rows_csv(attn, out / "attention.csv", spec.hash)
        result["final_past_mass"] = attn[-1]["past_mass"]
    return result


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(spec: ExperimentSpec, jobs: int) -> dict:
    """Merge every CSV under the output directory into one long-format file."""
    sources = sorted(p for p in spec.out.rglob("*.csv") if "report" not in p.relative_to(spec.out).parts)
    if not sources:
        raise FileNotFoundError(f"no CSV artifacts under {spec.out}")
    merged, hashes = [], {}
    for p in sources:
        for r in _read_csv(p):
            hashes.setdefault(r.get("config_hash", ""), set()).add(str(p.relative_to(spec.out)))
            for k, v in r.items():
                if k != "config_hash":
                    merged.append({"source": str(p.relative_to(spec.out)), "row": len(merged), "field": k,
                                   "value": v})
    if set(hashes) != {spec.hash}:
        bad = {h: sorted(f) for h, f in hashes.items() if h != spec.hash}
        raise RuntimeError(f"refusing to merge artifacts with config hashes other than {spec.hash}: {bad}")
    path = spec.out / "report" / "long.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "row", "field", "value", "config_hash"])
        for m in merged:
            w.writerow([m["source"], m["row"], m["field"], m["value"], spec.hash])
    return {"sources": len(sources), "rows": len(merged), "report": str(path)}


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "diagnose-bound": cmd_diagnose_bound,
    "audit": cmd_audit,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfseq", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--spec", required=True, help="path to the JSON experiment spec")
    p.add_argument("--seed", type=int, default=None, help="override the spec's seed list with one seed")
    p.add_argument("--out", default=None, help="output directory (overrides the spec)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for suite cells")
    return p


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)

    def emit(obj) -> None:
        stdout.write(json.dumps(obj, sort_keys=True, default=str) + "\n")
        stdout.flush()

    try:
        spec = load_spec(args.spec, args.seed, args.out)
    except (SpecError, MaskConfigError) as exc:
        errors = exc.errors if isinstance(exc, SpecError) else [str(exc)]
        emit({"status": "invalid_spec", "command": args.command, "errors": errors})
        return 2
    jobs = args.jobs if args.jobs is not None else default_jobs()
    try:
        result = COMMANDS[args.command](spec, max(1, jobs))
    except Exception as exc:
        sys.stderr.write(traceback.format_exc())
        emit({"status": "error", "command": args.command, "config_hash": spec.hash,
              "error": f"{type(exc).__name__}: {exc}"})
        return 1
    emit({"status": "ok", "command": args.command, "config_hash": spec.hash, "out": str(spec.out), **result})
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
