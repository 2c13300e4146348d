"""Counterfactual metrics, attention audits and the ablation suite."""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .masking import MaskConfig
from .simulator import (
    V_MAX,
    CounterfactualBundle,
    SimulationConfig,
    Trajectory,
    continue_trajectory,
    generate_dataset,
    one_step_bundles,
    sliding_bundles,
)
from .training import (
    TrainConfig,
    build_batch,
    config_hash,
    train,
)


class DomainError(ValueError):
    pass


class UnsupportedVariantError(ValueError):
    pass


def normalized_rmse(predictions, truths, v_max: float = V_MAX) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(truths, dtype=float).ravel()
    if p.size == 0 or p.size != y.size:
        raise DomainError("predictions and truths must be non-empty and of equal length")
    return float(np.sqrt(np.mean((p - y) ** 2)) / v_max)


class OracleModel:
    """Predicts with the simulator itself; every metric against it is zero."""

    variant = "oracle"

    def __init__(self, config: SimulationConfig):
        self.config = config

    def rollout(self, trajectories: Sequence[Trajectory], t: int, plans, tau: int | None = None) -> np.ndarray:
        plans = np.asarray(plans, dtype=int)
        if plans.ndim == 2:
            plans = np.broadcast_to(plans, (len(trajectories),) + plans.shape)
        return np.array([continue_trajectory(tr, t, p, self.config) for tr, p in zip(trajectories, plans)])


class ConstantModel:
    """Predicts the same volume everywhere (closed-form reference for tests)."""

    variant = "constant"

    def __init__(self, value: float):
        self.value = float(value)

    def rollout(self, trajectories, t, plans, tau=None) -> np.ndarray:
        plans = np.asarray(plans)
        tau = plans.shape[-2] if tau is None else tau
        return np.full((len(trajectories), tau), self.value)


def _group_by_anchor(bundles: Sequence[CounterfactualBundle]) -> dict[int, list[CounterfactualBundle]]:
    groups: dict[int, list[CounterfactualBundle]] = defaultdict(list)
    for b in bundles:
        groups[b.anchor_time].append(b)
    return dict(sorted(groups.items()))


def _predict_bundles(model, bundles, lookup, tau: int, plan_filter=None):
    """Rollout predictions and truths for every (bundle, plan); returns per-row arrays."""
    preds, truths, plan_ids = [], [], []
    for t, group in _group_by_anchor(bundles).items():
        trs, plans, tr_out, pid = [], [], [], []
        for b in group:
            for j, plan in enumerate(b.treatment_plans):
                if plan_filter is not None and not plan_filter(b, j):
                    continue
                trs.append(lookup[b.unit_id])
                plans.append(plan[:tau])
                tr_out.append(b.true_outcomes[j, :tau])
                pid.append(j)
        if not trs:
            continue
        preds.append(np.asarray(model.rollout(trs, t, np.array(plans), tau)))
        truths.append(np.array(tr_out))
        plan_ids.append(np.array(pid))
    if not preds:
        raise DomainError("no bundle rows selected")
    return np.concatenate(preds), np.concatenate(truths), np.concatenate(plan_ids)


def _is_factual(b: CounterfactualBundle, j: int) -> bool:
    n = len(b.factual_plan)
    return np.array_equal(b.treatment_plans[j, :n], b.factual_plan)


def eval_one_step(model, bundles: Sequence[CounterfactualBundle], trajectories: Sequence[Trajectory],
                  counterfactual_only: bool = False, v_max: float = V_MAX) -> dict:
    lookup = {tr.unit_id: tr for tr in trajectories}
    filt = (lambda b, j: not _is_factual(b, j)) if counterfactual_only else None
    p, y, _ = _predict_bundles(model, bundles, lookup, 1, filt)
    return {"tau": 1, "nrmse": normalized_rmse(p[:, 0], y[:, 0], v_max), "n": int(len(p))}


def eval_sliding(model, bundles: Sequence[CounterfactualBundle], trajectories: Sequence[Trajectory],
                 tau_max: int | None = None, v_max: float = V_MAX) -> list[dict]:
    """Rows for tau = 2..tau_max; at horizon tau only plans treating inside the first tau steps count."""
    lookup = {tr.unit_id: tr for tr in trajectories}
    tau_max = tau_max or bundles[0].horizon
    if any(b.horizon < tau_max for b in bundles):
        raise DomainError("bundle horizon shorter than tau_max")
    p, y, pid = _predict_bundles(model, bundles, lookup, tau_max)
    rows = []
    for tau in range(2, tau_max + 1):
        keep = pid < tau
        rows.append({"tau": tau, "nrmse": normalized_rmse(p[keep, tau - 1], y[keep, tau - 1], v_max),
                     "n": int(keep.sum())})
    return rows


def attention_audit(model, trajectories: Sequence[Trajectory], t: int | None = None) -> dict:
    """Final-layer attention of query step t: mass on earlier steps and on step t itself."""
    if getattr(model, "variant", None) != "attention":
        raise UnsupportedVariantError("attention audit needs an attention-variant model")
    batch = build_batch(trajectories, model.scaler)
    T = batch.target.shape[1]
    t = T - 1 if t is None else t
    if not 0 <= t < T:
        raise DomainError(f"t={t} outside [0, {T})")
    _, _, attn = model.forward(batch.covariates[:, : t + 1], batch.prev_treatment[:, : t + 1],
                               batch.treatment[:, : t + 1], return_attention=True)
    row = attn[:, :, t, :].mean(axis=1)  # average heads -> (B, t+1)
    past = row[:, :t].sum(axis=1)
    current = row[:, t]
    return {"t": t, "past_mass": float(past.mean()), "current_mass": float(current.mean()),
            "per_unit_past": past.tolist(), "per_unit_current": current.tolist()}


# ---------------------------------------------------------------------------
# ablation suite


@dataclass
class Cell:
    """One trained configuration in the ablation grid."""
    name: str
    train: TrainConfig
    tags: dict = field(default_factory=dict)


@dataclass
class SuiteSpec:
    simulation: SimulationConfig
    cells: list[Cell]
    seeds: list[int]
    tau_max: int = 6
    counterfactual_only: bool = False
    jobs: int = 1
    anchor_stride: int = 1


def cell_metrics(sim: SimulationConfig, cell: Cell, seed: int, tau_max: int, counterfactual_only: bool = False,
                 anchor_stride: int = 1, return_model: bool = False):
    """Train one cell on the dataset for ``seed`` and evaluate on the test split."""
    ds = generate_dataset(replace(sim, seed=seed))
    cfg = replace(cell.train, seed=seed)
    model, record = train(ds, cfg)
    test = ds.split("test")
    T = sim.horizon
    one = one_step_bundles(test, sim, anchors=range(1, T, anchor_stride))
    slide = sliding_bundles(test, sim, tau_max, anchors=range(1, T - tau_max + 1, anchor_stride))
    rows = [eval_one_step(model, one, test, counterfactual_only, sim.v_max)]
    rows += eval_sliding(model, slide, test, tau_max, sim.v_max)
    out = {"cell": cell.name, "seed": seed, "rows": rows, "status": record.status,
           "best_epoch": record.best_epoch, "tags": cell.tags}
    if model.variant == "attention":
        audit = attention_audit(model, test)
        out["past_mass"], out["current_mass"] = audit["past_mass"], audit["current_mass"]
    if return_model:
        return out, model, record, ds
    return out


def _run_cell(args):
    sim, cell, seed, tau_max, cf_only, stride = args
    try:
        return cell_metrics(sim, cell, seed, tau_max, cf_only, stride)
    except Exception as exc:  # a failed cell is recorded and the suite continues
        return {"cell": cell.name, "seed": seed, "rows": [], "status": f"failed: {type(exc).__name__}: {exc}",
                "tags": cell.tags}


def run_suite(spec: SuiteSpec) -> list[dict]:
    jobs = [(spec.simulation, c, s, spec.tau_max, spec.counterfactual_only, spec.anchor_stride)
            for c in spec.cells for s in spec.seeds]
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def long_rows(results: Sequence[dict], gamma: float) -> list[dict]:
    """Flatten suite results to one row per (cell, seed, tau)."""
    out = []
    for r in results:
        for row in r["rows"]:
            out.append({"gamma": gamma, "method": r["cell"], "seed": r["seed"], "tau": row["tau"],
                        "nrmse": row["nrmse"], **{k: v for k, v in sorted(r.get("tags", {}).items())}})
    return out


def aggregate(rows: Sequence[dict], keys=("gamma", "method", "tau")) -> list[dict]:
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in keys)].append(r["nrmse"])
    out = []
    for k, vals in groups.items():
        v = np.asarray(vals)
        out.append({**dict(zip(keys, k)), "mean": float(v.mean()), "std": float(v.std()),
                    "median": float(np.median(v)), "n_seeds": int(v.size)})
    return out


def write_table(rows: Sequence[dict], path, config_hash_value: str) -> Path:
    """Deterministic CSV: fixed column order, repr floats, config hash on every row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + ["config_hash"])
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in cols]
                       + [config_hash_value])
    return path


TABLES = {
    "table1.csv": "main comparison over tau: baseline vs +SGA+RTM",
    "table2_sga.csv": "baseline vs +SGA",
    "table2_rtm.csv": "baseline vs +RTM",
    "table3_masking.csv": "masking strategies (gaussian, zero, interpolation, none) with SGA",
    "table4_clusters.csv": "cluster count and algorithm sensitivity with SGA",
    "table6_maskfreq.csv": "masking probability sweep",
}


def default_cells(base: TrainConfig, lam: float = 0.05, mask_prob: float = 0.05, which: Sequence[str] = ("all",)
                  ) -> list[Cell]:
    """The standard grid: method comparison, masking strategies, cluster settings, masking frequency."""
    want = set(which)
    g = MaskConfig("gaussian", mask_prob)
    none = MaskConfig("none", 0.0)
    cells: list[Cell] = []

    def add(name, table, **kw):
        tags = {"table": table}
        tags.update({k: v for k, v in kw.pop("tags", {}).items()})
        cells.append(Cell(name, replace(base, **kw), tags))

    if want & {"all", "table1", "table2", "table3"}:
        add("baseline", "main", lam=0.0, mask=none)
        add("sga", "main", lam=lam, mask=none)
        add("rtm", "main", lam=0.0, mask=g)
        add("sga+rtm", "main", lam=lam, mask=g)
    if want & {"all", "table3"}:
        add("sga+zero", "masking", lam=lam, mask=MaskConfig("zero", mask_prob))
        add("sga+interpolation", "masking", lam=lam, mask=MaskConfig("interpolation", mask_prob))
    if want & {"all", "table4"}:
        for algo in ("gmm", "kmeans"):
            for K in (2, 3, 5):
                add(f"sga-{algo}-K{K}", "clusters", lam=lam, mask=none, K=K, cluster_algorithm=algo,
                    tags={"algorithm": algo, "K": K})
    if want & {"all", "table6"}:
        for p in (0.0, 0.02, 0.05, 0.10, 0.20, 0.50):
            add(f"rtm-p{p:.2f}", "maskfreq", lam=0.0, mask=MaskConfig("gaussian", p), tags={"prob": p})
    return cells


def ablation_suite(spec: SuiteSpec, out_dir, config_hash_value: str | None = None) -> dict:
    """Run every (cell, seed) and write the per-table CSVs plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash_value or config_hash({"simulation": spec.simulation.to_dict(),
                                          "cells": [{"name": c.name, "train": c.train.to_dict()} for c in spec.cells],
                                          "seeds": spec.seeds, "tau_max": spec.tau_max})
    results = run_suite(spec)
    gamma = spec.simulation.gamma
    rows = long_rows(results, gamma)
    by_name = {c.name: c for c in spec.cells}

    def pick(names):
        return [r for r in rows if r["method"] in names]

    def present(names):
        return [n for n in names if n in by_name]

    tables = {
        "table1.csv": aggregate(pick(present(["baseline", "sga+rtm"]))),
        "table2_sga.csv": aggregate(pick(present(["baseline", "sga"]))),
        "table2_rtm.csv": aggregate(pick(present(["baseline", "rtm"]))),
        "table3_masking.csv": _masking_table(rows, by_name),
        "table4_clusters.csv": aggregate([r for r in rows if "algorithm" in r], ("gamma", "algorithm", "K", "tau")),
        "table6_maskfreq.csv": aggregate([r for r in rows if "prob" in r], ("gamma", "prob", "tau")),
    }
    files = {}
    for name, table in tables.items():
        write_table(table, out_dir / name, h)
        files[name] = TABLES[name]
    write_table(rows, out_dir / "metrics_long.csv", h)
    status = [{"cell": r["cell"], "seed": r["seed"], "status": r["status"],
               "past_mass": r.get("past_mass"), "current_mass": r.get("current_mass")} for r in results]
    manifest = {"config_hash": h, "tables": files, "cells": status}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return {"config_hash": h, "results": results, "tables": tables, "manifest": manifest}


def _masking_table(rows, by_name) -> list[dict]:
    strategy_cells = {"sga+rtm": "gaussian", "sga+zero": "zero", "sga+interpolation": "interpolation",
                      "sga": "none"}
    picked = [{**r, "strategy": strategy_cells[r["method"]]} for r in rows if r["method"] in strategy_cells]
    return aggregate(picked, ("gamma", "strategy", "tau"))


def seed_median(table: Sequence[dict], key: str, value, tau: int) -> float:
    for r in table:
        if r[key] == value and r["tau"] == tau:
            return r["median"]
    raise KeyError((key, value, tau))


def default_jobs() -> int:
    return max(1, min(os.cpu_count() or 1, 4))
