"""Wasserstein-1 tools: entropic Sinkhorn, exact small-instance solvers,
the sub-group alignment loss, mixture distances and bound diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .diffnum import tensor as dn
from .clustering import (
    DegenerateInputError,
    MixtureModel,
    assign_clusters,
    covariance_trace_bound,
    delta_c,
    fit_gmm,
    subgroup_weights,
)
from .diffnum import ShapeError, Tensor


class DomainError(ValueError):
    pass


@dataclass
class TransportConfig:
    """Sinkhorn settings; with ``relative`` the regularisation is ``reg * mean(cost)``."""
    reg: float = 0.01
    relative: bool = True
    max_iters: int = 2000
    convergence_tol: float = 1e-3
    cost_metric: str = "euclidean"

    def __post_init__(self):
        if not self.reg > 0:
            raise ValueError("reg must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.cost_metric != "euclidean":
            raise ValueError(f"unsupported cost metric {self.cost_metric!r}")


@dataclass
class SinkhornResult:
    plan: np.ndarray
    distance: float
    converged: bool
    iterations: int
    marginal_error: float
    reg: float

    def __iter__(self):
        # allows ``plan, distance = sinkhorn(...)``
        return iter((self.plan, self.distance))


def pairwise_cost(a_points, b_points) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a_points, dtype=float))
    b = np.atleast_2d(np.asarray(b_points, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"point dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _check_simplex(w, name: str, allow_zero: bool) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise DomainError(f"{name} must be a non-empty vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
        raise DomainError(f"{name} is not on the probability simplex")
    if not allow_zero and np.any(w == 0):
        raise DomainError(f"{name} has zero-weight entries")
    return w


def sinkhorn(cost, a_weights=None, b_weights=None, config: TransportConfig | None = None) -> SinkhornResult:
    """Log-domain Sinkhorn. The reported distance is <plan, cost> without the entropy term."""
    config = config or TransportConfig()
    C = np.asarray(cost, dtype=float)
    n, m = C.shape
    a = _check_simplex(np.full(n, 1.0 / n) if a_weights is None else a_weights, "a_weights", False)
    b = _check_simplex(np.full(m, 1.0 / m) if b_weights is None else b_weights, "b_weights", False)
    if a.size != n or b.size != m:
        raise ShapeError(f"weights {a.size}/{b.size} do not match cost {C.shape}")
    if not np.all(np.isfinite(C)):
        raise DomainError("cost must be finite")
    scale = float(C.mean()) if config.relative else 1.0
    reg = config.reg * scale if scale > 0 else config.reg
    if C.max() == 0:
        plan = np.outer(a, b)
        return SinkhornResult(plan, 0.0, True, 0, 0.0, reg)
    log_a, log_b = np.log(a), np.log(b)
    # dual potentials (cost units) warm-started through a decreasing reg schedule; inside a
    # stage the iterations run on scalings and are absorbed into the potentials when they drift
    u, v = np.zeros(n), np.zeros(m)
    stages = [reg]
    while stages[-1] < C.max() and len(stages) < 30:
        stages.append(stages[-1] * 4.0)
    it, err = 0, np.inf
    best = (np.inf, u, v)
    for stage, eps in enumerate(reversed(stages)):
        last = stage == len(stages) - 1
        budget = config.max_iters if last else 100
        # one log-domain sweep puts the potentials in range before switching to scalings
        u = eps * (log_a - _lse((v[None, :] - C) / eps, axis=1))
        v = eps * (log_b - _lse((u[:, None] - C) / eps, axis=0))
        kernel = np.exp((u[:, None] + v[None, :] - C) / eps)
        alpha, beta = np.ones(n), np.ones(m)
        for i in range(1, budget + 1):
            it += 1
            alpha = a / np.maximum(kernel @ beta, 1e-300)
            beta = b / np.maximum(kernel.T @ alpha, 1e-300)
            if i % 10 and i != budget:
                continue
            if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))) or \
                    max(np.abs(np.log(alpha)).max(), np.abs(np.log(beta)).max()) > 50:
                u, v = u + eps * np.log(alpha), v + eps * np.log(beta)
                u = eps * (log_a - _lse((v[None, :] - C) / eps, axis=1))
                v = eps * (log_b - _lse((u[:, None] - C) / eps, axis=0))
                kernel = np.exp((u[:, None] + v[None, :] - C) / eps)
                alpha, beta = np.ones(n), np.ones(m)
            err = float(np.abs(alpha * (kernel @ beta) - a).sum())
            if last and err < best[0]:
                best = (err, u + eps * np.log(alpha), v + eps * np.log(beta))
            if err < config.convergence_tol:
                break
        if not last:
            u, v = u + eps * np.log(alpha), v + eps * np.log(beta)
    err, u, v = best
    plan = np.exp((u[:, None] + v[None, :] - C) / reg)
    return SinkhornResult(plan, float(np.sum(plan * C)), err < config.convergence_tol, it, err, reg)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    mx = x.max(axis=axis, keepdims=True)
    return np.log(np.exp(x - mx).sum(axis=axis)) + np.squeeze(mx, axis=axis)


def sinkhorn_distance(x: Tensor, y: Tensor, config: TransportConfig | None = None,
                      a_weights=None, b_weights=None, plan: np.ndarray | None = None) -> Tensor:
    """Differentiable transport cost between point clouds; the plan is held fixed (envelope gradient).

    Passing ``plan`` skips the solve and evaluates the cost of that coupling.
    """
    C = dn.cdist(x, y)
    if plan is None:
        plan = sinkhorn(C.data, a_weights, b_weights, config).plan
    return dn.tsum(C * Tensor(plan))


def exact_w1_1d(samples_a, samples_b, weights_a=None, weights_b=None) -> float:
    """W1 on the line as the integral of |F_a - F_b|; equals sorted matching for equal uniform samples."""
    xa = np.ravel(np.asarray(samples_a, dtype=float))
    xb = np.ravel(np.asarray(samples_b, dtype=float))
    if xa.size == 0 or xb.size == 0:
        raise DomainError("empty sample")
    if weights_a is None and weights_b is None and xa.size == xb.size:
        return float(np.mean(np.abs(np.sort(xa) - np.sort(xb))))
    wa = np.full(xa.size, 1.0 / xa.size) if weights_a is None else np.asarray(weights_a, float)
    wb = np.full(xb.size, 1.0 / xb.size) if weights_b is None else np.asarray(weights_b, float)
    grid = np.concatenate([xa, xb])
    order = np.argsort(grid, kind="mergesort")
    grid = grid[order]
    mass = np.concatenate([wa, -wb])[order]
    cdf_gap = np.cumsum(mass)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(grid)))


def exact_transport_small(cost, a_weights, b_weights) -> float:
    """Exact optimal transport cost by linear programming; at most 16 atoms per side."""
    C = np.asarray(cost, dtype=float)
    n, m = C.shape
    if n > 16 or m > 16:
        raise ValueError("exact solver is limited to 16 atoms per side")
    a = _check_simplex(a_weights, "a_weights", True)
    b = _check_simplex(b_weights, "b_weights", True)
    if a.size != n or b.size != m:
        raise ShapeError(f"weights {a.size}/{b.size} do not match cost {C.shape}")
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise DomainError(f"transport LP failed: {res.message}")
    return float(res.fun)


def uniform_mixture_sample(groups: Sequence, rng: np.random.Generator, return_index: bool = False):
    """Pool the groups, shuffle, and keep ceil(total / len(groups)) points.

    With ``return_index`` the positions into the pooled concatenation are returned instead.
    """
    sizes = [len(g) for g in groups]
    total = sum(sizes)
    if total == 0:
        raise DegenerateInputError("all groups are empty")
    keep = math.ceil(total / len(groups))
    idx = rng.permutation(total)[:keep]
    if return_index:
        return idx
    pooled = np.concatenate([np.asarray(g, dtype=float).reshape(len(g), -1) for g in groups if len(g)])
    return pooled[idx]


def mixture_rng(seed: int, epoch: int, t: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(t), int(k)]))


def sga_loss(representations: Tensor, labels, treatments, K: int, n_treatments: int,
             config: TransportConfig | None = None, seed: int = 0, epoch: int = 0, t: int = 0,
             plans: dict | None = None) -> Tensor:
    """Weighted distance of every (treatment, sub-group) cloud to that sub-group's uniform mixture.

    ``representations`` is an (n, d) tensor for one timestep. Treatments absent at this
    step do not count towards the mixture fraction; empty (a, k) cells are skipped.
    A ``plans`` dict is filled with the solved couplings keyed by (k, a) and reused
    when a key is already present, which freezes the loss to fixed couplings.
    """
    reps = representations if isinstance(representations, Tensor) else Tensor(representations)
    labels = np.asarray(labels, dtype=int)
    treatments = np.asarray(treatments, dtype=int)
    if reps.ndim != 2 or len(labels) != reps.shape[0] or len(treatments) != reps.shape[0]:
        raise ShapeError("representations, labels and treatments must align")
    assign = subgroup_weights(labels, treatments, K, n_treatments)
    present = [a for a in range(n_treatments) if a not in assign.empty_treatments]
    terms = []
    for k in range(K):
        members = [np.flatnonzero((labels == k) & (treatments == a)) for a in present]
        if sum(len(m) for m in members) == 0:
            continue
        pooled = np.concatenate(members)
        mix_rows = pooled[uniform_mixture_sample(members, mixture_rng(seed, epoch, t, k), return_index=True)]
        mixture = dn.take_rows(reps, mix_rows)
        for a, rows in zip(present, members):
            if len(rows) == 0:
                continue
            frozen = plans.get((k, a)) if plans is not None else None
            xa = dn.take_rows(reps, rows)
            if frozen is None:
                frozen = sinkhorn(pairwise_cost(xa.data, mixture.data), config=config).plan
                if plans is not None:
                    plans[(k, a)] = frozen
            d = sinkhorn_distance(xa, mixture, plan=frozen)
            terms.append(d * float(assign.weights[k, a]))
    if not terms:
        return dn.tsum(reps * 0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


# ---------------------------------------------------------------------------
# mixtures and bound diagnostics


def sampled_component_w1(mean0, var0, mean1, var1, rng: np.random.Generator, n_draws: int = 256,
                         config: TransportConfig | None = None, shortcut_trace: float = 1e-4) -> float:
    """W1 between two diagonal Gaussians from Sinkhorn on samples; near-point masses use the mean gap."""
    mean0, mean1 = np.asarray(mean0, float), np.asarray(mean1, float)
    var0, var1 = np.asarray(var0, float), np.asarray(var1, float)
    if var0.sum() < shortcut_trace and var1.sum() < shortcut_trace:
        return float(np.linalg.norm(mean0 - mean1))
    x = mean0 + rng.standard_normal((n_draws, mean0.size)) * np.sqrt(var0)
    y = mean1 + rng.standard_normal((n_draws, mean1.size)) * np.sqrt(var1)
    return sinkhorn(pairwise_cost(x, y), config=config).distance


def mw1_gaussian_mixtures(gmm0: MixtureModel, gmm1: MixtureModel,
                          component_w1_estimator: Callable | None = None,
                          rng: np.random.Generator | None = None) -> float:
    """Optimal coupling of component weights over component-to-component W1 costs."""
    rng = np.random.default_rng(0) if rng is None else rng
    est = component_w1_estimator or (lambda m0, v0, m1, v1: sampled_component_w1(m0, v0, m1, v1, rng))
    cost = np.array([[est(gmm0.means[i], gmm0.covariances[i], gmm1.means[j], gmm1.covariances[j])
                      for j in range(gmm1.n_components)] for i in range(gmm0.n_components)])
    return exact_transport_small(cost, gmm0.weights, gmm1.weights)


@dataclass
class AlignmentReport:
    marginal_w1: float | None
    weighted_subgroup_sum: float | None
    delta_c: float
    epsilon: float
    inequality_slack: float | None
    cf_risk_proxy: float | None = None
    epoch: int | None = None
    t: int | None = None
    gaps: list[str] = field(default_factory=list)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _w1_points(x: np.ndarray, y: np.ndarray, config: TransportConfig | None) -> float:
    if x.shape[1] == 1:
        return exact_w1_1d(x[:, 0], y[:, 0])
    return sinkhorn(pairwise_cost(x, y), config=config).distance


def bound_terms(representations, labels, treatments, n_treatments: int, model: MixtureModel | None = None,
                cf_risk_proxy: float | None = None, K: int = 2, config: TransportConfig | None = None,
                rng: np.random.Generator | None = None) -> AlignmentReport:
    """Measurable terms of the sub-group bound at one timestep.

    The marginal distance and the weighted sub-group sum are averaged over ordered treatment
    pairs (a, b) present at this step, using the weights of arm b.
    """
    x = np.asarray(representations, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    treatments = np.asarray(treatments, dtype=int)
    if model is None:
        model = fit_gmm(x, K, rng=rng or np.random.default_rng(0))
    labels = assign_clusters(model, x) if labels is None else np.asarray(labels, dtype=int)
    K = max(model.n_components, int(labels.max()) + 1 if labels.size else 1)
    assign = subgroup_weights(labels, treatments, K, n_treatments)
    eps = covariance_trace_bound(model)
    dc = delta_c(eps)
    present = [a for a in range(n_treatments) if a not in assign.empty_treatments]
    gaps = [f"treatment {a} empty" for a in assign.empty_treatments]
    if len(present) < 2:
        return AlignmentReport(None, None, dc, eps, None, cf_risk_proxy, gaps=gaps + ["fewer than 2 treatments"])
    marg, sub = [], []
    for a, b in combinations(present, 2):
        xa, xb = x[treatments == a], x[treatments == b]
        marg.append(_w1_points(xa, xb, config))
        for (p, q) in ((a, b), (b, a)):
            s = 0.0
            for k in range(K):
                gp, gq = x[(treatments == p) & (labels == k)], x[(treatments == q) & (labels == k)]
                if len(gp) == 0 or len(gq) == 0:
                    if assign.weights[k, q] > 0:
                        gaps.append(f"cluster {k} unpaired for treatments ({p},{q})")
                    continue
                s += assign.weights[k, q] * _w1_points(gp, gq, config)
            sub.append(s)
    m, s = float(np.mean(marg)), float(np.mean(sub))
    return AlignmentReport(m, s, dc, eps, m + dc - s, cf_risk_proxy, gaps=sorted(set(gaps)))


def paired_distance_audit(reps_by_t: dict, K: int, n_treatments: int,
                          config: TransportConfig | None = None) -> list[dict]:
    """For each (t, k, ordered treatment pair) compare the paired sub-group distance with
    the average distance to the other sub-groups of the second arm.

    ``reps_by_t`` maps t to (representations, labels, treatments).
    """
    if K < 2:
        raise DegenerateInputError("audit needs at least two clusters")
    rows = []
    for t in sorted(reps_by_t):
        x, labels, trt = reps_by_t[t]
        x = np.asarray(x, float).reshape(len(labels), -1)
        labels, trt = np.asarray(labels, int), np.asarray(trt, int)
        present = sorted(set(trt.tolist()))
        if len(present) < 2:
            raise DegenerateInputError(f"t={t}: fewer than two treatments present")
        for a in present:
            for b in present:
                if a == b:
                    continue
                for k in range(K):
                    ga = x[(trt == a) & (labels == k)]
                    if len(ga) == 0:
                        continue
                    gb = x[(trt == b) & (labels == k)]
                    others = [x[(trt == b) & (labels == j)] for j in range(K) if j != k]
                    others = [o for o in others if len(o)]
                    if len(gb) == 0 or not others:
                        continue
                    paired = _w1_points(ga, gb, config)
                    nonpaired = float(np.mean([_w1_points(ga, o, config) for o in others]))
                    rows.append({"t": int(t), "k": k, "treatment_a": a, "treatment_b": b,
                                 "paired_w1": paired, "nonpaired_w1": nonpaired,
                                 "paired_lt_nonpaired": bool(paired < nonpaired)})
    return rows


def write_rows_csv(rows: list[dict], path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + ["config_hash"])
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols] + [config_hash])
    return path


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def write_reports_json(reports: Sequence[AlignmentReport], path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": config_hash, "reports": [r.to_dict() for r in reports]},
                               indent=1, sort_keys=True))
    return path
