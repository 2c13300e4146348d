"""Treatment-agnostic clustering of representations into sub-groups.

Two fitters: k-means with k-means++ seeding, and a diagonal-covariance Gaussian
mixture fitted by EM from a k-means start. Treatment labels never enter the
fit; they are only used afterwards to count group membership.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffnum import ShapeError

VARIANCE_FLOOR = 1e-6


class DegenerateInputError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class MixtureModel:
    weights: np.ndarray        # (K,)
    means: np.ndarray          # (K, d)
    covariances: np.ndarray    # (K, d) diagonal variances
    log_likelihoods: list[float] = field(default_factory=list)
    variance_floor: float = VARIANCE_FLOOR

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def log_resp(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-point log responsibilities and log densities."""
        _check_dims(points, self.means.shape[1])
        diff = points[:, None, :] - self.means[None]
        log_comp = -0.5 * (np.sum(diff ** 2 / self.covariances[None], axis=2)
                           + np.sum(np.log(2 * np.pi * self.covariances), axis=1)[None])
        log_joint = log_comp + np.log(np.maximum(self.weights, 1e-300))[None]
        mx = log_joint.max(axis=1, keepdims=True)
        log_norm = mx + np.log(np.sum(np.exp(log_joint - mx), axis=1, keepdims=True))
        return log_joint - log_norm, log_norm[:, 0]

    def responsibilities(self, points: np.ndarray) -> np.ndarray:
        return np.exp(self.log_resp(np.asarray(points, dtype=float))[0])


@dataclass
class CentroidModel:
    centroids: np.ndarray      # (K, d)
    wcss: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.centroids)


@dataclass
class SubgroupAssignment:
    labels: np.ndarray         # (n,)
    counts: np.ndarray         # (K, |A|) n_k^{a}
    weights: np.ndarray        # (K, |A|) w_k^{a}; columns of empty treatments are zero
    empty_treatments: tuple[int, ...]

    def weight(self, k: int, a: int) -> float | None:
        """w_k^a, or None when treatment a has no samples."""
        return None if a in self.empty_treatments else float(self.weights[k, a])


def _check_points(points, K: int) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.size == 0:
        raise DomainError("no points to cluster")
    if K < 1:
        raise DegenerateInputError("K must be >= 1")
    if len(x) < K:
        raise DegenerateInputError(f"{len(x)} points cannot support {K} clusters")
    return x


def _check_dims(points: np.ndarray, d: int) -> None:
    if points.ndim != 2 or points.shape[1] != d:
        raise ShapeError(f"expected points of width {d}, got shape {points.shape}")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.sum((x[:, None, :] - c[None]) ** 2, axis=2)


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, K):
        d2 = _sq_dists(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def fit_kmeans(points, K: int = 2, max_iter: int = 100, rng: np.random.Generator | None = None) -> CentroidModel:
    """Lloyd iterations from k-means++ seeds; an empty cluster is re-seeded at the worst-served point."""
    x = _check_points(points, K)
    rng = np.random.default_rng(0) if rng is None else rng
    c = _kmeanspp(x, K, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, c)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for k in range(K):
            members = x[labels == k]
            if len(members):
                c[k] = members.mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(len(x)), labels]))
                c[k] = x[far]
                labels = labels.copy()
                labels[far] = k
    return CentroidModel(c, history)


def fit_gmm(points, K: int = 2, init: str = "kmeans", max_iter: int = 200, tol: float = 1e-8,
            rng: np.random.Generator | None = None, variance_floor: float = VARIANCE_FLOOR) -> MixtureModel:
    """EM for a diagonal-covariance mixture; stops when the mean log-likelihood gain drops below tol."""
    x = _check_points(points, K)
    rng = np.random.default_rng(0) if rng is None else rng
    n, d = x.shape
    if init == "kmeans":
        labels = assign_clusters(fit_kmeans(x, K, rng=rng), x)
        resp = np.zeros((n, K))
        resp[np.arange(n), labels] = 1.0
    elif init == "random":
        resp = rng.dirichlet(np.ones(K), size=n)
    else:
        raise ValueError(f"unknown init {init!r}")
    model = _m_step(x, resp, variance_floor)
    lls: list[float] = []
    for _ in range(max_iter):
        log_r, log_norm = model.log_resp(x)
        lls.append(float(log_norm.mean()))
        if len(lls) > 1 and lls[-1] - lls[-2] < tol:
            break
        model = _m_step(x, np.exp(log_r), variance_floor)
    model.log_likelihoods = lls
    return model


def _m_step(x: np.ndarray, resp: np.ndarray, floor: float) -> MixtureModel:
    nk = resp.sum(axis=0)
    safe = np.maximum(nk, 1e-300)
    means = resp.T @ x / safe[:, None]
    var = (resp.T @ (x ** 2)) / safe[:, None] - means ** 2
    # components that lost every point keep a unit-variance placeholder at the data mean
    dead = nk <= 1e-12
    if np.any(dead):
        means[dead] = x.mean(axis=0)
        var[dead] = 1.0
    return MixtureModel(nk / nk.sum(), means, np.maximum(var, floor), variance_floor=floor)


def assign_clusters(model, points) -> np.ndarray:
    """Hard labels; ties go to the lowest component index (argmax/argmin semantics)."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if isinstance(model, MixtureModel):
        return np.argmax(model.log_resp(x)[0], axis=1)
    _check_dims(x, model.centroids.shape[1])
    return np.argmin(_sq_dists(x, model.centroids), axis=1)


def subgroup_weights(labels, treatments, K: int, n_treatments: int) -> SubgroupAssignment:
    labels = np.asarray(labels, dtype=int)
    treatments = np.asarray(treatments, dtype=int)
    if labels.shape != treatments.shape:
        raise ShapeError("labels and treatments must align")
    counts = np.zeros((K, n_treatments), dtype=int)
    np.add.at(counts, (labels, treatments), 1)
    totals = counts.sum(axis=0)
    weights = np.zeros((K, n_treatments))
    nonempty = totals > 0
    weights[:, nonempty] = counts[:, nonempty] / totals[nonempty]
    empty = tuple(int(a) for a in np.flatnonzero(~nonempty))
    return SubgroupAssignment(labels, counts, weights, empty)


def covariance_trace_bound(model: MixtureModel) -> float:
    return float(np.max(np.sum(model.covariances, axis=1)))


def delta_c(epsilon: float) -> float:
    return 4.0 * float(np.sqrt(epsilon))


def fit_clusters(points, K: int, algorithm: str, rng: np.random.Generator):
    if algorithm == "gmm":
        return fit_gmm(points, K, rng=rng)
    if algorithm == "kmeans":
        return fit_kmeans(points, K, rng=rng)
    raise ValueError(f"unknown clustering algorithm {algorithm!r}")


def write_cluster_audit(rows, path, config_hash: str = "") -> Path:
    """rows: iterable of (t, unit_id, treatment, cluster)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "unit_id", "treatment", "cluster", "config_hash"])
        for t, uid, a, k in rows:
            w.writerow([int(t), int(uid), int(a), int(k), config_hash])
    return path
