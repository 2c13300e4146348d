"""Training loop: factual loss with periodic sub-group alignment and random
temporal masking, plus autoregressive multi-step rollout."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import assign_clusters, fit_clusters
from .diffnum import (
    ContractError,
    EncoderParams,
    RegressorParams,
    Tape,
    Tensor,
    adam_state,
    adam_step,
    backward,
    encode_history,
    init_encoder,
    init_regressor,
    predict_outcome,
)
from .diffnum import tensor as tn
from .masking import MaskConfig, apply_mask
from .simulator import V_MAX, VOLUME_FLOOR, PanelDataset, Trajectory, diameter_from_volume, one_step_bundles
from .transport import AlignmentReport, TransportConfig, bound_terms, sga_loss

N_TREATMENTS = 4
N_COVARIATES = 2


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def joint_treatment(chemo, radio) -> np.ndarray:
    """Index of the (chemo, radio) pair: 0=(0,0), 1=(0,1), 2=(1,0), 3=(1,1)."""
    return 2 * np.asarray(chemo, dtype=int) + np.asarray(radio, dtype=int)


def one_hot(index, width: int = N_TREATMENTS) -> np.ndarray:
    index = np.asarray(index, dtype=int)
    return (index[..., None] == np.arange(width)).astype(float)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lam: float = 0.0
    lr: float = 0.01
    batch_size: int = 64
    dropout_rate: float = 0.1
    K: int = 2
    cluster_algorithm: str = "gmm"
    mask: MaskConfig = field(default_factory=lambda: MaskConfig(strategy="none", prob=0.0))
    pretrain_epochs: int = 10
    gap_epoch: int = 2
    max_epochs: int = 40
    variant: str = "attention"
    hidden_width: int = 32
    n_layers: int = 1
    n_heads: int = 2
    head_hidden: tuple[int, ...] = (32,)
    seed: int = 0
    patience: int = 10
    sga_reg: float = 0.05
    sga_min_group: int = 8
    snapshot_every: int = 0

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskConfig(**self.mask)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        errors = self.problems()
        if errors:
            raise ConfigError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if self.lam < 0:
            out.append("lambda: must be >= 0")
        if self.gap_epoch < 1:
            out.append("gap_epoch: must be >= 1")
        if self.max_epochs < 1:
            out.append("max_epochs: must be >= 1")
        if not 0 <= self.pretrain_epochs <= self.max_epochs:
            out.append("pretrain_epochs: must lie in [0, max_epochs]")
        if self.variant not in ("recurrent", "attention"):
            out.append("variant: must be 'recurrent' or 'attention'")
        if self.cluster_algorithm not in ("gmm", "kmeans"):
            out.append("cluster_algorithm: must be 'gmm' or 'kmeans'")
        if self.K < 1:
            out.append("K: must be >= 1")
        if self.batch_size < 1 or self.lr <= 0:
            out.append("batch_size and lr: must be positive")
        if not 0 <= self.dropout_rate < 1:
            out.append("dropout_rate: must lie in [0, 1)")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)

    def sga_active(self, epoch: int) -> bool:
        """Alignment epochs: at or after warm-up and on the gap grid. Warm-up spanning the
        whole run means alignment never runs."""
        if self.lam <= 0 or self.pretrain_epochs >= self.max_epochs and self.pretrain_epochs > 0:
            return False
        return epoch >= self.pretrain_epochs and epoch % self.gap_epoch == 0


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o))


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# ---------------------------------------------------------------------------
# features


@dataclass
class FeatureScaler:
    """Training-split statistics for the covariate channels and the outcome."""
    volume_mean: float
    volume_std: float
    diameter_mean: float
    diameter_std: float
    diameter_window: int = 15
    v_max: float = V_MAX
    volume_floor: float = VOLUME_FLOOR

    @classmethod
    def fit(cls, trajectories: Sequence[Trajectory], diameter_window: int = 15, v_max: float = V_MAX,
            volume_floor: float = VOLUME_FLOOR) -> "FeatureScaler":
        vols = np.concatenate([tr.volumes for tr in trajectories])
        diam = np.concatenate([tr.avg_diameters for tr in trajectories])
        return cls(float(vols.mean()), float(vols.std()) or 1.0, float(diam.mean()), float(diam.std()) or 1.0,
                   diameter_window, v_max, volume_floor)

    def volume_to_z(self, v):
        return (np.asarray(v, dtype=float) - self.volume_mean) / self.volume_std

    def z_to_volume(self, z):
        return np.asarray(z, dtype=float) * self.volume_std + self.volume_mean

    def covariates(self, volumes: np.ndarray, avg_diameters: np.ndarray) -> np.ndarray:
        return np.stack([self.volume_to_z(volumes), (avg_diameters - self.diameter_mean) / self.diameter_std],
                        axis=-1)

    def running_diameter(self, volumes: np.ndarray, t: int) -> np.ndarray:
        """Mean diameter over the window ending at step t; ``volumes`` is (B, >= t+1)."""
        window = volumes[:, max(0, t - self.diameter_window + 1): t + 1]
        return diameter_from_volume(np.clip(window, 0.0, None)).mean(axis=1)


@dataclass
class Batch:
    covariates: np.ndarray     # (B, T, 2) standardised volume and running diameter at each step
    prev_treatment: np.ndarray  # (B, T, 4) one-hot of A_{t-1}, zero at t = 0
    treatment: np.ndarray      # (B, T, 4) one-hot of A_t
    treatment_index: np.ndarray  # (B, T)
    target: np.ndarray         # (B, T) standardised Y_{t+1}
    unit_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.unit_ids)

    def take(self, rows) -> "Batch":
        return Batch(self.covariates[rows], self.prev_treatment[rows], self.treatment[rows],
                     self.treatment_index[rows], self.target[rows], self.unit_ids[rows])


def build_batch(trajectories: Sequence[Trajectory], scaler: FeatureScaler) -> Batch:
    if not trajectories:
        raise DomainError("no trajectories")
    vols = np.stack([tr.volumes for tr in trajectories])
    T = vols.shape[1] - 1
    diam = np.stack([tr.avg_diameters for tr in trajectories])
    idx = np.stack([joint_treatment(tr.chemo_flags, tr.radio_flags) for tr in trajectories])
    cur = one_hot(idx)
    prev = np.zeros_like(cur)
    prev[:, 1:] = cur[:, :-1]
    return Batch(scaler.covariates(vols[:, :T], diam), prev, cur, idx, scaler.volume_to_z(vols[:, 1:]),
                 np.array([tr.unit_id for tr in trajectories]))


# ---------------------------------------------------------------------------
# model


@dataclass
class SequenceModel:
    encoder: EncoderParams
    head: RegressorParams
    scaler: FeatureScaler

    @property
    def variant(self) -> str:
        return self.encoder.variant

    def tensors(self) -> list[Tensor]:
        return self.encoder.tensors() + self.head.tensors()

    def forward(self, covariates, prev_treatment, treatment, mode: str = "eval", rng=None,
                return_attention: bool = False):
        out = encode_history(covariates, prev_treatment, self.encoder, mode, rng, return_attention)
        rep, attn = out if return_attention else (out, None)
        pred = predict_outcome(rep, treatment, self.head)
        return (pred, rep, attn) if return_attention else (pred, rep)

    def rollout(self, trajectories: Sequence[Trajectory], t: int, plans, tau: int | None = None) -> np.ndarray:
        return rollout_tau(self, trajectories, t, plans, tau)


def init_model(config: TrainConfig, scaler: FeatureScaler) -> SequenceModel:
    rng = _rng(config.seed, 0)
    enc = init_encoder(config.variant, N_COVARIATES + N_TREATMENTS, rng, hidden_width=config.hidden_width,
                       n_layers=config.n_layers, n_heads=config.n_heads, dropout_rate=config.dropout_rate)
    head = init_regressor(config.hidden_width, N_TREATMENTS, rng, hidden=config.head_hidden)
    return SequenceModel(enc, head, scaler)


def mse_loss(prediction: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=float)
    if target.size == 0:
        raise DomainError("empty batch")
    diff = prediction - Tensor(target)
    return tn.mean(diff * diff)


def factual_loss(batch: Batch, model: SequenceModel, mode: str = "eval", rng=None,
                 covariates: np.ndarray | None = None) -> Tensor:
    """Mean squared error of the next-step outcome over every (unit, t) in the batch."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    cov = batch.covariates if covariates is None else covariates
    pred, _ = model.forward(cov, batch.prev_treatment, batch.treatment, mode, rng)
    return mse_loss(pred, batch.target)


def rollout_tau(model: SequenceModel, trajectories: Sequence[Trajectory], t: int, plans, tau: int | None = None
                ) -> np.ndarray:
    """Predict Y_{t+1..t+tau} for each trajectory under its treatment plan.

    The history up to step t is observed. Each predicted volume is written back into the
    covariate channel (with the running diameter recomputed) before the next step is encoded.
    ``plans`` is (tau, 2) shared by all units or (B, tau, 2).
    """
    B = len(trajectories)
    plans = np.asarray(plans, dtype=int)
    if plans.ndim == 2:
        plans = np.broadcast_to(plans, (B,) + plans.shape)
    if tau is None:
        tau = plans.shape[1]
    if plans.shape != (B, tau, 2):
        raise ContractError(f"plans of shape {plans.shape} do not match {B} units and tau={tau}")
    if t < 0 or t >= trajectories[0].horizon:
        raise ContractError(f"anchor {t} outside the observed horizon")
    sc = model.scaler
    L = t + tau
    vols = np.zeros((B, L + 1))
    vols[:, : t + 1] = np.stack([tr.volumes[: t + 1] for tr in trajectories])
    cov = np.zeros((B, L, N_COVARIATES))
    cov[:, : t + 1] = sc.covariates(vols[:, : t + 1],
                                    np.stack([tr.avg_diameters[: t + 1] for tr in trajectories]))
    idx = np.zeros((B, L), dtype=int)
    idx[:, :t] = np.stack([joint_treatment(tr.chemo_flags[:t], tr.radio_flags[:t]) for tr in trajectories])
    idx[:, t:] = joint_treatment(plans[..., 0], plans[..., 1])
    cur = one_hot(idx)
    prev = np.zeros_like(cur)
    prev[:, 1:] = cur[:, :-1]
    out = np.empty((B, tau))
    for j in range(tau):
        s = t + j
        pred, _ = model.forward(cov[:, : s + 1], prev[:, : s + 1], cur[:, : s + 1])
        vol = np.clip(sc.z_to_volume(pred.data[:, s]), sc.volume_floor, sc.v_max)
        out[:, j] = vol
        if j + 1 < tau:
            vols[:, s + 1] = vol
            cov[:, s + 1] = sc.covariates(vol, sc.running_diameter(vols, s + 1))
    return out


# ---------------------------------------------------------------------------
# run record


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_rmse: float | None = None
    checkpoint_hash: str | None = None
    status: str = "ok"
    diagnostic: str = ""

    def sga_epochs(self) -> list[int]:
        return [e["epoch"] for e in self.epochs if e["sga_active"]]

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for e in self.epochs:
                fh.write(json.dumps({**_stable(e), "config_hash": self.config_hash}, sort_keys=True) + "\n")
            fh.write(json.dumps({"summary": True, "best_epoch": self.best_epoch, "best_val_rmse": self.best_val_rmse,
                                 "checkpoint_hash": self.checkpoint_hash, "status": self.status,
                                 "diagnostic": self.diagnostic, "snapshots": self.snapshots,
                                 "config": self.config, "config_hash": self.config_hash}, sort_keys=True) + "\n")
        return path


def _stable(epoch_row: dict) -> dict:
    """Epoch row without wall-clock so reruns are byte-identical; timing goes to a side field."""
    return {k: v for k, v in epoch_row.items() if k != "wall_seconds"}


# ---------------------------------------------------------------------------
# checkpoints


def model_state(model: SequenceModel) -> dict:
    enc = model.encoder
    return {
        "variant": enc.variant,
        "encoder": {"input_width": enc.input_width, "hidden_width": enc.hidden_width, "n_layers": enc.n_layers,
                    "n_heads": enc.n_heads, "dropout_rate": enc.dropout_rate},
        "weights": {k: {"shape": list(v.shape), "values": v.data.ravel().tolist()}
                    for k, v in sorted(enc.weights.items())},
        "head": [{"W": {"shape": list(W.shape), "values": W.data.ravel().tolist()},
                  "b": {"shape": list(b.shape), "values": b.data.ravel().tolist()}} for W, b in model.head.layers],
        "head_widths": [model.head.representation_width, model.head.treatment_width],
        "scaler": asdict(model.scaler),
    }


def _arr(d) -> np.ndarray:
    return np.asarray(d["values"], dtype=float).reshape(d["shape"])


def model_from_state(state: dict) -> SequenceModel:
    e = state["encoder"]
    weights = {k: Tensor(_arr(v), requires_grad=True, name=k) for k, v in state["weights"].items()}
    enc = EncoderParams(state["variant"], e["input_width"], e["hidden_width"], e["n_layers"], e["n_heads"],
                        e["dropout_rate"], weights)
    enc.check()
    layers = [(Tensor(_arr(l["W"]), requires_grad=True), Tensor(_arr(l["b"]), requires_grad=True))
              for l in state["head"]]
    head = RegressorParams(state["head_widths"][0], state["head_widths"][1], layers)
    head.check()
    return SequenceModel(enc, head, FeatureScaler(**state["scaler"]))


def state_hash(state: dict) -> str:
    return config_hash(state)


def save_checkpoint(model: SequenceModel, path, config_hash_value: str = "") -> str:
    state = model_state(model)
    digest = state_hash(state)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": config_hash_value, "state_hash": digest, "state": state},
                               sort_keys=True))
    return digest


def load_checkpoint(path) -> tuple[SequenceModel, dict]:
    blob = json.loads(Path(path).read_text())
    return model_from_state(blob["state"]), blob


def _snapshot_params(model: SequenceModel) -> list[np.ndarray]:
    return [t.data.copy() for t in model.tensors()]


def _restore_params(model: SequenceModel, values: list[np.ndarray]) -> None:
    for t, v in zip(model.tensors(), values):
        t.data = v.copy()


# ---------------------------------------------------------------------------
# alignment term during training


def _sga_term(model: SequenceModel, rep: Tensor, batch: Batch, config: TrainConfig, epoch: int, step: int,
              full: tuple[Tensor, Batch] | None, get_full) -> Tensor | None:
    """Sum over timesteps of the sub-group alignment loss.

    A timestep uses the mini-batch when every treatment present there has at least
    ``sga_min_group`` samples, otherwise the full training split (encoded with gradient).
    """
    tcfg = TransportConfig(reg=config.sga_reg)
    T = batch.target.shape[1]
    total = None
    for t in range(T):
        src_rep, src_batch = rep, batch
        counts = np.bincount(batch.treatment_index[:, t], minlength=N_TREATMENTS)
        if np.any((counts > 0) & (counts < config.sga_min_group)):
            src_rep, src_batch = get_full()
        trt = src_batch.treatment_index[:, t]
        reps_t = tn.getitem(src_rep, (slice(None), t))
        if len(trt) < config.K:
            continue
        crng = _rng(config.seed, 4, epoch, step, t)
        points = reps_t.data
        model_c = fit_clusters(points, config.K, config.cluster_algorithm, crng)
        labels = assign_clusters(model_c, points)
        term = sga_loss(reps_t, labels, trt, config.K, N_TREATMENTS, tcfg, seed=config.seed,
                        epoch=epoch * 10_000 + step, t=t)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# training


def validation_rmse(model: SequenceModel, batch: Batch) -> float:
    """Factual one-step RMSE in volume units divided by V_max."""
    pred, _ = model.forward(batch.covariates, batch.prev_treatment, batch.treatment)
    err = model.scaler.z_to_volume(pred.data) - model.scaler.z_to_volume(batch.target)
    return float(np.sqrt(np.mean(err ** 2)) / model.scaler.v_max)


def train(dataset: PanelDataset, config: TrainConfig, snapshot_bundles=None) -> tuple[SequenceModel, RunRecord]:
    train_tr = dataset.split("train")
    val_tr = dataset.split("val") or train_tr
    if not train_tr:
        raise DomainError("training split is empty")
    sim = dataset.config
    scaler = FeatureScaler.fit(train_tr, sim.diameter_window, sim.v_max, sim.volume_floor)
    model = init_model(config, scaler)
    params = model.tensors()
    opt = adam_state(params, lr=config.lr)
    full = build_batch(train_tr, scaler)
    val = build_batch(val_tr, scaler)
    cfg_dict = {"train": config.to_dict(), "simulation": sim.to_dict()}
    record = RunRecord(cfg_dict, config_hash(cfg_dict))
    best_params, best_val, since_best = None, math.inf, 0
    masked_once = None
    if config.mask.mask_once and config.mask.active:
        masked_once = apply_mask(full.covariates, config.mask, _rng(config.seed, 2, 0))[0]
    n = len(full)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        sga_on = config.sga_active(epoch)
        if masked_once is not None:
            cov_all = masked_once
        elif config.mask.active:
            cov_all = apply_mask(full.covariates, config.mask, _rng(config.seed, 2, epoch))[0]
        else:
            cov_all = full.covariates
        order = _rng(config.seed, 1, epoch).permutation(n)
        drop_rng = _rng(config.seed, 3, epoch)
        ly_sum, ld_sum, steps = 0.0, 0.0, 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            batch = full.take(rows)
            cache: dict = {}
            with Tape() as tape:
                pred, rep = model.forward(cov_all[rows], batch.prev_treatment, batch.treatment, "train", drop_rng)
                ly = mse_loss(pred, batch.target)
                loss = ly
                ld_val = None
                if sga_on:
                    def get_full():
                        if "full" not in cache:
                            _, frep = model.forward(cov_all, full.prev_treatment, full.treatment, "train", drop_rng)
                            cache["full"] = (frep, full)
                        return cache["full"]
                    ld = _sga_term(model, rep, batch, config, epoch, step, None, get_full)
                    if ld is not None:
                        loss = ly + ld * config.lam
                        ld_val = ld.item()
            if not np.isfinite(loss.item()):
                record.status = "diverged"
                record.diagnostic = f"non-finite loss at epoch {epoch} step {step}"
                break
            grads = backward(tape, loss, params)
            adam_step(params, grads, opt)
            ly_sum += ly.item()
            ld_sum += ld_val or 0.0
            steps += 1
        if record.status != "ok":
            break
        vr = validation_rmse(model, val)
        row = {"epoch": epoch, "loss_y": ly_sum / steps, "loss_d": ld_sum / steps if sga_on else None,
               "sga_active": sga_on, "val_rmse": vr, "wall_seconds": time.perf_counter() - t0}
        record.epochs.append(row)
        if config.snapshot_every and (epoch % config.snapshot_every == 0 or epoch == config.max_epochs):
            record.snapshots.append({"epoch": epoch, **snapshot_alignment(model, dataset, snapshot_bundles, epoch,
                                                                          config).to_dict()})
        eligible = epoch >= config.pretrain_epochs or config.pretrain_epochs >= config.max_epochs
        if eligible:
            if vr < best_val:
                best_val, best_params, since_best = vr, _snapshot_params(model), 0
                record.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    if best_params is not None:
        _restore_params(model, best_params)
    record.best_val_rmse = None if best_params is None else best_val
    record.checkpoint_hash = state_hash(model_state(model))
    return model, record


# ---------------------------------------------------------------------------
# alignment snapshots


def encode_split(model: SequenceModel, trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, Batch]:
    batch = build_batch(trajectories, model.scaler)
    _, rep = model.forward(batch.covariates, batch.prev_treatment, batch.treatment)
    return rep.data, batch


def counterfactual_risk(model: SequenceModel, trajectories: Sequence[Trajectory], bundles=None,
                        config=None) -> float:
    """Mean squared error (volumes / V_max) over the non-factual one-step outcomes."""
    if bundles is None:
        bundles = one_step_bundles(trajectories, config)
    by_unit = {tr.unit_id: tr for tr in trajectories}
    errs = []
    for b in bundles:
        if b.unit_id not in by_unit:
            continue
        tr = by_unit[b.unit_id]
        pred = rollout_tau(model, [tr] * len(b.treatment_plans), b.anchor_time, b.treatment_plans[:, :1], 1)[:, 0]
        cf = ~np.all(b.treatment_plans[:, 0] == b.factual_plan[0], axis=1)
        errs.append(((pred - b.true_outcomes[:, 0]) / model.scaler.v_max)[cf] ** 2)
    return float(np.mean(np.concatenate(errs))) if errs else float("nan")


def _one_step_cf_risk(model: SequenceModel, trajectories: Sequence[Trajectory], sim_config) -> float:
    """Vectorised counterfactual risk over every anchor t >= 1 of every trajectory."""
    from .simulator import continue_trajectory
    batch = build_batch(trajectories, model.scaler)
    T = batch.target.shape[1]
    errs = []
    for a in range(N_TREATMENTS):
        trt = one_hot(np.full(batch.treatment_index.shape, a))
        pred, _ = model.forward(batch.covariates, batch.prev_treatment, trt)
        vol = np.clip(model.scaler.z_to_volume(pred.data), model.scaler.volume_floor, model.scaler.v_max)
        plan = np.array([[a // 2, a % 2]])
        truth = np.array([[continue_trajectory(tr, t, plan, sim_config)[0] for t in range(T)]
                          for tr in trajectories])
        cf = batch.treatment_index != a
        cf[:, 0] = False
        errs.append((((vol - truth) / model.scaler.v_max) ** 2)[cf])
    return float(np.mean(np.concatenate(errs)))


def snapshot_alignment(model: SequenceModel, dataset: PanelDataset, cf_bundles=None, epoch: int | None = None,
                       config: TrainConfig | None = None, timesteps: Sequence[int] | None = None
                       ) -> AlignmentReport:
    """Bound terms on validation representations, averaged over a few timesteps."""
    config = config or TrainConfig()
    val = dataset.split("val") or dataset.split("train")
    reps, batch = encode_split(model, val)
    T = reps.shape[1]
    ts = timesteps if timesteps is not None else sorted({T // 4, T // 2, (3 * T) // 4, T - 1})
    reports = []
    for t in ts:
        crng = _rng(config.seed, 5, t)
        points = reps[:, t]
        fitted = fit_clusters(points, min(config.K, len(points)), "gmm", crng)
        labels = assign_clusters(fitted, points)
        reports.append(bound_terms(points, labels, batch.treatment_index[:, t], N_TREATMENTS, fitted,
                                   K=config.K, config=TransportConfig(reg=0.01), rng=crng))
    if cf_bundles is not None:
        risk = counterfactual_risk(model, val, cf_bundles)
    else:
        risk = _one_step_cf_risk(model, val, dataset.config)

    def avg(name):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        return float(np.mean(vals)) if vals else None

    gaps = sorted({f"t={t}: {g}" for t, r in zip(ts, reports) for g in r.gaps})
    return AlignmentReport(avg("marginal_w1"), avg("weighted_subgroup_sum"), avg("delta_c"), avg("epsilon"),
                           avg("inequality_slack"), risk, epoch=epoch, gaps=gaps)
