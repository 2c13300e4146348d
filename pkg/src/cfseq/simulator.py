"""Confounded PK-PD tumour-growth simulator with ground-truth counterfactuals.

Volumes follow a Gompertz-type recurrence with chemotherapy (exponentially
decaying concentration) and radiotherapy (linear-quadratic dose) kill terms.
Both treatments are assigned by coin flips whose bias grows with the recent
average tumour diameter, scaled by the confounding strength ``gamma``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import truncnorm

V_MAX = 1150.0
VOLUME_FLOOR = 1e-3
PARAM_NAMES = ("rho", "carrying_capacity", "beta_c", "alpha_r", "beta_r", "initial_volume")
ONE_STEP_PLANS = ((0, 0), (0, 1), (1, 0), (1, 1))


class ConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _tn(mean, std, low, high):
    return {"mean": mean, "std": std, "low": low, "high": high}


# Three patient sub-populations: fast growers that respond to chemo, radio
# responders, and slow-growing weak responders. Growth rates are tuned so that
# roughly half of untreated 30-step trajectories pass 0.5 * V_MAX.
DEFAULT_HETEROGENEITY = {
    "components": [
        {
            "weight": 1 / 3,
            "params": {
                "rho": _tn(0.09, 0.015, 0.04, 0.15),
                "carrying_capacity": _tn(1100.0, 80.0, 800.0, 1150.0),
                "beta_c": _tn(0.030, 0.005, 0.015, 0.045),
                "alpha_r": _tn(0.020, 0.005, 0.005, 0.035),
                "beta_r": _tn(0.002, 0.0005, 0.0005, 0.0035),
                "initial_volume": _tn(8.0, 4.0, 1.0, 30.0),
            },
        },
        {
            "weight": 1 / 3,
            "params": {
                "rho": _tn(0.07, 0.015, 0.03, 0.12),
                "carrying_capacity": _tn(1100.0, 80.0, 800.0, 1150.0),
                "beta_c": _tn(0.012, 0.004, 0.002, 0.025),
                "alpha_r": _tn(0.060, 0.010, 0.030, 0.090),
                "beta_r": _tn(0.006, 0.001, 0.003, 0.009),
                "initial_volume": _tn(8.0, 4.0, 1.0, 30.0),
            },
        },
        {
            "weight": 1 / 3,
            "params": {
                "rho": _tn(0.055, 0.01, 0.03, 0.09),
                "carrying_capacity": _tn(1100.0, 80.0, 800.0, 1150.0),
                "beta_c": _tn(0.008, 0.003, 0.001, 0.016),
                "alpha_r": _tn(0.015, 0.005, 0.003, 0.030),
                "beta_r": _tn(0.0015, 0.0005, 0.0003, 0.003),
                "initial_volume": _tn(8.0, 4.0, 1.0, 30.0),
            },
        },
    ]
}


@dataclass(frozen=True)
class PatientParams:
    rho: float
    carrying_capacity: float
    beta_c: float
    alpha_r: float
    beta_r: float
    initial_volume: float = 1.0
    mixture_component: int = 0

    def __post_init__(self):
        if self.rho <= 0 or self.carrying_capacity <= 0:
            raise DomainError("rho and carrying_capacity must be positive")
        if min(self.beta_c, self.alpha_r, self.beta_r) < 0:
            raise DomainError("treatment sensitivities must be non-negative")


@dataclass
class SimulationConfig:
    gamma: float = 6.0
    n_units: int = 200
    horizon: int = 30
    noise_std: float = 0.01
    chemo_decay: float = 0.5
    chemo_dose: float = 5.0
    radio_dose: float = 2.0
    diameter_window: int = 15
    v_max: float = V_MAX
    volume_floor: float = VOLUME_FLOOR
    d_max: float | None = None
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    heterogeneity: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_HETEROGENEITY)))

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if self.d_max is None:
            self.d_max = diameter_from_volume(self.v_max)
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.chemo_decay < 1:
            raise ConfigError("chemo_decay must lie in [0, 1)")
        if self.diameter_window < 1:
            raise ConfigError("diameter_window must be >= 1")
        if self.horizon < 1 or self.n_units < 1:
            raise ConfigError("horizon and n_units must be >= 1")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 \
                or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be 3 non-negative numbers summing to 1, got {self.split_fractions}")
        if self.noise_std < 0 or self.d_max <= 0:
            raise ConfigError("noise_std must be >= 0 and d_max > 0")
        validate_heterogeneity(self.heterogeneity)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown simulation fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class Trajectory:
    unit_id: int
    params: PatientParams
    volumes: np.ndarray            # (horizon + 1,)
    chemo_flags: np.ndarray        # (horizon,)
    radio_flags: np.ndarray        # (horizon,)
    concentrations: np.ndarray     # (horizon,) concentration after the dose decision at t
    assignment_probs: np.ndarray   # (horizon,)
    avg_diameters: np.ndarray      # (horizon,) running mean diameter seen by the assignment rule
    noise: np.ndarray              # (horizon,) outcome noise draws

    @property
    def horizon(self) -> int:
        return len(self.chemo_flags)


@dataclass
class PanelDataset:
    config: SimulationConfig
    trajectories: list[Trajectory]
    splits: dict[str, list[int]]

    def split(self, name: str) -> list[Trajectory]:
        return [self.trajectories[i] for i in self.splits[name]]


@dataclass
class CounterfactualBundle:
    unit_id: int
    anchor_time: int
    horizon: int
    treatment_plans: np.ndarray    # (n_plans, horizon, 2) as (chemo, radio)
    true_outcomes: np.ndarray      # (n_plans, horizon): Y_{t+1..t+horizon} under each plan
    factual_plan: np.ndarray       # (horizon, 2), observed treatments in the window (may be truncated)

    def to_dict(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "anchor_time": self.anchor_time,
            "horizon": self.horizon,
            "treatment_plans": self.treatment_plans.astype(int).tolist(),
            "true_outcomes": self.true_outcomes.tolist(),
            "factual_plan": self.factual_plan.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CounterfactualBundle":
        return cls(int(d["unit_id"]), int(d["anchor_time"]), int(d["horizon"]),
                   np.asarray(d["treatment_plans"], dtype=int), np.asarray(d["true_outcomes"], dtype=float),
                   np.asarray(d["factual_plan"], dtype=int).reshape(-1, 2))


# ---------------------------------------------------------------------------
# patient sampling


def validate_heterogeneity(spec: dict) -> None:
    comps = spec.get("components") if isinstance(spec, dict) else None
    if not comps:
        raise ConfigError("heterogeneity spec needs at least one component")
    for i, comp in enumerate(comps):
        if comp.get("weight", 0) <= 0:
            raise ConfigError(f"component {i}: weight must be positive")
        params = comp.get("params", {})
        missing = [p for p in PARAM_NAMES[:5] if p not in params]
        if missing:
            raise ConfigError(f"component {i}: missing parameters {missing}")
        for name, dist in params.items():
            if name not in PARAM_NAMES:
                raise ConfigError(f"component {i}: unknown parameter {name!r}")
            if dist["std"] < 0:
                raise ConfigError(f"component {i}/{name}: std must be >= 0")
            if not dist["low"] <= dist["mean"] <= dist["high"]:
                raise ConfigError(f"component {i}/{name}: mean outside truncation bounds")


def _draw_truncated(rng: np.random.Generator, dist: dict) -> float:
    mean, std, low, high = dist["mean"], dist["std"], dist["low"], dist["high"]
    if std == 0:
        return float(mean)
    a, b = (low - mean) / std, (high - mean) / std
    value = float(truncnorm.rvs(a, b, loc=mean, scale=std, random_state=rng))
    return min(max(value, low), high)


def sample_patient_params(rng: np.random.Generator, heterogeneity_spec: dict | None = None) -> PatientParams:
    spec = DEFAULT_HETEROGENEITY if heterogeneity_spec is None else heterogeneity_spec
    validate_heterogeneity(spec)
    comps = spec["components"]
    weights = np.array([c["weight"] for c in comps], dtype=float)
    k = int(rng.choice(len(comps), p=weights / weights.sum()))
    dists = comps[k]["params"]
    values = {name: _draw_truncated(rng, dists[name]) for name in PARAM_NAMES if name in dists}
    return PatientParams(mixture_component=k, **values)


# ---------------------------------------------------------------------------
# dynamics


def chemo_concentration(prev_concentration: float, chemo_given, config: SimulationConfig) -> float:
    return config.chemo_decay * prev_concentration + config.chemo_dose * float(bool(chemo_given))


def tumor_step(volume: float, concentration: float, radio_given, params: PatientParams, noise: float,
               radio_dose: float = 2.0, v_max: float = V_MAX, volume_floor: float = VOLUME_FLOOR) -> float:
    """Next volume from the current one; deterministic given the noise draw."""
    if not volume > 0:
        raise DomainError(f"volume must be positive, got {volume}")
    dose = radio_dose * float(bool(radio_given))
    factor = (1.0 + params.rho * math.log(params.carrying_capacity / volume)
              - params.beta_c * concentration
              - (params.alpha_r * dose + params.beta_r * dose * dose)
              + noise)
    return min(max(factor * volume, volume_floor), v_max)


def diameter_from_volume(volume):
    v = np.asarray(volume, dtype=float)
    if np.any(v < 0):
        raise DomainError("volume must be non-negative")
    d = np.cbrt(6.0 * v / np.pi)
    return float(d) if d.ndim == 0 else d


def treatment_probability(avg_diameter: float, gamma: float, d_max: float) -> float:
    z = gamma / d_max * (avg_diameter - d_max / 2.0)
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def _step(config: SimulationConfig, params: PatientParams, volume: float, prev_conc: float,
          chemo, radio, noise: float) -> tuple[float, float]:
    conc = chemo_concentration(prev_conc, chemo, config)
    nxt = tumor_step(volume, conc, radio, params, noise, config.radio_dose, config.v_max, config.volume_floor)
    return nxt, conc


def simulate_trajectory(params: PatientParams, config: SimulationConfig, rng: np.random.Generator,
                        unit_id: int = 0) -> Trajectory:
    T = config.horizon
    volumes = np.empty(T + 1)
    chemo, radio = np.zeros(T, dtype=np.int8), np.zeros(T, dtype=np.int8)
    conc, probs, avg_d, noise = np.empty(T), np.empty(T), np.empty(T), np.empty(T)
    volumes[0] = min(max(params.initial_volume, config.volume_floor), config.v_max)
    prev_conc = 0.0
    for t in range(T):
        window = volumes[max(0, t - config.diameter_window + 1): t + 1]
        avg_d[t] = float(np.mean(diameter_from_volume(window)))
        p = treatment_probability(avg_d[t], config.gamma, config.d_max)
        probs[t] = p
        chemo[t] = rng.random() < p
        radio[t] = rng.random() < p
        noise[t] = rng.normal(0.0, config.noise_std) if config.noise_std > 0 else 0.0
        volumes[t + 1], conc[t] = _step(config, params, volumes[t], prev_conc, chemo[t], radio[t], noise[t])
        prev_conc = conc[t]
    return Trajectory(unit_id, params, volumes, chemo, radio, conc, probs, avg_d, noise)


def unit_rng(seed: int, unit_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(unit_id)]))


def split_sizes(n_units: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(math.floor(n_units * fractions[1] + 1e-9))
    n_test = int(math.floor(n_units * fractions[2] + 1e-9))
    n_train = n_units - n_val - n_test
    sizes = (n_train, n_val, n_test)
    if any(s == 0 for s, f in zip(sizes, fractions) if f > 0):
        raise ConfigError(f"n_units={n_units} too small for split fractions {tuple(fractions)}")
    return sizes


def generate_dataset(config: SimulationConfig) -> PanelDataset:
    sizes = split_sizes(config.n_units, config.split_fractions)
    trajectories = []
    for uid in range(config.n_units):
        rng = unit_rng(config.seed, uid)
        params = sample_patient_params(rng, config.heterogeneity)
        trajectories.append(simulate_trajectory(params, config, rng, uid))
    perm = np.random.default_rng(np.random.SeedSequence([int(config.seed), 2**31 - 1])).permutation(config.n_units)
    bounds = np.cumsum((0,) + sizes)
    splits = {name: sorted(int(i) for i in perm[bounds[j]:bounds[j + 1]])
              for j, name in enumerate(("train", "val", "test"))}
    return PanelDataset(config, trajectories, splits)


# ---------------------------------------------------------------------------
# counterfactuals


def continue_trajectory(trajectory: Trajectory, t: int, plan, config: SimulationConfig) -> np.ndarray:
    """Volumes Y_{t+1..t+len(plan)} when ``plan`` replaces the treatments from step t.

    The trajectory's stored noise draws are reused, so the plan equal to the
    observed treatments reproduces the observed volumes exactly.
    """
    plan = np.asarray(plan, dtype=int).reshape(-1, 2)
    if t < 0 or t + len(plan) > trajectory.horizon:
        raise IndexError(f"window [{t}, {t + len(plan)}) outside horizon {trajectory.horizon}")
    volume = trajectory.volumes[t]
    prev_conc = trajectory.concentrations[t - 1] if t > 0 else 0.0
    out = np.empty(len(plan))
    for j, (c, r) in enumerate(plan):
        volume, prev_conc = _step(config, trajectory.params, volume, prev_conc, c, r, trajectory.noise[t + j])
        out[j] = volume
    return out


def _factual_window(trajectory: Trajectory, t: int, length: int) -> np.ndarray:
    return np.stack([trajectory.chemo_flags[t:t + length], trajectory.radio_flags[t:t + length]], axis=1).astype(int)


def enumerate_one_step_counterfactuals(trajectory: Trajectory, t: int, config: SimulationConfig) -> CounterfactualBundle:
    if not 1 <= t < trajectory.horizon:
        raise IndexError(f"anchor {t} outside [1, {trajectory.horizon})")
    plans = np.array(ONE_STEP_PLANS, dtype=int).reshape(4, 1, 2)
    outcomes = np.array([continue_trajectory(trajectory, t, p, config) for p in plans])
    return CounterfactualBundle(trajectory.unit_id, t, 1, plans, outcomes, _factual_window(trajectory, t, 1))


def sliding_treatment_counterfactuals(trajectory: Trajectory, t: int, tau_max: int, config: SimulationConfig,
                                      event: tuple[int, int] = (1, 1)) -> CounterfactualBundle:
    """Plan j (1-based) treats once, at step t + j - 1, and leaves the rest of the window untreated."""
    if tau_max < 1 or t < 1 or t + tau_max > trajectory.horizon:
        raise IndexError(f"sliding window [{t}, {t + tau_max}) outside horizon {trajectory.horizon}")
    plans = np.zeros((tau_max, tau_max, 2), dtype=int)
    for j in range(tau_max):
        plans[j, j] = event
    outcomes = np.array([continue_trajectory(trajectory, t, p, config) for p in plans])
    return CounterfactualBundle(trajectory.unit_id, t, tau_max, plans, outcomes,
                                _factual_window(trajectory, t, tau_max))


def one_step_bundles(trajectories: Sequence[Trajectory], config: SimulationConfig,
                     anchors: Sequence[int] | None = None) -> list[CounterfactualBundle]:
    out = []
    for traj in trajectories:
        for t in (anchors if anchors is not None else range(1, traj.horizon)):
            out.append(enumerate_one_step_counterfactuals(traj, t, config))
    return out


def sliding_bundles(trajectories: Sequence[Trajectory], config: SimulationConfig, tau_max: int,
                    anchors: Sequence[int] | None = None) -> list[CounterfactualBundle]:
    out = []
    for traj in trajectories:
        for t in (anchors if anchors is not None else range(1, traj.horizon - tau_max + 1)):
            out.append(sliding_treatment_counterfactuals(traj, t, tau_max, config))
    return out


# ---------------------------------------------------------------------------
# export


CSV_HEADER = ("unit_id", "t", "volume", "chemo", "radio", "concentration", "prob")


def save_dataset(dataset: PanelDataset, out_dir, config_hash: str = "") -> dict[str, Path]:
    """Write one CSV per split plus a JSON sidecar holding config, parameters and noise draws."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, ids in dataset.splits.items():
        path = out_dir / f"{name}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for uid in ids:
                tr = dataset.trajectories[uid]
                for t in range(tr.horizon + 1):
                    if t < tr.horizon:
                        writer.writerow([uid, t, repr(float(tr.volumes[t])), int(tr.chemo_flags[t]),
                                         int(tr.radio_flags[t]), repr(float(tr.concentrations[t])),
                                         repr(float(tr.assignment_probs[t]))])
                    else:
                        writer.writerow([uid, t, repr(float(tr.volumes[t])), "", "", "", ""])
        paths[name] = path
    sidecar = {
        "config_hash": config_hash,
        "config": dataset.config.to_dict(),
        "heterogeneity": dataset.config.heterogeneity,
        "splits": dataset.splits,
        "units": [{"unit_id": tr.unit_id, "params": asdict(tr.params), "noise": tr.noise.tolist(),
                   "avg_diameters": tr.avg_diameters.tolist()} for tr in dataset.trajectories],
    }
    paths["sidecar"] = out_dir / "dataset.json"
    paths["sidecar"].write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return paths


def load_dataset(out_dir) -> PanelDataset:
    out_dir = Path(out_dir)
    side = json.loads((out_dir / "dataset.json").read_text())
    config = SimulationConfig.from_dict(side["config"])
    rows: dict[int, list[list[str]]] = {}
    for name in side["splits"]:
        with (out_dir / f"{name}.csv").open() as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != CSV_HEADER:
                raise ConfigError(f"{name}.csv: unexpected header {header}")
            for row in reader:
                rows.setdefault(int(row[0]), []).append(row)
    trajectories = []
    for unit in side["units"]:
        uid = unit["unit_id"]
        r = sorted(rows[uid], key=lambda x: int(x[1]))
        T = len(r) - 1
        trajectories.append(Trajectory(
            uid, PatientParams(**unit["params"]),
            np.array([float(x[2]) for x in r]),
            np.array([int(x[3]) for x in r[:T]], dtype=np.int8),
            np.array([int(x[4]) for x in r[:T]], dtype=np.int8),
            np.array([float(x[5]) for x in r[:T]]),
            np.array([float(x[6]) for x in r[:T]]),
            np.array(unit["avg_diameters"], dtype=float),
            np.array(unit["noise"], dtype=float),
        ))
    splits = {k: [int(i) for i in v] for k, v in side["splits"].items()}
    return PanelDataset(config, trajectories, splits)


def save_bundles(bundles: Sequence[CounterfactualBundle], path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": config_hash, "bundles": [b.to_dict() for b in bundles]}))
    return path


def load_bundles(path) -> list[CounterfactualBundle]:
    return [CounterfactualBundle.from_dict(d) for d in json.loads(Path(path).read_text())["bundles"]]
