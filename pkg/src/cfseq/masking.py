"""Random temporal masking of covariate sequences and its ablation variants."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STRATEGIES = ("gaussian", "zero", "interpolation", "none")


class ConfigError(ValueError):
    pass


@dataclass
class MaskConfig:
    strategy: str = "gaussian"
    prob: float = 0.05
    noise_mean: float = 0.0
    noise_std: float = 1.0
    mask_once: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError("prob must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @property
    def active(self) -> bool:
        return self.strategy != "none" and self.prob > 0


def apply_mask(covariates: np.ndarray, config: MaskConfig, rng: np.random.Generator,
               valid_lengths=None) -> tuple[np.ndarray, np.ndarray]:
    """Mask whole covariate vectors at random (unit, t) cells.

    ``covariates`` has shape (units, T, features). Returns the masked copy and a
    boolean (units, T) indicator. Under interpolation the first and last step of
    each sequence are never masked, and neighbours are read from the unmasked input.
    """
    x = np.asarray(covariates, dtype=float)
    if x.ndim != 3:
        raise ValueError(f"expected (units, T, features), got shape {x.shape}")
    n, T, _ = x.shape
    if config.strategy == "interpolation" and T < 3:
        raise ConfigError("interpolation masking needs sequences of length >= 3")
    if not config.active:
        return x.copy(), np.zeros((n, T), dtype=bool)
    mask = rng.random((n, T)) < config.prob
    if config.strategy == "interpolation":
        mask[:, 0] = False
        mask[:, -1] = False
    out = x.copy()
    if config.strategy == "gaussian":
        draws = rng.normal(config.noise_mean, config.noise_std, size=(int(mask.sum()), x.shape[2]))
        out[mask] = draws
    elif config.strategy == "zero":
        out[mask] = 0.0
    else:
        units, steps = np.nonzero(mask)
        out[units, steps] = 0.5 * (x[units, steps - 1] + x[units, steps + 1])
    return out, mask


def write_mask_csv(mask: np.ndarray, path, unit_ids=None, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    unit_ids = range(mask.shape[0]) if unit_ids is None else unit_ids
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "t", "masked", "config_hash"])
        for uid, row in zip(unit_ids, mask):
            for t, m in enumerate(row):
                w.writerow([int(uid), t, int(m), config_hash])
    return path
