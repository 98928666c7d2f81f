"""Minibatch training loop for DRVAE."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from drvae import ndiff
from drvae.errors import ConfigError, NumericError
from drvae.model import DrvaeModel, LatentConfig
from drvae.objective import LossWeights, drvae_objective

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "recon_x", "kl_sum", "aux_t", "aux_y", "reg", "total", "grad_norm_y")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for initialisation, training and evaluation."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def _grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))


def train(model: DrvaeModel, x: np.ndarray, t: np.ndarray, y: np.ndarray,
          config: TrainConfig, rng: np.random.Generator) -> list[dict]:
    """Train in place; returns one record of batch-averaged terms per epoch."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(x)
    params = model.parameters()
    y_params = model.y_decoder.parameters()
    opt = ndiff.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = dict.fromkeys(LOG_FIELDS[1:], 0.0)
        batches = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo: lo + config.batch_size]
            parts = drvae_objective(model, x[idx], t[idx], y[idx], config.weights, rng)
            values = parts.as_floats()
            for name, value in values.items():
                if not math.isfinite(value):
                    raise NumericError(f"non-finite {name} ({value}) at epoch {epoch}")
            opt.zero_grad()
            ndiff.backward(-parts.total)
            for name, value in values.items():
                sums[name] += value
            sums["grad_norm_y"] += _grad_norm(y_params)
            opt.step()
            batches += 1
        record = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        history.append(record)
        logger.debug("epoch %d total %.4f", epoch, record["total"])
    return history


def fit(dataset, latent: LatentConfig, config: TrainConfig, seed: int) -> tuple[DrvaeModel, list[dict]]:
    """Build a model for ``dataset``'s schema and train it on the train split."""
    init_rng, train_rng, _ = seed_streams(seed)
    model = DrvaeModel(dataset.column_kind, latent, init_rng)
    tr = dataset.train()
    history = train(model, tr.x, tr.t, tr.y, config, train_rng)
    return model, history
