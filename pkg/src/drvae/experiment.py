"""Multi-seed experiments and hyperparameter sweeps."""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from drvae import datagen, ndiff
from drvae.errors import ConfigError, DrvaeError
from drvae.evaluation import MetricsReport, aggregate, evaluate_model
from drvae.model import FACTORS, LatentConfig, encode
from drvae.objective import LossWeights
from drvae.training import TrainConfig, fit, seed_streams

logger = logging.getLogger(__name__)

# per-dataset defaults: hidden, layers, epochs, batch, lr, decay, alpha..lambda
DATASET_DEFAULTS = {
    "simu": dict(hidden_dim=128, num_layers=3, epochs=100, batch_size=64, lr=1e-3,
                 weight_decay=1e-4, alpha=0.1, beta=1.0, gamma=1.0, delta=0.1, lam=1.0),
    "ihdp": dict(hidden_dim=100, num_layers=3, epochs=100, batch_size=64, lr=1e-3,
                 weight_decay=1e-4, alpha=0.1, beta=1.0, gamma=1.0, delta=1.0, lam=1.0),
    "news": dict(hidden_dim=100, num_layers=3, epochs=80, batch_size=256, lr=1e-3,
                 weight_decay=1e-4, alpha=0.1, beta=1.0, gamma=1.0, delta=1.0, lam=1.0),
}

SWEEPABLE = ("alpha", "beta", "gamma", "delta", "lambda", "d_gamma", "d_delta", "d_upsilon", "d_e")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "simu"
    k: int = 1
    covariates: Optional[str] = None
    train_fraction: float = 0.8
    latent: LatentConfig = field(default_factory=LatentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_seeds: int = 10
    base_seed: int = 0
    l: int = 20

    @classmethod
    def defaults(cls, dataset: str = "simu", **overrides) -> "ExperimentConfig":
        """Per-dataset defaults, then flat overrides (hidden_dim, delta, d_e, n_seeds, ...)."""
        if dataset not in DATASET_DEFAULTS:
            raise ConfigError(f"unknown dataset {dataset!r}")
        flat = dict(DATASET_DEFAULTS[dataset])
        if dataset == "ihdp":
            flat["d_e"] = 0  # the IHDP mechanism has no external-noise covariates
        flat.update({k: v for k, v in overrides.items() if v is not None})
        if "lambda" in flat:
            flat["lam"] = flat.pop("lambda")
        return cls.from_flat(dataset, flat)

    @classmethod
    def from_flat(cls, dataset: str, flat: dict) -> "ExperimentConfig":
        flat = dict(flat)
        latent_keys = {f.name for f in dataclasses.fields(LatentConfig)}
        weight_keys = {f.name for f in dataclasses.fields(LossWeights)}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)} - {"weights"}
        top_keys = {f.name for f in dataclasses.fields(cls)} - {"latent", "train", "dataset"}
        unknown = set(flat) - latent_keys - weight_keys - train_keys - top_keys
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        latent = LatentConfig(**{k: flat[k] for k in latent_keys if k in flat})
        weights = LossWeights(**{k: flat[k] for k in weight_keys if k in flat})
        train = TrainConfig(weights=weights, **{k: flat[k] for k in train_keys if k in flat})
        top = {k: flat[k] for k in top_keys if k in flat}
        return cls(dataset=dataset, latent=latent, train=train, **top)

    def flat(self) -> dict:
        out = {"dataset": self.dataset}
        for f in dataclasses.fields(self):
            if f.name in ("dataset", "latent", "train"):
                continue
            out[f.name] = getattr(self, f.name)
        out.update(dataclasses.asdict(self.latent))
        train = dataclasses.asdict(self.train)
        out.update(train.pop("weights"))
        out.update(train)
        return out

    def with_param(self, name: str, value) -> "ExperimentConfig":
        if name not in SWEEPABLE:
            raise ConfigError(f"cannot sweep {name!r}; choose from {', '.join(SWEEPABLE)}")
        if name.startswith("d_"):
            return replace(self, latent=replace(self.latent, **{name: int(value)}))
        key = "lam" if name == "lambda" else name
        weights = replace(self.train.weights, **{key: float(value)})
        return replace(self, train=replace(self.train, weights=weights))

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_seeds)]

    @property
    def dataset_label(self) -> str:
        return f"simu{self.k}" if self.dataset == "simu" else self.dataset


def make_dataset(config: ExperimentConfig, seed: int) -> datagen.Dataset:
    return datagen.generate(config.dataset, seed, k=config.k, covariates=config.covariates,
                            train_fraction=config.train_fraction)


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    curves: dict
    history: list
    model: object = None


def run_seed(config: ExperimentConfig, seed: int, keep_model: bool = False) -> SeedResult:
    """Generate (or re-split) data, train and evaluate for one seed."""
    dataset = make_dataset(config, seed)
    model, history = fit(dataset, config.latent, config.train, seed)
    eval_rng = seed_streams(seed)[2]
    metrics, curves = evaluate_model(model, dataset.test(), config.l, eval_rng)
    return SeedResult(seed, metrics, curves, history, model if keep_model else None)


def _run_seed_safe(args):
    config, seed = args
    try:
        return run_seed(config, seed)
    except DrvaeError as exc:
        return exc


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    results: list[SeedResult]
    failures: dict[int, str]
    report: Optional[MetricsReport]


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    if config.n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    tasks = [(config, s) for s in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_seed_safe, tasks))
    else:
        outcomes = [_run_seed_safe(t) for t in tasks]
    results, failures = [], {}
    for (_, seed), out in zip(tasks, outcomes):
        if isinstance(out, Exception):
            logger.error("seed %d failed: %s", seed, out)
            failures[seed] = str(out)
        else:
            logger.info("seed %d: %s", seed, {k: round(v, 4) for k, v in out.metrics.items()})
            results.append(out)
    report = aggregate([r.metrics for r in results], [r.seed for r in results]) if results else None
    return ExperimentResult(config, results, failures, report)


def run_sweep(config: ExperimentConfig, parameter: str, values: Sequence, jobs: int = 1):
    if not values:
        raise ConfigError("sweep needs at least one value")
    return [(v, run_experiment(config.with_param(parameter, v), jobs)) for v in values]


def aggregated_posterior(model, x: np.ndarray) -> dict[str, tuple[float, float]]:
    """Mean and variance of the mixture of per-row posteriors, per factor dimension."""
    with ndiff.no_grad():
        post = encode(model, x)
    out = {}
    for name in FACTORS:
        m, v = post.mean[name].data, post.variance[name].data
        if m.shape[1] == 0:
            continue
        out[name] = (m.mean(axis=0), v.mean(axis=0) + m.var(axis=0))
    return out
