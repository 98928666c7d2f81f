"""Training objective: ELBO + auxiliary prediction terms + prior regulariser.

All terms are batch means and are *maximised*; the trainer minimises the
negated total.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from drvae import ndiff
from drvae.errors import ConfigError
from drvae.model import FACTORS, DrvaeModel, FactorPosterior, decode_t, decode_x, decode_y, encode
from drvae.ndiff import Value


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossBreakdown:
    recon_x: Value
    kl_sum: Value
    aux_t: Value
    aux_y: Value
    reg: Value
    total: Value

    def as_floats(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).item() for f in fields(self)}


def _scalar(x: float = 0.0) -> Value:
    return Value(np.full((1, 1), x))


def elbo_term(model: DrvaeModel, x: np.ndarray, posterior: FactorPosterior,
              samples: dict[str, Value]) -> tuple[Value, Value]:
    """Batch-mean covariate log-likelihood and summed factor KL."""
    x = np.asarray(x, dtype=np.float64)
    heads = decode_x(model, *(samples[name] for name in FACTORS))
    dec = model.x_decoder
    per_row = []
    if "prob" in heads:
        per_row.append(ndiff.bernoulli_log_prob(x[:, dec.binary_idx], heads["prob"]))
    if "mean" in heads:
        per_row.append(
            ndiff.gaussian_log_prob(x[:, dec.continuous_idx], heads["mean"], heads["variance"])
        )
    recon = per_row[0]
    for term in per_row[1:]:
        recon = recon + term
    return recon.mean(), kl_total(posterior)


def kl_total(posterior: FactorPosterior) -> Value:
    terms = [
        ndiff.kl_std_normal(posterior.mean[name], posterior.variance[name])
        for name in FACTORS
        if posterior.mean[name].shape[1] > 0
    ]
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out.mean()


def auxiliary_term(model: DrvaeModel, t: np.ndarray, y: np.ndarray,
                   samples: dict[str, Value]) -> tuple[Value, Value]:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    mu_t, var_t = decode_t(model, samples["gamma"], samples["delta"])
    mu_y, var_y = decode_y(model, t, samples["delta"], samples["upsilon"])
    aux_t = ndiff.gaussian_log_prob(t, mu_t, var_t).mean()
    aux_y = ndiff.gaussian_log_prob(y, mu_y, var_y).mean()
    return aux_t, aux_y


def reg_term(posterior: FactorPosterior) -> Value:
    """E_q[log p(z) - log q(z|x)] in closed form, i.e. minus the KL."""
    return -kl_total(posterior)


def total_objective(weights: LossWeights, recon_x: Value, kl_sum: Value, aux_t: Value,
                    aux_y: Value, reg: Value) -> LossBreakdown:
    # zero weights drop the term outright so it contributes no gradient
    pieces = [
        (weights.alpha, recon_x),
        (weights.beta, -kl_sum),
        (weights.gamma, aux_t),
        (weights.delta, aux_y),
        (weights.lam, reg),
    ]
    total = _scalar()
    for w, term in pieces:
        if w != 0:
            total = total + w * term
    return LossBreakdown(recon_x, kl_sum, aux_t, aux_y, reg, total)


def drvae_objective(model: DrvaeModel, x, t, y, weights: LossWeights,
                    rng: np.random.Generator) -> LossBreakdown:
    """Full objective on one batch with one reparameterised draw per factor."""
    posterior = encode(model, x)
    samples = posterior.sample(rng)
    recon_x, kl_sum = elbo_term(model, x, posterior, samples)
    aux_t, aux_y = auxiliary_term(model, t, y, samples)
    return total_objective(weights, recon_x, kl_sum, aux_t, aux_y, reg_term(posterior))
