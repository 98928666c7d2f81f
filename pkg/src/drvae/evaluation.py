"""Counterfactual prediction, ADRF estimation and the four evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from drvae import ndiff
from drvae.errors import ContractError, DomainError
from drvae.model import DrvaeModel, decode_y, encode

ROMBERG_LEVELS = 6
METRICS = ("amse", "sqrt_mise", "sqrt_dpe", "i_mse")


@dataclass(frozen=True)
class DoseGrid:
    points: np.ndarray
    kind: str = "observed-treatments"

    @classmethod
    def romberg(cls, m: int = ROMBERG_LEVELS) -> "DoseGrid":
        return cls(np.linspace(0.0, 1.0, 2**m + 1), "romberg-grid")

    @classmethod
    def observed(cls, t) -> "DoseGrid":
        return cls(np.unique(np.asarray(t, dtype=np.float64)), "observed-treatments")

    def __len__(self) -> int:
        return len(self.points)


def is_romberg_grid(points: np.ndarray) -> bool:
    n = len(points)
    if n < 2 or (n - 1) & (n - 2):
        return False
    return bool(np.allclose(points, np.linspace(0.0, 1.0, n), rtol=0, atol=1e-12))


# ---------------------------------------------------------------------------
# quadrature


def romberg(values: np.ndarray, dx: float) -> np.ndarray:
    """Romberg integration of samples on 2**m + 1 equally spaced points.

    ``values`` may be 2-D; integration runs along the last axis.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[-1]
    m = int(round(np.log2(n - 1))) if n > 1 else -1
    if n < 2 or 2**m + 1 != n:
        raise ContractError(f"Romberg needs 2**m + 1 samples, got {n}")
    h = dx * (n - 1)
    # trapezoid on successively refined subgrids
    prev = [0.5 * h * (values[..., 0] + values[..., -1])]
    step = n - 1
    for _ in range(m):
        h *= 0.5
        step //= 2
        mid = values[..., step::2 * step].sum(axis=-1)
        row = [0.5 * prev[0] + h * mid]
        for j in range(1, len(prev) + 1):
            row.append(row[j - 1] + (row[j - 1] - prev[j - 1]) / (4.0**j - 1.0))
        prev = row
    return prev[-1]


# ---------------------------------------------------------------------------
# prediction


def _sample_outcome_factors(model: DrvaeModel, x: np.ndarray, l: int, rng):
    with ndiff.no_grad():
        post = encode(model, x)
    n = x.shape[0]
    draws = []
    for name in ("delta", "upsilon"):
        m, v = post.mean[name].data, post.variance[name].data
        eps = np.asarray(rng.standard_normal((l, n, m.shape[1])), dtype=np.float64)
        draws.append(m[None] + np.sqrt(v)[None] * eps)
    return draws


def predict_curves(model: DrvaeModel, x, doses, l: int = 20, rng=None,
                   chunk_rows: int = 8192) -> np.ndarray:
    """Per-row predicted outcomes at each dose, shape (n_rows, n_doses).

    The same ``l`` posterior draws of (delta, upsilon) are shared by every
    dose, so each row's curve is a smooth function of t.
    """
    if l < 1:
        raise ContractError(f"sample count l must be >= 1, got {l}")
    doses = np.atleast_1d(np.asarray(doses, dtype=np.float64))
    if np.any((doses < 0) | (doses > 1)):
        raise DomainError("doses must lie in [0, 1]")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rng = np.random.default_rng() if rng is None else rng
    z_delta, z_upsilon = _sample_outcome_factors(model, x, l, rng)
    n = x.shape[0]
    flat_d = z_delta.reshape(l * n, -1)
    flat_u = z_upsilon.reshape(l * n, -1)
    per_chunk = max(1, chunk_rows // (l * n))
    out = np.empty((n, len(doses)))
    with ndiff.no_grad():
        for lo in range(0, len(doses), per_chunk):
            block = doses[lo: lo + per_chunk]
            k = len(block)
            t_col = np.repeat(block, l * n).reshape(-1, 1)
            mu, _ = decode_y(model, t_col, np.tile(flat_d, (k, 1)), np.tile(flat_u, (k, 1)))
            out[:, lo: lo + k] = mu.data.reshape(k, l, n).mean(axis=1).T
    return out


def predict_outcome(model: DrvaeModel, x, t: float, l: int = 20, rng=None) -> np.ndarray:
    """Average outcome-decoder mean over ``l`` posterior draws, one value per row."""
    if not 0.0 <= float(t) <= 1.0:
        raise DomainError(f"dose {t} outside [0, 1]")
    return predict_curves(model, x, [t], l, rng)[:, 0]


def truth_curves(oracle, x, doses) -> np.ndarray:
    doses = np.atleast_1d(np.asarray(doses, dtype=np.float64))
    return np.column_stack([oracle(x, t) for t in doses])


def estimate_adrf(model: DrvaeModel, x_test, grid: DoseGrid, l: int = 20, rng=None) -> np.ndarray:
    x_test = np.atleast_2d(np.asarray(x_test, dtype=np.float64))
    if x_test.shape[0] == 0:
        raise ContractError("ADRF needs a nonempty test set")
    return predict_curves(model, x_test, grid.points, l, rng).mean(axis=0)


# ---------------------------------------------------------------------------
# metrics (rows = units, columns = doses)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ContractError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise ContractError("metrics need at least one unit and one dose")
    return pred, truth


def amse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean((pred - truth).mean(axis=0) ** 2))


def mise(pred, truth, grid) -> float:
    pred, truth = _pair(pred, truth)
    points = grid.points if isinstance(grid, DoseGrid) else np.asarray(grid, dtype=np.float64)
    if not is_romberg_grid(points) or len(points) != pred.shape[1]:
        raise ContractError("MISE needs a 2**m + 1 point equally spaced grid on [0, 1]")
    return float(np.mean(romberg((pred - truth) ** 2, points[1] - points[0])))


def dpe(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    rows = np.arange(pred.shape[0])
    # np.argmax returns the first maximiser, i.e. ties go to the smaller dose
    best_true = truth[rows, np.argmax(truth, axis=1)]
    at_estimate = truth[rows, np.argmax(pred, axis=1)]
    return float(np.mean((best_true - at_estimate) ** 2))


def i_mse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def evaluate_curves(pred_obs, truth_obs, pred_grid, truth_grid, grid: DoseGrid) -> dict[str, float]:
    """Raw metric values (MISE and DPE un-rooted)."""
    return {
        "amse": amse(pred_obs, truth_obs),
        "mise": mise(pred_grid, truth_grid, grid),
        "dpe": dpe(pred_grid, truth_grid),
        "i_mse": i_mse(pred_grid, truth_grid),
    }


def evaluate_predictor(predict: Callable[[np.ndarray, np.ndarray], np.ndarray], test,
                       grid: DoseGrid | None = None) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Score ``predict(x, doses) -> (n, n_doses)`` on a test split with an oracle.

    Returns raw metrics and the ADRF curves on the Romberg grid.
    """
    if test.oracle is None:
        raise ContractError("evaluation needs a dataset with a counterfactual oracle")
    grid = DoseGrid.romberg() if grid is None else grid
    observed = DoseGrid.observed(test.t)
    n_obs = len(observed)
    # one call so both dose sets share the same posterior draws
    pred_all = predict(test.x, np.concatenate([observed.points, grid.points]))
    pred_obs, pred_grid = pred_all[:, :n_obs], pred_all[:, n_obs:]
    truth_obs = truth_curves(test.oracle, test.x, observed.points)
    truth_grid = truth_curves(test.oracle, test.x, grid.points)
    metrics = evaluate_curves(pred_obs, truth_obs, pred_grid, truth_grid, grid)
    curves = {
        "t": grid.points,
        "psi_hat": pred_grid.mean(axis=0),
        "psi_true": truth_grid.mean(axis=0),
    }
    return metrics, curves


def evaluate_model(model: DrvaeModel, test, l: int = 20, rng=None, grid: DoseGrid | None = None):
    rng = np.random.default_rng() if rng is None else rng
    return evaluate_predictor(lambda x, doses: predict_curves(model, x, doses, l, rng), test, grid)


# ---------------------------------------------------------------------------
# multi-seed aggregation


@dataclass
class MetricsReport:
    per_seed: dict[str, np.ndarray]
    mean: dict[str, float]
    std: dict[str, float]
    n_seeds: int
    seeds: list = field(default_factory=list)
    std_valid: bool = True


def aggregate(seed_metrics: Sequence[Mapping[str, float]], seeds: Sequence | None = None) -> MetricsReport:
    """Mean and sample std per metric; MISE and DPE are square-rooted per seed first."""
    if not seed_metrics:
        raise ContractError("aggregate needs at least one seed")
    per_seed = {
        "amse": np.array([m["amse"] for m in seed_metrics], dtype=np.float64),
        "sqrt_mise": np.sqrt([m["mise"] for m in seed_metrics]),
        "sqrt_dpe": np.sqrt([m["dpe"] for m in seed_metrics]),
        "i_mse": np.array([m["i_mse"] for m in seed_metrics], dtype=np.float64),
    }
    n = len(seed_metrics)
    mean = {k: float(v.mean()) for k, v in per_seed.items()}
    if n >= 2:
        std = {k: float(v.std(ddof=1)) for k, v in per_seed.items()}
    else:
        std = {k: float("nan") for k in per_seed}
    return MetricsReport(per_seed, mean, std, n, list(seeds or range(n)), std_valid=n >= 2)
