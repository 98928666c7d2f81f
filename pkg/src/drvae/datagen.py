"""Benchmark datasets with noiseless counterfactual oracles.

Three generators are provided:

* ``simu``  - fully synthetic, 6 base covariates plus 5k Gaussian and 10k
  Bernoulli noise columns, 500 train / 200 test rows.
* ``ihdp``  - 747 x 25 covariates (user file or synthesised stand-in) with a
  synthetic treatment/outcome mechanism.
* ``news``  - 3000 x 498 word-count covariates (user file or synthesised
  stand-in) with a Beta-distributed treatment.

Noise specs of the form N(a, b) are (mean, variance).

IHDP column mapping (1-based as in the mechanism -> 0-based storage)::

    continuous       {1, 2, 3, 5, 6}        -> {0, 1, 2, 4, 5}
    adjustment group {4, 7..15}             -> {3, 6..14}
    instrument group {16..25}               -> {15..24}
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from drvae.errors import ConfigError, IngestionError
from drvae.fileio import atomic_write_text
from drvae.model import BINARY, CONTINUOUS

FORMAT_VERSION = 1
TRAIN, TEST = "train", "test"

Oracle = Callable[[np.ndarray, "np.ndarray | float"], np.ndarray]


def logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class Dataset:
    x: np.ndarray
    column_kind: list[str]
    t: np.ndarray
    y: np.ndarray
    split: np.ndarray
    generator: dict = field(default_factory=dict)
    oracle: Optional[Oracle] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.split = np.asarray(self.split, dtype=object)
        n, p = self.x.shape
        if len(self.column_kind) != p:
            raise IngestionError(f"{len(self.column_kind)} column kinds for {p} columns")
        if not (len(self.t) == len(self.y) == len(self.split) == n):
            raise IngestionError("x, t, y and split must have the same number of rows")
        for j, kind in enumerate(self.column_kind):
            if kind not in (CONTINUOUS, BINARY):
                raise IngestionError(f"column {j}: unknown kind {kind!r}")
            if kind == BINARY and not np.isin(self.x[:, j], (0.0, 1.0)).all():
                raise IngestionError(f"column {j} is tagged binary but holds values outside {{0,1}}")
        if np.any((self.t < 0) | (self.t > 1)):
            raise IngestionError("treatment values must lie in [0, 1]")
        if not set(self.split) <= {TRAIN, TEST}:
            raise IngestionError(f"split tags must be {TRAIN!r}/{TEST!r}")

    @property
    def name(self) -> str:
        g = self.generator
        if g.get("name") == "simu":
            return f"simu{g['k']}"
        return g.get("name", "custom")

    def subset(self, tag: str) -> "Dataset":
        mask = self.split == tag
        return Dataset(self.x[mask], self.column_kind, self.t[mask], self.y[mask],
                       self.split[mask], self.generator, self.oracle)

    def train(self) -> "Dataset":
        return self.subset(TRAIN)

    def test(self) -> "Dataset":
        return self.subset(TEST)


# ---------------------------------------------------------------------------
# Simu(k)


@dataclass(frozen=True)
class SimuSpec:
    k: int = 1
    seed: int = 0
    n_train: int = 500
    n_test: int = 200

    def __post_init__(self):
        if self.k not in (1, 2, 3, 4, 5):
            raise ConfigError(f"Simu noise level k must be in 1..5, got {self.k}")


def simu_treatment_mean(x: np.ndarray) -> np.ndarray:
    x1, x2, x3, x4, x5 = (x[:, j] for j in range(5))
    return (
        (10.0 * np.sin(np.maximum.reduce([x1, x2, x3])) + np.maximum.reduce([x3, x4, x5]) ** 3)
        / (1.0 + (x1 + x5) ** 2)
        + np.sin(0.5 * x3) * (1.0 + np.exp(x4 - 0.5 * x3))
        + x3**2 + 2.0 * np.sin(x4) + 2.0 * x5 - 6.5
    )


def simu_oracle(x: np.ndarray, t) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    x1, x3, x4, x6 = x[:, 0], x[:, 2], x[:, 3], x[:, 5]
    return np.cos(2.0 * np.pi * (t - 0.5)) * (
        t**2 + 4.0 * np.maximum(x1, x6) ** 3 / (1.0 + 2.0 * x3**2) * np.sin(x4)
    )


def simu_column_kind(k: int) -> list[str]:
    return [CONTINUOUS] * (6 + 5 * k) + [BINARY] * (10 * k)


def gen_simu(spec: SimuSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_test
    base = rng.uniform(0.0, 1.0, size=(n, 6))
    noise_con = rng.normal(2.0, math.sqrt(10.0), size=(n, 5 * spec.k))
    p_bin = rng.uniform(0.0, 1.0, size=10 * spec.k)
    noise_bin = (rng.uniform(size=(n, 10 * spec.k)) < p_bin).astype(np.float64)
    x = np.hstack([base, noise_con, noise_bin])
    t = logistic(simu_treatment_mean(base) + rng.normal(0.0, 0.5, size=n))
    y = simu_oracle(base, t) + rng.normal(0.0, 0.5, size=n)
    split = np.array([TRAIN] * spec.n_train + [TEST] * spec.n_test, dtype=object)
    gen = {"name": "simu", "k": spec.k, "seed": spec.seed}
    return Dataset(x, simu_column_kind(spec.k), t, y, split, gen, simu_oracle)


# ---------------------------------------------------------------------------
# IHDP

IHDP_ROWS, IHDP_COLS = 747, 25
IHDP_CONTINUOUS = np.array([1, 2, 3, 5, 6]) - 1
IHDP_ADJUSTMENT = np.array([4, 7, 8, 9, 10, 11, 12, 13, 14, 15]) - 1
IHDP_INSTRUMENT = np.arange(16, 26) - 1


def ihdp_column_kind() -> list[str]:
    kinds = [BINARY] * IHDP_COLS
    for j in IHDP_CONTINUOUS:
        kinds[j] = CONTINUOUS
    return kinds


def _ihdp_constants(x: np.ndarray) -> tuple[float, float]:
    c1 = float(x[:, IHDP_ADJUSTMENT].mean(axis=1).mean())
    c2 = float(x[:, IHDP_INSTRUMENT].mean(axis=1).mean())
    return c1, c2


def make_ihdp_oracle(c1: float) -> Oracle:
    def oracle(x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64)
        x1, x2, x3, x5, x6 = (x[:, j] for j in IHDP_CONTINUOUS)
        adj = np.tanh(5.0 * (x[:, IHDP_ADJUSTMENT] - c1).mean(axis=1))
        ratio = np.exp(0.2 * (x1 - x6)) / (0.5 + 5.0 * np.minimum.reduce([x2, x3, x5]))
        return np.sin(3.0 * np.pi * t) / (1.2 - t) * (adj + ratio)

    return oracle


def ihdp_treatment_mean(x: np.ndarray, c2: float) -> np.ndarray:
    x1, x2, x3, x5, x6 = (x[:, j] for j in IHDP_CONTINUOUS)
    trio = [x3, x5, x6]
    return (
        2.0 * x1 / (1.0 + x2)
        + 2.0 * np.maximum.reduce(trio) / (0.2 + np.minimum.reduce(trio))
        + 2.0 * np.tanh(5.0 * (x[:, IHDP_INSTRUMENT] - c2).mean(axis=1))
        - 4.0
    )


def read_covariate_csv(path, rows: int, cols: int) -> np.ndarray:
    """Read a headerless (or single-header-line) numeric CSV of fixed shape."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            records = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise IngestionError(f"cannot read covariate file {path}: {exc}") from exc
    if records:
        try:
            [float(c) for c in records[0]]
        except ValueError:
            records = records[1:]  # header line
    values = np.empty((len(records), cols))
    if len(records) != rows:
        raise IngestionError(f"{path}: expected {rows} rows, found {len(records)}")
    for i, rec in enumerate(records):
        if len(rec) != cols:
            raise IngestionError(f"{path}: row {i + 1} has {len(rec)} columns, expected {cols}")
        for j, cell in enumerate(rec):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise IngestionError(f"{path}: row {i + 1}, column {j + 1}: not a number: {cell!r}")
    if not np.isfinite(values).all():
        bad = np.argwhere(~np.isfinite(values))[0]
        raise IngestionError(f"{path}: row {bad[0] + 1}, column {bad[1] + 1} is not finite")
    return values


def _split_by_fraction(n: int, train_fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must be in (0, 1), got {train_fraction}")
    order = rng.permutation(n)
    split = np.full(n, TEST, dtype=object)
    split[order[: int(round(train_fraction * n))]] = TRAIN
    return split


def _ihdp_covariates(covariates, rng) -> np.ndarray:
    if covariates is None:
        x = rng.integers(0, 2, size=(IHDP_ROWS, IHDP_COLS)).astype(np.float64)
        x[:, IHDP_CONTINUOUS] = rng.uniform(size=(IHDP_ROWS, len(IHDP_CONTINUOUS)))
    else:
        x = read_covariate_csv(covariates, IHDP_ROWS, IHDP_COLS)
        discrete = np.setdiff1d(np.arange(IHDP_COLS), IHDP_CONTINUOUS)
        for j in discrete:
            bad = np.flatnonzero(~np.isin(x[:, j], (0.0, 1.0)))
            if len(bad):
                raise IngestionError(
                    f"{covariates}: row {bad[0] + 1}, column {j + 1} must be binary, "
                    f"got {x[bad[0], j]}"
                )
    # min-max scale the continuous block to [0, 1]
    cont = x[:, IHDP_CONTINUOUS]
    lo, hi = cont.min(axis=0), cont.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    x[:, IHDP_CONTINUOUS] = (cont - lo) / span
    return x


def gen_ihdp(covariates=None, seed: int = 0, train_fraction: float = 0.8) -> Dataset:
    cov_rng, mech_rng, split_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    x = _ihdp_covariates(covariates, cov_rng)
    c1, c2 = _ihdp_constants(x)
    oracle = make_ihdp_oracle(c1)
    n = len(x)
    t = logistic(ihdp_treatment_mean(x, c2) + mech_rng.normal(0.0, 0.5, size=n))
    y = oracle(x, t) + mech_rng.normal(0.0, 0.5, size=n)
    split = _split_by_fraction(n, train_fraction, split_rng)
    gen = {
        "name": "ihdp", "seed": seed, "train_fraction": train_fraction,
        "covariates": None if covariates is None else str(covariates),
    }
    return Dataset(x, ihdp_column_kind(), t, y, split, gen, oracle)


# ---------------------------------------------------------------------------
# News

NEWS_ROWS, NEWS_COLS = 3000, 498
NEWS_MAX_ATTEMPTS = 100


def _news_covariates(covariates, rng) -> np.ndarray:
    if covariates is None:
        # sparse word counts: most words absent from most documents
        rates = 0.02 + rng.gamma(0.3, 1.0, size=NEWS_COLS)  # floor keeps every word present
        counts = rng.poisson(rates, size=(NEWS_ROWS, NEWS_COLS)).astype(np.float64)
        empty = counts.sum(axis=1) == 0
        counts[empty, rng.integers(0, NEWS_COLS, size=int(empty.sum()))] = 1.0
    else:
        counts = read_covariate_csv(covariates, NEWS_ROWS, NEWS_COLS)
        neg = np.argwhere(counts < 0)
        if len(neg):
            i, j = neg[0]
            raise IngestionError(f"{covariates}: row {i + 1}, column {j + 1} is a negative count")
    totals = counts.sum(axis=1, keepdims=True)
    return counts / np.where(totals > 0, totals, 1.0)


def draw_news_vectors(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm v1, v2, v3 (rows of the result) with nonzero v2.x and v3.x."""
    for _ in range(NEWS_MAX_ATTEMPTS):
        v = rng.standard_normal((3, x.shape[1]))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        proj = x @ v.T
        if np.all(proj[:, 1] != 0) and np.all(proj[:, 2] != 0):
            return v
    raise ConfigError(f"no valid News projection vectors after {NEWS_MAX_ATTEMPTS} attempts")


def news_dose_factor(t):
    t = np.asarray(t, dtype=np.float64)
    return 4.0 * (t - 0.5) ** 2 * np.sin(0.5 * np.pi * t)


def make_news_oracle(v: np.ndarray) -> Oracle:
    v = v.copy()

    def oracle(x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p1, p2, p3 = (x @ v.T).T
        with np.errstate(over="ignore"):
            y_prime = np.exp(p2 / p3 - 0.3)
        return 2.0 * (np.clip(y_prime, -2.0, 2.0) + 20.0 * p1) * news_dose_factor(t)

    return oracle


def gen_news(covariates=None, seed: int = 0, train_fraction: float = 0.8) -> Dataset:
    cov_rng, mech_rng, split_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    x = _news_covariates(covariates, cov_rng)
    v = draw_news_vectors(x, mech_rng)
    oracle = make_news_oracle(v)
    p2, p3 = x @ v[1], x @ v[2]
    t = mech_rng.beta(2.0, np.abs(p3 / (2.0 * p2)))
    # Beta draws can round to exactly 0 or 1 in float64 for extreme shapes
    t = np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    y = oracle(x, t) + mech_rng.normal(0.0, math.sqrt(0.5), size=len(x))
    split = _split_by_fraction(len(x), train_fraction, split_rng)
    gen = {
        "name": "news", "seed": seed, "train_fraction": train_fraction,
        "covariates": None if covariates is None else str(covariates),
    }
    return Dataset(x, [CONTINUOUS] * NEWS_COLS, t, y, split, gen, oracle)


# ---------------------------------------------------------------------------
# oracle reconstruction and persistence


def rebuild_oracle(generator: dict, x_full: np.ndarray) -> Optional[Oracle]:
    """Recreate the noiseless outcome function from a stored generator spec."""
    name = generator.get("name")
    if name == "simu":
        return simu_oracle
    if name == "ihdp":
        c1, _ = _ihdp_constants(x_full)
        return make_ihdp_oracle(c1)
    if name == "news":
        _, mech, _ = (np.random.default_rng(s) for s in np.random.SeedSequence(generator["seed"]).spawn(3))
        return make_news_oracle(draw_news_vectors(x_full, mech))
    return None


def generate(name: str, seed: int, k: int = 1, covariates=None, train_fraction: float = 0.8) -> Dataset:
    if name == "simu":
        return gen_simu(SimuSpec(k=k, seed=seed))
    if name == "ihdp":
        return gen_ihdp(covariates, seed, train_fraction)
    if name == "news":
        return gen_news(covariates, seed, train_fraction)
    raise ConfigError(f"unknown dataset {name!r}; expected simu, ihdp or news")


HEADER_PREFIX = "# "


def dumps_dataset(ds: Dataset) -> str:
    """Text layout: '# '-prefixed JSON header line, then tab-separated rows."""
    n, p = ds.x.shape
    header = {
        "format": "drvae-dataset",
        "format_version": FORMAT_VERSION,
        "n": n,
        "p": p,
        "column_kind": ds.column_kind,
        "generator": ds.generator,
    }
    buf = io.StringIO()
    buf.write(HEADER_PREFIX + json.dumps(header, sort_keys=True) + "\n")
    names = [f"x{j + 1}" for j in range(p)] + ["t", "y", "split"]
    buf.write("\t".join(names) + "\n")
    for i in range(n):
        cells = [repr(float(v)) for v in ds.x[i]]
        cells += [repr(float(ds.t[i])), repr(float(ds.y[i])), ds.split[i]]
        buf.write("\t".join(cells) + "\n")
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_text(path, dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read dataset {path}: {exc}") from exc
    if not lines or not lines[0].startswith(HEADER_PREFIX):
        raise IngestionError(f"{path}: missing dataset header")
    try:
        header = json.loads(lines[0][len(HEADER_PREFIX):])
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: malformed header: {exc}") from exc
    if header.get("format") != "drvae-dataset":
        raise IngestionError(f"{path}: not a drvae dataset file")
    if header.get("format_version") != FORMAT_VERSION:
        raise IngestionError(
            f"{path}: format version {header.get('format_version')} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    for key in ("n", "p", "column_kind", "generator"):
        if key not in header:
            raise IngestionError(f"{path}: header is missing {key!r}")
    n, p = header["n"], header["p"]
    rows = lines[2:]
    if len(rows) != n:
        raise IngestionError(f"{path}: header says {n} rows, body has {len(rows)}")
    x = np.empty((n, p))
    t = np.empty(n)
    y = np.empty(n)
    split = np.empty(n, dtype=object)
    for i, line in enumerate(rows):
        cells = line.split("\t")
        if len(cells) != p + 3:
            raise IngestionError(f"{path}: row {i + 1} has {len(cells)} fields, expected {p + 3}")
        try:
            x[i] = [float(c) for c in cells[:p]]
            t[i], y[i] = float(cells[p]), float(cells[p + 1])
        except ValueError as exc:
            raise IngestionError(f"{path}: row {i + 1}: {exc}") from exc
        split[i] = cells[p + 2]
    generator = header["generator"]
    return Dataset(x, list(header["column_kind"]), t, y, split, generator,
                   rebuild_oracle(generator, x))
