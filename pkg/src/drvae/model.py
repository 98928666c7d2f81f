"""DRVAE networks: four factor encoders and three decoders.

Wiring is structural: the treatment decoder only ever sees (gamma, delta),
the outcome decoder only (t, delta, upsilon), and the external-noise factor
only reaches the covariate decoder.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from drvae import ndiff
from drvae.errors import ConfigError, DimensionError, DomainError, IngestionError
from drvae.fileio import atomic_write_bytes
from drvae.ndiff import DenseLayer, Value

FACTORS = ("gamma", "delta", "upsilon", "e")
CONTINUOUS = "continuous"
BINARY = "binary"

CHECKPOINT_MAGIC = b"DRVAE-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LatentConfig:
    d_gamma: int = 1
    d_delta: int = 1
    d_upsilon: int = 1
    d_e: int = 1
    hidden_dim: int = 128
    num_layers: int = 3

    def __post_init__(self):
        dims = self.dims()
        if any(d < 0 for d in dims.values()):
            raise ConfigError(f"latent dimensions must be >= 0, got {dims}")
        if not any(dims.values()):
            raise ConfigError("at least one latent dimension must be positive")
        if self.hidden_dim <= 0 or self.num_layers < 1:
            raise ConfigError("hidden_dim must be > 0 and num_layers >= 1")

    def dims(self) -> dict[str, int]:
        return {
            "gamma": self.d_gamma,
            "delta": self.d_delta,
            "upsilon": self.d_upsilon,
            "e": self.d_e,
        }


@dataclass
class FactorPosterior:
    """Diagonal Gaussian (mean, variance) per latent factor."""

    mean: dict[str, Value]
    variance: dict[str, Value]

    @property
    def n_rows(self) -> int:
        return next(iter(self.mean.values())).shape[0]

    def sample(self, rng: np.random.Generator) -> dict[str, Value]:
        out = {}
        for name in FACTORS:
            m = self.mean[name]
            out[name] = ndiff.reparam_sample(m, self.variance[name], rng.standard_normal(m.shape))
        return out


class MLP:
    """ELU trunk followed by linear heads."""

    def __init__(self, in_dim: int, hidden_dim: int, num_layers: int,
                 head_dims: Sequence[int], rng: np.random.Generator):
        self.in_dim = in_dim
        self.trunk = []
        width = in_dim
        for _ in range(num_layers):
            self.trunk.append(DenseLayer.init(width, hidden_dim, rng))
            width = hidden_dim
        self.heads = [DenseLayer.init(width, d, rng) for d in head_dims]

    def layers(self) -> list[DenseLayer]:
        return self.trunk + self.heads

    def parameters(self) -> list[Value]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def __call__(self, x: Value) -> list[Value]:
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"network expects {self.in_dim} input columns, got shape {x.shape}")
        h = x
        for layer in self.trunk:
            h = ndiff.elu(ndiff.dense_forward(layer, h), 1.0)
        return [ndiff.dense_forward(head, h) for head in self.heads]


class GaussianNet(MLP):
    """Network emitting (mean, variance) of a diagonal Gaussian."""

    def __init__(self, in_dim, out_dim, hidden_dim, num_layers, rng):
        super().__init__(in_dim, hidden_dim, num_layers, (out_dim, out_dim), rng)

    def __call__(self, x: Value) -> tuple[Value, Value]:
        mean, raw_var = super().__call__(x)
        return mean, ndiff.positive(raw_var)


class CovariateDecoder(MLP):
    """Logistic heads for binary columns, Gaussian heads for continuous ones."""

    def __init__(self, in_dim, column_kind, hidden_dim, num_layers, rng):
        self.binary_idx = np.array([i for i, k in enumerate(column_kind) if k == BINARY], dtype=int)
        self.continuous_idx = np.array(
            [i for i, k in enumerate(column_kind) if k == CONTINUOUS], dtype=int
        )
        nb, nc = len(self.binary_idx), len(self.continuous_idx)
        super().__init__(in_dim, hidden_dim, num_layers, (nb, nc, nc), rng)

    def __call__(self, z: Value) -> dict[str, Value]:
        logits, mean, raw_var = super().__call__(z)
        out = {}
        if len(self.binary_idx):
            out["prob"] = ndiff.logistic(logits)
        if len(self.continuous_idx):
            out["mean"] = mean
            out["variance"] = ndiff.positive(raw_var)
        return out


class DrvaeModel:
    def __init__(self, column_kind: Sequence[str], config: LatentConfig, rng: np.random.Generator):
        bad = [k for k in column_kind if k not in (CONTINUOUS, BINARY)]
        if bad:
            raise ConfigError(f"unknown column kinds {sorted(set(bad))}")
        self.column_kind = list(column_kind)
        self.config = config
        dims = config.dims()
        h, nl = config.hidden_dim, config.num_layers
        p = len(self.column_kind)
        self.encoders = {
            name: GaussianNet(p, dims[name], h, nl, rng) for name in FACTORS if dims[name] > 0
        }
        self.x_decoder = CovariateDecoder(sum(dims.values()), self.column_kind, h, nl, rng)
        self.t_decoder = GaussianNet(dims["gamma"] + dims["delta"], 1, h, nl, rng)
        self.y_decoder = GaussianNet(1 + dims["delta"] + dims["upsilon"], 1, h, nl, rng)

    @property
    def n_features(self) -> int:
        return len(self.column_kind)

    def networks(self) -> dict[str, MLP]:
        nets = {f"encoder_{k}": v for k, v in self.encoders.items()}
        nets["x_decoder"] = self.x_decoder
        nets["t_decoder"] = self.t_decoder
        nets["y_decoder"] = self.y_decoder
        return nets

    def named_parameters(self) -> list[tuple[str, Value]]:
        out = []
        for net_name, net in self.networks().items():
            for i, layer in enumerate(net.layers()):
                out.append((f"{net_name}.{i}.weights", layer.weights))
                out.append((f"{net_name}.{i}.bias", layer.bias))
        return out

    def parameters(self) -> list[Value]:
        return [p for _, p in self.named_parameters()]


def _empty(n: int) -> Value:
    return Value(np.zeros((n, 0)))


def _as_matrix(x) -> Value:
    return x if isinstance(x, Value) else Value(np.asarray(x, dtype=np.float64))


def encode(model: DrvaeModel, x) -> FactorPosterior:
    x = _as_matrix(x)
    if x.shape[1] != model.n_features:
        raise DimensionError(
            f"covariates have shape {x.shape}, model schema has {model.n_features} columns"
        )
    n = x.shape[0]
    means, variances = {}, {}
    for name in FACTORS:
        if name in model.encoders:
            means[name], variances[name] = model.encoders[name](x)
        else:
            means[name], variances[name] = _empty(n), _empty(n)
    return FactorPosterior(means, variances)


def _check_block(value: Value, expected: int, name: str) -> Value:
    value = _as_matrix(value)
    if value.shape[1] != expected:
        raise DimensionError(f"{name} block has shape {value.shape}, expected {expected} columns")
    return value


def decode_x(model: DrvaeModel, z_gamma, z_delta, z_upsilon, z_e) -> dict[str, Value]:
    dims = model.config.dims()
    blocks = [
        _check_block(z, dims[name], name)
        for z, name in zip((z_gamma, z_delta, z_upsilon, z_e), FACTORS)
    ]
    return model.x_decoder(ndiff.concat(blocks))


def decode_t(model: DrvaeModel, z_gamma, z_delta) -> tuple[Value, Value]:
    dims = model.config.dims()
    z = ndiff.concat([
        _check_block(z_gamma, dims["gamma"], "gamma"),
        _check_block(z_delta, dims["delta"], "delta"),
    ])
    return model.t_decoder(z)


def decode_y(model: DrvaeModel, t, z_delta, z_upsilon) -> tuple[Value, Value]:
    dims = model.config.dims()
    t = _as_matrix(t)
    if t.shape[1] != 1:
        raise DimensionError(f"treatment must be a single column, got shape {t.shape}")
    if np.any((t.data < 0.0) | (t.data > 1.0)):
        raise DomainError("treatment values must lie in [0, 1]")
    z = ndiff.concat([
        t,
        _check_block(z_delta, dims["delta"], "delta"),
        _check_block(z_upsilon, dims["upsilon"], "upsilon"),
    ])
    return model.y_decoder(z)


# ---------------------------------------------------------------------------
# checkpoint persistence
#
# Layout: b"DRVAE-CHECKPOINT <version>\n", one line of JSON header, then the
# parameters as contiguous little-endian float64 in header order.


def save_checkpoint(model: DrvaeModel, path) -> None:
    names, shapes = [], []
    body = io.BytesIO()
    for name, p in model.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        body.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "column_kind": model.column_kind,
        "latent_config": asdict(model.config),
        "parameters": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
    }
    blob = (
        CHECKPOINT_MAGIC + f" {CHECKPOINT_VERSION}\n".encode()
        + json.dumps(header, sort_keys=True).encode() + b"\n"
        + body.getvalue()
    )
    atomic_write_bytes(path, blob)


def load_checkpoint(path) -> DrvaeModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic_line, rest = blob.split(b"\n", 1)
        header_line, body = rest.split(b"\n", 1)
        magic, version = magic_line.split(b" ")
        header = json.loads(header_line)
    except ValueError as exc:
        raise IngestionError(f"{path}: not a DRVAE checkpoint") from exc
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint format {magic_line!r}")
    config = LatentConfig(**header["latent_config"])
    model = DrvaeModel(header["column_kind"], config, np.random.default_rng(0))
    expected = model.named_parameters()
    stored = header["parameters"]
    if [s["name"] for s in stored] != [n for n, _ in expected]:
        raise IngestionError(f"{path}: parameter layout does not match the stored config")
    offset = 0
    for (name, p), meta in zip(expected, stored):
        shape = tuple(meta["shape"])
        if shape != p.shape:
            raise IngestionError(f"{path}: parameter {name} has shape {shape}, expected {p.shape}")
        count = int(np.prod(shape))
        chunk = body[offset: offset + 8 * count]
        if len(chunk) != 8 * count:
            raise IngestionError(f"{path}: truncated parameter data at {name}")
        p.data = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(body):
        raise IngestionError(f"{path}: {len(body) - offset} trailing bytes after parameters")
    return model

