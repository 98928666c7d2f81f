"""Small reverse-mode autodiff over 2-D numpy arrays.

Only the operations the DRVAE graph needs are provided: dense layers,
ELU / logistic / softplus activations, a handful of elementwise ops,
Gaussian and Bernoulli log-likelihoods, the closed-form KL against a
standard normal, reparameterised sampling, and Adam.

Every :class:`Value` wraps a float64 matrix (rows = batch).  Operations
record their parents and a backward closure; :func:`backward` walks the
recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from drvae.errors import ContractError, DimensionError, DomainError

BERNOULLI_EPS = 1e-7
VARIANCE_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Value:
    """A matrix node in the computation graph."""

    __slots__ = ("data", "_grad", "_parents", "_backward")

    def __init__(self, data, parents: Sequence["Value"] = (), backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim > 2:
            raise DimensionError(f"Value must be at most 2-D, got shape {arr.shape}")
        self.data = arr
        self._grad = None
        if _grad_enabled:
            self._parents = tuple(parents)
            self._backward = backward_fn
        else:
            self._parents = ()
            self._backward = None

    # grad is allocated lazily but always reads as an array of data's shape
    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_value(other)))

    def __rsub__(self, other):
        return add(as_value(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        return vmean(self, axis)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def _backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Value(out_data, (a, b), _backward)


def neg(a: Value) -> Value:
    return Value(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def _backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Value(out_data, (a, b), _backward)


def exp(a: Value) -> Value:
    out_data = np.exp(a.data)
    return Value(out_data, (a,), lambda g: a._accumulate(g * out_data))


def log(a: Value) -> Value:
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive entry")
    return Value(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def square(a: Value) -> Value:
    return Value(a.data * a.data, (a,), lambda g: a._accumulate(2.0 * g * a.data))


def sqrt(a: Value) -> Value:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative entry")
    out_data = np.sqrt(a.data)
    return Value(out_data, (a,), lambda g: a._accumulate(0.5 * g / out_data))


def elu(a: Value, alpha: float = 1.0) -> Value:
    if alpha <= 0:
        raise DomainError(f"elu alpha must be positive, got {alpha}")
    x = a.data
    neg_branch = np.expm1(np.minimum(x, 0.0))
    if alpha != 1.0:
        neg_branch *= alpha
    out_data = np.maximum(x, 0.0) + neg_branch
    if not _grad_enabled:
        return Value(out_data)
    # derivative at exactly 0 is taken from the right
    deriv = np.where(x >= 0, 1.0, neg_branch + alpha)
    return Value(out_data, (a,), lambda g: a._accumulate(g * deriv))


def _stable_logistic(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic(a: Value) -> Value:
    out_data = _stable_logistic(a.data)
    return Value(out_data, (a,), lambda g: a._accumulate(g * out_data * (1.0 - out_data)))


def softplus(a: Value) -> Value:
    x = a.data
    out_data = np.logaddexp(0.0, x)
    sig = _stable_logistic(x)
    return Value(out_data, (a,), lambda g: a._accumulate(g * sig))


def positive(a: Value) -> Value:
    """Map raw head outputs to variances: softplus(x) + 1e-6."""
    return add(softplus(a), VARIANCE_FLOOR)


def concat(values: Sequence[Value]) -> Value:
    """Column-wise concatenation; zero-width blocks are allowed."""
    values = [as_value(v) for v in values]
    if not values:
        raise ContractError("concat needs at least one block")
    rows = {v.shape[0] for v in values}
    if len(rows) != 1:
        raise DimensionError(f"concat row counts differ: {[v.shape for v in values]}")
    out_data = np.concatenate([v.data for v in values], axis=1)
    bounds = np.cumsum([0] + [v.shape[1] for v in values])

    def _backward(g):
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            if hi > lo:
                v._accumulate(g[:, lo:hi])

    return Value(out_data, tuple(values), _backward)


def columns(a: Value, start: int, stop: int) -> Value:
    def _backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return Value(a.data[:, start:stop], (a,), _backward)


def vsum(a: Value, axis=None) -> Value:
    if axis is None:
        out_data = a.data.sum().reshape(1, 1)
    else:
        out_data = a.data.sum(axis=axis, keepdims=True)
    return Value(out_data, (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def vmean(a: Value, axis=None) -> Value:
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ContractError("mean over an empty axis")
    return mul(vsum(a, axis), 1.0 / count)


def matmul(a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def _backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Value(a.data @ b.data, (a, b), _backward)


# ---------------------------------------------------------------------------
# layers


@dataclass
class DenseLayer:
    weights: Value
    bias: Value

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        """Glorot-uniform weights, zero bias."""
        limit = math.sqrt(6.0 / max(in_dim + out_dim, 1))
        w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        return cls(Value(w), Value(np.zeros((1, out_dim))))

    def parameters(self) -> list[Value]:
        return [self.weights, self.bias]


def dense_forward(layer: DenseLayer, x: Value) -> Value:
    x = as_value(x)
    if x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match layer weights {layer.weights.shape}"
        )
    w, b = layer.weights, layer.bias
    out_data = x.data @ w.data + b.data

    def _backward(g):
        x._accumulate(g @ w.data.T)
        w._accumulate(x.data.T @ g)
        b._accumulate(g.sum(axis=0, keepdims=True))

    return Value(out_data, (x, w, b), _backward)


# ---------------------------------------------------------------------------
# likelihoods and divergences (each returns one value per row, shape (n, 1))


def _check_variance(var: np.ndarray) -> None:
    if np.any(~(var > 0)):
        raise DomainError("variance entries must be strictly positive")


def gaussian_log_prob(x, mean, variance) -> Value:
    """Row-wise sum of diagonal Gaussian log densities."""
    x, mean, variance = as_value(x), as_value(mean), as_value(variance)
    _check_variance(variance.data)
    diff = x.data - mean.data
    v = variance.data
    per = -0.5 * (_LOG_2PI + np.log(v) + diff * diff / v)
    out_data = per.sum(axis=1, keepdims=True)

    def _backward(g):
        d_mean = g * diff / v
        x._accumulate(_unbroadcast(-d_mean, x.shape))
        mean._accumulate(_unbroadcast(d_mean, mean.shape))
        variance._accumulate(_unbroadcast(g * 0.5 * (diff * diff / v - 1.0) / v, variance.shape))

    return Value(out_data, (x, mean, variance), _backward)


def bernoulli_log_prob(x, p) -> Value:
    """Row-wise sum of x ln p + (1-x) ln(1-p), with p clamped to [eps, 1-eps]."""
    x_arr = x.data if isinstance(x, Value) else np.asarray(x, dtype=np.float64)
    p = as_value(p)
    if x_arr.ndim == 1:
        x_arr = x_arr.reshape(-1, 1)
    if np.any((x_arr != 0.0) & (x_arr != 1.0)):
        raise DomainError("Bernoulli observations must be 0 or 1")
    raw = p.data
    pc = np.clip(raw, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
    out_data = (x_arr * np.log(pc) + (1.0 - x_arr) * np.log1p(-pc)).sum(axis=1, keepdims=True)
    inside = (raw > BERNOULLI_EPS) & (raw < 1.0 - BERNOULLI_EPS)

    def _backward(g):
        d = x_arr / pc - (1.0 - x_arr) / (1.0 - pc)
        p._accumulate(_unbroadcast(g * d * inside, p.shape))

    return Value(out_data, (p,), _backward)


def kl_std_normal(mean, variance) -> Value:
    """Row-wise KL(N(mean, variance) || N(0, I))."""
    mean, variance = as_value(mean), as_value(variance)
    _check_variance(variance.data)
    m, v = mean.data, variance.data
    out_data = (0.5 * (m * m + v - np.log(v) - 1.0)).sum(axis=1, keepdims=True)

    def _backward(g):
        mean._accumulate(g * m)
        variance._accumulate(g * 0.5 * (1.0 - 1.0 / v))

    return Value(out_data, (mean, variance), _backward)


def reparam_sample(mean, variance, noise) -> Value:
    """mean + sqrt(variance) * noise; the noise carries no gradient."""
    mean, variance = as_value(mean), as_value(variance)
    _check_variance(variance.data)
    eps = np.asarray(noise, dtype=np.float64).reshape(mean.shape)
    std = np.sqrt(variance.data)

    def _backward(g):
        mean._accumulate(g)
        variance._accumulate(g * eps * 0.5 / std)

    return Value(mean.data + std * eps, (mean, variance), _backward)


# ---------------------------------------------------------------------------
# backward pass


def _topological(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Value) -> None:
    """Populate ``grad`` of every Value reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Value], **hyper) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """One in-place Adam update with L2-coupled weight decay."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ContractError(
            f"params/grads/state lengths differ: {len(params)}, {len(grads)}, {len(state.first_moment)}"
        )
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step_count
    c2 = 1.0 - b2**state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


@dataclass
class Adam:
    """Adam over a fixed list of parameter Values."""

    params: list[Value]
    state: AdamState = field(init=False)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.params = list(self.params)
        self.state = AdamState.for_params(
            self.params,
            learning_rate=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.betas[0],
            beta2=self.betas[1],
            epsilon=self.eps,
        )

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.state, [p.data for p in self.params], [p.grad for p in self.params])

