"""Reverse-mode differentiation over float64 numpy arrays, plus Adam.

Every primitive builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import scipy.sparse as sp

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: tuple = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self):
        self.grad = None

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn, op) -> Tensor:
    parents = tuple(parents)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.value @ b.value
    return _make(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def spmm(adj, x) -> Tensor:
    """Constant (sparse or dense) matrix times a tensor."""
    x = as_tensor(x)
    if adj.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse-dense-matmul: shapes {adj.shape} and {x.shape} do not conform")
    out = adj @ x.value
    out = out.toarray() if sp.issparse(out) else np.asarray(out)
    return _make(out, (x,), lambda g: (np.asarray(adj.T @ g),), "spmm")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                 "mul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.value > 0, 1.0, slope)
    return _make(a.value * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def prelu(a, slope) -> Tensor:
    """PReLU with a learnable slope tensor broadcast against ``a``."""
    a, slope = as_tensor(a), as_tensor(slope)
    pos = a.value > 0
    out = np.where(pos, a.value, slope.value * a.value)

    def back(g):
        ga = g * np.where(pos, 1.0, slope.value)
        gs = _unbroadcast(np.where(pos, 0.0, g * a.value), slope.shape)
        return ga, gs

    return _make(out, (a, slope), back, "prelu")


def _logsigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def logsigmoid(a) -> Tensor:
    a = as_tensor(a)
    # d/dx logsigmoid(x) = sigmoid(-x)
    sig_neg = np.exp(_logsigmoid(-a.value))
    return _make(_logsigmoid(a.value), (a,), lambda g: (g * sig_neg,), "logsigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def logsumexp(a) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor; rows of all -inf give -inf."""
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"logsumexp: expected 2-D input, got {a.shape}")
    m = a.value.max(axis=1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.exp(a.value - m_safe).sum(axis=1, keepdims=True)
        out = np.log(s) + m_safe
    weights = np.divide(np.exp(a.value - m_safe), s, out=np.zeros_like(a.value), where=s > 0)
    return _make(out, (a,), lambda g: (g * weights,), "logsumexp")


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return _make(p, (a,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),), "row_softmax")


def l2_normalize(a) -> Tensor:
    """Scale each row to unit norm; zero rows stay zero."""
    a = as_tensor(a)
    norm = np.linalg.norm(a.value, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    out = a.value / safe

    def back(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (np.where(norm > 0, (g - out * dot) / safe, 0.0),)

    return _make(out, (a,), back, "l2_normalize")


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    other = 1 - axis
    if len({t.shape[other] for t in ts}) > 1:
        raise ShapeError(f"concat: mismatched shapes {[t.shape for t in ts]} along axis {other}")
    out = np.concatenate([t.value for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        if axis == 1:
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _make(out, ts, back, "concat")


def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    """Sum over rows (axis=0 keeps columns), columns (axis=1) or everything (None)."""
    a = as_tensor(a)
    if axis is None:
        return _make(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    out = a.value.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    # divide rather than multiply by 1/count so the mean of equal values is exact
    total = reduce_sum(a, axis)
    return _make(total.value / count, (total,), lambda g: (g / count,), "reduce_mean")


def gather(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), back, "gather")


def _segment_matrix(segments: np.ndarray, num_segments: int) -> sp.csr_matrix:
    n = len(segments)
    return sp.csr_matrix((np.ones(n), (segments, np.arange(n))), shape=(num_segments, n))


def segment_sum(a, segments, num_segments: int) -> Tensor:
    """out[s] = sum of rows i with segments[i] == s."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if len(segments) != a.shape[0]:
        raise ShapeError(f"segment_sum: {len(segments)} segment ids for {a.shape[0]} rows")
    return spmm(_segment_matrix(segments, num_segments), a)


def segment_mean(a, segments, num_segments: int) -> Tensor:
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    m = _segment_matrix(segments, num_segments)
    m = sp.diags(1.0 / np.maximum(counts, 1.0)) @ m
    return spmm(m.tocsr(), a)


def segment_softmax(a, segments, num_segments: int) -> Tensor:
    """Softmax of a column vector within each segment (attention over neighborhoods)."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    x = a.value.reshape(-1)
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, x)
    e = np.exp(x - seg_max[segments])
    denom = np.bincount(segments, weights=e, minlength=num_segments)
    p = (e / denom[segments]).reshape(a.shape)

    def back(g):
        gp = (g * p).reshape(-1)
        seg_dot = np.bincount(segments, weights=gp, minlength=num_segments)
        return (p * (g - seg_dot[segments].reshape(a.shape)),)

    return _make(p, (a,), back, "segment_softmax")


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "sparse-dense-matmul": spmm,
    "transpose": transpose,
    "add": add,
    "scale": scale,
    "elementwise-multiply": mul,
    "relu": relu,
    "leaky-relu": leaky_relu,
    "prelu": prelu,
    "logsigmoid": logsigmoid,
    "exp": exp,
    "log": log,
    "logsumexp": logsumexp,
    "row-l2-normalize": l2_normalize,
    "concat": concat,
    "reduce-sum": reduce_sum,
    "reduce-mean": reduce_mean,
    "row-gather": gather,
    "segment-sum": segment_sum,
    "segment-mean": segment_mean,
    "segment-softmax": segment_softmax,
    "row-softmax": row_softmax,
}


def primitive_forward(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def topological_order(root: Tensor) -> list[Tensor]:
    """The recorded computation reachable from ``root``, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def kink_distance(root: Tensor) -> float:
    """Smallest |input| to any relu-type node feeding ``root`` (inf if none)."""
    best = math.inf
    for node in topological_order(root):
        if node.op in ("relu", "leaky_relu", "prelu"):
            v = np.abs(node.parents[0].value)
            if v.size:
                best = min(best, float(v.min()))
    return best


# ------------------------------------------------------------ parameters/adam


class ParamStore:
    """Named parameter tensors with per-parameter Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.adam: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def num_values(self) -> int:
        return sum(t.value.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].value).tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].value = np.array(v, dtype=np.float64)


def adam_step(store: ParamStore, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    b1, b2 = betas
    store.step += 1
    t = store.step
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m, v = store.adam.get(name, (np.zeros_like(p.value), np.zeros_like(p.value)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        store.adam[name] = (m, v)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ------------------------------------------------------------- checkpointing


def save_params(store: ParamStore, path) -> None:
    """JSON map name -> {shape, values}; ``repr`` floats round-trip exactly."""
    doc = {name: {"shape": list(t.shape), "values": t.value.ravel().tolist()}
           for name, t in store.params.items()}
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> ParamStore:
    store = ParamStore()
    for name, entry in json.loads(Path(path).read_text()).items():
        store.add(name, np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
    return store


# ------------------------------------------------------------ gradient check


def gradient_pair(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of scalar ``fn`` at ``point`` and its central-difference estimate."""
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    out = fn(x)
    backward(out)
    analytic = np.zeros_like(x.value) if x.grad is None else x.grad
    numeric = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(Tensor(x.value.copy())).value)
            flat[i] = orig - h
            down = float(fn(Tensor(x.value.copy())).value)
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * h)
    return analytic, numeric


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return relative_error(*gradient_pair(fn, point, h))
