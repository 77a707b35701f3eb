"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

The engine supplies exactly the operations the translation model needs:
matrix products (plain and leading-batch), the usual elementwise ops, a
numerically stabilized softmax family, layer normalization, embedding
gather, dropout with a saved mask, and scaled dot-product attention.
Every differentiable op has a hand-written vector-Jacobian product and is
covered by the finite-difference checker in this module.

Design constraints:
  * float64 everywhere; row-major contiguous buffers.
  * no implicit broadcasting except the trailing-axis bias add; any other
    shape alignment is explicit (``repeat_axis``, ``reshape``).
  * forward results are bitwise deterministic given inputs and the seed of
    the counter-based RNG that drives dropout and initialization.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Illegal use of a computation graph (e.g. backward twice)."""


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

class Rng:
    """Counter-based random stream (Philox under the hood).

    Every draw keys a fresh Philox generator with (seed, *path, counter),
    so results depend only on the seed and the order of calls on this
    object, never on global state or thread scheduling. ``derive`` forks a
    child stream with an extended path; children are independent of the
    parent's counter.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._n = 0

    def derive(self, *path: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(path))

    def _gen(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed, *self.path, self._n])
        self._n += 1
        return np.random.Generator(np.random.Philox(ss))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen().uniform(low, high, size=shape).astype(np.float64)

    def keep_mask(self, keep_prob: float, shape) -> np.ndarray:
        """0/1 mask with P(1) = keep_prob."""
        return (self._gen().random(shape) < keep_prob).astype(np.float64)

    def integers(self, low: int, high: int, size=None):
        return self._gen().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen().permutation(n)

    def choice_weighted(self, weights: Sequence[float]) -> int:
        w = np.asarray(weights, dtype=np.float64)
        return int(self._gen().choice(len(w), p=w / w.sum()))


# ---------------------------------------------------------------------------
# Tensor and graph
# ---------------------------------------------------------------------------

class Tensor:
    """Dense float64 array, optionally tracked on the active graph."""

    __slots__ = ("data", "requires_grad", "grad", "creator")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data, dtype=np.float64)
        if not data.flags.c_contiguous:  # ascontiguousarray would promote 0-d
            data = np.ascontiguousarray(data)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.creator = None  # Node that produced this tensor, if any

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # a little arithmetic sugar; heavy lifting stays in the op functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Node:
    __slots__ = ("inputs", "out", "vjp")

    def __init__(self, inputs, out, vjp):
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_state = threading.local()


def _graph_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Topologically ordered record of executed operations.

    Ops executed while the graph is active are appended in execution order,
    which is a valid topological order. ``backward`` replays that record in
    reverse exactly once; a second backward without a new forward raises.
    A graph must stay confined to the thread that recorded it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _graph_stack().pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        if self._consumed:
            raise GraphError("backward called twice on the same graph")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = pending.pop(id(node.out), None)
            if g_out is None:
                continue
            grads = node.vjp(g_out)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.creator is None:
                    # graph leaf: accumulate into .grad
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
                else:
                    acc = pending.get(id(t))
                    # out-of-place accumulation: vjps may alias their output
                    pending[id(t)] = g if acc is None else acc + g
        # leaves the loss never reached still get a well-defined zero gradient
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.creator is None and t.grad is None:
                    t.grad = np.zeros_like(t.data)


class no_grad:
    """Context that suspends graph recording (eval / E-step passes)."""

    def __enter__(self):
        _graph_stack().append(None)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False


def _record(out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    graph = _active_graph()
    if graph is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = Node(inputs, out, vjp)
    out.creator = node
    graph.nodes.append(node)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """Non-differentiable tensor (masks, posteriors treated as data)."""
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the trailing axis (the one permitted broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: {x.shape} cannot take bias {b.shape}")
    out = Tensor(x.data + b.data)
    axes = tuple(range(x.ndim - 1))

    def vjp(g):
        return g, g.sum(axis=axes) if axes else g

    return _record(out, (x, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; N-d inputs must carry identical leading batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _record(out, (a, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _record(out, (x,), vjp)


def repeat_axis(x: Tensor, axis: int, n: int) -> Tensor:
    """Explicitly materialize a size-1 axis n times (no silent broadcast)."""
    if x.shape[axis] != 1:
        raise ShapeError(f"repeat_axis: axis {axis} of {x.shape} is not 1")
    out = Tensor(np.repeat(x.data, n, axis=axis))
    return _record(out, (x,), lambda g: (g.sum(axis=axis, keepdims=True),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}) in lookup")
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), vjp)


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading index."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: ids {ids.shape} do not index {x.shape}")
    out = Tensor(np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0])

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: Rng, train: bool) -> Tensor:
    """Inverted dropout; the sampled mask is saved for backward.

    Identity when rate == 0 or in eval mode (no graph node recorded).
    """
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = rng.keep_mask(keep, x.shape) / keep
    out = Tensor(x.data * mask)
    return _record(out, (x,), lambda g: (g * mask,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Log-probabilities along ``axis``; max-subtraction keeps it finite."""
    m = x.data.max(axis=axis, keepdims=True)
    s = x.data - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out_data = s - lse
    out = Tensor(out_data)
    p = np.exp(out_data)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True)) + m
    out = Tensor(np.squeeze(lse, axis=axis))
    p = np.exp(x.data - lse)

    def vjp(g):
        return (np.expand_dims(g, axis) * p,)

    return _record(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    shp = x.shape
    return _record(out, (x,), lambda g: (np.full(shp, float(g)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), vjp)


def cross_entropy_from_log_probs(
    logprobs: Tensor, target_ids: np.ndarray, mask: Optional[np.ndarray] = None
) -> Tensor:
    """Summed negative log-probability of the targets.

    ``logprobs`` holds already-normalized log-probabilities over the last
    axis; positions where ``mask`` is 0 contribute exactly nothing.
    """
    picked = gather_last(logprobs, target_ids)
    if mask is not None:
        picked = mul(picked, constant(np.asarray(mask, dtype=np.float64)))
    return scale(sum_all(picked), -1.0)


def attention(
    q: Tensor, k: Tensor, v: Tensor, mask_bias: Optional[np.ndarray] = None
) -> Tensor:
    """Scaled dot-product attention.

    ``mask_bias`` is an additive array shaped like the score matrix; use a
    large negative value (not -inf) on causal / padding-disallowed slots so
    the softmax stays finite everywhere.
    """
    dh = q.shape[-1]
    scores = scale(matmul(q, transpose(k, list(range(k.ndim - 2)) + [k.ndim - 1, k.ndim - 2])),
                   1.0 / np.sqrt(dh))
    if mask_bias is not None:
        scores = add(scores, constant(np.broadcast_to(mask_bias, scores.shape)))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    loss tensor. A random subsample of at least ``n_coords`` coordinates is
    probed (all of them when the parameters are smaller than that). Returns
    the maximum relative error  |a - n| / max(|a|, |n|, 1e-8).
    """
    with Graph() as g:
        loss = f()
        g.backward(loss)
    analytic = [p.grad_or_zeros().copy() for p in params]
    for p in params:
        p.zero_grad()

    total = sum(p.size for p in params)
    rng = np.random.default_rng(seed)
    if total <= n_coords:
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    else:
        flat = rng.choice(total, size=n_coords, replace=False)
        bounds = np.cumsum([p.size for p in params])
        coords = []
        for c in np.sort(flat):
            i = int(np.searchsorted(bounds, c, side="right"))
            j = int(c - (bounds[i - 1] if i > 0 else 0))
            coords.append((i, j))

    def eval_loss() -> float:
        with no_grad():
            return f().item()

    max_err = 0.0
    for i, j in coords:
        buf = params[i].data.reshape(-1)
        orig = buf[j]
        buf[j] = orig + h
        up = eval_loss()
        buf[j] = orig - h
        down = eval_loss()
        buf[j] = orig
        numeric = (up - down) / (2.0 * h)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err
