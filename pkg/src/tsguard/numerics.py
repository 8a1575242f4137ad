"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the primitives needed by the forecaster, classifier and denoiser are
provided. Every primitive builds a node holding its value, its parents and a
closure mapping the output gradient to one gradient per parent.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericsError",
    "Tensor",
    "as_tensor",
    "primitive_forward",
    "PRIMITIVES",
    "backward",
    "grad",
    "finite_difference_gradient",
    "mse_loss",
    "cross_entropy_loss",
    "clamp",
    "BatchNormState",
    "matmul",
    "add",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "conv1d",
    "layer_norm",
    "batch_norm",
    "dropout",
    "global_avg_pool",
    "concat",
    "slice_",
    "reshape",
]


class NumericsError(ValueError):
    """Shape mismatch, unknown primitive or non-finite value."""


class Tensor:
    """A node in the computation graph.

    Leaves are created directly by the caller; interior nodes are produced by
    the primitives below. ``data`` must not be mutated once the node has been
    used in a graph.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite value in {op} output")
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires, op=op, parents=tuple(parents),
                  backward_fn=backward_fn if requires else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _node(out, (a, b), "matmul", bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise NumericsError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise NumericsError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), "mul", bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a nonpositive argument never overflows, and small outputs keep full precision
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _node(t, (x,), "tanh", lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), "relu", lambda g: (g * pos,))


def conv1d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (m, C_in, L) with ``weight`` (C_out, C_in, K).

    Stride is 1. Output length is ``L + 2*padding - K + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise NumericsError(f"conv1d shape mismatch: input {x.shape}, kernel {weight.shape}")
    m, c_in, length = x.shape
    c_out, _, k = weight.shape
    l_out = length + 2 * padding - k + 1
    if l_out < 1 or padding < 0:
        raise NumericsError(f"conv1d kernel {k} too long for length {length} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    # cols[m, l, c, j] = xp[m, c, l + j]
    cols = np.stack([xp[:, :, j:j + l_out] for j in range(k)], axis=-1)  # m, c, l, k
    cols = cols.transpose(0, 2, 1, 3).reshape(m, l_out, c_in * k)
    wmat = weight.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).transpose(0, 2, 1)  # m, c_out, l_out
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise NumericsError(f"conv1d bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def bw(g):
        gt = g.transpose(0, 2, 1)  # m, l_out, c_out
        gw = None
        if weight.requires_grad:
            gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(m, l_out, c_in, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + l_out] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + length]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _node(out, parents, "conv1d", bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise NumericsError(f"layer_norm affine shape mismatch for feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(out, (x, gamma, beta), "layer_norm", bw)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    __slots__ = ("running_mean", "running_var", "momentum")

    def __init__(self, num_features: int, momentum: float = 0.1):
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool,
               eps: float = 1e-5) -> Tensor:
    """Batch norm over axis 1 of an (m, C) or (m, C, L) input.

    Training mode normalises with batch statistics and updates ``state`` in
    place; eval mode uses the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim not in (2, 3):
        raise NumericsError(f"batch_norm expects (m, C) or (m, C, L), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise NumericsError(f"batch_norm parameter shape mismatch for {c} channels")
    axes = (0,) if x.data.ndim == 2 else (0, 2)
    bshape = (1, c) if x.data.ndim == 2 else (1, c, 1)
    count = x.data.size // c
    if training:
        if count < 2:
            raise NumericsError("batch_norm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mu
        state.running_var = (1 - mom) * state.running_var + mom * var * count / (count - 1)
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx_hat = g * gamma.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) * (
                gx_hat
                - gx_hat.mean(axis=axes).reshape(bshape)
                - xhat * (gx_hat * xhat).mean(axis=axes).reshape(bshape))
        else:
            gx = gx_hat * inv.reshape(bshape)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), "batch_norm", bw)


def dropout(x, p: float, seed, training: bool) -> Tensor:
    """Inverted dropout. ``seed`` is an int or a numpy Generator.

    In eval mode (or with ``p == 0``) the input node is returned unchanged.
    """
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise NumericsError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def global_avg_pool(x) -> Tensor:
    """Mean over the last (time) axis: (m, C, L) -> (m, C)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise NumericsError(f"global_avg_pool expects (m, C, L), got {x.shape}")
    length = x.shape[2]
    return _node(x.data.mean(axis=2), (x,), "global_avg_pool",
                 lambda g: (np.repeat(g[:, :, None] / length, length, axis=2),))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise NumericsError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise NumericsError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 2))``."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise NumericsError(f"bad slice {index!r} for shape {x.shape}") from exc

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return _node(np.array(out, dtype=np.float64), (x,), "slice", bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise NumericsError(f"cannot reshape {x.shape} to {shape}") from exc
    return _node(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "conv1d": conv1d,
    "layer_norm": layer_norm,
    "batch_norm": batch_norm,
    "dropout": dropout,
    "global_avg_pool": global_avg_pool,
    "concat": concat,
    "slice": slice_,
}


def primitive_forward(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise NumericsError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# losses

def mse_loss(pred, target) -> Tensor:
    """Mean squared error over all elements. ``target`` is treated as constant."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise NumericsError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    if pred.data.size == 0:
        raise NumericsError("mse_loss of empty input")
    diff = pred.data - target
    n = diff.size
    return _node(np.array(np.mean(diff * diff)), (pred,), "mse_loss",
                 lambda g: (g * 2.0 * diff / n,))


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean negative log-softmax of the true class for (m, 2) logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0] or logits.shape[0] == 0:
        raise NumericsError(f"cross_entropy_loss shape mismatch: {logits.shape} vs {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise NumericsError("labels must be 0 or 1")
    labels = labels.astype(np.intp)
    m = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = np.mean(lse - z[rows, labels])
    probs = np.exp(z - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (g * d / m,)

    return _node(np.array(loss), (logits,), "cross_entropy", bw)


# --------------------------------------------------------------------------
# differentiation

def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every reachable leaf requiring grad.

    Contributions through multiple paths are summed.
    """
    if loss.data.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if not np.all(np.isfinite(g)):
                raise NumericsError("non-finite gradient reached a leaf")
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Like :func:`backward` but returns zeros for leaves the loss does not reach."""
    found = backward(loss)
    return [found.get(t, np.zeros_like(t.data)) for t in wrt]


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise NumericsError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericsError(f"non-finite function value probing component {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def clamp(v, lo, hi) -> np.ndarray:
    """Elementwise ``min(max(v, lo), hi)``; ``lo`` and ``hi`` may be arrays or scalars."""
    v = np.asarray(v, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise NumericsError("clamp lower bound exceeds upper bound")
    return np.minimum(np.maximum(v, lo), hi)
