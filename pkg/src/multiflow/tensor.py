"""Dense float64 tensors with reverse-mode automatic differentiation.

Every kernel is a plain function taking and returning :class:`Tensor`.  A
kernel records its parents and a closure mapping the output gradient to
parent gradients; :func:`backward` walks the resulting graph once in reverse
topological order.

Masks are additive: ``0`` means "may attend", anything at or below
``NEG_INF / 2`` means "blocked".  :func:`softmax_masked` zeroes blocked
entries explicitly, so masked probabilities are exactly ``0.0`` rather than
merely tiny.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

NEG_INF = -1e9
DTYPE = np.float64

_grad_enabled = True
_debug = False


class ShapeError(ValueError):
    """Raised when kernel inputs do not conform to the kernel's contract."""

    def __init__(self, kernel: str, detail: str):
        super().__init__(f"{kernel}: {detail}")
        self.kernel = kernel


class FullyMaskedRowError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Turn on finiteness assertions for every newly created tensor."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if _debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self.grad = np.zeros_like(arr) if (requires_grad and not _parents) else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kernel: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kernel, f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# graph traversal


class ComputeGraph:
    """Topologically ordered view of the nodes reachable from an output.

    ``nodes[k]``'s parents all appear at indices ``< k``.
    """

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.output = output
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def index(self) -> dict[int, int]:
        return {id(n): k for k, n in enumerate(self.nodes)}


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> ComputeGraph:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``params`` lists extra leaves that should end up with a gradient buffer
    even when the loss does not depend on them (they receive zeros).
    """
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be a scalar, got shape {loss.shape}")
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return ComputeGraph(loss)
    graph = ComputeGraph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return graph


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_array(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _make(x * cdf, (a,), bw, "gelu")


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout. The keep-mask comes from ``rng`` only."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: an explicit rng is required when rate > 0")
    if rate >= 1.0:
        keep = np.zeros_like(a.data)
    else:
        keep = (rng.random(a.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} invalid for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError("concat", f"shape {t.shape} does not match {ref} off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for k in range(len(ts)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[k], bounds[k + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("slice", f"index {idx!r} invalid for shape {a.shape}: {exc}") from None

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), bw, "slice")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape[-1]} (lhs {a.shape}) "
                                   f"vs {b.shape[-2]} (rhs {b.shape})")
    if b.ndim == 2 and a.ndim > 2:
        # activations times a weight matrix: one flat GEMM each way
        K, N = b.shape
        a2 = a.data.reshape(-1, K)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (N,))

        def bw_flat(g):
            g2 = g.reshape(-1, N)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw_flat, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("matmul", f"batch dimensions of {a.shape} and {b.shape}: {exc}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array ``ids``."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding", f"ids must be integers, got {ids.dtype}")
    if weight.ndim != 2:
        raise ShapeError("embedding", f"weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", f"ids out of range [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def layer_norm_array(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError("layer_norm", f"affine shapes {gamma.shape}/{beta.shape} must be ({h},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, h).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, h).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# softmax family


def blocked(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask) <= 0.5 * NEG_INF


def softmax_array(logits: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Masked softmax over the last axis on raw arrays.

    Returns ``(probs, empty_rows)``; fully blocked rows come back as zeros.
    """
    if mask is None:
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True), np.zeros(logits.shape[:-1], dtype=bool)
    try:
        block = np.broadcast_to(blocked(mask), logits.shape)
    except ValueError:
        raise ShapeError("softmax_masked", f"mask {np.shape(mask)} not broadcastable to {logits.shape}") from None
    z = np.where(block, -np.inf, logits)
    row_max = z.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(row_max[..., 0])
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(z - row_max)
    e[block] = 0.0
    denom = e.sum(axis=-1, keepdims=True)
    probs = e / np.where(denom > 0, denom, 1.0)
    return probs, empty


def softmax_masked(logits, mask=None, allow_empty_rows: bool = True) -> Tensor:
    """Softmax over the last axis with an additive 0 / NEG_INF mask.

    Blocked entries receive probability exactly 0.  A row with every key
    blocked yields all zeros; the result carries ``empty_rows`` flags, and
    ``allow_empty_rows=False`` turns such a row into an error.
    """
    logits = as_tensor(logits)
    probs, empty = softmax_array(logits.data, None if mask is None else np.asarray(mask))
    if not allow_empty_rows and empty.any():
        raise FullyMaskedRowError(f"softmax_masked: {int(empty.sum())} fully masked row(s)")

    def bw(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    out = _make(probs, (logits,), bw, "softmax_masked")
    out.empty_rows = empty
    return out


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), bw, "log_softmax")


def cross_entropy_label_smoothed(logits, targets, smoothing: float = 0.0, ignore=None) -> Tensor:
    """Mean label-smoothed negative log-likelihood over non-ignored rows.

    ``logits`` is ``(..., V)``; ``targets`` holds integer ids with the leading
    shape.  The smoothed target puts ``1 - smoothing + smoothing / V`` on the
    gold id and ``smoothing / V`` everywhere else.  ``ignore`` is a boolean
    array (True = skip) with the same shape as ``targets``.
    """
    logits = as_tensor(logits)
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", f"targets {targets.shape} vs logits {logits.shape}")
    V = logits.shape[-1]
    x = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    keep = np.ones(t.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored")
    if np.any((t[keep] < 0) | (t[keep] >= V)):
        raise ShapeError("cross_entropy", f"target ids outside [0, {V})")
    t_safe = np.where(keep, t, 0)
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    q = np.full_like(logp, smoothing / V)
    q[np.arange(len(t_safe)), t_safe] += 1.0 - smoothing
    per_row = -(q * logp).sum(axis=-1)
    loss = float((per_row * keep).sum() / count)

    def bw(g):
        grad = (np.exp(logp) - q) * (keep[:, None] / count) * g
        return (grad.reshape(logits.shape),)

    return _make(np.array(loss), (logits,), bw, "cross_entropy")
