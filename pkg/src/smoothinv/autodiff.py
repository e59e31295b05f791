"""Dense tensors with reverse-mode differentiation.

Just enough machinery to train and invert small convolutional classifiers.
Every op works on numpy arrays and keeps the dtype of its inputs; weights
and activations are float32 by default, while losses and norms are
accumulated in float64. Image tensors are ``C x H x W`` or batched
``N x C x H x W``.

A :class:`Tensor` remembers the op that produced it. Calling
:func:`backward` on a scalar walks the recorded graph once in reverse
topological order and returns gradients for the requested leaves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

ArrayLike = Union["Tensor", np.ndarray, float, Sequence]

# Below this norm a gradient is treated as vanishing.
NORMALIZE_EPS = 1e-12


class Tensor:
    """Immutable n-dimensional array node in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _node(out: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    # Forward-only evaluation (no parent needs a gradient) records nothing.
    if any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(out, op=op)


# --------------------------------------------------------------------------
# Graph and backward pass


@dataclass
class Graph:
    """Nodes reachable from an output, inputs always before their consumers."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        seen = set()
        # Iterative DFS; recursion depth would blow up on long chains.
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None):
    """Reverse-mode gradients of a scalar ``loss``.

    With ``wrt`` given, returns a list of arrays aligned with it (zeros for
    leaves the loss does not depend on). Otherwise returns a dict mapping
    every reachable leaf that requires a gradient to its gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        graph = Graph.trace(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        leaves = graph.leaves()
    else:
        leaves = []
    if wrt is None:
        return {leaf: grads[id(leaf)] for leaf in leaves if id(leaf) in grads}
    return [
        grads[id(t)].astype(t.dtype, copy=False) if id(t) in grads else np.zeros_like(t.data)
        for t in wrt
    ]


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


# --------------------------------------------------------------------------
# Elementwise and structural ops


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: ArrayLike, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = (x.data * c).astype(x.dtype, copy=False)
    return _node(out, (x,), lambda g: ((g * c).astype(g.dtype, copy=False),), "scale")


def rsub_const(c: float, x: ArrayLike) -> Tensor:
    """``c - x`` for a python scalar ``c``."""
    x = as_tensor(x)
    out = (x.dtype.type(c) - x.data)
    return _node(out, (x,), lambda g: (-g,), "rsub_const")


def broadcast_to(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style expansion; the gradient sums over expanded axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}") from exc
    src = x.shape
    lead = len(shape) - len(src)

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node(np.ascontiguousarray(out), (x,), back, "broadcast_to")


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def cast(x: ArrayLike, dtype) -> Tensor:
    x = as_tensor(x)
    src = x.dtype
    return _node(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "cast")


def straight_through(x: ArrayLike, out: np.ndarray) -> Tensor:
    """Node whose value is ``out`` but whose gradient passes to ``x`` unchanged."""
    x = as_tensor(x)
    if out.shape != x.shape:
        raise DimensionError(f"straight_through: {out.shape} vs {x.shape}")
    return _node(np.asarray(out, dtype=x.dtype), (x,), lambda g: (g,), "straight_through")


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    out = np.where(active, x.data, x.dtype.type(0))
    # Subgradient at exactly zero is zero.
    return _node(out, (x,), lambda g: (g * active,), "relu")


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _node(np.log(d), (x,), lambda g: (g / d,), "log")


def total(x: ArrayLike) -> Tensor:
    """Sum of every element, accumulated in float64."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    out = np.asarray(x.data.sum(dtype=np.float64))
    return _node(out, (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean0(x: ArrayLike) -> Tensor:
    """Mean over the leading (batch) axis."""
    x = as_tensor(x)
    n = x.shape[0]
    out = x.data.mean(axis=0)

    def back(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return _node(out, (x,), back, "mean0")


def pick(x: ArrayLike, index: int) -> Tensor:
    """Scalar element ``x[index]`` of a 1-d tensor."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise DimensionError(f"pick expects a vector, got shape {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise IndexError(f"index {index} out of range for {x.shape[0]} entries")

    def back(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _node(np.asarray(x.data[index]), (x,), back, "pick")


# --------------------------------------------------------------------------
# Linear algebra and convolution


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not compose")
    ad, bd = a.data, b.data
    # einsum keeps each output row independent of how many rows are stacked
    # with it; BLAS picks different kernels (and summation orders) by row count.
    out = np.einsum("ij,jk->ik", ad, bd, optimize=False)
    return _node(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_bias(x: ArrayLike, bias: ArrayLike) -> Tensor:
    """Add a per-feature bias along axis 1 of a batched tensor."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match input {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.data.ndim))
    out = x.data + bias.data.reshape(view)
    return _node(out, (x, bias), lambda g: (g, g.sum(axis=reduce_axes)), "add_bias")


def _batched(x: Tensor, name: str) -> Tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim == 4:
        return x, False
    raise DimensionError(f"{name}: expected C x H x W or N x C x H x W, got {x.shape}")


def conv2d(x: ArrayLike, kernels: ArrayLike, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is ``C x H x W`` or ``N x C x H x W``; ``kernels`` is ``F x C x kh x kw``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    xb, single = _batched(x, "conv2d")
    if kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be F x C x kh x kw, got {kernels.shape}")
    n, c, h, w = xb.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d: input channels {c} vs kernel channels {kc}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    xd, kd = xb.data, kernels.data
    cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # N, Ho, Wo, C*kh*kw  @  C*kh*kw, F
    patches = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = kd.reshape(f, -1)
    # One same-shaped product per image, so batching never changes an image's result.
    out = np.matmul(patches.reshape(n, ho * wo, -1), kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gmat.T @ patches).reshape(kd.shape)
        gpatch = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gpatch[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return gx, gk

    y = _node(out, (xb, kernels), back, "conv2d")
    return reshape(y, y.shape[1:]) if single else y


def avg_pool2(x: ArrayLike) -> Tensor:
    """Non-overlapping 2x2 mean pooling."""
    x = as_tensor(x)
    xb, single = _batched(x, "avg_pool2")
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial size {h}x{w} must be even")
    d = xb.data
    out = (d[:, :, 0::2, 0::2] + d[:, :, 1::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 1::2]) * d.dtype.type(0.25)

    def back(g):
        q = g * g.dtype.type(0.25)
        gx = np.empty_like(d)
        gx[:, :, 0::2, 0::2] = q
        gx[:, :, 1::2, 0::2] = q
        gx[:, :, 0::2, 1::2] = q
        gx[:, :, 1::2, 1::2] = q
        return (gx,)

    y = _node(out, (xb,), back, "avg_pool2")
    return reshape(y, y.shape[1:]) if single else y


# --------------------------------------------------------------------------
# Probabilities and losses


def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: ArrayLike) -> Tensor:
    """Softmax over the last axis."""
    logits = as_tensor(logits)
    p = softmax_array(logits.data)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (logits,), back, "softmax")


def softmax_cross_entropy(logits: ArrayLike, target) -> Tensor:
    """Fused, max-shifted ``-log softmax(logits)[target]``.

    ``logits`` is a vector with an int target, or ``N x C`` with one target
    per row; the batched form returns the mean over rows.
    """
    logits = as_tensor(logits)
    d = logits.data
    single = d.ndim == 1
    z = d.reshape(1, -1) if single else d
    if z.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits shape {logits.shape}")
    n, c = z.shape
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    if t.size == 1 and n > 1:
        t = np.full(n, int(t[0]))
    if t.size != n:
        raise DimensionError(f"softmax_cross_entropy: {t.size} targets for {n} rows")
    if t.min() < 0 or t.max() >= c:
        raise IndexError(f"target out of range for {c} classes")
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), t]
    out = np.asarray(losses.mean())

    def back(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), t] -= 1.0
        grad = (p * (float(g) / n)).astype(d.dtype, copy=False)
        return (grad.reshape(d.shape),)

    return _node(out, (logits,), back, "softmax_cross_entropy")


# --------------------------------------------------------------------------
# Norms and the l2 ball


def l2_norm(x: ArrayLike) -> Tensor:
    """Euclidean norm over all elements (float64 accumulation)."""
    x = as_tensor(x)
    d64 = x.data.astype(np.float64)
    norm = float(np.sqrt(np.sum(d64 * d64)))

    def back(g):
        if norm == 0.0:
            return (np.zeros_like(x.data),)
        return ((d64 * (float(g) / norm)).astype(x.dtype),)

    return _node(np.asarray(norm), (x,), back, "l2_norm")


def _norm(d: np.ndarray) -> float:
    d64 = np.asarray(d, dtype=np.float64)
    return float(np.sqrt(np.sum(d64 * d64)))


def l2_project(x: ArrayLike, eps: float) -> np.ndarray:
    """Project onto the closed l2 ball of radius ``eps``."""
    if eps < 0:
        raise ContractError(f"projection radius must be non-negative, got {eps}")
    d = _data(x)
    norm = _norm(d)
    if norm <= eps:
        return np.array(d, copy=True)
    out = (d.astype(np.float64) * (eps / norm)).astype(d.dtype)
    # Rounding can overshoot the radius by an ulp; shrink until inside.
    while _norm(out) > eps:
        out = np.nextafter(out, np.zeros_like(out))
    return out


def l2_normalize(g: ArrayLike) -> np.ndarray:
    """``g / ||g||``; a vanishing gradient maps to the zero tensor."""
    d = _data(g)
    norm = _norm(d)
    if norm <= NORMALIZE_EPS:
        return np.zeros_like(d)
    return (d.astype(np.float64) / norm).astype(d.dtype)
