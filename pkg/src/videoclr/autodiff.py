"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run engine: every primitive records its inputs and a
vector-Jacobian closure on the output tensor, ``backward`` sweeps the
recorded graph once in reverse creation order, and ``grad_check``
provides the central-difference oracle used to validate every rule.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the primitive."""


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf values."""


_CREATION_COUNTER = itertools.count()


class Tensor:
    """Dense float64 array node in a define-by-run computation graph.

    ``values`` is the row-major payload, ``grad`` (same shape) accumulates
    across ``backward`` calls until reset to None. Graphs are rebuilt on
    every forward pass; a Tensor and the graph it anchors belong to one
    thread, while finished value arrays may be shared read-only.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp", "_kind", "_seq")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._kind = "leaf"
        self._seq = next(_CREATION_COUNTER)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(kind={self._kind!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; the functional API below is primary.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, mul_scalar(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul_scalar(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Graph:
    """Ordered record of the ops reachable from a root tensor.

    Node order equals creation order, so iterating ``nodes`` in reverse is
    a valid topological sweep for reverse-mode accumulation.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def _result(kind: str, values: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by '{kind}'")
    out = Tensor(values)
    out._kind = kind
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    Repeated calls without resetting ``grad`` add up, matching the
    behaviour of one graph using a tensor several times.
    """
    if loss.values.ndim != 0:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient reached a leaf")
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return np.asarray(g, dtype=np.float64).reshape(shape)


def _norm_axis(axis: int, ndim: int, kind: str) -> int:
    ax = axis + ndim if axis < 0 else axis
    if not 0 <= ax < ndim:
        raise ShapeError(f"{kind}: axis {axis} out of range for rank {ndim}")
    return ax


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _result("matmul", av @ bv, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.values + b.values, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast shapes {a.shape} and {b.shape}") from None
    av, bv = a.values, b.values

    def vjp(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _result("mul", av * bv, (a, b), vjp)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("mul_scalar", x.values * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0.0
    return _result("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0.0):
        raise DomainError("log of non-positive value")
    xv = x.values
    return _result("log", np.log(xv), (x,), lambda g: (g / xv,))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors np.sum
    if axis is None:
        return _result("sum", x.values.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = _norm_axis(axis, x.ndim, "sum")

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _result("sum", x.values.sum(axis=ax), (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.values.size
        return _result("mean", x.values.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    ax = _norm_axis(axis, x.ndim, "mean")
    n = x.shape[ax]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), x.shape).copy(),)

    return _result("mean", x.values.mean(axis=ax), (x,), vjp)


def l2_normalize(x: Tensor, axis: int) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    ax = _norm_axis(axis, x.ndim, "l2_normalize")
    norms = np.sqrt(np.sum(x.values * x.values, axis=ax, keepdims=True))
    if np.any(norms == 0.0):
        raise DomainError("l2_normalize: zero vector has no direction")
    y = x.values / norms

    def vjp(g):
        # d(x/|x|) = (g - y <g, y>) / |x| per slice
        return ((g - y * np.sum(g * y, axis=ax, keepdims=True)) / norms,)

    return _result("l2_normalize", y, (x,), vjp)


def softmax(x: Tensor, axis: int) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "softmax")
    shifted = x.values - x.values.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)

    return _result("softmax", y, (x,), vjp)


def clamp_min(x: Tensor, c: float) -> Tensor:
    """Elementwise max(x, c); gradient flows only where x > c."""
    c = float(c)
    mask = x.values > c
    return _result("clamp_min", np.where(mask, x.values, c), (x,), lambda g: (g * mask,))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _result("transpose", x.values.T.copy(), (x,), lambda g: (g.T.copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.values.size:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}")
    return _result("reshape", x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ax = _norm_axis(axis, tensors[0].ndim, "concat")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or any(i != ax and t.shape[i] != base[i] for i in range(t.ndim)):
            raise ShapeError(f"concat: incompatible shapes {base} and {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=ax))

    return _result("concat", np.concatenate([t.values for t in tensors], axis=ax), tuple(tensors), vjp)


def conv2d_valid(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D cross-correlation, NCHW layout.

    ``x`` is (batch, in_ch, H, W) and ``w`` is (out_ch, in_ch, kh, kw).
    """
    stride = int(stride)
    if stride < 1:
        raise ShapeError(f"conv2d_valid: stride must be >= 1, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d_valid: incompatible shapes {x.shape} and {w.shape}")
    _, _, h, wid = x.shape
    out_ch, _, kh, kw = w.shape
    if kh > h or kw > wid:
        raise ShapeError(f"conv2d_valid: kernel {w.shape} larger than input {x.shape}")
    win = sliding_window_view(x.values, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", win, w.values, optimize=True)
    ho, wo = out.shape[2], out.shape[3]
    wv = w.values

    def vjp(g):
        gw = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
        gx = np.zeros_like(x.values)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * (ho - 1) + 1, stride)
                cols = slice(j, j + stride * (wo - 1) + 1, stride)
                gx[:, :, rows, cols] += np.einsum("bohw,oc->bchw", g, wv[:, :, i, j], optimize=True)
        return gx, gw

    return _result("conv2d_valid", out, (x, w), vjp)


def max_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping size x size max pooling; trailing rows/cols that do
    not fill a window are dropped."""
    size = int(size)
    if size < 1:
        raise ShapeError(f"max_pool2d: size must be >= 1, got {size}")
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got shape {x.shape}")
    b, c, h, w = x.shape
    if h < size or w < size:
        raise ShapeError(f"max_pool2d: window {size} larger than input {x.shape}")
    ho, wo = h // size, w // size
    hc, wc = ho * size, wo * size
    windows = (
        x.values[:, :, :hc, :wc]
        .reshape(b, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho, wo, size * size)
    )
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.values)
        gx[:, :, :hc, :wc] = (
            gwin.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hc, wc)
        )
        return (gx,)

    return _result("max_pool2d", out, (x,), vjp)


_DISPATCH = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "mul_scalar": lambda inputs, attrs: mul_scalar(inputs[0], attrs["scalar"]),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "exp": lambda inputs, attrs: exp(inputs[0]),
    "log": lambda inputs, attrs: log(inputs[0]),
    "sum": lambda inputs, attrs: sum(inputs[0], attrs.get("axis")),
    "mean": lambda inputs, attrs: mean(inputs[0], attrs.get("axis")),
    "l2_normalize": lambda inputs, attrs: l2_normalize(inputs[0], attrs["axis"]),
    "softmax": lambda inputs, attrs: softmax(inputs[0], attrs["axis"]),
    "clamp_min": lambda inputs, attrs: clamp_min(inputs[0], attrs["min"]),
    "transpose": lambda inputs, attrs: transpose(inputs[0]),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "concat": lambda inputs, attrs: concat(inputs, attrs["axis"]),
    "conv2d_valid": lambda inputs, attrs: conv2d_valid(inputs[0], inputs[1], attrs.get("stride", 1)),
    "max_pool2d": lambda inputs, attrs: max_pool2d(inputs[0], attrs["size"]),
}

PRIMITIVE_KINDS = tuple(_DISPATCH)


def forward_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Uniform entry point over all primitive kinds (used by the checkers)."""
    if kind not in _DISPATCH:
        raise KeyError(f"unknown primitive kind {kind!r}")
    return _DISPATCH[kind](list(inputs), attrs or {})


def grad_check(scalar_fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``scalar_fn`` at ``x`` against central
    differences.

    Returns max over coordinates of |analytic - numeric| divided by
    max(1, |analytic|, |numeric|); any NaN on either side gives +inf.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    probe = Tensor(x.values.copy(), requires_grad=True)
    try:
        out = scalar_fn(probe)
        backward(out)
    except (DomainError, NonFiniteError):
        return float("inf")
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.values)
    numeric = np.zeros_like(analytic)
    flat = probe.values.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        try:
            flat[i] = orig + eps
            up = float(scalar_fn(Tensor(probe.values.copy())).values)
            flat[i] = orig - eps
            down = float(scalar_fn(Tensor(probe.values.copy())).values)
        except (DomainError, NonFiniteError):
            return float("inf")
        finally:
            flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * eps)
    if np.isnan(analytic).any() or np.isnan(numeric).any():
        return float("inf")
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
