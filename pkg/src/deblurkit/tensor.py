"""Dense tensors with reverse-mode automatic differentiation.

The computation graph is recorded implicitly: every operation stores its
parent tensors and a VJP rule. Backward replays the recorded operations in
reverse topological order, so the graph doubles as the gradient tape. VJP
rules are themselves written in terms of tensor operations, which makes
second-order differentiation available (needed by the gradient-penalty
loss) by running the sweep with ``create_graph=True``.

Float32 is the working precision; float64 is selectable for verification,
where float32 finite-difference checks would be noise-limited.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf screening of every forward result (test mode)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def _null_ctx():
    yield


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self._vjp is None

    def backward(self, create_graph: bool = False) -> None:
        """Populate .grad on every requires_grad leaf reachable from here.

        Only scalar roots are accepted. A second backward through the same
        root is rejected; rerun the forward pass instead.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {tuple(self.shape)}")
        if self._backward_done:
            raise RuntimeError(
                "backward already called on this tensor; recompute the "
                "forward pass before differentiating again")
        self._backward_done = True
        seed = Tensor(np.ones_like(self.data))
        grads = _backprop(self, seed, create_graph)
        for t, g in grads.items():
            if t.requires_grad and t.is_leaf():
                if t.grad is None:
                    t.grad = g.data.copy()
                else:
                    t.grad = t.grad + g.data

    # operator sugar (scalar or equal-shape tensor operands only)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scalar_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return scalar_add(self, -other)

    def __rsub__(self, other):
        return scalar_add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, "
                f"op={self._op})")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    """Wrap an op result, recording the VJP rule when grads are live."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    return out


def _backprop(root: Tensor, seed: Tensor, create_graph: bool) -> dict:
    """Reverse sweep from root; returns {tensor: cotangent Tensor}."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict = {root: seed}
    ctx = _null_ctx if create_graph else no_grad
    with ctx():
        for node in reversed(order):
            g = grads.get(node)
            if g is None or node._vjp is None:
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                grads[p] = add(grads[p], pg) if p in grads else pg
    return grads


def grads_of(loss: Tensor, wrt: Sequence[Tensor],
             create_graph: bool = False) -> list:
    """Functional gradient: d(loss)/d(t) for each t in wrt.

    With create_graph=True the returned tensors stay connected to the graph
    and can be differentiated again (used for the gradient penalty).
    """
    if loss.data.size != 1:
        raise ValueError(
            f"grads_of requires a scalar loss, got shape {tuple(loss.shape)}")
    seed = Tensor(np.ones_like(loss.data))
    grads = _backprop(loss, seed, create_graph)
    out = []
    for t in wrt:
        g = grads.get(t)
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(
            f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, neg(g)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (mul(g, b), mul(g, a)), "mul")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (neg(g),), "neg")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,),
                 lambda g: (scalar_mul(g, c),), "scalar_mul")


def scalar_add(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data + x.data.dtype.type(c), (x,), lambda g: (g,),
                 "scalar_add")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Saturate to [lo, hi]; zero gradient in the saturated regions."""

    def vjp(g):
        mask = ((x.data > lo) & (x.data < hi)).astype(x.data.dtype)
        return (mul(g, Tensor(mask)),)

    return _make(np.clip(x.data, lo, hi), (x,), vjp, "clamp")


def relu(x: Tensor) -> Tensor:
    def vjp(g):
        mask = (x.data > 0).astype(x.data.dtype)
        return (mul(g, Tensor(mask)),)

    return _make(np.maximum(x.data, 0), (x,), vjp, "relu")


def leaky_relu(x: Tensor, alpha: float) -> Tensor:
    slope = np.where(x.data > 0, x.data.dtype.type(1),
                     x.data.dtype.type(alpha))

    def vjp(g):
        return (mul(g, Tensor(slope)),)

    return _make(x.data * slope, (x,), vjp, "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    out = _make(np.tanh(x.data), (x,), None, "tanh")
    if out._op == "tanh":  # recorded: attach rule using the output tensor
        out._vjp = lambda g: (mul(g, scalar_add(neg(mul(out, out)), 1.0)),)
    return out


def sqrt(x: Tensor) -> Tensor:
    out = _make(np.sqrt(x.data), (x,), None, "sqrt")
    if out._op == "sqrt":
        out._vjp = lambda g: (scalar_mul(mul(g, rsqrt(x)), 0.5),)
    return out


def rsqrt(x: Tensor) -> Tensor:
    out = _make(1.0 / np.sqrt(x.data), (x,), None, "rsqrt")
    if out._op == "rsqrt":
        out._vjp = lambda g: (
            scalar_mul(mul(g, mul(mul(out, out), out)), -0.5),)
    return out


# ------------------------------------------------------ reductions, movement

def mean_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ValueError("mean of an empty tensor")
    n = x.data.size
    return _make(np.mean(x.data), (x,),
                 lambda g: (scalar_mul(broadcast_to(g, x.shape), 1.0 / n),),
                 "mean")


def sum_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ValueError("sum of an empty tensor")
    return _make(np.sum(x.data), (x,),
                 lambda g: (broadcast_to(g, x.shape),), "sum")


def sum_axes(x: Tensor, axes: tuple) -> Tensor:
    """Sum over `axes`, keeping reduced dims as size 1."""
    axes = tuple(axes)
    return _make(np.sum(x.data, axis=axes, keepdims=True), (x,),
                 lambda g: (broadcast_to(g, x.shape),), "sum_axes")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _make(out, (x,), lambda g: (_sum_to(g, x.shape),), "broadcast")


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce g back to `shape` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, d in enumerate(shape)
        if d == 1 and g.shape[i + extra] != 1)
    if axes:
        g = sum_axes(g, axes)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,),
                 lambda g: (reshape(g, x.shape),), "reshape")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two NCHW tensors along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: incompatible shapes {tuple(a.shape)} vs "
            f"{tuple(b.shape)} (N, H, W must match)")
    ca = a.shape[1]

    def vjp(g):
        return (slice_channels(g, 0, ca),
                slice_channels(g, ca, ca + b.shape[1]))

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), vjp,
                 "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,),
                 lambda g: (_embed_channels(g, x.shape[1], start),),
                 "slice_ch")


def _embed_channels(g: Tensor, channels: int, start: int) -> Tensor:
    stop = start + g.shape[1]
    full = np.zeros((g.shape[0], channels) + g.shape[2:], dtype=g.data.dtype)
    full[:, start:stop] = g.data
    return _make(full, (g,), lambda c: (slice_channels(c, start, stop),),
                 "embed_ch")


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    return _make(
        np.ascontiguousarray(
            x.data[:, :, top:top + height, left:left + width]),
        (x,), lambda g: (_embed2d(g, x.shape[2], x.shape[3], top, left),),
        "crop2d")


def _embed2d(g: Tensor, full_h: int, full_w: int, top: int,
             left: int) -> Tensor:
    h, w = g.shape[2], g.shape[3]
    full = np.zeros(g.shape[:2] + (full_h, full_w), dtype=g.data.dtype)
    full[:, :, top:top + h, left:left + w] = g.data
    return _make(full, (g,), lambda c: (crop2d(c, top, left, h, w),),
                 "embed2d")


# ------------------------------------------------------------------- padding

def pad_hw(arr: np.ndarray, width: int, mode: str) -> np.ndarray:
    """Pad the last two axes of a plain array."""
    if width == 0:
        return arr
    pads = [(0, 0)] * (arr.ndim - 2) + [(width, width), (width, width)]
    if mode == "zero":
        return np.pad(arr, pads)
    if mode == "reflect":
        return np.pad(arr, pads, mode="reflect")
    raise ValueError(f"unknown padding mode '{mode}'")


def fold_hw(g: np.ndarray, width: int, mode: str) -> np.ndarray:
    """Adjoint of pad_hw on a plain array."""
    if width == 0:
        return g.copy()
    p = width
    if mode == "zero":
        return np.ascontiguousarray(g[..., p:-p, p:-p])
    if mode != "reflect":
        raise ValueError(f"unknown padding mode '{mode}'")
    # fold rows first (over all padded columns), then columns
    nh = g.shape[-2] - 2 * p
    rows = g[..., p:p + nh, :].copy()
    rows[..., 1:p + 1, :] += g[..., p - 1::-1, :]
    rows[..., nh - 1 - p:nh - 1, :] += g[..., :-p - 1:-1, :]
    nw = rows.shape[-1] - 2 * p
    core = rows[..., :, p:p + nw].copy()
    core[..., :, 1:p + 1] += rows[..., :, p - 1::-1]
    core[..., :, nw - 1 - p:nw - 1] += rows[..., :, :-p - 1:-1]
    return core


def reflect_pad(x: Tensor, width: int) -> Tensor:
    """Mirror-pad H and W without repeating the edge pixel."""
    if x.ndim < 2:
        raise ValueError("reflect_pad expects at least 2 dims")
    h, w = x.shape[-2], x.shape[-1]
    if width >= min(h, w):
        raise ValueError(
            f"reflect_pad width {width} must be smaller than "
            f"min(H, W)={min(h, w)}")
    return _make(pad_hw(x.data, width, "reflect"), (x,),
                 lambda g: (_reflect_fold(g, width),), "reflect_pad")


def _reflect_fold(g: Tensor, width: int) -> Tensor:
    return _make(fold_hw(g.data, width, "reflect"), (g,),
                 lambda c: (reflect_pad(c, width),), "reflect_fold")


# -------------------------------------------------------------- verification

def grad_check(f, x: Tensor, epsilon: float = 1e-4) -> float:
    """Compare analytic gradients of scalar-valued f against central
    finite differences, coordinate by coordinate.

    Returns max over coordinates of |analytic - numeric| /
    max(1e-8, |analytic| + |numeric|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("f(x) is not finite at the probe point")
    if y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    analytic = grads_of(y, [probe])[0].data

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat, dtype=np.float64)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + epsilon
        with no_grad():
            hi = f(Tensor(bumped.reshape(x.shape), dtype=x.dtype)).item()
        bumped[i] = flat[i] - epsilon
        with no_grad():
            lo = f(Tensor(bumped.reshape(x.shape), dtype=x.dtype)).item()
        numeric[i] = (hi - lo) / (2 * epsilon)

    a = analytic.reshape(-1).astype(np.float64)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom))
