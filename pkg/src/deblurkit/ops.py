"""Convolutional network primitives on top of the autodiff engine.

The dense and depthwise convolutions are each built from a trio of bilinear
kernels (forward, input-adjoint, weight-adjoint) that are closed under
differentiation: the VJP of any member is expressed through the other two.
Transposed convolution is the input-adjoint used as a forward op, so the
"transposed conv equals gradient of strided conv" identity holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor, _make, concat_channels, reflect_pad  # noqa: F401

INSTANCE_NORM_EPS = 1e-5

# im2col buffers are chunked to stay below this many elements
_COL_BUDGET = 8 * 1024 * 1024


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding_mode: str = "zero"
    padding_width: int = 0
    bias: bool = True

    def out_hw(self, h: int, w: int) -> tuple:
        k, s, p = self.kernel_size, self.stride, self.padding_width
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh <= 0 or ow <= 0:
            raise ValueError(
                f"conv output size not positive for input {h}x{w} with "
                f"k={k} stride={s} pad={p}")
        return oh, ow


def _row_chunks(ho: int, per_row: int):
    chunk = max(1, _COL_BUDGET // max(1, per_row))
    for h0 in range(0, ho, chunk):
        yield h0, min(ho, h0 + chunk)


def _promote(*arrays):
    dt = np.result_type(*[a.dtype for a in arrays])
    return [a.astype(dt, copy=False) for a in arrays]


# ------------------------------------------------- dense correlation kernels

def _corr(xp: np.ndarray, w: np.ndarray, s: int) -> np.ndarray:
    """Cross-correlate padded input (N,Ci,Hp,Wp) with w (Co,Ci,k,k)."""
    xp, w = _promote(xp, w)
    n, ci, hp, wp = xp.shape
    co, ci2, k, _ = w.shape
    if ci2 != ci:
        raise ValueError(
            f"conv channel mismatch: input has {ci} channels, "
            f"weights expect {ci2}")
    ho = (hp - k) // s + 1
    wo = (wp - k) // s + 1
    wf = w.reshape(co, ci * k * k)
    out = np.empty((n, co, ho, wo), dtype=xp.dtype)
    for h0, h1 in _row_chunks(ho, n * wo * ci * k * k):
        xs = xp[:, :, h0 * s:(h1 - 1) * s + k, :]
        win = sliding_window_view(xs, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        hc = h1 - h0
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, hc * wo, ci * k * k)
        out[:, :, h0:h1, :] = (
            cols @ wf.T).transpose(0, 2, 1).reshape(n, co, hc, wo)
    return out


def _corr_wgrad(xp: np.ndarray, g: np.ndarray, s: int,
                wshape: tuple) -> np.ndarray:
    xp, g = _promote(xp, g)
    co, ci, k, _ = wshape
    n = xp.shape[0]
    ho, wo = g.shape[2], g.shape[3]
    acc = np.zeros((co, ci * k * k), dtype=xp.dtype)
    for h0, h1 in _row_chunks(ho, n * wo * ci * k * k):
        xs = xp[:, :, h0 * s:(h1 - 1) * s + k, :]
        win = sliding_window_view(xs, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        hc = h1 - h0
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hc * wo,
                                                       ci * k * k)
        g2 = g[:, :, h0:h1, :].transpose(0, 2, 3, 1).reshape(n * hc * wo, co)
        acc += g2.T @ cols
    return acc.reshape(wshape)


def _corr_xgrad(g: np.ndarray, w: np.ndarray, s: int,
                xp_shape: tuple) -> np.ndarray:
    g, w = _promote(g, w)
    n, ci, hp, wp = xp_shape
    co, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    wf = w.reshape(co, ci * k * k)
    gxp = np.zeros((n, ci, hp, wp), dtype=g.dtype)
    for h0, h1 in _row_chunks(ho, n * wo * ci * k * k):
        hc = h1 - h0
        g2 = g[:, :, h0:h1, :].transpose(0, 2, 3, 1).reshape(n, hc * wo, co)
        cg = (g2 @ wf).reshape(n, hc, wo, ci, k, k).transpose(0, 3, 4, 5, 1, 2)
        for a in range(k):
            ra = slice(h0 * s + a, (h1 - 1) * s + a + 1, s)
            for b in range(k):
                cb = slice(b, (wo - 1) * s + b + 1, s)
                gxp[:, :, ra, cb] += cg[:, :, a, b]
    return gxp


# -------------------------------------------- dense conv as closed tape trio

def _conv_raw(x: Tensor, w: Tensor, s: int, p: int, mode: str) -> Tensor:
    xp = T.pad_hw(x.data, p, mode)
    y = _corr(xp, w.data, s)
    hw = (x.shape[2], x.shape[3])

    def vjp(g):
        return (_conv_adj(g, w, s, p, mode, hw),
                _conv_wvjp(x, g, s, p, mode, w.shape))

    return _make(y, (x, w), vjp, "conv")


def _conv_adj(u: Tensor, w: Tensor, s: int, p: int, mode: str,
              target_hw: tuple) -> Tensor:
    """Adjoint of _conv_raw with respect to its input."""
    th, tw = target_hw
    expect = ((th + 2 * p - w.shape[2]) // s + 1,
              (tw + 2 * p - w.shape[2]) // s + 1)
    if (u.shape[2], u.shape[3]) != expect:
        raise ValueError(
            f"conv adjoint shape mismatch: got spatial "
            f"{(u.shape[2], u.shape[3])}, expected {expect} for target "
            f"{target_hw}")
    gxp = _corr_xgrad(u.data, w.data, s, (u.shape[0], w.shape[1],
                                          th + 2 * p, tw + 2 * p))
    z = T.fold_hw(gxp, p, mode)

    def vjp(c):
        return (_conv_raw(c, w, s, p, mode),
                _conv_wvjp(c, u, s, p, mode, w.shape))

    return _make(z, (u, w), vjp, "conv_adj")


def _conv_wvjp(x: Tensor, g: Tensor, s: int, p: int, mode: str,
               wshape: tuple) -> Tensor:
    xp = T.pad_hw(x.data, p, mode)
    gw = _corr_wgrad(xp, g.data, s, wshape)
    hw = (x.shape[2], x.shape[3])

    def vjp(c):
        return (_conv_adj(g, c, s, p, mode, hw),
                _conv_raw(x, c, s, p, mode))

    return _make(gw, (x, g), vjp, "conv_wvjp")


# --------------------------------------------- depthwise correlation kernels

def _dwcorr(xp: np.ndarray, w: np.ndarray, s: int) -> np.ndarray:
    """Per-channel correlation: xp (N,C,Hp,Wp), w (C,k,k)."""
    xp, w = _promote(xp, w)
    k = w.shape[1]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return np.einsum("nchwab,cab->nchw", win, w)


def _dwcorr_wgrad(xp: np.ndarray, g: np.ndarray, s: int, k: int) -> np.ndarray:
    xp, g = _promote(xp, g)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return np.einsum("nchwab,nchw->cab", win, g)


def _dwcorr_xgrad(g: np.ndarray, w: np.ndarray, s: int,
                  xp_shape: tuple) -> np.ndarray:
    g, w = _promote(g, w)
    k = w.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for a in range(k):
        ra = slice(a, (ho - 1) * s + a + 1, s)
        for b in range(k):
            cb = slice(b, (wo - 1) * s + b + 1, s)
            gxp[:, :, ra, cb] += g * w[:, a, b].reshape(1, -1, 1, 1)
    return gxp


def _dw_raw(x: Tensor, w: Tensor, s: int, p: int, mode: str) -> Tensor:
    xp = T.pad_hw(x.data, p, mode)
    y = _dwcorr(xp, w.data, s)
    hw = (x.shape[2], x.shape[3])

    def vjp(g):
        return (_dw_adj(g, w, s, p, mode, hw),
                _dw_wvjp(x, g, s, p, mode))

    return _make(y, (x, w), vjp, "dwconv")


def _dw_adj(u: Tensor, w: Tensor, s: int, p: int, mode: str,
            target_hw: tuple) -> Tensor:
    th, tw = target_hw
    k = w.shape[1]
    expect = ((th + 2 * p - k) // s + 1, (tw + 2 * p - k) // s + 1)
    if (u.shape[2], u.shape[3]) != expect:
        raise ValueError(
            f"depthwise adjoint shape mismatch: got spatial "
            f"{(u.shape[2], u.shape[3])}, expected {expect}")
    gxp = _dwcorr_xgrad(u.data, w.data, s,
                        (u.shape[0], u.shape[1], th + 2 * p, tw + 2 * p))
    z = T.fold_hw(gxp, p, mode)

    def vjp(c):
        return (_dw_raw(c, w, s, p, mode),
                _dw_wvjp(c, u, s, p, mode))

    return _make(z, (u, w), vjp, "dwconv_adj")


def _dw_wvjp(x: Tensor, g: Tensor, s: int, p: int, mode: str) -> Tensor:
    xp = T.pad_hw(x.data, p, mode)
    # kernel size from spatial extents: Hp - (Ho-1)*s
    k = xp.shape[2] - (g.shape[2] - 1) * s
    gw = _dwcorr_wgrad(xp, g.data, s, k)
    hw = (x.shape[2], x.shape[3])

    def vjp(c):
        return (_dw_adj(g, c, s, p, mode, hw),
                _dw_raw(x, c, s, p, mode))

    return _make(gw, (x, g), vjp, "dwconv_wvjp")


# ------------------------------------------------------------ public ops

def _add_bias(y: Tensor, bias: Tensor) -> Tensor:
    b4 = T.reshape(bias, (1, bias.shape[0], 1, 1))
    return T.add(y, T.broadcast_to(b4, y.shape))


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor,
           bias: Tensor | None = None) -> Tensor:
    """Standard cross-correlation, NCHW."""
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"spec expects {spec.in_channels}")
    if tuple(weights.shape) != (spec.out_channels, spec.in_channels,
                                spec.kernel_size, spec.kernel_size):
        raise ValueError(
            f"conv2d weight shape {tuple(weights.shape)} does not match "
            f"spec {spec}")
    spec.out_hw(x.shape[2], x.shape[3])
    y = _conv_raw(x, weights, spec.stride, spec.padding_width,
                  spec.padding_mode)
    if bias is not None:
        y = _add_bias(y, bias)
    return y


def depthwise_conv2d(x: Tensor, spec: ConvSpec, weights: Tensor,
                     bias: Tensor | None = None) -> Tensor:
    """Per-channel convolution: output channel c sees only input channel c."""
    c = x.shape[1]
    if weights.shape[0] != c or tuple(weights.shape[1:]) != (
            1, spec.kernel_size, spec.kernel_size):
        raise ValueError(
            f"depthwise weight shape {tuple(weights.shape)} does not match "
            f"{c} input channels with k={spec.kernel_size}")
    if spec.in_channels != c or spec.out_channels != c:
        raise ValueError(
            f"depthwise spec must have in=out={c}, got {spec}")
    w3 = T.reshape(weights, (c, spec.kernel_size, spec.kernel_size))
    y = _dw_raw(x, w3, spec.stride, spec.padding_width, spec.padding_mode)
    if bias is not None:
        y = _add_bias(y, bias)
    return y


def separable_conv2d(x: Tensor, depthwise_weights: Tensor,
                     pointwise_weights: Tensor, stride: int = 1,
                     padding: int = 1, padding_mode: str = "zero",
                     depthwise_bias: Tensor | None = None,
                     pointwise_bias: Tensor | None = None) -> Tensor:
    """Depthwise (carrying the stride) followed by 1x1 pointwise mixing."""
    c = x.shape[1]
    k = depthwise_weights.shape[-1]
    dw_spec = ConvSpec(c, c, k, stride, padding_mode, padding,
                       depthwise_bias is not None)
    y = depthwise_conv2d(x, dw_spec, depthwise_weights, depthwise_bias)
    co = pointwise_weights.shape[0]
    pw_spec = ConvSpec(c, co, 1, 1, "zero", 0, pointwise_bias is not None)
    return conv2d(y, pw_spec, pointwise_weights, pointwise_bias)


def conv2d_transposed(x: Tensor, spec: ConvSpec, weights: Tensor,
                      bias: Tensor | None = None) -> Tensor:
    """Adjoint of the strided convolution; upsamples H,W by the stride.

    weights layout is (Cin, Cout, k, k). Output padding is implied by the
    contract that the output is exactly (stride*H, stride*W).
    """
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"conv2d_transposed channel mismatch: input has {x.shape[1]} "
            f"channels, spec expects {spec.in_channels}")
    if tuple(weights.shape) != (spec.in_channels, spec.out_channels,
                                spec.kernel_size, spec.kernel_size):
        raise ValueError(
            f"conv2d_transposed weight shape {tuple(weights.shape)} does "
            f"not match spec {spec}")
    s, p, k = spec.stride, spec.padding_width, spec.kernel_size
    th, tw = s * x.shape[2], s * x.shape[3]
    if (th + 2 * p - k) // s + 1 != x.shape[2]:
        raise ValueError(
            f"conv2d_transposed: no valid output padding maps input "
            f"{x.shape[2]}x{x.shape[3]} to {th}x{tw} with k={k} s={s} p={p}")
    y = _conv_adj(x, weights, s, p, "zero", (th, tw))
    if bias is not None:
        y = _add_bias(y, bias)
    return y


def depthwise_conv2d_transposed(x: Tensor, weights: Tensor, stride: int = 2,
                                padding: int = 1,
                                bias: Tensor | None = None) -> Tensor:
    """Per-channel transposed convolution (the upsampling half of a
    decomposed deconvolution)."""
    c = x.shape[1]
    k = weights.shape[-1]
    if weights.shape[0] != c:
        raise ValueError(
            f"depthwise transposed weight count {weights.shape[0]} != "
            f"input channels {c}")
    th, tw = stride * x.shape[2], stride * x.shape[3]
    w3 = T.reshape(weights, (c, k, k))
    y = _dw_adj(x, w3, stride, padding, "zero", (th, tw))
    if bias is not None:
        y = _add_bias(y, bias)
    return y


def instance_norm(x: Tensor, epsilon: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per (sample, channel) spatial normalization, no learned affine."""
    if x.ndim != 4:
        raise ValueError("instance_norm expects an NCHW tensor")
    hw = x.shape[2] * x.shape[3]
    mu = T.scalar_mul(T.sum_axes(x, (2, 3)), 1.0 / hw)
    xc = T.sub(x, T.broadcast_to(mu, x.shape))
    var = T.scalar_mul(T.sum_axes(T.mul(xc, xc), (2, 3)), 1.0 / hw)
    inv = T.rsqrt(T.scalar_add(var, epsilon))
    return T.mul(xc, T.broadcast_to(inv, x.shape))


def activation(kind: str, x: Tensor, alpha: float | None = None) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "leaky_relu":
        if alpha is None:
            raise ValueError("leaky_relu requires alpha")
        return T.leaky_relu(x, alpha)
    if kind == "tanh":
        return T.tanh(x)
    raise ValueError(f"unknown activation '{kind}'")


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not training or rate == 0:
        return x
    if rate >= 1:
        return T.scalar_mul(x, 0.0)
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    return T.mul(x, Tensor(keep / x.data.dtype.type(1.0 - rate)))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (floor semantics on odd sizes)."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.data[:, :, :ho * 2, :wo * 2].reshape(n, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        return (_maxunpool2(g, idx, (n, c, h, w)),)

    return _make(out, (x,), vjp, "maxpool2")


def _maxunpool2(g: Tensor, idx: np.ndarray, in_shape: tuple) -> Tensor:
    n, c, h, w = in_shape
    ho, wo = idx.shape[2], idx.shape[3]
    full = np.zeros(in_shape, dtype=g.data.dtype)
    nn, cc, hh, ww = np.ix_(np.arange(n), np.arange(c), np.arange(ho),
                            np.arange(wo))
    full[nn, cc, 2 * hh + idx // 2, 2 * ww + idx % 2] = g.data

    def vjp(cot):
        gathered = cot.data[nn, cc, 2 * hh + idx // 2, 2 * ww + idx % 2]
        return (Tensor(gathered),)

    return _make(full, (g,), vjp, "maxunpool2")
