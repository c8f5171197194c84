"""Construction and execution of the restoration networks.

The generator is a residual image-translation network: 7x7 head, two
stride-2 downsampling convolutions, a stack of residual blocks whose
convolutions are depthwise separable, two stride-2 transposed convolutions,
a 7x7 tail, and a global skip that adds the input back so the branch only
has to learn a residual correction. The discriminator is a 70x70 patch
critic over 6-channel (conditioning + candidate) inputs with a linear
score-map head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import tensor as T
from .ops import ConvSpec
from .tensor import Tensor

RES_ONLY = "res_only"
DOWN_AND_RES = "down_and_res"
UP_AND_RES = "up_and_res"
DECOMPOSITIONS = (RES_ONLY, DOWN_AND_RES, UP_AND_RES)


@dataclass
class GeneratorConfig:
    ngf: int = 64
    n_blocks: int = 9
    decomposition: str = RES_ONLY
    dropout_rate: float = 0.0

    def validate(self) -> "GeneratorConfig":
        if self.ngf < 1 or self.n_blocks < 1:
            raise ValueError("ngf and n_blocks must be positive")
        if self.decomposition not in DECOMPOSITIONS:
            raise ValueError(
                f"decomposition must be one of {DECOMPOSITIONS}, "
                f"got '{self.decomposition}'")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must be in [0, 1]")
        return self


@dataclass
class Layer:
    """One step of a LayerGraph: a parameterized op or an activation."""

    name: str
    kind: str
    spec: ConvSpec | None = None
    weights: dict = field(default_factory=dict)
    alpha: float = 0.0
    rate: float = 0.0
    branch: "LayerGraph | None" = None


@dataclass
class LayerGraph:
    """Ordered layer list plus global metadata."""

    layers: list
    meta: dict = field(default_factory=dict)


def _weight(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _conv_layer(name: str, spec: ConvSpec) -> Layer:
    w = _weight((spec.out_channels, spec.in_channels, spec.kernel_size,
                 spec.kernel_size))
    weights = {"w": w}
    if spec.bias:
        weights["b"] = _weight((spec.out_channels,))
    return Layer(name, "conv", spec=spec, weights=weights)


def _deconv_layer(name: str, spec: ConvSpec) -> Layer:
    w = _weight((spec.in_channels, spec.out_channels, spec.kernel_size,
                 spec.kernel_size))
    weights = {"w": w}
    if spec.bias:
        weights["b"] = _weight((spec.out_channels,))
    return Layer(name, "conv_transpose", spec=spec, weights=weights)


def _separable_layer(name: str, spec: ConvSpec) -> Layer:
    c, co, k = spec.in_channels, spec.out_channels, spec.kernel_size
    weights = {
        "dw.w": _weight((c, 1, k, k)),
        "dw.b": _weight((c,)),
        "pw.w": _weight((co, c, 1, 1)),
        "pw.b": _weight((co,)),
    }
    return Layer(name, "separable_conv", spec=spec, weights=weights)


def _separable_deconv_layer(name: str, spec: ConvSpec) -> Layer:
    c, co, k = spec.in_channels, spec.out_channels, spec.kernel_size
    weights = {
        "dw.w": _weight((c, 1, k, k)),
        "dw.b": _weight((c,)),
        "pw.w": _weight((co, c, 1, 1)),
        "pw.b": _weight((co,)),
    }
    return Layer(name, "separable_deconv", spec=spec, weights=weights)


def _mobile_res_block(name: str, channels: int, dropout_rate: float) -> Layer:
    """Residual block of two separable 3x3 convolutions at constant width."""
    sep = ConvSpec(channels, channels, 3, 1, "reflect", 1)
    branch = LayerGraph([
        _separable_layer(f"{name}.sep1", sep),
        Layer(f"{name}.norm1", "instance_norm"),
        Layer(f"{name}.act", "relu"),
        Layer(f"{name}.drop", "dropout", rate=dropout_rate),
        _separable_layer(f"{name}.sep2", sep),
        Layer(f"{name}.norm2", "instance_norm"),
    ])
    return Layer(name, "residual", branch=branch)


def build_generator(cfg: GeneratorConfig) -> LayerGraph:
    """Assemble the generator branch (the global skip lives in
    forward_generator)."""
    cfg.validate()
    ngf = cfg.ngf
    sep_down = cfg.decomposition == DOWN_AND_RES
    sep_up = cfg.decomposition == UP_AND_RES

    layers = [
        _conv_layer("head", ConvSpec(3, ngf, 7, 1, "reflect", 3)),
        Layer("head.norm", "instance_norm"),
        Layer("head.act", "relu"),
    ]
    for i, (cin, cout) in enumerate([(ngf, 2 * ngf), (2 * ngf, 4 * ngf)]):
        spec = ConvSpec(cin, cout, 3, 2, "zero", 1)
        if sep_down:
            layers.append(_separable_layer(f"down{i + 1}", spec))
        else:
            layers.append(_conv_layer(f"down{i + 1}", spec))
        layers.append(Layer(f"down{i + 1}.norm", "instance_norm"))
        layers.append(Layer(f"down{i + 1}.act", "relu"))

    for i in range(cfg.n_blocks):
        layers.append(_mobile_res_block(f"block{i}", 4 * ngf,
                                        cfg.dropout_rate))

    for i, (cin, cout) in enumerate([(4 * ngf, 2 * ngf), (2 * ngf, ngf)]):
        spec = ConvSpec(cin, cout, 3, 2, "zero", 1)
        if sep_up:
            layers.append(_separable_deconv_layer(f"up{i + 1}", spec))
        else:
            layers.append(_deconv_layer(f"up{i + 1}", spec))
        layers.append(Layer(f"up{i + 1}.norm", "instance_norm"))
        layers.append(Layer(f"up{i + 1}.act", "relu"))

    layers.append(_conv_layer("tail", ConvSpec(ngf, 3, 7, 1, "reflect", 3)))
    layers.append(Layer("tail.act", "tanh"))

    return LayerGraph(layers, meta={
        "role": "generator",
        "input_channels": 3,
        "value_range": (-1.0, 1.0),
        "spatial_multiple": 4,
        "ngf": ngf,
        "n_blocks": cfg.n_blocks,
        "decomposition": cfg.decomposition,
        "dropout_rate": cfg.dropout_rate,
    })


def build_discriminator(ndf: int = 64) -> LayerGraph:
    """70x70 patch critic over blur (+) candidate 6-channel inputs.

    The final layer is linear: scores are unbounded reals, no sigmoid.
    """
    if ndf < 1:
        raise ValueError("ndf must be positive")
    layers = [
        _conv_layer("d1", ConvSpec(6, ndf, 4, 2, "zero", 1)),
        Layer("d1.act", "leaky_relu", alpha=0.2),
        _conv_layer("d2", ConvSpec(ndf, 2 * ndf, 4, 2, "zero", 1)),
        Layer("d2.norm", "instance_norm"),
        Layer("d2.act", "leaky_relu", alpha=0.2),
        _conv_layer("d3", ConvSpec(2 * ndf, 4 * ndf, 4, 2, "zero", 1)),
        Layer("d3.norm", "instance_norm"),
        Layer("d3.act", "leaky_relu", alpha=0.2),
        _conv_layer("d4", ConvSpec(4 * ndf, 8 * ndf, 4, 1, "zero", 1)),
        Layer("d4.norm", "instance_norm"),
        Layer("d4.act", "leaky_relu", alpha=0.2),
        _conv_layer("d5", ConvSpec(8 * ndf, 1, 4, 1, "zero", 1)),
    ]
    return LayerGraph(layers, meta={
        "role": "discriminator",
        "input_channels": 6,
        "ndf": ndf,
        "receptive_field": 70,
    })


def run_layer(layer: Layer, x: Tensor, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
    kind = layer.kind
    if kind == "conv":
        return ops.conv2d(x, layer.spec, layer.weights["w"],
                          layer.weights.get("b"))
    if kind == "conv_transpose":
        return ops.conv2d_transposed(x, layer.spec, layer.weights["w"],
                                     layer.weights.get("b"))
    if kind == "separable_conv":
        s = layer.spec
        return ops.separable_conv2d(
            x, layer.weights["dw.w"], layer.weights["pw.w"],
            stride=s.stride, padding=s.padding_width,
            padding_mode=s.padding_mode,
            depthwise_bias=layer.weights.get("dw.b"),
            pointwise_bias=layer.weights.get("pw.b"))
    if kind == "separable_deconv":
        s = layer.spec
        y = ops.depthwise_conv2d_transposed(
            x, layer.weights["dw.w"], stride=s.stride,
            padding=s.padding_width, bias=layer.weights.get("dw.b"))
        pw_spec = ConvSpec(s.in_channels, s.out_channels, 1, 1, "zero", 0)
        return ops.conv2d(y, pw_spec, layer.weights["pw.w"],
                          layer.weights.get("pw.b"))
    if kind == "instance_norm":
        return ops.instance_norm(x)
    if kind == "relu":
        return T.relu(x)
    if kind == "leaky_relu":
        return T.leaky_relu(x, layer.alpha)
    if kind == "tanh":
        return T.tanh(x)
    if kind == "dropout":
        return ops.dropout(x, layer.rate, training, rng)
    if kind == "maxpool":
        return ops.maxpool2(x)
    if kind == "residual":
        return T.add(x, run_graph(layer.branch, x, training, rng))
    raise ValueError(f"unknown layer kind '{kind}' in layer '{layer.name}'")


def run_graph(graph: LayerGraph, x: Tensor, training: bool = False,
              rng: np.random.Generator | None = None,
              upto: int | None = None) -> Tensor:
    """Execute layers in order; `upto` stops after that layer index."""
    for i, layer in enumerate(graph.layers):
        x = run_layer(layer, x, training, rng)
        if upto is not None and i >= upto:
            break
    return x


def forward_generator(g: LayerGraph, blurred: Tensor, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Map a blurred image in [-1,1] to its restoration.

    Output is clamp(blurred + branch(blurred), -1, 1): the network learns a
    residual correction on top of the global skip.
    """
    if blurred.ndim != 4 or blurred.shape[1] != 3:
        raise ValueError(
            f"generator expects N,3,H,W input, got {tuple(blurred.shape)}")
    h, w = blurred.shape[2], blurred.shape[3]
    if h % 4 or w % 4:
        raise ValueError(
            f"input {h}x{w} not divisible by 4; reflect-pad it to the next "
            f"multiple of 4 and crop the output back")
    lo, hi = float(blurred.data.min()), float(blurred.data.max())
    if lo < -1.001 or hi > 1.001:
        raise ValueError(
            f"generator input must be normalized to [-1, 1], got range "
            f"[{lo:.4f}, {hi:.4f}]")
    residual = run_graph(g, blurred, training, rng)
    return T.clamp(T.add(blurred, residual), -1.0, 1.0)


def forward_discriminator(d: LayerGraph, pair: Tensor) -> Tensor:
    """Score map for a 6-channel conditional input (blur (+) candidate)."""
    if pair.ndim != 4 or pair.shape[1] != 6:
        raise ValueError(
            f"discriminator expects N,6,H,W input, got {tuple(pair.shape)}")
    return run_graph(d, pair)


def parameters(graph: LayerGraph) -> list:
    """Ordered (name, tensor) registry of all trainable weights."""
    out = []
    for layer in graph.layers:
        if layer.kind == "residual":
            out.extend(parameters(layer.branch))
        else:
            for key, t in layer.weights.items():
                out.append((f"{layer.name}.{key}", t))
    return out


def init_weights(graph: LayerGraph, seed: int) -> None:
    """Normal(0, 0.02^2) conv weights, zero biases, from a seeded PCG64."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for name, t in parameters(graph):
        if name.endswith(".b"):
            t.data = np.zeros(t.shape, dtype=np.float32)
        else:
            t.data = rng.normal(0.0, 0.02, t.shape).astype(np.float32)
        t.grad = None


def cast_graph(graph: LayerGraph, dtype) -> None:
    """Convert all weights in place (used for 64-bit verification)."""
    for _, t in parameters(graph):
        t.data = t.data.astype(dtype)
        t.grad = None
