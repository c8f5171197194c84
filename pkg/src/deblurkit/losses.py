"""Adversarial and content objectives.

Hinge losses operate on raw (un-sigmoided) score maps; expectations are
realized as means over batch and score-map positions so the loss scale does
not depend on resolution. The content loss compares deep feature maps of
restored and reference images, normalized by the extraction layer's spatial
size only (channel count intentionally not in the divisor). The optional
Wasserstein objective with gradient penalty needs second-order gradients,
which the engine provides for convolutional layer kinds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .models import Layer, LayerGraph, run_graph
from .ops import ConvSpec
from .tensor import Tensor

# channel progression of the 13 convolutions in a VGG-16 feature stack,
# with max-pools after convs 1, 3, 6, 9, 12 (0-based)
_VGG16_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512,
                   512)
_VGG16_POOLS = (1, 3, 6, 9, 12)
_VGG16_CONV3_3 = 6

# ImageNet preprocessing expressed as an affine map on [-1,1] inputs
_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
_IMAGENET_STD = np.array([0.229, 0.224, 0.225])


def hinge_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Margin loss pushing real scores above +1 and fake scores below -1."""
    real_term = T.mean_all(T.relu(T.scalar_add(T.neg(real_scores), 1.0)))
    fake_term = T.mean_all(T.relu(T.scalar_add(fake_scores, 1.0)))
    return T.add(real_term, fake_term)


def hinge_g_loss(fake_scores: Tensor) -> Tensor:
    """Generator objective: raise the critic's scores on fakes."""
    return T.neg(T.mean_all(fake_scores))


def total_g_loss(adv: Tensor, content: Tensor, lam: float) -> Tensor:
    """adv + lam * content."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return T.add(adv, T.scalar_mul(content, lam))


@dataclass
class FeatureNet:
    """Frozen convolutional feature extractor for the content loss."""

    graph: LayerGraph
    extract_index: int          # run layers [0..extract_index] inclusive
    input_scale: np.ndarray     # per-channel affine from [-1,1] inputs
    input_shift: np.ndarray
    pool_after: tuple           # conv indices followed by a max-pool
    source: str = "builtin"

    def features(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ValueError(
                f"feature net expects N,3,H,W input, got {tuple(img.shape)}")
        dt = img.data.dtype
        scale = np.ascontiguousarray(
            self.input_scale.reshape(1, 3, 1, 1)).astype(dt)
        shift = np.ascontiguousarray(
            self.input_shift.reshape(1, 3, 1, 1)).astype(dt)
        x = T.add(T.mul(img, T.broadcast_to(Tensor(scale), img.shape)),
                  T.broadcast_to(Tensor(shift), img.shape))
        return run_graph(self.graph, x, upto=self.extract_index)


def perceptual_loss(feat: FeatureNet, restored: Tensor,
                    sharp: Tensor) -> Tensor:
    """Squared feature-map distance summed over channels and space,
    divided by the extraction layer's H*W, averaged over the batch."""
    if restored.shape != sharp.shape:
        raise ValueError(
            f"perceptual_loss shape mismatch: {tuple(restored.shape)} vs "
            f"{tuple(sharp.shape)}")
    fr = feat.features(restored)
    fs = feat.features(sharp)
    diff = T.sub(fr, fs)
    per_sample = T.sum_axes(T.mul(diff, diff), (1, 2, 3))
    hw = fr.shape[2] * fr.shape[3]
    return T.scalar_mul(T.mean_all(per_sample), 1.0 / hw)


@dataclass
class GpConfig:
    gp_lambda: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.gp_lambda < 0:
            raise ValueError("gp_lambda must be nonnegative")


# layer kinds whose VJP rules are verified for second-order differentiation
_GP_SUPPORTED = {"conv", "conv_transpose", "separable_conv",
                 "separable_deconv", "instance_norm", "relu", "leaky_relu",
                 "tanh", "residual"}


def _check_gp_kinds(graph: LayerGraph) -> None:
    for layer in graph.layers:
        if layer.kind == "residual":
            _check_gp_kinds(layer.branch)
        elif layer.kind not in _GP_SUPPORTED:
            raise ValueError(
                f"second-order gradients unsupported for layer kind "
                f"'{layer.kind}' (layer '{layer.name}')")


def wgan_gp_d_loss(d: LayerGraph, real_pair: Tensor, fake_pair: Tensor,
                   cfg: GpConfig,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Wasserstein critic estimate plus gradient-norm penalty on samples
    interpolated between real and fake pairs."""
    if real_pair.shape != fake_pair.shape:
        raise ValueError(
            f"wgan_gp_d_loss shape mismatch: {tuple(real_pair.shape)} vs "
            f"{tuple(fake_pair.shape)}")
    expected_c = d.meta.get("input_channels")
    if expected_c is not None and real_pair.shape[1] != expected_c:
        raise ValueError(
            f"wgan_gp_d_loss expects {expected_c}-channel pairs, got "
            f"{real_pair.shape[1]}")
    _check_gp_kinds(d)

    if rng is None:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = real_pair.shape[0]
    u = rng.random(n).reshape(n, 1, 1, 1).astype(real_pair.data.dtype)
    mix = u * real_pair.data + (1.0 - u) * fake_pair.data
    x_hat = Tensor(mix, requires_grad=True)

    base = T.sub(T.mean_all(run_graph(d, fake_pair)),
                 T.mean_all(run_graph(d, real_pair)))
    score_sum = T.sum_all(run_graph(d, x_hat))
    grad_x = T.grads_of(score_sum, [x_hat], create_graph=True)[0]
    norm = T.sqrt(T.sum_axes(T.mul(grad_x, grad_x), (1, 2, 3)))
    off = T.scalar_add(norm, -1.0)
    penalty = T.mean_all(T.mul(off, off))
    return T.add(base, T.scalar_mul(penalty, cfg.gp_lambda))


# ------------------------------------------------------------- feature nets

def _freeze(graph: LayerGraph) -> None:
    for layer in graph.layers:
        for t in layer.weights.values():
            t.requires_grad = False


def _conv_relu_stack(channel_plan, pool_after, kernel: int = 3) -> LayerGraph:
    """conv+ReLU chain with max-pools after the listed conv indices."""
    layers = []
    cin = 3
    for i, cout in enumerate(channel_plan):
        spec = ConvSpec(cin, cout, kernel, 1, "zero", kernel // 2)
        w = Tensor(np.zeros((cout, cin, kernel, kernel), dtype=np.float32))
        b = Tensor(np.zeros((cout,), dtype=np.float32))
        layers.append(Layer(f"conv{i}", "conv", spec=spec,
                            weights={"w": w, "b": b}))
        layers.append(Layer(f"conv{i}.act", "relu"))
        if i in pool_after:
            layers.append(Layer(f"pool{i}", "maxpool"))
        cin = cout
    return LayerGraph(layers, meta={"role": "featurenet"})


def _relu_layer_index(graph: LayerGraph, conv_index: int) -> int:
    name = f"conv{conv_index}.act"
    for i, layer in enumerate(graph.layers):
        if layer.name == name:
            return i
    raise ValueError(f"extraction layer conv{conv_index} not found")


def builtin_tiny_featurenet(seed: int = 0) -> FeatureNet:
    """Fixed 4-conv / 2-pool feature net with seeded random weights.

    Desk-scale stand-in for a pretrained extractor; extraction is at the
    last ReLU. Operates directly on [-1,1] inputs.
    """
    plan = (8, 12, 16, 16)
    pools = (0, 1)
    graph = _conv_relu_stack(plan, pools)
    rng = np.random.Generator(np.random.PCG64(seed))
    for layer in graph.layers:
        if layer.kind != "conv":
            continue
        w = layer.weights["w"]
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        w.data = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            w.shape).astype(np.float32)
        # biases stay zero
    _freeze(graph)
    return FeatureNet(
        graph=graph,
        extract_index=_relu_layer_index(graph, len(plan) - 1),
        input_scale=np.ones(3),
        input_shift=np.zeros(3),
        pool_after=pools,
        source=f"builtin:seed={seed}",
    )


def save_feature_net(feat: FeatureNet, path) -> None:
    tensors = {}
    for layer in feat.graph.layers:
        for key, t in layer.weights.items():
            tensors[f"{layer.name}.{key}"] = t.data
    conv_count = sum(1 for l in feat.graph.layers if l.kind == "conv")
    extract_conv = None
    for i in range(conv_count):
        if _relu_layer_index(feat.graph, i) == feat.extract_index:
            extract_conv = i
            break
    meta = {
        "kind": "featurenet",
        "pool_after": ",".join(str(i) for i in feat.pool_after),
        "extract_conv": "" if extract_conv is None else str(extract_conv),
        "input_scale": json.dumps(list(map(float, feat.input_scale))),
        "input_shift": json.dumps(list(map(float, feat.input_shift))),
        "source": feat.source,
    }
    ckpt_io.save_checkpoint(ckpt_io.Checkpoint(tensors=tensors,
                                               metadata=meta), path)


def load_feature_net(path) -> FeatureNet:
    """Load a frozen feature net from a checkpoint-format weight file.

    Files with the 13-conv VGG-16 channel progression default to extraction
    at conv3_3 (third conv of the third block, post-ReLU, before the third
    pool) and ImageNet input preprocessing.
    """
    ck = ckpt_io.load_checkpoint(path)
    conv_ids = sorted(
        {int(name[4:].split(".")[0]) for name in ck.tensors
         if name.startswith("conv")})
    if not conv_ids or conv_ids != list(range(len(conv_ids))):
        raise ValueError(
            f"feature net file {path} has no contiguous conv0..convN weights")
    plan = []
    for i in conv_ids:
        w = ck.tensors.get(f"conv{i}.w")
        if w is None or w.ndim != 4:
            raise ValueError(f"missing or malformed conv{i}.w in {path}")
        plan.append(w.shape[0])

    meta = ck.metadata
    if "pool_after" in meta:
        pools = tuple(int(s) for s in meta["pool_after"].split(",") if s)
    elif tuple(plan) == _VGG16_CHANNELS:
        pools = _VGG16_POOLS
    else:
        raise ValueError(f"feature net file {path} lacks pool positions")

    kernel = ck.tensors["conv0.w"].shape[-1]
    graph = _conv_relu_stack(plan, pools, kernel)
    for layer in graph.layers:
        if layer.kind != "conv":
            continue
        for key in ("w", "b"):
            name = f"{layer.name}.{key}"
            if name not in ck.tensors:
                raise ValueError(f"missing tensor {name} in {path}")
            have = ck.tensors[name]
            want = layer.weights[key].shape
            if tuple(have.shape) != tuple(want):
                raise ValueError(
                    f"tensor {name} has shape {tuple(have.shape)}, "
                    f"expected {tuple(want)}")
            layer.weights[key].data = have.astype(np.float32)
    _freeze(graph)

    extract_text = meta.get("extract_conv", "")
    if extract_text:
        extract_conv = int(extract_text)
    elif tuple(plan) == _VGG16_CHANNELS:
        extract_conv = _VGG16_CONV3_3
    else:
        raise ValueError(
            f"feature net file {path} does not name an extraction layer")

    if "input_scale" in meta:
        scale = np.array(json.loads(meta["input_scale"]), dtype=np.float64)
        shift = np.array(json.loads(meta["input_shift"]), dtype=np.float64)
    elif tuple(plan) == _VGG16_CHANNELS:
        scale = 0.5 / _IMAGENET_STD
        shift = (0.5 - _IMAGENET_MEAN) / _IMAGENET_STD
    else:
        scale = np.ones(3)
        shift = np.zeros(3)

    return FeatureNet(
        graph=graph,
        extract_index=_relu_layer_index(graph, extract_conv),
        input_scale=scale,
        input_shift=shift,
        pool_after=pools,
        source=meta.get("source", str(path)),
    )
