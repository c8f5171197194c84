"""Exact per-layer parameter and multiply-accumulate accounting.

Conventions: one MAC is one multiply-accumulate (not two FLOPs); transposed
convolutions are costed at output resolution (k^2*Cin*Cout*Hout*Wout);
normalization layers, activations and bias additions contribute zero MACs.
Parameter counts are resolution-independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .models import Layer, LayerGraph, parameters

MAC_REFERENCE_RESOLUTION = (256, 256)

_ZERO_COST_KINDS = {"instance_norm", "relu", "leaky_relu", "tanh", "dropout"}


@dataclass
class LayerRecord:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class ProfileReport:
    layers: list = field(default_factory=list)
    total_params: int = 0
    total_macs: int = 0
    resolution: tuple | None = None


def _layer_params(layer: Layer) -> int:
    kind, spec = layer.kind, layer.spec
    if kind in _ZERO_COST_KINDS or kind == "maxpool":
        return 0
    if kind == "conv" or kind == "conv_transpose":
        n = spec.in_channels * spec.out_channels * spec.kernel_size ** 2
        return n + (spec.out_channels if spec.bias else 0)
    if kind in ("separable_conv", "separable_deconv"):
        c, co, k = spec.in_channels, spec.out_channels, spec.kernel_size
        return (c * k * k + c) + (c * co + co)
    raise ValueError(f"unknown layer kind '{kind}' in layer '{layer.name}'")


def _layer_out_hw(layer: Layer, h: int, w: int) -> tuple:
    kind, spec = layer.kind, layer.spec
    if kind in _ZERO_COST_KINDS or kind == "residual":
        return h, w
    if kind == "maxpool":
        return h // 2, w // 2
    if kind in ("conv", "separable_conv"):
        return spec.out_hw(h, w)
    if kind in ("conv_transpose", "separable_deconv"):
        return spec.stride * h, spec.stride * w
    raise ValueError(f"unknown layer kind '{kind}' in layer '{layer.name}'")


def _layer_macs(layer: Layer, h: int, w: int) -> int:
    """MACs of one layer given its input resolution."""
    kind, spec = layer.kind, layer.spec
    if kind in _ZERO_COST_KINDS or kind == "maxpool":
        return 0
    oh, ow = _layer_out_hw(layer, h, w)
    if kind == "conv":
        return spec.in_channels * spec.out_channels * spec.kernel_size ** 2 \
            * oh * ow
    if kind == "conv_transpose":
        return spec.kernel_size ** 2 * spec.in_channels * spec.out_channels \
            * oh * ow
    if kind == "separable_conv":
        c, co, k = spec.in_channels, spec.out_channels, spec.kernel_size
        return (c * k * k + c * co) * oh * ow
    if kind == "separable_deconv":
        c, co, k = spec.in_channels, spec.out_channels, spec.kernel_size
        return (k * k * c + c * co) * oh * ow
    raise ValueError(f"unknown layer kind '{kind}' in layer '{layer.name}'")


def _walk(graph: LayerGraph, h: int | None, w: int | None,
          records: list) -> tuple:
    for layer in graph.layers:
        if layer.kind == "residual":
            h, w = _walk(layer.branch, h, w, records)
            continue
        params = _layer_params(layer)
        macs = 0
        if h is not None:
            macs = _layer_macs(layer, h, w)
            h, w = _layer_out_hw(layer, h, w)
        if params or macs:
            records.append(LayerRecord(layer.name, layer.kind, params, macs))
    return h, w


def count_params(graph: LayerGraph) -> ProfileReport:
    """Parameter-only report; totals are independent of resolution."""
    records: list = []
    _walk(graph, None, None, records)
    report = ProfileReport(layers=records,
                           total_params=sum(r.params for r in records))
    return report


def count_macs(graph: LayerGraph,
               resolution: tuple = MAC_REFERENCE_RESOLUTION) -> ProfileReport:
    """Parameter and MAC report at the given H, W input resolution."""
    h, w = resolution
    multiple = graph.meta.get("spatial_multiple")
    if multiple and (h % multiple or w % multiple):
        raise ValueError(
            f"resolution {h}x{w} must be divisible by {multiple} for this "
            f"graph")
    records: list = []
    _walk(graph, h, w, records)
    return ProfileReport(
        layers=records,
        total_params=sum(r.params for r in records),
        total_macs=sum(r.macs for r in records),
        resolution=(h, w),
    )


def optimizer_visible_scalars(graph: LayerGraph) -> int:
    """Cross-check value: scalars the trainer would update."""
    return sum(t.size for _, t in parameters(graph))


def report_json(report: ProfileReport) -> str:
    """Stable serialization: per-layer rows in graph order, totals last."""
    doc = {
        "resolution": (f"{report.resolution[0]}x{report.resolution[1]}"
                       if report.resolution else None),
        "layers": [
            {"name": r.name, "kind": r.kind, "params": r.params,
             "macs": r.macs}
            for r in report.layers
        ],
        "totals": {"params": report.total_params, "macs": report.total_macs},
    }
    return json.dumps(doc, indent=2)


def report_from_json(text: str) -> ProfileReport:
    doc = json.loads(text)
    res = doc.get("resolution")
    resolution = None
    if res:
        a, b = res.split("x")
        resolution = (int(a), int(b))
    layers = [LayerRecord(d["name"], d["kind"], int(d["params"]),
                          int(d["macs"])) for d in doc["layers"]]
    return ProfileReport(layers=layers,
                         total_params=int(doc["totals"]["params"]),
                         total_macs=int(doc["totals"]["macs"]),
                         resolution=resolution)
