"""Analytic MAC/FLOP and parameter accounting over a model graph.

Conventions (printed in every report so either bookkeeping style can be
recovered): FLOPs = 2 x MACs for multiply-accumulate layers; batchnorm is
counted in inference-folded form (one scale and one shift per element);
activations and residual adds cost one FLOP per element; pooling costs
k*k - 1 comparisons per output element; upsampling and concatenation are
data movement and cost nothing. Costs cover the graph through the raw head
outputs; decode and NMS are post-processing and excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError
from .model import ModelGraph


@dataclass
class LayerCost:
    name: str
    kind: str
    out_shape: tuple
    macs: int
    flops: int
    params: int


@dataclass
class FlopsReport:
    input_shape: tuple
    layers: list[LayerCost]
    total_macs: int
    total_flops: int
    total_params: int

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def prefix_totals(self, prefix: str) -> tuple[int, int, int]:
        """(macs, flops, params) summed over layers whose name starts with prefix."""
        macs = flops = params = 0
        for layer in self.layers:
            if layer.name.startswith(prefix):
                macs += layer.macs
                flops += layer.flops
                params += layer.params
        return macs, flops, params

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "convention": "FLOPs = 2 x MACs; batchnorm folded to scale+shift",
            "layers": [
                {"name": l.name, "kind": l.kind, "out_shape": list(l.out_shape),
                 "macs": l.macs, "flops": l.flops, "params": l.params}
                for l in self.layers
            ],
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "total_params": self.total_params,
            "gflops": self.gflops,
        }

    def to_text(self) -> str:
        lines = [
            f"{'Layer':<28}{'Kind':<11}{'Output':<20}{'MACs':>14}{'FLOPs':>14}{'Params':>10}"
        ]
        for l in self.layers:
            shape = "x".join(str(v) for v in l.out_shape)
            lines.append(f"{l.name:<28}{l.kind:<11}{shape:<20}{l.macs:>14}{l.flops:>14}{l.params:>10}")
        lines.append("-" * 97)
        lines.append(f"{'total':<59}{self.total_macs:>14}{self.total_flops:>14}{self.total_params:>10}")
        lines.append(f"GFLOPs at input {'x'.join(str(v) for v in self.input_shape)}: "
                     f"{self.gflops:.4f}  (FLOPs = 2 x MACs)")
        return "\n".join(lines)


def layer_cost(op, in_shapes, out_shape) -> tuple[int, int, int]:
    """(MACs, FLOPs, params) for one primitive node.

    Conv: MACs = k^2 * (Cin/g) * Cout * Hout * Wout, params include the
    optional bias. Batchnorm: one multiply-add per element, 2*C params.
    """
    kind = getattr(op, "kind", None)
    n, c, h, w = out_shape
    elements = n * c * h * w
    if kind == "conv":
        macs = op.k * op.k * (op.c_in // op.groups) * op.c_out * h * w * n
        params = op.k * op.k * (op.c_in // op.groups) * op.c_out
        if op.has_bias:
            params += op.c_out
        return macs, 2 * macs, params
    if kind == "batchnorm":
        macs = elements
        return macs, 2 * macs, 2 * op.c
    if kind == "relu6":
        return 0, elements, 0
    if kind == "add":
        return 0, elements, 0
    if kind == "maxpool":
        return 0, (op.k * op.k - 1) * elements, 0
    if kind in ("upsample", "concat"):
        return 0, 0, 0
    raise ConfigurationError(f"flops profiler does not know layer kind {kind!r}")


def model_cost(graph: ModelGraph, input_shape) -> FlopsReport:
    """Per-layer cost rows plus totals for one input shape (deterministic)."""
    shapes = graph.infer_shapes(input_shape)
    layers = []
    for i, node in enumerate(graph.nodes):
        in_shapes = [shapes[j] for j in node.inputs]
        macs, flops, params = layer_cost(node.op, in_shapes, shapes[i])
        layers.append(LayerCost(node.name, node.op.kind, shapes[i], macs, flops, params))
    return FlopsReport(
        input_shape=tuple(input_shape),
        layers=layers,
        total_macs=sum(l.macs for l in layers),
        total_flops=sum(l.flops for l in layers),
        total_params=sum(l.params for l in layers),
    )


def scaling_check(graph: ModelGraph, input_shape, factor: int) -> float:
    """Ratio of total FLOPs after scaling H and W by ``factor``.

    Every counted operation scales with H*W, so the ratio is exactly
    factor^2 whenever both sizes are divisible by 32.
    """
    n, c, h, w = input_shape
    base = model_cost(graph, (n, c, h, w))
    scaled = model_cost(graph, (n, c, h * factor, w * factor))
    return scaled.total_flops / base.total_flops
