"""Parameter and FLOP accounting.

FLOPs count multiplies and adds separately (2 per multiply-accumulate) for
conv and fc layers; biases and all other layer kinds contribute zero.
Counting fc layers alongside convs is what reproduces the reference
structural totals for the standard topologies, so that is the convention
used throughout. Parameter counts include biases and the per-channel
affine pairs of bn layers.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import ModelGraph, infer_shapes
from .util import write_csv


@dataclass(frozen=True)
class LayerCost:
    layer_id: str
    kind: str
    param_count: int
    flops: int
    output_shape: tuple[int, int, int]


@dataclass(frozen=True)
class CostReport:
    rows: tuple[LayerCost, ...]

    @property
    def total_params(self) -> int:
        return sum(r.param_count for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def to_csv(self, path) -> None:
        rows = [
            (r.layer_id, r.kind, r.param_count, r.flops, *r.output_shape) for r in self.rows
        ]
        rows.append(("total", "", self.total_params, self.total_flops, "", "", ""))
        write_csv(path, ("layer", "kind", "params", "flops", "out_c", "out_h", "out_w"), rows)

    def format_table(self) -> str:
        lines = [f"{'layer':<16} {'kind':<12} {'params':>12} {'flops':>16} output"]
        for r in self.rows:
            shape = "x".join(str(v) for v in r.output_shape)
            lines.append(f"{r.layer_id:<16} {r.kind:<12} {r.param_count:>12} {r.flops:>16} {shape}")
        lines.append(f"{'total':<16} {'':<12} {self.total_params:>12} {self.total_flops:>16}")
        return "\n".join(lines)


def _layer_params(model: ModelGraph, layer_id: str) -> int:
    return sum(arr.size for arr in model.blobs.get(layer_id, {}).values())


def count_params(model: ModelGraph) -> CostReport:
    """Every weight and bias of conv, fc, and bn_affine layers."""
    shapes = infer_shapes(model)
    rows = [
        LayerCost(spec.id, spec.kind, _layer_params(model, spec.id), 0, shapes[spec.id])
        for spec in model.layers
    ]
    return CostReport(tuple(rows))


def count_flops(model: ModelGraph, input_shape=None) -> CostReport:
    """Multiply+add counts of conv and fc layers at the given input shape."""
    shapes = infer_shapes(model, input_shape)
    rows = []
    for spec in model.layers:
        flops = 0
        if spec.kind == "conv":
            d, cin, k, _ = model.blobs[spec.id]["weights"].shape
            _, h_out, w_out = shapes[spec.id]
            flops = 2 * k * k * cin * d * h_out * w_out
        elif spec.kind == "fc":
            rows_in, cols_out = model.blobs[spec.id]["weights"].shape
            flops = 2 * rows_in * cols_out
        rows.append(LayerCost(spec.id, spec.kind, _layer_params(model, spec.id), flops, shapes[spec.id]))
    return CostReport(tuple(rows))
