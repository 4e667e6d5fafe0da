"""Network description and execution.

A model is an ordered DAG of layer specs plus a blob map holding the
parameters of conv / fc / bn_affine layers. Layers reference producers by
id; the reserved id ``input`` denotes the graph input. Residual sums are
explicit ``add_junction`` layers, so surgery rules stay expressible as
plain graph constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .errors import GraphError

INPUT = "input"

LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "fc", "bn_affine", "add_junction", "softmax")

# Layers whose output has the same channel count as their input.
CHANNEL_PRESERVING = ("relu", "maxpool", "bn_affine", "softmax")

PARAMETRIC = ("conv", "fc", "bn_affine")


@dataclass(frozen=True)
class LayerSpec:
    """One node of the network DAG."""

    id: str
    kind: str
    inputs: tuple[str, ...]
    stride: int | None = None
    pad: int | None = None
    window: int | None = None
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "tags", tuple(self.tags))
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"layer {self.id!r}: unknown kind {self.kind!r}")
        if self.id == INPUT:
            raise GraphError(f"layer id {INPUT!r} is reserved")
        n_in = 2 if self.kind == "add_junction" else 1
        if len(self.inputs) != n_in:
            raise GraphError(f"layer {self.id!r} ({self.kind}) needs {n_in} inputs, got {self.inputs}")
        if self.kind == "conv" and (self.stride is None or self.pad is None):
            raise GraphError(f"conv layer {self.id!r} needs stride and pad")
        if self.kind == "maxpool" and (self.window is None or self.stride is None):
            raise GraphError(f"maxpool layer {self.id!r} needs window and stride")


@dataclass
class ModelGraph:
    """Ordered layer list + parameter blobs + input/output metadata."""

    layers: list[LayerSpec]
    blobs: dict[str, dict[str, np.ndarray]]
    input_shape: tuple[int, int, int]
    class_count: int
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self._index = {spec.id: i for i, spec in enumerate(self.layers)}

    def layer(self, layer_id: str) -> LayerSpec:
        try:
            return self.layers[self._index[layer_id]]
        except KeyError:
            raise GraphError(f"no layer {layer_id!r} in model") from None

    def has_layer(self, layer_id: str) -> bool:
        return layer_id in self._index

    def position(self, layer_id: str) -> int:
        if layer_id not in self._index:
            raise GraphError(f"no layer {layer_id!r} in model")
        return self._index[layer_id]

    def params(self, layer_id: str) -> dict[str, np.ndarray]:
        return self.blobs.get(layer_id, {})

    def conv_kernel(self, layer_id: str) -> nn_core.ConvKernel:
        spec = self.layer(layer_id)
        if spec.kind != "conv":
            raise GraphError(f"layer {layer_id!r} is {spec.kind}, not conv")
        p = self.blobs[layer_id]
        return nn_core.ConvKernel(p["weights"], p["bias"], stride=spec.stride, pad=spec.pad)

    def replace_blobs(self, updates: dict[str, dict[str, np.ndarray]]) -> "ModelGraph":
        """New model sharing all blobs except the given replacements."""
        blobs = {lid: dict(entry) for lid, entry in self.blobs.items()}
        for lid, entry in updates.items():
            blobs.setdefault(lid, {}).update(entry)
        return ModelGraph(list(self.layers), blobs, self.input_shape, self.class_count)

    def copy_params(self) -> "ModelGraph":
        """Deep-copy every parameter array (for in-place training)."""
        blobs = {
            lid: {name: arr.copy() for name, arr in entry.items()}
            for lid, entry in self.blobs.items()
        }
        return ModelGraph(list(self.layers), blobs, self.input_shape, self.class_count)

    def output_id(self) -> str:
        consumed = {src for spec in self.layers for src in spec.inputs}
        outs = [spec.id for spec in self.layers if spec.id not in consumed]
        if len(outs) != 1:
            raise GraphError(f"model must have a single output, found {outs}")
        return outs[0]


def consumers(model: ModelGraph) -> dict[str, list[str]]:
    """Map producer id -> consumer layer ids (graph input included)."""
    table: dict[str, list[str]] = {INPUT: []}
    for spec in model.layers:
        table.setdefault(spec.id, [])
    for spec in model.layers:
        for src in spec.inputs:
            table[src].append(spec.id)
    return table


def named_params(model: ModelGraph):
    """Yield (layer_id, name, array) over all parameter blobs in layer order."""
    for spec in model.layers:
        entry = model.blobs.get(spec.id)
        if not entry:
            continue
        for name in sorted(entry):
            yield spec.id, name, entry[name]


def infer_shapes(model: ModelGraph, input_shape=None) -> dict[str, tuple[int, int, int]]:
    """Per-layer output shapes (C, H, W); raises GraphError on inconsistency."""
    shapes: dict[str, tuple[int, int, int]] = {INPUT: tuple(input_shape or model.input_shape)}
    seen = set()
    for spec in model.layers:
        for src in spec.inputs:
            if src != INPUT and src not in seen:
                raise GraphError(f"layer {spec.id!r} consumes {src!r} before it is defined")
        try:
            shapes[spec.id] = _infer_one(model, spec, [shapes[src] for src in spec.inputs])
        except GraphError:
            raise
        except Exception as exc:  # shape arithmetic errors from nn_core
            raise GraphError(f"layer {spec.id!r}: {exc}") from exc
        seen.add(spec.id)
    return shapes


def _infer_one(model: ModelGraph, spec: LayerSpec, in_shapes) -> tuple[int, int, int]:
    c, h, w = in_shapes[0]
    if spec.kind == "conv":
        wts = model.blobs[spec.id]["weights"]
        d, cin, k, _ = wts.shape
        if cin != c:
            raise GraphError(f"layer {spec.id!r}: weights expect {cin} channels, input has {c}")
        h_out, w_out = nn_core.conv_output_hw(h, w, k, spec.stride, spec.pad)
        return (d, h_out, w_out)
    if spec.kind in ("relu", "softmax"):
        return (c, h, w)
    if spec.kind == "bn_affine":
        scale = model.blobs[spec.id]["scale"]
        if scale.shape != (c,):
            raise GraphError(f"layer {spec.id!r}: scale has {scale.shape[0]} channels, input has {c}")
        return (c, h, w)
    if spec.kind == "maxpool":
        if spec.window > h or spec.window > w:
            raise GraphError(f"layer {spec.id!r}: window {spec.window} larger than input {h}x{w}")
        return (c, (h - spec.window) // spec.stride + 1, (w - spec.window) // spec.stride + 1)
    if spec.kind == "gap":
        return (c, 1, 1)
    if spec.kind == "fc":
        wts = model.blobs[spec.id]["weights"]
        if wts.shape[0] != c * h * w:
            raise GraphError(
                f"layer {spec.id!r}: weights expect {wts.shape[0]} inputs, got {c}x{h}x{w}"
            )
        return (wts.shape[1], 1, 1)
    if spec.kind == "add_junction":
        if in_shapes[0] != in_shapes[1]:
            raise GraphError(
                f"add_junction {spec.id!r} inputs differ: {in_shapes[0]} vs {in_shapes[1]}"
            )
        return (c, h, w)
    raise GraphError(f"layer {spec.id!r}: unknown kind {spec.kind!r}")


def validate_model(model: ModelGraph) -> None:
    """Check ids, DAG order, blob consistency, and shape inference."""
    ids = [spec.id for spec in model.layers]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise GraphError(f"duplicate layer ids: {dupes}")
    if len(model.input_shape) != 3 or min(model.input_shape) < 1:
        raise GraphError(f"bad input shape {model.input_shape}")
    if model.class_count < 1:
        raise GraphError(f"class count must be >= 1, got {model.class_count}")
    for spec in model.layers:
        entry = model.blobs.get(spec.id, {})
        if spec.kind == "conv":
            if set(entry) != {"weights", "bias"}:
                raise GraphError(f"conv layer {spec.id!r} needs weights+bias blobs, has {sorted(entry)}")
            nn_core.ConvKernel(entry["weights"], entry["bias"], spec.stride, spec.pad)
        elif spec.kind == "fc":
            if set(entry) != {"weights", "bias"}:
                raise GraphError(f"fc layer {spec.id!r} needs weights+bias blobs, has {sorted(entry)}")
            if entry["weights"].ndim != 2 or entry["bias"].shape != (entry["weights"].shape[1],):
                raise GraphError(f"fc layer {spec.id!r} blob shapes inconsistent")
        elif spec.kind == "bn_affine":
            if set(entry) != {"scale", "shift"}:
                raise GraphError(f"bn layer {spec.id!r} needs scale+shift blobs, has {sorted(entry)}")
            if entry["scale"].shape != entry["shift"].shape or entry["scale"].ndim != 1:
                raise GraphError(f"bn layer {spec.id!r} blob shapes inconsistent")
        elif entry:
            raise GraphError(f"layer {spec.id!r} ({spec.kind}) should not carry blobs")
    shapes = infer_shapes(model)
    out_c = shapes[model.output_id()][0]
    if out_c != model.class_count:
        raise GraphError(f"output has {out_c} channels but class count is {model.class_count}")


def forward(
    model: ModelGraph,
    x: np.ndarray,
    capture=None,
    transform=None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run the graph on x (N, C, H, W).

    capture: iterable of layer ids whose outputs to return.
    transform: optional hook ``fn(layer_id, arr) -> arr`` applied to each
    layer output before it is consumed downstream (used for masked-forward
    oracles and activation probes).
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != tuple(model.input_shape):
        raise GraphError(f"input {x.shape} does not match model input shape {model.input_shape}")
    wanted = set(capture) if capture else set()
    acts: dict[str, np.ndarray] = {INPUT: x}
    captured: dict[str, np.ndarray] = {}
    for spec in model.layers:
        args = [acts[src] for src in spec.inputs]
        out = _forward_one(model, spec, args)
        if transform is not None:
            out = transform(spec.id, out)
        acts[spec.id] = out
        if spec.id in wanted:
            captured[spec.id] = out
    return acts[model.output_id()], captured


def _forward_one(model: ModelGraph, spec: LayerSpec, args) -> np.ndarray:
    if spec.kind == "conv":
        return nn_core.conv2d_forward(args[0], model.conv_kernel(spec.id))
    if spec.kind == "relu":
        return nn_core.relu_forward(args[0])
    if spec.kind == "maxpool":
        return nn_core.maxpool_forward(args[0], spec.window, spec.stride)
    if spec.kind == "gap":
        return nn_core.gap_forward(args[0])
    if spec.kind == "fc":
        p = model.blobs[spec.id]
        return nn_core.fc_forward(args[0], p["weights"], p["bias"])
    if spec.kind == "bn_affine":
        p = model.blobs[spec.id]
        return nn_core.bn_affine_forward(args[0], p["scale"], p["shift"])
    if spec.kind == "softmax":
        return nn_core.softmax_forward(args[0])
    if spec.kind == "add_junction":
        return nn_core.add_forward(args[0], args[1])
    raise GraphError(f"layer {spec.id!r}: unknown kind {spec.kind!r}")


def layer_backward(model: ModelGraph, spec: LayerSpec, inputs, output, dout):
    """Backward through one layer.

    Returns (input_grads, param_grads): one gradient per declared input,
    and a dict of gradients for the layer's own parameter blobs.
    """
    if dout.shape != output.shape:
        raise GraphError(
            f"layer {spec.id!r}: upstream gradient {dout.shape} does not match output {output.shape}"
        )
    if spec.kind == "conv":
        dx, dw, db = nn_core.conv2d_backward(inputs[0], model.conv_kernel(spec.id), dout)
        return (dx,), {"weights": dw, "bias": db}
    if spec.kind == "relu":
        return (nn_core.relu_backward(inputs[0], dout),), {}
    if spec.kind == "maxpool":
        return (nn_core.maxpool_backward(inputs[0], spec.window, spec.stride, dout),), {}
    if spec.kind == "gap":
        return (nn_core.gap_backward(inputs[0], dout),), {}
    if spec.kind == "fc":
        p = model.blobs[spec.id]
        dx, dw, db = nn_core.fc_backward(inputs[0], p["weights"], dout)
        return (dx,), {"weights": dw, "bias": db}
    if spec.kind == "bn_affine":
        p = model.blobs[spec.id]
        dx, dscale, dshift = nn_core.bn_affine_backward(inputs[0], p["scale"], dout)
        return (dx,), {"scale": dscale, "shift": dshift}
    if spec.kind == "softmax":
        return (nn_core.softmax_backward(output, dout),), {}
    if spec.kind == "add_junction":
        return (dout, dout), {}
    raise GraphError(f"layer {spec.id!r}: unknown kind {spec.kind!r}")


def backward(model: ModelGraph, x: np.ndarray, dout: np.ndarray):
    """Gradients of a scalar loss through the whole graph.

    dout is the loss gradient at the model output. Returns
    (param_grads, input_grad) with param_grads[layer_id][blob_name].
    """
    x = np.asarray(x)
    acts: dict[str, np.ndarray] = {INPUT: x}
    for spec in model.layers:
        acts[spec.id] = _forward_one(model, spec, [acts[src] for src in spec.inputs])
    out_id = model.output_id()
    if dout.shape != acts[out_id].shape:
        raise GraphError(
            f"loss gradient {dout.shape} does not match model output {acts[out_id].shape}"
        )
    grads: dict[str, np.ndarray] = {out_id: np.asarray(dout)}
    param_grads: dict[str, dict[str, np.ndarray]] = {}
    for spec in reversed(model.layers):
        g = grads.pop(spec.id, None)
        if g is None:
            continue
        in_grads, p_grads = layer_backward(
            model, spec, [acts[src] for src in spec.inputs], acts[spec.id], g
        )
        if p_grads:
            param_grads[spec.id] = p_grads
        for src, gi in zip(spec.inputs, in_grads):
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    return param_grads, grads.get(INPUT, np.zeros_like(x))
