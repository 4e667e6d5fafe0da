"""Model and dataset persistence plus reference topology builders.

Model files are a pair: a UTF-8 JSON manifest and a raw blob file.

* ``<name>.json`` lists layer specs, the input shape and class count, and a
  table of named blob entries, each with byte offset, byte length, shape,
  and CRC-32 of its bytes.
* ``<name>.bin`` is the concatenation of all parameter arrays as raw
  little-endian float32, in manifest order.

Dataset files (``.thds``) are a single binary stream::

    magic b"THDS" | u32 version (=1) | u32 N, C, H, W
    | N*C*H*W float32 image values | N u32 labels

All multi-byte fields are little-endian. Both formats round-trip
bit-exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, GraphError, ModelFormatError
from .graph import INPUT, LayerSpec, ModelGraph, validate_model
from .util import rng_for

MODEL_FORMAT = "thinner-model"
MODEL_VERSION = 1
DATASET_MAGIC = b"THDS"
DATASET_VERSION = 1

_LAYER_FIELDS = ("stride", "pad", "window")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Labelled image set: images (N, C, H, W) float32, integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise DatasetFormatError(f"images must be rank-4 with N >= 1, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetFormatError(
                f"labels {self.labels.shape} do not match {self.images.shape[0]} images"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DatasetFormatError(
                f"labels must lie in [0, {self.class_count}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


def save_dataset(dataset: Dataset, path) -> None:
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<5I", DATASET_VERSION, n, c, h, w))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())


def load_dataset(path, expected_classes: int | None = None) -> Dataset:
    """Load a ``.thds`` file; errors on truncation, bad magic, or (when
    expected_classes is given) out-of-range labels."""
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 24:
        raise DatasetFormatError(f"{path}: truncated header")
    version, n, c, h, w = struct.unpack_from("<5I", raw, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    body = 24
    img_bytes = n * c * h * w * 4
    lbl_bytes = n * 4
    if len(raw) != body + img_bytes + lbl_bytes:
        raise DatasetFormatError(
            f"{path}: expected {body + img_bytes + lbl_bytes} bytes, file has {len(raw)}"
        )
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=body)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=body + img_bytes)
    labels = labels.astype(np.int64)
    if expected_classes is not None and labels.size and labels.max() >= expected_classes:
        raise DatasetFormatError(
            f"{path}: label {labels.max()} out of range for {expected_classes} classes"
        )
    class_count = expected_classes if expected_classes is not None else int(labels.max()) + 1
    return Dataset(images.reshape(n, c, h, w).copy(), labels, class_count)


def generate_synthetic(
    classes: int,
    per_class: int,
    shape: tuple[int, int, int],
    seed: int,
    signal: float = 1.0,
    noise: float = 0.25,
) -> Dataset:
    """Gaussian-blob classes over per-class channel patterns.

    Each class gets a fixed random template (unit RMS, scaled by
    ``signal``); images are the template plus iid Gaussian noise, so the
    classes are linearly separable at high signal-to-noise ratio.
    Deterministic for a given seed.
    """
    if classes < 2 or per_class < 1:
        raise ValueError(f"need >= 2 classes and >= 1 image per class, got {classes}, {per_class}")
    rng = rng_for(seed, "synthetic")
    c, h, w = shape
    templates = rng.standard_normal((classes, c, h, w))
    templates *= signal / np.sqrt((templates**2).mean(axis=(1, 2, 3), keepdims=True))
    images = np.repeat(templates, per_class, axis=0)
    images = images + noise * rng.standard_normal(images.shape)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(images.astype(np.float32), labels, classes)


# ---------------------------------------------------------------------------
# model serialization


def _layer_to_json(spec: LayerSpec) -> dict:
    entry = {"id": spec.id, "kind": spec.kind, "inputs": list(spec.inputs)}
    for name in _LAYER_FIELDS:
        value = getattr(spec, name)
        if value is not None:
            entry[name] = value
    if spec.tags:
        entry["tags"] = list(spec.tags)
    return entry


def _layer_from_json(entry: dict) -> LayerSpec:
    try:
        return LayerSpec(
            id=entry["id"],
            kind=entry["kind"],
            inputs=tuple(entry["inputs"]),
            stride=entry.get("stride"),
            pad=entry.get("pad"),
            window=entry.get("window"),
            tags=tuple(entry.get("tags", ())),
        )
    except (KeyError, GraphError) as exc:
        raise ModelFormatError(f"bad layer entry {entry.get('id', '?')!r}: {exc}") from exc


def save_model(model: ModelGraph, path) -> None:
    """Write ``<path>`` (JSON manifest) and its sibling ``.bin`` blob file."""
    validate_model(model)
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for spec in model.layers:
        params = model.blobs.get(spec.id)
        if not params:
            continue
        for name in sorted(params):
            arr = params[name]
            if arr.dtype != np.float32:
                raise ModelFormatError(
                    f"blob {spec.id}/{name} has dtype {arr.dtype}; model files store float32"
                )
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(
                {
                    "layer": spec.id,
                    "name": name,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(data),
                    "crc32": zlib.crc32(data),
                }
            )
            chunks.append(data)
            offset += len(data)
    manifest = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "blob_file": blob_path.name,
        "layers": [_layer_to_json(spec) for spec in model.layers],
        "blobs": entries,
    }
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_model(path) -> ModelGraph:
    """Load a model manifest + blob pair; validates sizes and checksums."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: cannot read manifest: {exc}") from exc
    if manifest.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a {MODEL_FORMAT} manifest")
    if manifest.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {manifest.get('version')}")
    blob_path = path.parent / manifest["blob_file"]
    try:
        raw = blob_path.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"{blob_path}: cannot read blob file: {exc}") from exc

    blobs: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["blobs"]:
        label = f"{entry['layer']}/{entry['name']}"
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["nbytes"] != expected:
            raise ModelFormatError(
                f"blob {label}: declared {entry['nbytes']} bytes but shape {shape} needs {expected}"
            )
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(raw):
            raise ModelFormatError(
                f"blob {label}: region [{lo}, {hi}) beyond blob file of {len(raw)} bytes"
            )
        data = raw[lo:hi]
        if zlib.crc32(data) != entry["crc32"]:
            raise ModelFormatError(f"blob {label}: checksum mismatch")
        arr = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        blobs.setdefault(entry["layer"], {})[entry["name"]] = arr

    layers = [_layer_from_json(entry) for entry in manifest["layers"]]
    model = ModelGraph(
        layers=layers,
        blobs=blobs,
        input_shape=tuple(manifest["input_shape"]),
        class_count=int(manifest["class_count"]),
    )
    try:
        validate_model(model)
    except GraphError as exc:
        raise ModelFormatError(f"{path}: invalid model: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# topology builders


class _Builder:
    """Accumulates layers and seeded He-initialized parameters."""

    def __init__(self, input_shape, class_count, seed):
        self.layers: list[LayerSpec] = []
        self.blobs: dict[str, dict[str, np.ndarray]] = {}
        self.input_shape = input_shape
        self.class_count = class_count
        self.rng = rng_for(seed, "init")
        self.last = INPUT

    def _add(self, spec: LayerSpec) -> str:
        self.layers.append(spec)
        self.last = spec.id
        return spec.id

    def conv(self, lid, cin, cout, k, stride=1, pad=0, src=None, tags=()):
        weights = self.rng.standard_normal((cout, cin, k, k), dtype=np.float32)
        weights *= np.float32(np.sqrt(2.0 / (cin * k * k)))
        self.blobs[lid] = {"weights": weights, "bias": np.zeros(cout, dtype=np.float32)}
        return self._add(
            LayerSpec(lid, "conv", (src or self.last,), stride=stride, pad=pad, tags=tags)
        )

    def bn(self, lid, channels, src=None):
        self.blobs[lid] = {
            "scale": np.ones(channels, dtype=np.float32),
            "shift": np.zeros(channels, dtype=np.float32),
        }
        return self._add(LayerSpec(lid, "bn_affine", (src or self.last,)))

    def relu(self, lid, src=None):
        return self._add(LayerSpec(lid, "relu", (src or self.last,)))

    def pool(self, lid, window, stride, src=None):
        return self._add(LayerSpec(lid, "maxpool", (src or self.last,), stride=stride, window=window))

    def gap(self, lid, src=None):
        return self._add(LayerSpec(lid, "gap", (src or self.last,)))

    def fc(self, lid, fan_in, fan_out, src=None):
        weights = self.rng.standard_normal((fan_in, fan_out), dtype=np.float32)
        weights *= np.float32(np.sqrt(2.0 / fan_in))
        self.blobs[lid] = {"weights": weights, "bias": np.zeros(fan_out, dtype=np.float32)}
        return self._add(LayerSpec(lid, "fc", (src or self.last,)))

    def add_junction(self, lid, a, b):
        return self._add(LayerSpec(lid, "add_junction", (a, b)))

    def build(self) -> ModelGraph:
        model = ModelGraph(self.layers, self.blobs, self.input_shape, self.class_count)
        validate_model(model)
        return model


_VGG_STAGES = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


def _vgg_trunk(b: _Builder) -> int:
    cin = 3
    for stage, (width, reps) in enumerate(_VGG_STAGES, start=1):
        for i in range(1, reps + 1):
            b.conv(f"conv{stage}_{i}", cin, width, 3, stride=1, pad=1)
            b.relu(f"relu{stage}_{i}")
            cin = width
        b.pool(f"pool{stage}", 2, 2)
    return cin


def build_vgg16(class_count: int, seed: int = 0) -> ModelGraph:
    """Classic 13-conv / 3-fc topology at 224x224 input."""
    if class_count < 2:
        raise ValueError(f"class count must be >= 2, got {class_count}")
    b = _Builder((3, 224, 224), class_count, seed)
    width = _vgg_trunk(b)
    b.fc("fc6", width * 7 * 7, 4096)
    b.relu("relu6")
    b.fc("fc7", 4096, 4096)
    b.relu("relu7")
    b.fc("fc8", 4096, class_count)
    return b.build()


def build_vgg16_gap(class_count: int, seed: int = 0) -> ModelGraph:
    """VGG-16 trunk with the fc stack replaced by global average pooling
    and a single classifier layer."""
    if class_count < 2:
        raise ValueError(f"class count must be >= 2, got {class_count}")
    b = _Builder((3, 224, 224), class_count, seed)
    width = _vgg_trunk(b)
    b.gap("gap")
    b.fc("fc", width, class_count)
    return b.build()


_RESNET_STAGES = ((64, 3), (128, 4), (256, 6), (512, 3))


def build_resnet50(class_count: int, seed: int = 0) -> ModelGraph:
    """50-layer bottleneck-residual network at 224x224 input.

    The convolution contract requires exact-fit output extents, which the
    canonical strided 7x7 stem and strided 1x1 downsamplers violate on
    even inputs. The stem is therefore a 6x6 stride-2 pad-2 conv (keeps
    the 112x112 stem output), and later stages downsample with a 2x2
    max pool at stage entry followed by stride-1 blocks, which leaves
    every conv's cost identical to the strided-conv arrangement.
    Projection shortcuts carry the ``projection`` tag so pruning skips
    them.
    """
    if class_count < 2:
        raise ValueError(f"class count must be >= 2, got {class_count}")
    b = _Builder((3, 224, 224), class_count, seed)
    b.conv("conv1", 3, 64, 6, stride=2, pad=2)
    b.bn("bn_conv1", 64)
    b.relu("relu_conv1")
    b.pool("pool1", 2, 2)
    cin = 64
    for stage_idx, (width, reps) in enumerate(_RESNET_STAGES):
        stage = stage_idx + 2
        if stage > 2:
            b.pool(f"pool{stage}", 2, 2)
        for rep in range(reps):
            name = f"res{stage}{chr(ord('a') + rep)}"
            shortcut = b.last
            b.conv(f"{name}_conv1", cin, width, 1, src=shortcut)
            b.bn(f"{name}_bn1", width)
            b.relu(f"{name}_relu1")
            b.conv(f"{name}_conv2", width, width, 3, stride=1, pad=1)
            b.bn(f"{name}_bn2", width)
            b.relu(f"{name}_relu2")
            b.conv(f"{name}_conv3", width, width * 4, 1)
            main = b.bn(f"{name}_bn3", width * 4)
            if rep == 0:
                b.conv(f"{name}_proj", cin, width * 4, 1, src=shortcut, tags=("projection",))
                shortcut = b.bn(f"{name}_projbn", width * 4)
            b.add_junction(f"{name}_add", main, shortcut)
            b.relu(f"{name}_relu")
            cin = width * 4
    b.gap("gap")
    b.fc("fc", cin, class_count)
    return b.build()
