"""Collection of the regression examples that drive channel selection.

A pruning site is a pair of conv layers: the one being pruned and the
next conv downstream, whose pre-activation outputs are the quantities to
preserve. For a sampled output location, the guiding conv's response
decomposes into one partial sum per input channel; rows of those partials
(with the bias-free response as target) form the selection problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SamplingError, SelectionError, SiteError
from .graph import ModelGraph, consumers, forward, infer_shapes
from .model_io import Dataset
from .util import rng_for, write_csv

# Layer kinds a site walk may pass through (channel-preserving activations).
_TRAVERSABLE = ("relu", "maxpool", "bn_affine")


@dataclass(frozen=True)
class PruneSite:
    """Conv pair (layer, next_layer) and the activation path between them."""

    layer: str
    next_layer: str
    path: tuple[str, ...] = ()

    @property
    def window_source(self) -> str:
        """Layer whose output is the guiding conv's input."""
        return self.path[-1] if self.path else self.layer


def find_site(model: ModelGraph, layer_id: str) -> PruneSite:
    """Walk downstream from a conv through channel-preserving layers to the
    next conv; errors if the walk hits anything else or fans out."""
    spec = model.layer(layer_id)
    if spec.kind != "conv":
        raise SiteError(f"layer {layer_id!r} is {spec.kind}, not conv")
    table = consumers(model)
    path: list[str] = []
    current = layer_id
    while True:
        nexts = table[current]
        if len(nexts) != 1:
            raise SiteError(
                f"no unique path from {layer_id!r}: {current!r} has consumers {nexts}"
            )
        nxt = model.layer(nexts[0])
        if nxt.kind == "conv":
            return PruneSite(layer=layer_id, next_layer=nxt.id, path=tuple(path))
        if nxt.kind not in _TRAVERSABLE:
            raise SiteError(
                f"no conv downstream of {layer_id!r}: walk reached {nxt.id!r} ({nxt.kind})"
            )
        path.append(nxt.id)
        current = nxt.id


def prunable_sites(model: ModelGraph) -> list[PruneSite]:
    """All sites obtainable by walking from each untagged conv layer."""
    sites = []
    for spec in model.layers:
        if spec.kind != "conv" or "projection" in spec.tags:
            continue
        try:
            sites.append(find_site(model, spec.id))
        except SiteError:
            continue
    return sites


@dataclass
class SampleSet:
    """Per-channel partial responses and bias-free targets for one site.

    responses: (m, C) float64, one column per input channel of the
    guiding conv; targets: (m,) float64. Row sums of responses equal the
    targets up to the float32 rounding of the forward pass.
    """

    responses: np.ndarray
    targets: np.ndarray
    site: PruneSite
    seed: int

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.responses.ndim != 2 or self.targets.shape != (self.responses.shape[0],):
            raise SamplingError(
                f"inconsistent sample shapes {self.responses.shape} / {self.targets.shape}"
            )

    @property
    def num_rows(self) -> int:
        return self.responses.shape[0]

    @property
    def num_channels(self) -> int:
        return self.responses.shape[1]

    def to_csv(self, path) -> None:
        header = tuple(f"c{i}" for i in range(self.num_channels)) + ("yhat",)
        rows = [tuple(map(float, row)) + (float(t),) for row, t in zip(self.responses, self.targets)]
        write_csv(path, header, rows)


def collect_samples(
    model: ModelGraph,
    dataset: Dataset,
    site: PruneSite,
    images: int = 10,
    locations_per_image: int = 10,
    seed: int = 0,
) -> SampleSet:
    """Sample (channel-partials, target) rows at random output locations.

    For each chosen image, runs a forward pass and draws
    ``locations_per_image`` distinct (filter, row, col) triples from the
    guiding conv's pre-activation output. The window feeding each location
    is read from the (post-activation) input of the guiding conv; the
    target is the conv's stored output minus the filter bias, which keeps
    the row-sum identity an actual crosscheck of two computation paths.
    Deterministic for fixed (model, dataset, site, counts, seed).
    """
    if images < 1 or locations_per_image < 1:
        raise SamplingError(f"need >= 1 image and location, got {images}, {locations_per_image}")
    if len(dataset) < images:
        raise SamplingError(f"dataset has {len(dataset)} images, need {images}")
    next_spec = model.layer(site.next_layer)
    weights = model.blobs[site.next_layer]["weights"].astype(np.float64)
    bias = model.blobs[site.next_layer]["bias"].astype(np.float64)
    d_out, c_in, k, _ = weights.shape
    if c_in == 1:
        raise SamplingError(f"site {site.layer!r}: single input channel, nothing to select")
    shapes = infer_shapes(model)
    _, h_out, w_out = shapes[site.next_layer]
    if locations_per_image > d_out * h_out * w_out:
        raise SamplingError(
            f"cannot draw {locations_per_image} distinct locations from "
            f"{d_out}x{h_out}x{w_out} output"
        )
    stride = next_spec.stride

    rng = rng_for(seed, "sampling")
    image_ids = rng.choice(len(dataset), size=images, replace=False)
    m = images * locations_per_image
    responses = np.empty((m, c_in), dtype=np.float64)
    targets = np.empty(m, dtype=np.float64)
    row = 0
    for img_idx in image_ids:
        x = dataset.images[int(img_idx) : int(img_idx) + 1]
        _, captured = forward(model, x, capture=(site.window_source, site.next_layer))
        window_input = captured[site.window_source].astype(np.float64)
        if next_spec.pad:
            p = next_spec.pad
            window_input = np.pad(window_input, ((0, 0), (0, 0), (p, p), (p, p)))
        conv_out = captured[site.next_layer]
        flat = rng.choice(d_out * h_out * w_out, size=locations_per_image, replace=False)
        ds, rs, cs = np.unravel_index(flat, (d_out, h_out, w_out))
        for d, r, c in zip(ds, rs, cs):
            patch = window_input[0, :, r * stride : r * stride + k, c * stride : c * stride + k]
            responses[row] = np.einsum("ckl,ckl->c", weights[d], patch)
            targets[row] = float(conv_out[0, d, r, c]) - bias[d]
            row += 1
    return SampleSet(responses=responses, targets=targets, site=site, seed=seed)


def check_channels(keep, num_channels: int) -> np.ndarray:
    keep = np.asarray(sorted(keep), dtype=np.int64)
    if keep.size and (keep.min() < 0 or keep.max() >= num_channels):
        raise SelectionError(f"kept channels {keep} out of range for C={num_channels}")
    if np.unique(keep).size != keep.size:
        raise SelectionError(f"kept channels contain duplicates: {keep}")
    return keep


def reconstruction_error(samples: SampleSet, keep, weights=None) -> float:
    """Squared error of approximating targets from the kept channels.

    weights defaults to all ones; an empty keep set yields the squared
    norm of the targets.
    """
    keep = check_channels(keep, samples.num_channels)
    if keep.size == 0:
        return float(np.sum(samples.targets**2))
    if weights is None:
        w = np.ones(keep.size, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (keep.size,):
            raise SelectionError(f"weights shape {w.shape} does not match {keep.size} kept channels")
    approx = samples.responses[:, keep] @ w
    return float(np.sum((samples.targets - approx) ** 2))
