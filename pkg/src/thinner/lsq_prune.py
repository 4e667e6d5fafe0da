"""Least-squares channel rescaling and structural network surgery.

After selection, the kept channels of the guiding conv are reweighted by
the closed-form least-squares fit of the targets, folded into that conv's
kernel, and the removed filters / channels are sliced out of both layers
(and any batch-norm affine between them). The full pipeline iterates over
a schedule of (layer, rate) pairs with an optional short fine-tune after
each site.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import JunctionConstraintError, SelectionError, SurgeryError, ThinnerError
from .finetune import TrainConfig, train
from .graph import ModelGraph, validate_model
from .metrics import count_flops, count_params
from .model_io import Dataset
from .sampling import PruneSite, SampleSet, check_channels, collect_samples, find_site, reconstruction_error
from .selection import (
    SelectionResult,
    criterion_apoz,
    criterion_random,
    criterion_weight_sum,
    greedy_select,
    removed_objective,
    select_by_scores,
)
from .util import subseed, write_csv

METHODS = ("thinet", "thinet_no_w", "weight_sum", "apoz", "random")

# Condition-number threshold above which the normal equations get a ridge.
_COND_LIMIT = 1e12
_RIDGE_FACTOR = 1e-6


def least_squares_weights(samples: SampleSet, kept) -> np.ndarray:
    """Closed-form minimizer of the kept-channel reconstruction error.

    Solves the normal equations by Cholesky factorization; near-singular
    Gram matrices get a small ridge proportional to their mean diagonal.
    """
    kept = check_channels(kept, samples.num_channels)
    if kept.size < 1:
        raise SelectionError("kept set must be non-empty")
    x = samples.responses[:, kept]
    m, k = x.shape
    if m < k:
        raise SelectionError(f"underdetermined fit: {m} rows < {k} kept channels")
    gram = x.T @ x
    rhs = x.T @ samples.targets
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        gram = gram + max(_RIDGE_FACTOR * np.trace(gram) / k, 1e-12) * np.eye(k)
    try:
        factor = scipy.linalg.cho_factor(gram)
    except scipy.linalg.LinAlgError:
        gram = gram + max(_RIDGE_FACTOR * np.trace(gram) / k, 1e-12) * np.eye(k)
        factor = scipy.linalg.cho_factor(gram)
    return scipy.linalg.cho_solve(factor, rhs)


def fold_scaling(model: ModelGraph, site: PruneSite, kept, weights) -> ModelGraph:
    """Multiply the guiding conv's kept input-channel slices by weights."""
    kept = check_channels(kept, model.blobs[site.next_layer]["weights"].shape[1])
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (kept.size,):
        raise SurgeryError(
            f"scaling vector has {weights.shape} entries for {kept.size} kept channels"
        )
    if not np.all(np.isfinite(weights)):
        raise SurgeryError("scaling vector contains non-finite values")
    w_next = model.blobs[site.next_layer]["weights"].copy()
    w_next[:, kept] = (w_next[:, kept].astype(np.float64) * weights[None, :, None, None]).astype(
        w_next.dtype
    )
    return model.replace_blobs({site.next_layer: {"weights": w_next}})


def _site_layers(model: ModelGraph, site: PruneSite):
    for lid in (site.layer, site.next_layer, *site.path):
        if not model.has_layer(lid):
            raise SurgeryError(f"site references missing layer {lid!r}")
    if model.layer(site.layer).kind != "conv" or model.layer(site.next_layer).kind != "conv":
        raise SurgeryError(f"site ({site.layer!r}, {site.next_layer!r}) must join two conv layers")


def prune_layer_pair(model: ModelGraph, site: PruneSite, kept) -> ModelGraph:
    """Slice the pruned conv's filters, the path's bn channels, and the
    guiding conv's input channels down to the kept set."""
    _site_layers(model, site)
    d_i = model.blobs[site.layer]["weights"].shape[0]
    kept = check_channels(kept, d_i)
    if kept.size < 1:
        raise SurgeryError("kept set must be non-empty")

    from .graph import consumers

    allowed = set(site.path) | {site.next_layer}
    table = consumers(model)
    for producer in (site.layer, *site.path):
        for consumer_id in table[producer]:
            if consumer_id in allowed:
                continue
            if model.layer(consumer_id).kind == "add_junction":
                raise JunctionConstraintError(consumer_id)
            raise SurgeryError(
                f"cannot prune {site.layer!r}: {producer!r} also feeds {consumer_id!r}"
            )

    updates: dict[str, dict[str, np.ndarray]] = {
        site.layer: {
            "weights": model.blobs[site.layer]["weights"][kept].copy(),
            "bias": model.blobs[site.layer]["bias"][kept].copy(),
        },
        site.next_layer: {"weights": model.blobs[site.next_layer]["weights"][:, kept].copy()},
    }
    for lid in site.path:
        if model.layer(lid).kind == "bn_affine":
            updates[lid] = {
                "scale": model.blobs[lid]["scale"][kept].copy(),
                "shift": model.blobs[lid]["shift"][kept].copy(),
            }
    pruned = model.replace_blobs(updates)
    validate_model(pruned)
    return pruned


def resnet_block_sites(model: ModelGraph) -> list[PruneSite]:
    """Sites for the leading convs of each residual branch.

    For every add junction, walks the non-projection branch back to its
    conv chain and returns one site per branch conv except the last, so
    block outputs and projection shortcuts stay untouched.
    """
    table = _consumer_counts(model)
    sites: list[PruneSite] = []
    for spec in model.layers:
        if spec.kind != "add_junction":
            continue
        branch_heads = []
        for src in spec.inputs:
            conv = _walk_up_to_conv(model, src)
            if conv is not None and "projection" not in conv.tags:
                branch_heads.append(conv)
        if not branch_heads:
            continue
        if len(branch_heads) > 1:
            raise SurgeryError(f"junction {spec.id!r}: both inputs reach prunable convs")
        chain = [branch_heads[0]]
        while True:
            src = chain[-1].inputs[0]
            if table.get(src, 0) > 1:
                break  # reached the block entry, where the shortcut splits off
            conv = _walk_up_to_conv(model, src)
            if conv is None or "projection" in conv.tags:
                break
            chain.append(conv)
        for conv in reversed(chain[1:]):  # forward order, excluding the block-final conv
            sites.append(find_site(model, conv.id))
    return sites


def _walk_up_to_conv(model, start_id):
    from .graph import INPUT

    current = start_id
    while True:
        if current == INPUT:
            return None
        spec = model.layer(current)
        if spec.kind == "conv":
            return spec
        if spec.kind in ("relu", "bn_affine", "maxpool"):
            current = spec.inputs[0]
            continue
        return None


def _consumer_counts(model) -> dict[str, int]:
    from .graph import consumers

    return {src: len(dst) for src, dst in consumers(model).items()}


# ---------------------------------------------------------------------------
# whole-network pipeline


@dataclass
class PruneConfig:
    """Knobs of the site-by-site pipeline.

    images = 0 skips sample collection (only valid for methods that do not
    need samples; reconstruction errors are then not reported).
    final_finetune_epochs defaults to twice the per-site epochs.
    """

    images: int = 10
    locations_per_image: int = 10
    finetune_epochs: int = 1
    final_finetune_epochs: int | None = None
    finetune_lr: float = 1e-3
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @property
    def final_epochs(self) -> int:
        if self.final_finetune_epochs is None:
            return 2 * self.finetune_epochs
        return self.final_finetune_epochs


@dataclass(frozen=True)
class SitePruneRecord:
    layer: str
    next_layer: str
    rate: float
    channels_before: int
    channels_kept: int
    objective: float
    recon_plain: float
    recon_scaled: float
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int


@dataclass
class PruneReport:
    method: str
    seed: int
    sites: list[SitePruneRecord] = field(default_factory=list)
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0

    _FIELDS = (
        "layer", "next_layer", "rate", "channels_before", "channels_kept",
        "objective", "recon_plain", "recon_scaled",
        "params_before", "params_after", "flops_before", "flops_after",
    )

    def to_csv(self, path) -> None:
        rows = [tuple(getattr(r, f) for f in self._FIELDS) for r in self.sites]
        write_csv(path, self._FIELDS, rows)

    def to_json(self, path=None) -> str:
        payload = json.dumps(
            {
                "method": self.method,
                "seed": self.seed,
                "params_before": self.params_before,
                "params_after": self.params_after,
                "flops_before": self.flops_before,
                "flops_after": self.flops_after,
                "sites": [
                    {f: getattr(r, f) for f in self._FIELDS} for r in self.sites
                ],
            },
            indent=1,
        )
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(payload)
        return payload


def _derived_seed(root: int, *names) -> int:
    return int(subseed(root, *names).generate_state(1)[0])


def select_channels(
    method: str,
    model: ModelGraph,
    site: PruneSite,
    rate: float,
    samples: SampleSet | None,
    dataset: Dataset | None,
    seed: int,
) -> SelectionResult:
    """Dispatch one selection method at one site."""
    if method in ("thinet", "thinet_no_w"):
        if samples is None:
            raise SelectionError(f"method {method!r} requires collected samples")
        return greedy_select(samples, rate)
    if method == "weight_sum":
        return select_by_scores(criterion_weight_sum(model, site.layer), rate, keep_high=True)
    if method == "apoz":
        if dataset is None:
            raise SelectionError("method 'apoz' requires a dataset")
        return select_by_scores(
            criterion_apoz(model, dataset, site.layer), rate, keep_high=False
        )
    if method == "random":
        channels = model.blobs[site.layer]["weights"].shape[0]
        return criterion_random(channels, rate, seed=seed)
    raise SelectionError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")


def prune_network(
    model: ModelGraph,
    dataset: Dataset | None,
    schedule,
    method: str,
    seed: int = 0,
    config: PruneConfig | None = None,
) -> tuple[ModelGraph, PruneReport]:
    """Prune each scheduled site in order: sample, select, rescale (thinet
    only), fold, slice, optionally fine-tune; never emits partial models.

    schedule: sequence of (layer_id, rate) pairs in topological order.
    """
    config = config or PruneConfig()
    if method not in METHODS:
        raise SelectionError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    schedule = [(str(lid), float(rate)) for lid, rate in schedule]
    missing = [lid for lid, _ in schedule if not model.has_layer(lid)]
    if missing:
        raise SurgeryError(f"schedule names unknown layers: {missing}")
    positions = [model.position(lid) for lid, _ in schedule]
    if positions != sorted(positions):
        raise SurgeryError("schedule must list sites in topological order")

    report = PruneReport(method=method, seed=seed)
    report.params_before = count_params(model).total_params
    report.flops_before = count_flops(model).total_flops

    current = model
    for idx, (layer_id, rate) in enumerate(schedule):
        try:
            current = _prune_one_site(current, dataset, layer_id, rate, method, seed, idx, config, report)
        except ThinnerError as exc:
            raise SurgeryError(f"pruning aborted at site {layer_id!r}: {exc}") from exc
    if dataset is not None and config.final_epochs > 0:
        current, _ = train(
            current,
            dataset,
            TrainConfig(
                epochs=config.final_epochs,
                lr=config.finetune_lr,
                batch_size=config.batch_size,
                momentum=config.momentum,
                weight_decay=config.weight_decay,
                seed=_derived_seed(seed, "finetune", "final"),
            ),
        )
    report.params_after = count_params(current).total_params
    report.flops_after = count_flops(current).total_flops
    return current, report


def _prune_one_site(current, dataset, layer_id, rate, method, seed, idx, config, report):
    site = find_site(current, layer_id)
    needs_samples = method in ("thinet", "thinet_no_w")
    if needs_samples and (dataset is None or config.images == 0):
        raise SelectionError(f"method {method!r} requires a dataset and images > 0")
    samples = None
    if dataset is not None and config.images > 0:
        samples = collect_samples(
            current,
            dataset,
            site,
            images=config.images,
            locations_per_image=config.locations_per_image,
            seed=_derived_seed(seed, "sampling", idx),
        )
    sel = select_channels(
        method, current, site, rate, samples, dataset, seed=_derived_seed(seed, "selection", idx)
    )

    objective = recon_plain = recon_scaled = float("nan")
    if samples is not None:
        objective = removed_objective(samples, sel.removed)
        recon_plain = reconstruction_error(samples, sel.kept)
    params_before = count_params(current).total_params
    flops_before = count_flops(current).total_flops

    if sel.removed:
        if method == "thinet":
            w = least_squares_weights(samples, sel.kept)
            recon_scaled = reconstruction_error(samples, sel.kept, w)
            current = fold_scaling(current, site, sel.kept, w)
        current = prune_layer_pair(current, site, sel.kept)
        if dataset is not None and config.finetune_epochs > 0:
            current, _ = train(
                current,
                dataset,
                TrainConfig(
                    epochs=config.finetune_epochs,
                    lr=config.finetune_lr,
                    batch_size=config.batch_size,
                    momentum=config.momentum,
                    weight_decay=config.weight_decay,
                    seed=_derived_seed(seed, "finetune", idx),
                ),
            )
    report.sites.append(
        SitePruneRecord(
            layer=site.layer,
            next_layer=site.next_layer,
            rate=rate,
            channels_before=sel.num_channels,
            channels_kept=len(sel.kept),
            objective=objective,
            recon_plain=recon_plain,
            recon_scaled=recon_scaled,
            params_before=params_before,
            params_after=count_params(current).total_params,
            flops_before=flops_before,
            flops_after=count_flops(current).total_flops,
        )
    )
    return current


def default_vgg_schedule(rate: float = 0.5) -> list[tuple[str, float]]:
    """The standard acceleration schedule: conv1_1 through conv4_3."""
    names = [f"conv{s}_{i}" for s, reps in ((1, 2), (2, 2), (3, 3), (4, 3)) for i in range(1, reps + 1)]
    return [(name, rate) for name in names]
