"""Channel-subset selection: greedy search, exhaustive oracle, heuristics.

The objective for a removed set T is the squared norm of the per-row sums
of the removed columns, which coincides with the reconstruction error of
the kept set because row sums of the response matrix equal the targets.
The greedy search moves one channel at a time into T, always the one with
the smallest resulting objective; ties break to the lowest channel index
so results are independent of evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import SelectionError, SiteError
from .graph import ModelGraph, forward
from .model_io import Dataset
from .sampling import SampleSet
from .util import rng_for, round_half_away


@dataclass(frozen=True)
class SelectionResult:
    """Partition of channel ids into kept (ascending) and removed
    (removal order); objective_trace holds the objective after each
    greedy removal (empty for methods without a stepwise objective)."""

    kept: tuple[int, ...]
    removed: tuple[int, ...]
    objective_trace: tuple[float, ...]
    rate: float

    def __post_init__(self):
        total = sorted(self.kept) + sorted(self.removed)
        if sorted(total) != list(range(len(total))):
            raise SelectionError(
                f"kept {self.kept} and removed {self.removed} do not partition the channel set"
            )

    @property
    def num_channels(self) -> int:
        return len(self.kept) + len(self.removed)

    def to_json(self, path=None) -> str:
        payload = json.dumps(
            {
                "kept": list(self.kept),
                "removed": list(self.removed),
                "objective_trace": list(self.objective_trace),
                "rate": self.rate,
            },
            indent=1,
        )
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(payload)
        return payload


def kept_count(num_channels: int, rate: float) -> int:
    """Channels to keep: round(C * rate), halves away from zero, >= 1."""
    if not 0 < rate <= 1:
        raise SelectionError(f"rate must be in (0, 1], got {rate}")
    return min(num_channels, max(1, round_half_away(num_channels * rate)))


@dataclass
class GreedyState:
    """Cached per-row partial sums of the removed columns."""

    responses: np.ndarray
    partial: np.ndarray
    removed: tuple[int, ...] = ()

    @classmethod
    def start(cls, samples: SampleSet) -> "GreedyState":
        return cls(
            responses=samples.responses,
            partial=np.zeros(samples.num_rows, dtype=np.float64),
        )

    def advance(self, channel: int) -> "GreedyState":
        if channel in self.removed:
            raise SelectionError(f"channel {channel} already removed")
        return GreedyState(
            responses=self.responses,
            partial=self.partial + self.responses[:, channel],
            removed=self.removed + (channel,),
        )


def incremental_objective(state: GreedyState, candidate: int) -> float:
    """Objective after additionally removing ``candidate``; O(m)."""
    if candidate in state.removed:
        raise SelectionError(f"channel {candidate} already removed")
    if not 0 <= candidate < state.responses.shape[1]:
        raise SelectionError(f"candidate {candidate} out of range")
    return float(np.sum((state.partial + state.responses[:, candidate]) ** 2))


def greedy_select(samples: SampleSet, rate: float) -> SelectionResult:
    """One-channel-at-a-time removal, each step taking the argmin of the
    removed-set objective over all remaining candidates."""
    x = samples.responses
    m, c = x.shape
    if m < 1 or c < 1:
        raise SelectionError(f"degenerate sample set {x.shape}")
    keep = kept_count(c, rate)
    to_remove = c - keep

    partial = np.zeros(m, dtype=np.float64)
    colsq = np.sum(x**2, axis=0)
    remaining = np.ones(c, dtype=bool)
    removed: list[int] = []
    trace: list[float] = []
    for _ in range(to_remove):
        # sum((partial + x_c)^2) = sum(partial^2) + 2 <x_c, partial> + sum(x_c^2)
        values = np.sum(partial**2) + 2.0 * (x.T @ partial) + colsq
        values[~remaining] = np.inf
        chosen = int(np.argmin(values))
        removed.append(chosen)
        trace.append(float(values[chosen]))
        partial += x[:, chosen]
        remaining[chosen] = False
    kept = tuple(int(i) for i in np.flatnonzero(remaining))
    return SelectionResult(kept=kept, removed=tuple(removed), objective_trace=tuple(trace), rate=rate)


def removed_objective(samples: SampleSet, removed) -> float:
    """Objective of a removed set, computed from scratch."""
    removed = list(removed)
    if not removed:
        return 0.0
    return float(np.sum(samples.responses[:, removed].sum(axis=1) ** 2))


def brute_force_select(samples: SampleSet, rate: float, max_channels: int = 20) -> SelectionResult:
    """Globally optimal removed set by exhaustive enumeration (C capped)."""
    c = samples.num_channels
    if c > max_channels:
        raise SelectionError(f"brute force limited to C <= {max_channels}, got {c}")
    keep = kept_count(c, rate)
    to_remove = c - keep
    best_obj = np.inf
    best: tuple[int, ...] = ()
    for combo in combinations(range(c), to_remove):
        obj = removed_objective(samples, combo)
        if obj < best_obj:
            best_obj = obj
            best = combo
    kept = tuple(i for i in range(c) if i not in set(best))
    return SelectionResult(
        kept=kept,
        removed=best,
        objective_trace=(float(best_obj),) if to_remove else (),
        rate=rate,
    )


# ---------------------------------------------------------------------------
# comparison criteria


def criterion_weight_sum(model: ModelGraph, layer_id: str) -> np.ndarray:
    """Absolute kernel-weight sum per filter (importance: higher is kept)."""
    spec = model.layer(layer_id)
    if spec.kind != "conv":
        raise SelectionError(f"layer {layer_id!r} is {spec.kind}, not conv")
    weights = model.blobs[layer_id]["weights"]
    return np.abs(weights.astype(np.float64)).sum(axis=(1, 2, 3))


def criterion_apoz(
    model: ModelGraph, dataset: Dataset, layer_id: str, batch_size: int = 32
) -> np.ndarray:
    """Average fraction of exact zeros per channel after the ReLU that
    follows the layer (importance: higher means more removable)."""
    spec = model.layer(layer_id)
    if spec.kind != "conv":
        raise SelectionError(f"layer {layer_id!r} is {spec.kind}, not conv")
    relu_id = _relu_after(model, layer_id)
    channels = model.blobs[layer_id]["weights"].shape[0]
    zeros = np.zeros(channels, dtype=np.int64)
    total = 0
    for lo in range(0, len(dataset), batch_size):
        batch = dataset.images[lo : lo + batch_size]
        _, captured = forward(model, batch, capture=(relu_id,))
        act = captured[relu_id]
        zeros += np.count_nonzero(act == 0.0, axis=(0, 2, 3))
        total += act.shape[0] * act.shape[2] * act.shape[3]
    return zeros / float(total)


def _relu_after(model: ModelGraph, layer_id: str) -> str:
    from .graph import consumers

    table = consumers(model)
    current = layer_id
    while True:
        nexts = table[current]
        if len(nexts) != 1:
            raise SiteError(f"no unique ReLU after {layer_id!r}: {current!r} feeds {nexts}")
        nxt = model.layer(nexts[0])
        if nxt.kind == "relu":
            return nxt.id
        if nxt.kind != "bn_affine":
            raise SiteError(f"no ReLU after {layer_id!r}: walk reached {nxt.id!r} ({nxt.kind})")
        current = nxt.id


def criterion_random(num_channels: int, rate: float, seed: int) -> SelectionResult:
    """Uniform random kept subset of the required size."""
    keep = kept_count(num_channels, rate)
    rng = rng_for(seed, "selection")
    kept = np.sort(rng.choice(num_channels, size=keep, replace=False))
    removed = np.setdiff1d(np.arange(num_channels), kept)
    return SelectionResult(
        kept=tuple(int(i) for i in kept),
        removed=tuple(int(i) for i in removed),
        objective_trace=(),
        rate=rate,
    )


def select_by_scores(scores: np.ndarray, rate: float, keep_high: bool = True) -> SelectionResult:
    """Keep the round(C*rate) best-scoring channels.

    keep_high=True keeps the highest scores (weight-sum style); False keeps
    the lowest (zero-fraction style). Removal order is worst first. Ties
    break toward keeping the lower channel index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.shape[0]
    keep = kept_count(c, rate)
    # stable sort by (score, index); best-to-worst for keeping
    order = np.argsort(scores, kind="stable")
    if keep_high:
        order = order[::-1]
        # reversed stable sort prefers higher indices among ties; re-sort
        # equal-score runs by index so the lower index is kept first
        order = _stable_ties(order, scores)
    kept = np.sort(order[:keep])
    removed = order[keep:][::-1]  # worst first
    return SelectionResult(
        kept=tuple(int(i) for i in kept),
        removed=tuple(int(i) for i in removed),
        objective_trace=(),
        rate=rate,
    )


def _stable_ties(order: np.ndarray, scores: np.ndarray) -> np.ndarray:
    out = order.copy()
    start = 0
    while start < len(out):
        end = start + 1
        while end < len(out) and scores[out[end]] == scores[out[start]]:
            end += 1
        out[start:end] = np.sort(out[start:end])
        start = end
    return out
