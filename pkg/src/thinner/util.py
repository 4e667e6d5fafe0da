"""Small shared helpers: seeded sub-streams, rounding, CSV output."""

from __future__ import annotations

import csv
import zlib

import numpy as np


def subseed(root_seed: int, *names) -> np.random.SeedSequence:
    """Derive a named child seed from a root seed.

    Stream names (strings or ints) are hashed into the spawn key, so every
    (root_seed, names...) pair maps to a fixed, platform-independent stream.
    """
    key = tuple(
        zlib.crc32(n.encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF
        for n in names
    )
    return np.random.SeedSequence(entropy=root_seed, spawn_key=key)


def rng_for(root_seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(subseed(root_seed, *names))


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero."""
    if x >= 0:
        return int(np.floor(x + 0.5))
    return int(np.ceil(x - 0.5))


def format_cell(value) -> str:
    """Stable, locale-free CSV cell formatting."""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    """Write rows with a header row, '.' decimals, comma delimiter."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
