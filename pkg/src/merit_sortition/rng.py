from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STREAM_NAMES = ("medians", "lifetimes", "scores", "growth", "tiebreak", "baseline")


@dataclass(frozen=True)
class SimStreams:
    """Independent generators for each random ingredient of one run.

    Merit and random-baseline runs built from the same seed share the
    population streams, so they see the same joiners, medians and lifetimes.
    """

    medians: np.random.Generator
    lifetimes: np.random.Generator
    scores: np.random.Generator
    growth: np.random.Generator
    tiebreak: np.random.Generator
    baseline: np.random.Generator


def make_streams(seed: int, *key: int) -> SimStreams:
    """Expand a 64-bit master seed (plus optional integer key) into substreams."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    root = np.random.SeedSequence([int(seed), *map(int, key)])
    children = root.spawn(len(STREAM_NAMES))
    return SimStreams(*(np.random.default_rng(c) for c in children))
