"""Seeded sampling utilities shared by the trainer and the eval protocols."""
from __future__ import annotations

from typing import Sequence

import numpy as np


class SamplingError(Exception):
    pass


def sample_excluding(n_total: int, excluded_rows: Sequence[int], n_draw: int, rng) -> np.ndarray:
    """Uniform sample (no replacement) of indices in [0, n_total) outside ``excluded_rows``.

    Draws order statistics over the eligible count and shifts them past the
    excluded positions, so the eligible set is never materialized.
    """
    excluded = sorted(excluded_rows)
    n_eligible = n_total - len(excluded)
    if n_draw > n_eligible:
        raise SamplingError(f"candidate pool of {n_eligible} smaller than requested {n_draw}")
    draws = rng.choice(n_eligible, size=n_draw, replace=False, shuffle=False)
    out = np.empty(n_draw, dtype=np.intp)
    for i, j in enumerate(draws):
        idx = int(j)
        for p in excluded:
            if p <= idx:
                idx += 1
            else:
                break
        out[i] = idx
    return out
