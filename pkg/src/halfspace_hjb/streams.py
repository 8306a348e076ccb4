"""Seeded random streams for Monte Carlo over paths.

Paths are grouped in fixed-size blocks and every block owns an independent
Philox stream keyed by ``(seed, block_index)``. A path's random numbers depend
only on the seed and its index, so any split of the blocks across workers
reproduces the same numbers bit for bit.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

BLOCK_SIZE = 16384


def block_generator(seed: int, block_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block_index),))
    return np.random.Generator(np.random.Philox(ss))


def path_blocks(seed: int, n_paths: int) -> Iterator[tuple[slice, np.random.Generator]]:
    """Yield ``(slice_of_paths, generator)`` pairs covering ``range(n_paths)``."""
    n_blocks = -(-int(n_paths) // BLOCK_SIZE)
    for b in range(n_blocks):
        lo = b * BLOCK_SIZE
        hi = min(lo + BLOCK_SIZE, n_paths)
        yield slice(lo, hi), block_generator(seed, b)


def mean_and_stderr(samples: np.ndarray) -> tuple[float, float]:
    """Order-independent mean and standard error (exactly rounded sums)."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        return 0.0, 0.0
    mean = math.fsum(x) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((x - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)
