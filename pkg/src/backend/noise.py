"""
Counter-based Gaussian noise for reproducible, scheduling-independent runs.

Every random draw in memsde comes from a Philox generator keyed by
(run seed, trajectory index) with the counter positioned at (block, lane).
Asking for the same (seed, index, step) always gives the same number, no
matter which worker asks or in which order.
"""
import logging
from typing import Optional

import numpy as np

from src.errors import ParameterError

logger = logging.getLogger("Noise")

# --- Constants ---
# Wiener increments are generated in blocks of this many steps.
NOISE_BLOCK_STEPS = 1024
SEED_MASK = (1 << 64) - 1

# Counter lanes keep independent uses of one (seed, index) key apart.
LANE_WIENER = 0
LANE_UNIFORM_TIME = 1
LANE_SAMPLER = 2
LANE_PROJECTION = 3


def keyed_generator(seed: int, index: int = 0, lane: int = 0, block: int = 0) -> np.random.Generator:
    """Generator for the stream (seed, index) at counter position (block, lane)."""
    if seed < 0 or index < 0:
        raise ParameterError(f"seed and index must be non-negative, got {seed}, {index}")
    key = ((int(seed) & SEED_MASK) << 64) | (int(index) & SEED_MASK)
    bit_generator = np.random.Philox(key=key, counter=[0, int(block), int(lane), 0])
    return np.random.Generator(bit_generator)


class NoiseStream:
    """Wiener increments N(0, dt I_d) for one trajectory, addressable by step index."""

    def __init__(self, seed: int, dimension: int, dt: float, trajectory_index: int = 0):
        if dimension < 1:
            raise ParameterError(f"dimension must be >= 1, got {dimension}")
        if not dt > 0.0:
            raise ParameterError(f"dt must be > 0, got {dt}")
        self.seed = int(seed)
        self.dimension = int(dimension)
        self.dt = float(dt)
        self.trajectory_index = int(trajectory_index)
        self._scale = np.sqrt(self.dt)
        self._cached_block: Optional[int] = None
        self._cached_values: Optional[np.ndarray] = None

    def _block(self, block: int) -> np.ndarray:
        if block != self._cached_block:
            gen = keyed_generator(self.seed, self.trajectory_index, LANE_WIENER, block)
            self._cached_values = gen.standard_normal((NOISE_BLOCK_STEPS, self.dimension))
            self._cached_block = block
        return self._cached_values

    def increments(self, k0: int, k1: int) -> np.ndarray:
        """Increments for steps k0 .. k1 - 1, shape (k1 - k0, d)."""
        if k0 < 0 or k1 < k0:
            raise ParameterError(f"Invalid step range [{k0}, {k1})")
        out = np.empty((k1 - k0, self.dimension))
        k = k0
        while k < k1:
            block, offset = divmod(k, NOISE_BLOCK_STEPS)
            take = min(NOISE_BLOCK_STEPS - offset, k1 - k)
            out[k - k0:k - k0 + take] = self._block(block)[offset:offset + take]
            k += take
        return out * self._scale


def wiener_increments(stream: NoiseStream, k_range: range) -> np.ndarray:
    """Increments for the contiguous step range ``k_range``."""
    if k_range.step != 1:
        raise ParameterError("k_range must be contiguous")
    return stream.increments(k_range.start, k_range.stop)


def aggregate_increments(fine: np.ndarray, factor: int, axis: int = 0) -> np.ndarray:
    """Coarse increments as sums of ``factor`` consecutive fine ones (same Brownian path).

    ``axis`` is the step axis: 0 for (N, d) arrays, 1 for ensembles (n, N, d).
    """
    fine = np.moveaxis(np.asarray(fine, dtype=float), axis, 0)
    if factor < 1 or fine.shape[0] % factor:
        raise ParameterError(f"{fine.shape[0]} fine steps cannot be grouped by {factor}")
    coarse = fine.reshape(fine.shape[0] // factor, factor, *fine.shape[1:]).sum(axis=1)
    return np.moveaxis(coarse, 0, axis)
