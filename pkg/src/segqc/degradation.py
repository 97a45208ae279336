"""Rician noise injection for intensity volumes.

Noise level in dB maps to a Gaussian std through
``sigma = 0.01 * RMS(image) * 10 ** (level_db / 20)``.  This convention is a
local choice: only the ordering of levels is meaningful, not absolute values.

Random numbers come from numpy's Philox4x64 counter generator keyed by the
seed.  Voxel ``v`` (Fortran flat index, x fastest) consumes uniforms
``2v`` and ``2v + 1`` of the stream, which a Box-Muller transform turns into
the two Gaussians of the Rician model.  Any chunk of voxels can therefore be
generated independently (``Philox.advance``) with identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import IntensityVolume

DEFAULT_LEVELS_DB = (3.0, 5.0, 7.0, 9.0)
CLEAN = -math.inf
REF_FRACTION = 0.01


@dataclass(frozen=True)
class NoiseSpec:
    level_db: float
    seed: int = 0

    def sigma(self, img: IntensityVolume) -> float:
        if self.level_db == CLEAN:
            return 0.0
        if math.isnan(self.level_db) or self.level_db == math.inf:
            raise ValueError(f"level_db must be finite or -inf, got {self.level_db}")
        rms = math.sqrt(float(np.mean(np.square(img.data, dtype=np.float64))))
        return REF_FRACTION * rms * 10.0 ** (self.level_db / 20.0)


def _gaussian_pairs(seed: int, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian pairs for voxels ``start .. start + count - 1``.  ``start`` must be even."""
    if start % 2:
        raise ValueError("chunks must start at an even voxel index")
    bitgen = np.random.Philox(key=seed & (2**128 - 1))
    # each Philox block yields four doubles, i.e. two voxels
    if start:
        bitgen.advance(start // 2)
    u = np.random.Generator(bitgen).random(2 * count)
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * math.pi * u2
    return radius * np.cos(angle), radius * np.sin(angle)


def standard_noise(seed: int, n_voxels: int, chunk: int = 1 << 20) -> tuple[np.ndarray, np.ndarray]:
    """Unit-variance Gaussian pairs for ``n_voxels`` voxels, generated chunk-wise."""
    chunk += chunk % 2
    g1 = np.empty(n_voxels)
    g2 = np.empty(n_voxels)
    for start in range(0, n_voxels, chunk):
        stop = min(start + chunk, n_voxels)
        g1[start:stop], g2[start:stop] = _gaussian_pairs(seed, start, stop - start)
    return g1, g2


def rician_corrupt(img: IntensityVolume, spec: NoiseSpec) -> IntensityVolume:
    """``sqrt((x + sigma*g1)**2 + (sigma*g2)**2)`` per voxel."""
    sigma = spec.sigma(img)
    if sigma == 0.0:
        return img
    x = img.data.ravel(order="F").astype(np.float64)
    g1, g2 = standard_noise(spec.seed, x.size)
    out = np.hypot(x + sigma * g1, sigma * g2)
    return IntensityVolume(out.reshape(img.dims, order="F"))
