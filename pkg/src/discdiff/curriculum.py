"""Entropy-ranked curriculum sampling.

Slices are ordered by the Shannon entropy of their ground-truth target.
For the first M iterations batches are drawn by sampling entropy targets
from a normal distribution whose mean ramps linearly from the lowest to
the highest entropy, each target mapped to the slice with the nearest
entropy; afterwards sampling is uniform. Draws are a pure function of
(seed, iteration).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def shannon_entropy(image, n_bins: int = 256) -> float:
    """Histogram entropy in bits over equal-width bins spanning the
    image's own [min, max] range (a constant image has zero entropy)."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("cannot compute the entropy of an empty image")
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    lo, hi = float(image.min()), float(image.max())
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(image, bins=n_bins, range=(lo, hi))
    p = counts[counts > 0] / image.size
    return float(-(p * np.log2(p)).sum())


@dataclass(frozen=True)
class CurriculumConfig:
    M: int
    N: int
    sigma: float
    seed: int

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("curriculum horizon M must be >= 0")
        if self.N < 1:
            raise ValueError("batch size N must be >= 1")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")


class EntropyIndex:
    """Slices sorted ascending by (entropy, slice_id)."""

    def __init__(self, pairs):
        entries = sorted(pairs, key=lambda e: (e[1], e[0]))
        if not entries:
            raise ValueError("entropy index is empty")
        self.entries = [(sid, float(e)) for sid, e in entries]
        self._ids = [sid for sid, _ in self.entries]
        self._entropies = np.array([e for _, e in self.entries])

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def e_min(self) -> float:
        return float(self._entropies[0])

    @property
    def e_max(self) -> float:
        return float(self._entropies[-1])

    @property
    def entropies(self) -> np.ndarray:
        return self._entropies

    @property
    def slice_ids(self) -> list[str]:
        return self._ids

    def entropy_of(self, slice_id: str) -> float:
        return dict(self.entries)[slice_id]


def build_entropy_index(slices, n_bins: int = 256) -> EntropyIndex:
    """Index (slice_id, hr_grid) pairs by the entropy of the target grid."""
    pairs = [(sid, shannon_entropy(grid, n_bins)) for sid, grid in slices]
    return EntropyIndex(pairs)


def index_from_manifest(manifest) -> EntropyIndex:
    """Index the manifest's train split from its stored entropy values."""
    records = manifest.split_records("train")
    return EntropyIndex([(r.slice_id, r.entropy_bits) for r in records])


def curriculum_mu(iteration: int, M: int, e_min: float, e_max: float) -> float:
    """Target-entropy mean: a linear ramp from e_min to e_max over the
    first M iterations, constant afterwards (e_max immediately if M = 0)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if M <= 0:
        return e_max
    frac = min(iteration / M, 1.0)
    return e_min + (e_max - e_min) * frac


def nearest_entropy_ids(index: EntropyIndex, targets) -> list[str]:
    """Map each entropy target to the slice with the nearest entropy;
    exact ties resolve to the lowest slice_id among the tied slices."""
    ents = index.entropies
    ids = index.slice_ids
    out = []
    for u in targets:
        pos = int(np.searchsorted(ents, u))
        left = max(pos - 1, 0)
        right = min(pos, len(ents) - 1)
        d_left = abs(ents[left] - u)
        d_right = abs(ents[right] - u)
        if d_left < d_right:
            candidates = [left]
        elif d_right < d_left:
            candidates = [right]
        else:
            candidates = [left, right]
        # Expand to every entry at the winning entropy value(s), then take
        # the lowest slice_id.
        pool = []
        for c in candidates:
            value = ents[c]
            first = int(np.searchsorted(ents, value, side="left"))
            last = int(np.searchsorted(ents, value, side="right"))
            pool.extend(ids[first:last])
        out.append(min(pool))
    return out


def sample_entropy_targeted(
    index: EntropyIndex,
    mu: float,
    sigma: float,
    n: int,
    rng: np.random.Generator,
) -> list[str]:
    """Draw n entropy targets from N(mu, sigma^2), clip to the index range,
    and map each to the nearest-entropy slice (ties to lower slice_id)."""
    targets = rng.normal(mu, sigma, n).clip(index.e_min, index.e_max)
    return nearest_entropy_ids(index, targets)


def sample_batch_indices(
    index: EntropyIndex,
    iteration: int,
    config: CurriculumConfig,
    rng: np.random.Generator | None = None,
) -> list[str]:
    """One batch of slice_ids, with replacement.

    Entropy-targeted for iteration < M, uniform afterwards. With the
    default generator the draw depends only on (config.seed, iteration),
    so batch order is reproducible and prefetch-safe.
    """
    if rng is None:
        rng = np.random.default_rng([config.seed, iteration])
    if iteration < config.M:
        mu = curriculum_mu(iteration, config.M, index.e_min, index.e_max)
        return sample_entropy_targeted(index, mu, config.sigma, config.N, rng)
    picks = rng.integers(0, len(index), config.N)
    return [index.slice_ids[i] for i in picks]


def default_sigma(e_min: float, e_max: float) -> float:
    """Spread of the entropy-target distribution: one sixth of the range
    (floored to keep it positive for a degenerate single-entropy index)."""
    return max((e_max - e_min) / 6.0, 1e-6)
