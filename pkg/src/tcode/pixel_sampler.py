"""Training-pixel selection blending motion-weighted and uniform draws.

Pixels that differ from their camera's temporal mean image get weight
through a robust saturating function of the color difference, so dynamic
regions are revisited more often. A schedule raises the uniform fraction
as training progresses. Weighted draws use an alias table built once
(weights are static after the cache is built) for O(1) sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_GAMMA = 0.02
DEFAULT_MILESTONES = ((0.0, 0.5), (0.4, 0.75), (0.6, 0.875))


def geman_mclure(x, gamma: float):
    """Robust saturating error x^2 / (x^2 + gamma^2), elementwise."""
    x2 = np.square(np.asarray(x, dtype=np.float64))
    return x2 / (x2 + gamma * gamma)


def compute_weights(frames, gamma: float = DEFAULT_GAMMA):
    """Per-frame pixel weights from the difference to the temporal mean.

    frames: (T, H, W, 3) video of one camera. Returns (mean_image, weights)
    with weights (T, H, W) = channel-mean of the robust difference.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.shape[0] < 1:
        raise ValueError("need a non-empty (T, H, W, 3) frame stack")
    mean = frames.mean(axis=0)
    weights = geman_mclure(frames - mean, gamma).mean(axis=-1)
    return mean, weights


@dataclass(frozen=True)
class RatioSchedule:
    """Piecewise-constant uniform-draw fraction keyed to run progress."""

    milestones: tuple = DEFAULT_MILESTONES

    def __post_init__(self):
        fracs = [m[0] for m in self.milestones]
        ratios = [m[1] for m in self.milestones]
        if not self.milestones or fracs[0] != 0.0:
            raise ValueError("schedule must start at fraction 0")
        if any(b < a for a, b in zip(fracs, fracs[1:])):
            raise ValueError("milestone fractions must be non-decreasing")
        if any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ValueError("ratios must lie in [0, 1]")
        if any(b < a for a, b in zip(ratios, ratios[1:])):
            raise ValueError("ratios must be non-decreasing")

    def ratio(self, step: int, total_steps: int) -> float:
        progress = step / max(total_steps, 1)
        current = self.milestones[0][1]
        for frac, r in self.milestones:
            if progress >= frac:
                current = r
        return current


class AliasTable:
    """Vose alias method: O(n) build, O(1) draws from fixed weights."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.size == 0 or (w < 0).any():
            raise ValueError("weights must be a non-empty non-negative array")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        n = w.size
        scaled = w * (n / total)
        self.prob = np.ones(n)
        self.alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, l = small.pop(), large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = l
            scaled[l] = (scaled[l] + scaled[s]) - 1.0
            (small if scaled[l] < 1.0 else large).append(l)
        # leftovers are 1.0 up to float round-off

    def draw(self, rng: np.random.Generator, size: int):
        i = rng.integers(0, len(self.prob), size)
        u = rng.random(size)
        return np.where(u < self.prob[i], i, self.alias[i]).astype(np.int64)


class PixelSampler:
    """Global pixel-id sampler over every (camera, frame, row, col).

    videos: list of (T_c, H_c, W_c, 3) arrays, one per camera. All frames
    share one weighted distribution; all-static footage falls back to
    uniform sampling.
    """

    def __init__(self, videos, gamma: float = DEFAULT_GAMMA,
                 schedule: RatioSchedule | None = None):
        if not videos:
            raise ValueError("need at least one camera video")
        self.schedule = RatioSchedule() if schedule is None else schedule
        self.means = []
        self.weights = []
        self.shapes = []
        flats = []
        for vid in videos:
            mean, w = compute_weights(vid, gamma)
            self.means.append(mean)
            self.weights.append(w)
            self.shapes.append(w.shape)
            flats.append(w.ravel())
        sizes = np.array([f.size for f in flats], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.total_pixels = int(self.offsets[-1])
        all_w = np.concatenate(flats)
        self.alias = AliasTable(all_w) if all_w.sum() > 0 else None

    def _decode(self, gid):
        cam = np.searchsorted(self.offsets, gid, side="right") - 1
        rem = gid - self.offsets[cam]
        out = np.empty((len(gid), 4), dtype=np.int64)
        out[:, 0] = cam
        for c in range(len(self.shapes)):
            sel = cam == c
            if not sel.any():
                continue
            t, h, w = self.shapes[c]
            r = rem[sel]
            out[sel, 1] = r // (h * w)
            out[sel, 2] = (r % (h * w)) // w
            out[sel, 3] = r % w
        return out

    def draw(self, step: int, total_steps: int, batch_size: int,
             rng: np.random.Generator):
        """Sample batch_size pixel ids as (camera, frame, row, col) rows."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        u = self.schedule.ratio(step, total_steps)
        n_uniform = math.ceil(u * batch_size)
        if self.alias is None:
            n_uniform = batch_size
        n_weighted = batch_size - n_uniform
        ids = [rng.integers(0, self.total_pixels, n_uniform)]
        if n_weighted > 0:
            ids.append(self.alias.draw(rng, n_weighted))
        return self._decode(np.concatenate(ids))
