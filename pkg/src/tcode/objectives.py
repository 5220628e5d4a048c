"""Training losses with exact gradients, plus PSNR/DSSIM image metrics.

All losses are pure functions returning (value, gradient). Photometric,
distortion, and opacity terms average over rays; the density entropy
averages over samples, keeping every magnitude batch-size-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

OPACITY_CLAMP = 1e-6
RHO_CLAMP = 1e-6
SIGMA_CLIP = 10.0


@dataclass
class LossWeights:
    """Fixed blend of the four terms; distortion switches on mid-run."""

    photo: float = 1.0
    distortion: float = 0.0005
    opacity: float = 0.005
    sigma_entropy: float = 0.005
    distortion_start_step: int = 0

    def __post_init__(self):
        if min(self.photo, self.distortion, self.opacity,
               self.sigma_entropy) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    photo: float
    distortion: float
    opacity: float
    sigma_entropy: float
    total: float


def photometric_loss(pred, target):
    """Mean over rays of the squared L2 color error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("need matching (n, 3) color batches")
    n = pred.shape[0]
    if n == 0:
        raise ValueError("empty ray batch")
    diff = pred - target
    loss = float((diff * diff).sum() / n)
    return loss, 2.0 * diff / n


def _segment_prefix(values, ray_index, ptr):
    """Inclusive per-ray prefix sums of a flat CSR array."""
    cs = np.cumsum(values)
    m = values.shape[0]
    starts = np.minimum(ptr[:-1], max(m - 1, 0))
    counts = np.diff(ptr)
    base = np.repeat((cs - values)[starts] if m else np.zeros(len(counts)),
                     counts)
    return cs - base


def distortion_loss(weights, s_lo, s_hi, ray_index, n_rays):
    """Spread penalty over each ray's weight distribution, batch-averaged.

    Per ray: sum_{i,j} w_i w_j |mid_i - mid_j| + (1/3) sum_i w_i^2 width_i,
    evaluated in O(n) using prefix sums over the sorted midpoints. Returns
    the batch mean and its gradient with respect to the weights.
    """
    w = np.asarray(weights, dtype=np.float64)
    lo = np.asarray(s_lo, dtype=np.float64)
    hi = np.asarray(s_hi, dtype=np.float64)
    ray_index = np.asarray(ray_index)
    if not (w.shape == lo.shape == hi.shape == ray_index.shape):
        raise ValueError("misaligned distortion inputs")
    if n_rays < 1:
        raise ValueError("need at least one ray")
    mid = 0.5 * (lo + hi)
    width = hi - lo

    counts = np.bincount(ray_index, minlength=n_rays)
    ptr = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])

    pw = _segment_prefix(w, ray_index, ptr)            # sum_{j<=i} w_j
    pwm = _segment_prefix(w * mid, ray_index, ptr)     # sum_{j<=i} w_j mid_j
    tot_w = np.repeat(pw[np.maximum(ptr[1:] - 1, 0)] if len(w) else
                      np.zeros(n_rays), counts)
    tot_wm = np.repeat(pwm[np.maximum(ptr[1:] - 1, 0)] if len(w) else
                       np.zeros(n_rays), counts)
    before_w, before_wm = pw - w, pwm - w * mid
    after_w, after_wm = tot_w - pw, tot_wm - pwm

    pair_terms = w * (mid * before_w - before_wm)
    self_terms = w * w * width / 3.0
    loss = float((2.0 * pair_terms + self_terms).sum() / n_rays)

    d_w = (2.0 * ((mid * before_w - before_wm) + (after_wm - mid * after_w))
           + 2.0 * w * width / 3.0) / n_rays
    return loss, d_w


def opacity_entropy(opacity):
    """Mean per-ray entropy pushing accumulated opacity toward 0 or 1."""
    o = np.asarray(opacity, dtype=np.float64)
    n = max(o.shape[0], 1)
    oc = np.clip(o, OPACITY_CLAMP, 1.0)
    loss = float((-oc * np.log(oc)).sum() / n)
    inside = (o > OPACITY_CLAMP) & (o <= 1.0)
    grad = np.where(inside, -(np.log(oc) + 1.0), 0.0) / n
    return loss, grad


def sigma_binary_entropy(sigma):
    """Mean binary entropy of density mapped through clip(sigma,0,10)/10."""
    s = np.asarray(sigma, dtype=np.float64)
    n = max(s.shape[0], 1)
    rho = np.clip(s, 0.0, SIGMA_CLIP) / SIGMA_CLIP
    rho_c = np.clip(rho, RHO_CLAMP, 1.0 - RHO_CLAMP)
    loss = float((-rho * np.log(rho_c)
                  - (1.0 - rho) * np.log1p(-rho_c)).sum() / n)
    inside = (s > 0.0) & (s < SIGMA_CLIP)
    grad = np.where(inside, np.log1p(-rho_c) - np.log(rho_c), 0.0)
    grad = grad / (SIGMA_CLIP * n)
    return loss, grad


def loss_breakdown(step, weights: LossWeights, pred, target, render_weights,
                   s_lo, s_hi, ray_index, n_rays, opacity, sigma):
    """Evaluate every term at one step and weight-blend the gradients.

    Returns the breakdown plus gradients (d_pred, d_render_weights,
    d_opacity, d_sigma) already scaled by the blend weights and gating.
    """
    photo, d_pred = photometric_loss(pred, target)
    gate = step >= weights.distortion_start_step
    if gate and weights.distortion > 0:
        dist, d_w = distortion_loss(render_weights, s_lo, s_hi, ray_index,
                                    n_rays)
    else:
        dist, d_w = 0.0, np.zeros_like(np.asarray(render_weights, np.float64))
    opac, d_o = opacity_entropy(opacity)
    sent, d_s = sigma_binary_entropy(sigma)
    total = (weights.photo * photo + weights.distortion * (dist if gate else 0)
             + weights.opacity * opac + weights.sigma_entropy * sent)
    breakdown = LossBreakdown(photo=photo, distortion=dist if gate else 0.0,
                              opacity=opac, sigma_entropy=sent, total=total)
    grads = {
        "d_pred": weights.photo * d_pred,
        "d_render_weights": weights.distortion * d_w,
        "d_opacity": weights.opacity * d_o,
        "d_sigma": weights.sigma_entropy * d_s,
    }
    return breakdown, grads


def psnr(a, b, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(-10.0 * np.log10(mse), cap)


def _gaussian_window(win: int = 11, sigma: float = 1.5):
    half = win // 2
    g = np.exp(-((np.arange(win) - half) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _windowed_mean(img, g):
    # separable valid-mode convolution with the normalized Gaussian
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, win: int = 11,
         sigma: float = 1.5) -> float:
    """Mean windowed structural similarity over valid pixels and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < win or a.shape[1] < win:
        raise ValueError(f"images must be at least {win}x{win}")
    g = _gaussian_window(win, sigma)
    c1, c2 = k1 * k1, k2 * k2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _windowed_mean(x, g), _windowed_mean(y, g)
        vx = _windowed_mean(x * x, g) - mx * mx
        vy = _windowed_mean(y * y, g) - my * my
        cov = _windowed_mean(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def dssim(a, b) -> float:
    """Structural dissimilarity, (1 - SSIM) / 2."""
    return 0.5 * (1.0 - ssim(a, b))
