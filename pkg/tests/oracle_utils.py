"""Independent straight-loop reference implementations used as test oracles.

Everything here is deliberately naive: python loops, arbitrary-precision
integer hashing, direct formula transcriptions. These routines share no code
with the package under test.
"""
import itertools
import math

import numpy as np

U64 = 2**64


def oracle_hash(coords, primes, table_size):
    """XOR/mod hash computed with python big integers."""
    h = 0
    for c, p in zip(coords, primes):
        h ^= (int(c) * int(p)) % U64
    return h % table_size


def oracle_encode(point, grid):
    """Straight-loop multi-res interpolation matching MultiResHashGrid.encode."""
    cfg = grid.config
    d, T, F = cfg.dims, cfg.table_size, cfg.feat_per_level
    out = []
    for lvl in range(cfg.levels):
        n_res = int(grid.res[lvl])
        acc = np.zeros(F, np.float64)
        for corner in itertools.product([0, 1], repeat=d):
            wgt = 1.0
            coords = []
            for k in range(d):
                x = float(point[k]) * n_res
                c = min(max(int(math.floor(x)), 0), n_res - 1)
                f = min(max(x - c, 0.0), 1.0)
                bit = corner[k]
                coords.append(c + bit)
                wgt *= f if bit else (1.0 - f)
            if grid.dense[lvl]:
                ix = sum(coords[k] * int(grid.strides[lvl, k]) for k in range(d))
            else:
                ix = oracle_hash(coords, grid.primes, T)
            acc += wgt * grid.tables[lvl, ix].astype(np.float64)
        out.append(acc)
    return np.concatenate(out)


def oracle_mlp(x, weights, biases, hidden_act, out_act):
    """Row-by-row, neuron-by-neuron MLP evaluation."""
    x = np.asarray(x, np.float64)
    ys = []
    for row in x:
        h = row.copy()
        for li, (w, b) in enumerate(zip(weights, biases)):
            nxt = np.zeros(w.shape[1], np.float64)
            for j in range(w.shape[1]):
                s = b[j]
                for i in range(w.shape[0]):
                    s += h[i] * w[i, j]
                nxt[j] = s
            last = li == len(weights) - 1
            if not last:
                if hidden_act == "relu":
                    nxt = np.array([v if v > 0 else 0.0 for v in nxt])
            else:
                if out_act == "sigmoid":
                    nxt = np.array([1.0 / (1.0 + math.exp(-v)) for v in nxt])
                elif out_act == "truncexp":
                    nxt = np.array([math.exp(min(max(v, -15.0), 15.0)) for v in nxt])
            h = nxt
        ys.append(h)
    return np.stack(ys)


def oracle_volume_render(sigma, rgb, delta, background):
    """Sequential transmittance accumulation for one ray."""
    n = len(sigma)
    trans = 1.0
    color = np.zeros(3, np.float64)
    opacity = 0.0
    weights = np.zeros(n, np.float64)
    for i in range(n):
        alpha = 1.0 - math.exp(-float(sigma[i]) * float(delta[i]))
        w = trans * alpha
        weights[i] = w
        color += w * np.asarray(rgb[i], np.float64)
        opacity += w
        trans *= math.exp(-float(sigma[i]) * float(delta[i]))
    color += (1.0 - opacity) * np.asarray(background, np.float64)
    return color, opacity, weights


def oracle_distortion(w, s_lo, s_hi):
    """Brute-force double loop of the two-term spread penalty for one ray."""
    n = len(w)
    mid = [(s_lo[i] + s_hi[i]) / 2.0 for i in range(n)]
    pair = 0.0
    for i in range(n):
        for j in range(n):
            pair += w[i] * w[j] * abs(mid[i] - mid[j])
    self_term = sum(w[i] ** 2 * (s_hi[i] - s_lo[i]) for i in range(n)) / 3.0
    return pair + self_term


def oracle_ssim(a, b, k1=0.01, k2=0.03, sigma=1.5, win=11):
    """Windowed SSIM with an explicit per-window double loop (valid crop)."""
    half = win // 2
    g = np.array(
        [math.exp(-((i - half) ** 2) / (2 * sigma**2)) for i in range(win)], np.float64
    )
    kern = np.outer(g, g)
    kern /= kern.sum()
    c1, c2 = k1**2, k2**2
    h, wdt = a.shape
    vals = []
    for r in range(half, h - half):
        for c in range(half, wdt - half):
            pa = a[r - half : r + half + 1, c - half : c + half + 1].astype(np.float64)
            pb = b[r - half : r + half + 1, c - half : c + half + 1].astype(np.float64)
            mu1 = (kern * pa).sum()
            mu2 = (kern * pb).sum()
            v1 = (kern * pa * pa).sum() - mu1**2
            v2 = (kern * pb * pb).sum() - mu2**2
            cov = (kern * pa * pb).sum() - mu1 * mu2
            vals.append(
                ((2 * mu1 * mu2 + c1) * (2 * cov + c2))
                / ((mu1**2 + mu2**2 + c1) * (v1 + v2 + c2))
            )
    return float(np.mean(vals))


def oracle_adam_scalar(p0, grads, lr, b1, b2, eps, wd, decoupled):
    """Scalar Adam/AdamW trajectory, one update per gradient in grads."""
    p, m, v = float(p0), 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        g = float(g)
        if decoupled:
            p -= lr * wd * p
        else:
            g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= lr * mhat / (math.sqrt(vhat) + eps)
    return p
