"""Low-level grid kernels with two interchangeable backends.

The numba backend runs serial jitted loops (fast on one core, deterministic,
compiled once and cached on disk). The numpy backend is a vectorized fallback
with identical semantics. Select with TCODE_KERNELS=auto|numba|numpy.

Layout shared by both backends:
  - tables:  (L, T, F) feature tables, one per resolution level
  - stencil: idx (L, n, 2^d) int32 table rows, w (L, n, 2^d) weights
  - out:     (n, L*F) concatenated per-level interpolations
  - grads accumulate into a persistent (L, T, F) buffer; a visited bitmap and
    a touched-row list let the optimizer update only rows hit this step.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore
        def wrap(fn):
            return fn

        return wrap


def backend() -> str:
    choice = os.environ.get("TCODE_KERNELS", "auto")
    if choice == "auto":
        return "numba" if HAVE_NUMBA else "numpy"
    if choice == "numba" and not HAVE_NUMBA:
        raise RuntimeError("TCODE_KERNELS=numba but numba is not importable")
    if choice not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {choice!r}")
    return choice


def corner_bits(d: int) -> np.ndarray:
    """(2^d, d) matrix of corner offset bits; bit k of corner c is (c >> k) & 1."""
    c = np.arange(1 << d)[:, None]
    return ((c >> np.arange(d)[None, :]) & 1).astype(np.int64)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def _forward_nb(points, tables, res, dense, strides, primes, out, idx_out,
                w_out, keep_stencil):
    n, d = points.shape
    L, T, F = tables.shape
    C = 1 << d
    mask = np.uint64(T - 1)
    fr = np.empty(d, points.dtype)
    hlo = np.empty(d, np.uint64)
    hhi = np.empty(d, np.uint64)
    slo = np.empty(d, np.int64)
    shi = np.empty(d, np.int64)
    one = points.dtype.type(1.0)
    zero = points.dtype.type(0.0)
    for l in range(L):
        N = res[l]
        dn = dense[l]
        base = l * F
        for i in range(n):
            for k in range(d):
                x = points[i, k] * N
                c = np.int64(np.floor(x))
                if c < 0:
                    c = 0
                if c > N - 1:
                    c = N - 1
                f = x - c
                if f < zero:
                    f = zero
                if f > one:
                    f = one
                fr[k] = f
                if dn:
                    slo[k] = c * strides[l, k]
                    shi[k] = (c + 1) * strides[l, k]
                else:
                    hlo[k] = np.uint64(c) * primes[k]
                    hhi[k] = np.uint64(c + 1) * primes[k]
            for c in range(C):
                wgt = one
                if dn:
                    ixs = np.int64(0)
                    for k in range(d):
                        if (c >> k) & 1:
                            ixs += shi[k]
                            wgt *= fr[k]
                        else:
                            ixs += slo[k]
                            wgt *= one - fr[k]
                    ix = ixs
                else:
                    h = np.uint64(0)
                    for k in range(d):
                        if (c >> k) & 1:
                            h ^= hhi[k]
                            wgt *= fr[k]
                        else:
                            h ^= hlo[k]
                            wgt *= one - fr[k]
                    ix = np.int64(h & mask)
                if keep_stencil:
                    idx_out[l, i, c] = ix
                    w_out[l, i, c] = wgt
                for f in range(F):
                    out[i, base + f] += wgt * tables[l, ix, f]


@njit(cache=True, fastmath=True)
def _backward_nb(idx, w, upstream, grad, visited, touched, tcount):
    L, n, C = idx.shape
    T = grad.shape[1]
    F = grad.shape[2]
    cnt = tcount[0]
    for l in range(L):
        base = l * F
        for i in range(n):
            for c in range(C):
                ix = idx[l, i, c]
                wgt = w[l, i, c]
                for f in range(F):
                    grad[l, ix, f] += wgt * upstream[i, base + f]
                key = l * T + ix
                if visited[key] == 0:
                    visited[key] = 1
                    touched[cnt] = key
                    cnt += 1
    tcount[0] = cnt


@njit(cache=True)
def _rows_finite_nb(g, rows):
    F = g.shape[1]
    for k in range(rows.shape[0]):
        r = rows[k]
        for f in range(F):
            if not np.isfinite(g[r, f]):
                return False
    return True


@njit(cache=True)
def _sparse_adam_nb(p, g, m, v, visited, rows, lr, b1, b2, eps, decay, bc1,
                    bc2, decoupled):
    F = p.shape[1]
    for k in range(rows.shape[0]):
        r = rows[k]
        for f in range(F):
            pv = np.float64(p[r, f])
            gv = np.float64(g[r, f])
            g[r, f] = 0.0
            if decoupled:
                pv -= lr * decay * pv
            else:
                gv += decay * pv
            mv = b1 * np.float64(m[r, f]) + (1.0 - b1) * gv
            vv = b2 * np.float64(v[r, f]) + (1.0 - b2) * gv * gv
            m[r, f] = mv
            v[r, f] = vv
            p[r, f] = pv - lr * (mv / bc1) / (np.sqrt(vv / bc2) + eps)
        visited[r] = 0


@njit(cache=True, fastmath=True)
def _backward_points_nb(points, tables, res, idx, upstream, d_points):
    n, d = points.shape
    L, T, F = tables.shape
    C = 1 << d
    fr = np.empty(d, np.float64)
    act = np.empty(d, np.float64)
    for l in range(L):
        N = res[l]
        base = l * F
        for i in range(n):
            for k in range(d):
                x = points[i, k] * N
                c = np.int64(np.floor(x))
                a = 1.0
                if c < 0:
                    c = 0
                if c > N - 1:
                    c = N - 1
                f = x - c
                if f < 0.0:
                    f = 0.0
                    a = 0.0
                if f > 1.0:
                    f = 1.0
                    a = 0.0
                fr[k] = f
                act[k] = a
            for c in range(C):
                ix = idx[l, i, c]
                g = 0.0
                for f in range(F):
                    g += tables[l, ix, f] * upstream[i, base + f]
                for k in range(d):
                    if act[k] == 0.0:
                        continue
                    prod = 1.0
                    for j in range(d):
                        if j == k:
                            continue
                        if (c >> j) & 1:
                            prod *= fr[j]
                        else:
                            prod *= 1.0 - fr[j]
                    if (c >> k) & 1:
                        d_points[i, k] += g * prod * N
                    else:
                        d_points[i, k] -= g * prod * N


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _forward_np(points, tables, res, dense, strides, primes, out, idx_out,
                w_out, keep_stencil):
    n, d = points.shape
    L, T, F = tables.shape
    dt = tables.dtype
    bits = corner_bits(d)  # (C, d)
    bmask = bits.astype(bool)
    mask = np.uint64(T - 1)
    for l in range(L):
        N = int(res[l])
        x = points * dt.type(N)
        c = np.floor(x).astype(np.int64)
        np.clip(c, 0, N - 1, out=c)
        f = x - c
        np.clip(f, 0, 1, out=f)
        cc = c[None, :, :] + bits[:, None, :]  # (C, n, d)
        if dense[l]:
            ix = (cc * strides[l][None, None, :]).sum(axis=2)
        else:
            h = cc.astype(np.uint64) * primes[None, None, :d]
            ix = (np.bitwise_xor.reduce(h, axis=2) & mask).astype(np.int64)
        wc = np.where(bmask[:, None, :], f[None], 1 - f[None]).prod(axis=2)  # (C, n)
        if keep_stencil:
            idx_out[l] = ix.T.astype(np.int32)
            w_out[l] = wc.T
        feats = tables[l][ix]  # (C, n, F)
        out[:, l * F : (l + 1) * F] = np.einsum("cn,cnf->nf", wc, feats)


def _backward_np(idx, w, upstream, grad, visited, touched, tcount):
    L, n, C = idx.shape
    T = grad.shape[1]
    F = grad.shape[2]
    cnt = int(tcount[0])
    for l in range(L):
        flat = idx[l].ravel().astype(np.int64)
        for f in range(F):
            acc = np.bincount(
                flat, weights=(w[l] * upstream[:, l * F + f][:, None]).ravel(), minlength=T
            )
            grad[l, :, f] += acc.astype(grad.dtype)
        keys = np.unique(flat) + l * T
        fresh = keys[visited[keys] == 0]
        visited[fresh] = 1
        touched[cnt : cnt + len(fresh)] = fresh
        cnt += len(fresh)
    tcount[0] = cnt


def _rows_finite_np(g, rows):
    return bool(np.isfinite(g[rows]).all())


def _sparse_adam_np(p, g, m, v, visited, rows, lr, b1, b2, eps, decay, bc1,
                    bc2, decoupled):
    pv = p[rows].astype(np.float64)
    gv = g[rows].astype(np.float64)
    g[rows] = 0
    if decoupled:
        pv -= lr * decay * pv
    else:
        gv += decay * pv
    mv = b1 * m[rows].astype(np.float64) + (1.0 - b1) * gv
    vv = b2 * v[rows].astype(np.float64) + (1.0 - b2) * gv * gv
    m[rows] = mv
    v[rows] = vv
    p[rows] = pv - lr * (mv / bc1) / (np.sqrt(vv / bc2) + eps)
    visited[rows] = 0


def _backward_points_np(points, tables, res, idx, upstream, d_points):
    n, d = points.shape
    L, T, F = tables.shape
    bits = corner_bits(d)
    bmask = bits.astype(bool)  # (C, d)
    for l in range(L):
        N = int(res[l])
        x = points.astype(np.float64) * N
        c = np.floor(x).astype(np.int64)
        np.clip(c, 0, N - 1, out=c)
        f = x - c
        act = ((f >= 0.0) & (f <= 1.0)).astype(np.float64)  # (n, d)
        np.clip(f, 0, 1, out=f)
        feats = tables[l][idx[l].astype(np.int64)]  # (n, C, F)
        g = np.einsum("ncf,nf->nc", feats, upstream[:, l * F : (l + 1) * F])  # (n, C)
        s = np.where(bmask[None, :, :], f[:, None, :], 1 - f[:, None, :])  # (n, C, d)
        sign = np.where(bmask, 1.0, -1.0)  # (C, d)
        for k in range(d):
            sel = [j for j in range(d) if j != k]
            pk = s[:, :, sel].prod(axis=2) if sel else np.ones_like(g)
            d_points[:, k] += N * act[:, k] * np.einsum("nc,nc->n", g, pk * sign[None, :, k])


# ---------------------------------------------------------------------------
# dispatchers
# ---------------------------------------------------------------------------


def grid_forward(points, tables, res, dense, strides, primes,
                 need_stencil=True):
    """Returns (out (n, L*F), idx (L, n, C) int32, w (L, n, C)).

    With need_stencil=False the interpolation record is neither allocated
    nor written (idx and w come back None); density probes over large point
    sets skip hundreds of MB of stencil traffic that way.
    """
    n, d = points.shape
    L, T, F = tables.shape
    C = 1 << d
    dt = tables.dtype
    out = np.zeros((n, L * F), dt)
    if need_stencil:
        idx = np.empty((L, n, C), np.int32)
        w = np.empty((L, n, C), dt)
    else:
        idx = np.empty((1, 1, 1), np.int32)
        w = np.empty((1, 1, 1), dt)
    if backend() == "numba":
        _forward_nb(points, tables, res, dense, strides, primes, out, idx, w,
                    need_stencil)
    else:
        _forward_np(points, tables, res, dense, strides, primes, out, idx, w,
                    need_stencil)
    if not need_stencil:
        return out, None, None
    return out, idx, w


def grid_backward(idx, w, upstream, grad, visited, touched, tcount):
    if backend() == "numba":
        _backward_nb(idx, w, upstream, grad, visited, touched, tcount)
    else:
        _backward_np(idx, w, upstream, grad, visited, touched, tcount)


def grid_backward_points(points, tables, res, idx, upstream, d_points):
    if backend() == "numba":
        _backward_points_nb(points, tables, res, idx, upstream, d_points)
    else:
        _backward_points_np(points, tables, res, idx, upstream, d_points)


def rows_finite(g, rows):
    """True when every gradient value in the given rows is finite."""
    if backend() == "numba":
        return bool(_rows_finite_nb(g, rows))
    return _rows_finite_np(g, rows)


def sparse_adam(p, g, m, v, visited, rows, lr, b1, b2, eps, decay, bc1, bc2,
                decoupled):
    """Adam update restricted to the given rows of 2D (rows, F) buffers.

    Skipped rows keep their moments untouched; math runs in float64 and
    stores back in the buffers' own dtype. `decoupled` selects AdamW-style
    decay applied to the parameter before the adaptive step. The update
    consumes the gradient: each visited row's gradient is cleared and its
    visited flag dropped while the row is still cache-hot, so the caller
    only has to reset the touched-row count afterwards.
    """
    if backend() == "numba":
        _sparse_adam_nb(p, g, m, v, visited, rows, lr, b1, b2, eps, decay,
                        bc1, bc2, decoupled)
    else:
        _sparse_adam_np(p, g, m, v, visited, rows, lr, b1, b2, eps, decay,
                        bc1, bc2, decoupled)
