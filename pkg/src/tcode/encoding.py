"""Multi-resolution hash encodings for space (3D), time (1D), and joint 4D.

A grid holds L feature tables of T rows x F features. A query point in the
unit cube is scaled to each level's resolution, the 2^d surrounding integer
corners are looked up (XOR hash of corner * prime per axis, modulo T), and
the corner features are fused by d-linear interpolation. Levels concatenate
to a (L*F)-vector. Coarse levels whose dense grid fits in T skip the hash and
use an injective row-major index instead, which removes needless collisions;
in particular a 1D time grid with (N+1) <= T is always collision free.

Also provides sinusoidal (Fourier) feature encoding and a degree-4 real
spherical harmonics basis for view directions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

# Per-axis hash multipliers; the first is 1 so that 1D grids index by the
# coordinate itself (mod T). Standard constants for this family of encodings.
PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint64)

INIT_SCALE = 1e-4  # tables start at U(-INIT_SCALE, INIT_SCALE)


@dataclass
class HashGridConfig:
    dims: int
    levels: int
    feat_per_level: int
    table_size: int
    n_min: float
    n_max: float

    def __post_init__(self):
        if self.dims < 1 or self.levels < 1 or self.feat_per_level < 1:
            raise ValueError("dims, levels and feat_per_level must be >= 1")
        if self.table_size < 1 or (self.table_size & (self.table_size - 1)) != 0:
            raise ValueError("table_size must be a power of two")
        if not (0 < self.n_min <= self.n_max):
            raise ValueError("need 0 < n_min <= n_max")
        if self.dims > len(PRIMES):
            raise ValueError(f"at most {len(PRIMES)} dims supported")

    def level_resolutions(self) -> np.ndarray:
        """Per-level integer resolutions N_l = floor(n_min * b^(l-1))."""
        if self.levels == 1:
            vals = np.array([self.n_min], dtype=np.float64)
        else:
            b = (self.n_max / self.n_min) ** (1.0 / (self.levels - 1))
            vals = self.n_min * b ** np.arange(self.levels, dtype=np.float64)
        # tiny epsilon so that exact products like n_max survive float error
        return np.floor(vals + 1e-9).astype(np.int64)

    @property
    def out_dim(self) -> int:
        return self.levels * self.feat_per_level

    def param_count(self) -> int:
        return self.levels * self.table_size * self.feat_per_level


@dataclass
class Stencil:
    """Interpolation record kept by encode for the backward passes."""

    idx: np.ndarray  # (L, n, 2^d) int32 table rows
    w: np.ndarray  # (L, n, 2^d) interpolation weights
    points: np.ndarray  # (n, d) the encoded points (for position gradients)


class MultiResHashGrid:
    def __init__(self, config: HashGridConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.res = config.level_resolutions()
        self.primes = PRIMES[: config.dims].copy()
        L, T, F, d = config.levels, config.table_size, config.feat_per_level, config.dims
        # dense (injective row-major) indexing where a level's full grid fits
        self.dense = np.array([(int(n) + 1) ** d <= T for n in self.res])
        self.strides = np.ones((L, d), np.int64)
        for l in range(L):
            for k in range(1, d):
                self.strides[l, k] = self.strides[l, k - 1] * (int(self.res[l]) + 1)
        self.tables = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(L, T, F)).astype(dtype)
        self.grad = np.zeros((L, T, F), dtype)
        self.visited = np.zeros(L * T, np.uint8)
        self.touched = np.zeros(L * T, np.int32)
        self.tcount = np.zeros(1, np.int64)

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def astype(self, dtype) -> "MultiResHashGrid":
        self.tables = self.tables.astype(dtype)
        self.grad = self.grad.astype(dtype)
        return self

    def encode(self, points: np.ndarray, need_stencil: bool = True):
        """points (n, d) in [0,1]^d -> (features (n, L*F), Stencil | None)."""
        points = np.ascontiguousarray(points, dtype=self.tables.dtype)
        if points.ndim != 2 or points.shape[1] != self.config.dims:
            raise ValueError(f"expected (n, {self.config.dims}) points, got {points.shape}")
        if not np.isfinite(points).all():
            raise ValueError("non-finite input point")
        out, idx, w = kernels.grid_forward(
            points, self.tables, self.res, self.dense, self.strides,
            self.primes, need_stencil
        )
        return out, (Stencil(idx, w, points) if need_stencil else None)

    def encode_backward(self, stencil: Stencil, upstream: np.ndarray) -> None:
        """Accumulate d(loss)/d(tables) into self.grad for later sparse updates."""
        n = stencil.idx.shape[1]
        if upstream.shape != (n, self.out_dim):
            raise ValueError(f"upstream shape {upstream.shape} != ({n}, {self.out_dim})")
        upstream = np.ascontiguousarray(upstream, dtype=self.grad.dtype)
        kernels.grid_backward(
            stencil.idx, stencil.w, upstream, self.grad, self.visited, self.touched, self.tcount
        )

    def encode_backward_points(self, stencil: Stencil, upstream: np.ndarray) -> np.ndarray:
        """d(loss)/d(points): gradient of the interpolation w.r.t. the query
        position (zero in axes where the query was clamped outside the grid)."""
        n, d = stencil.points.shape
        upstream = np.ascontiguousarray(upstream, dtype=self.tables.dtype)
        d_points = np.zeros((n, d), self.tables.dtype)
        kernels.grid_backward_points(
            stencil.points, self.tables, self.res, stencil.idx, upstream, d_points
        )
        return d_points

    def zero_grad(self) -> None:
        cnt = int(self.tcount[0])
        if cnt:
            rows = self.touched[:cnt].astype(np.int64)
            flat = self.grad.reshape(-1, self.grad.shape[2])
            flat[rows] = 0
            self.visited[rows] = 0
            self.tcount[0] = 0


def hash_index(coords: np.ndarray, level: int, grid: MultiResHashGrid) -> np.ndarray:
    """Table row(s) for integer corner coordinates at one level, using the
    same dense-or-hash rule as encode. coords: (d,) or (n, d) integers."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    if grid.dense[level]:
        return (coords * grid.strides[level][None, :]).sum(axis=1)
    h = coords.astype(np.uint64) * grid.primes[None, :]
    mask = np.uint64(grid.config.table_size - 1)
    return (np.bitwise_xor.reduce(h, axis=1) & mask).astype(np.int64)


def xor_hash(coords: np.ndarray, primes: np.ndarray, table_size: int) -> np.ndarray:
    """Plain XOR hash (no dense shortcut): (xor_k coords_k * primes_k) mod T,
    in 64-bit unsigned wraparound arithmetic."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    h = coords.astype(np.uint64) * np.asarray(primes, np.uint64)[None, : coords.shape[1]]
    return (np.bitwise_xor.reduce(h, axis=1) & np.uint64(table_size - 1)).astype(np.int64)


@dataclass
class FourierEncoding:
    n_freqs: int
    include_input: bool = True

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.n_freqs + (1 if self.include_input else 0))


def fourier_encode(x: np.ndarray, enc: FourierEncoding) -> np.ndarray:
    """Concatenates (optionally x, then) sin(2^k pi x), cos(2^k pi x), k < K.

    Layout: [x] + [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{K-1} pi x), ...],
    each term spanning the input dimensions.
    """
    x = np.atleast_2d(x)
    if not np.isfinite(x).all():
        raise ValueError("non-finite input to fourier_encode")
    parts = [x] if enc.include_input else []
    for k in range(enc.n_freqs):
        arg = (2.0**k * np.pi) * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1)


def sh_encode(dirs: np.ndarray) -> np.ndarray:
    """Degree-4 real spherical harmonics basis (16 values) of unit directions."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty((dirs.shape[0], 16), dirs.dtype)
    out[:, 0] = 0.28209479177387814
    out[:, 1] = -0.48860251190291987 * y
    out[:, 2] = 0.48860251190291987 * z
    out[:, 3] = -0.48860251190291987 * x
    out[:, 4] = 1.0925484305920792 * xy
    out[:, 5] = -1.0925484305920792 * yz
    out[:, 6] = 0.94617469575755997 * zz - 0.31539156525251999
    out[:, 7] = -1.0925484305920792 * xz
    out[:, 8] = 0.54627421529603959 * (xx - yy)
    out[:, 9] = 0.59004358992664352 * y * (-3.0 * xx + yy)
    out[:, 10] = 2.8906114426405538 * xy * z
    out[:, 11] = 0.45704579946446572 * y * (1.0 - 5.0 * zz)
    out[:, 12] = 0.3731763325901154 * z * (5.0 * zz - 3.0)
    out[:, 13] = 0.45704579946446572 * x * (1.0 - 5.0 * zz)
    out[:, 14] = 1.4453057213202769 * z * (xx - yy)
    out[:, 15] = 0.59004358992664352 * x * (-xx + 3.0 * yy)
    return out
