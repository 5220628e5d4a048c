"""Cameras, ray generation, occupancy-culled sampling, and volume rendering.

Rays use the OpenGL-style pinhole convention: the camera looks down -z with
+x right and +y up in camera space. Pixel coordinates are continuous; image
callers pass (col + 0.5, row + 0.5) to shoot through pixel centers.

Volume rendering composites alpha = 1 - exp(-sigma * delta) front to back
and keeps a tape so exact reverse-mode gradients (including the transmittance
coupling between samples on a ray) can be pushed back to sigma and color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DENSE = "dense"
CULLED = "culled"

DEFAULT_AABB = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


@dataclass
class Camera:
    """Pinhole camera with a camera-to-world pose and a depth range."""

    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape == (4, 4):
            c2w = c2w[:3]
        if c2w.shape != (3, 4):
            raise ValueError(f"pose must be 3x4 or 4x4, got {c2w.shape}")
        rot = c2w[:, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-5:
            raise ValueError("pose rotation is not orthonormal")
        if not 0.0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")
        self.c2w = c2w


@dataclass
class RayBatch:
    """Flat batch of world-space rays, each carrying its frame time."""

    origins: np.ndarray
    dirs: np.ndarray
    times: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(camera: Camera, pixels, time) -> RayBatch:
    """Unproject continuous pixel coordinates into unit-length world rays."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 1:
        px = px[None, :]
    if px.ndim != 2 or px.shape[1] != 2:
        raise ValueError("pixels must be (n, 2)")
    x, y = px[:, 0], px[:, 1]
    if ((x < 0) | (x > camera.width) | (y < 0) | (y > camera.height)).any():
        raise ValueError("pixel coordinates outside image bounds")
    dirs_cam = np.stack(
        [(x - camera.cx) / camera.fx, -(y - camera.cy) / camera.fy,
         -np.ones_like(x)], axis=-1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    rot, trans = camera.c2w[:, :3], camera.c2w[:, 3]
    dirs = dirs_cam @ rot.T
    origins = np.broadcast_to(trans, dirs.shape).copy()
    n = px.shape[0]
    times = np.broadcast_to(np.asarray(time, dtype=np.float64), (n,)).copy()
    near = np.full(n, float(camera.near))
    far = np.full(n, float(camera.far))
    return RayBatch(origins, dirs, times, near, far)


def clip_to_aabb(rays: RayBatch, aabb: np.ndarray):
    """Slab-intersect each ray with an axis-aligned box.

    Returns per-ray (near, far) clipped to the camera range; near >= far
    marks a miss. Zero direction components resolve to the correct open or
    empty slab via the sign of the numerator.
    """
    lo, hi = aabb[0], aabb[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - rays.origins) / rays.dirs
        t1 = (hi - rays.origins) / rays.dirs
    tl = np.minimum(t0, t1)
    th = np.maximum(t0, t1)
    # 0/0 happens when the origin sits exactly on a face; count it inside
    tl = np.where(np.isnan(tl), -np.inf, tl)
    th = np.where(np.isnan(th), np.inf, th)
    near = np.maximum(rays.near, tl.max(axis=1))
    far = np.minimum(rays.far, th.min(axis=1))
    return near, far


@dataclass
class SamplePoints:
    """Flat, ragged-per-ray sample set in CSR layout.

    `s_lo`/`s_hi` are the normalized stratum bounds of each sample within its
    ray's clipped [near, far] span; `delta` is the stratum width in world
    units so the deltas of a fully sampled ray telescope to exactly
    far - near.
    """

    positions: np.ndarray
    times: np.ndarray
    dirs: np.ndarray
    s_lo: np.ndarray
    s_hi: np.ndarray
    delta: np.ndarray
    ray_index: np.ndarray
    ptr: np.ndarray
    n_rays: int
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.positions.shape[0]

    @property
    def s_mid(self):
        return 0.5 * (self.s_lo + self.s_hi)

    @property
    def counts(self):
        return np.diff(self.ptr)


def sample_along_rays(rays: RayBatch, n_samples: int, aabb=None,
                      mode: str = DENSE, occupancy=None, jitter: bool = False,
                      rng: np.random.Generator | None = None) -> SamplePoints:
    """Stratify each ray's clipped span into n_samples cells and keep samples.

    Dense mode keeps every stratum; culled mode drops samples whose position
    lands in an unoccupied grid cell. Each kept sample's delta is its own
    stratum width, so dropping empty strata removes only zero-weight samples.
    """
    if mode not in (DENSE, CULLED):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if mode == CULLED and occupancy is None:
        raise ValueError("culled sampling needs an occupancy grid")
    if jitter and rng is None:
        raise ValueError("jittered sampling needs an rng")
    aabb = DEFAULT_AABB if aabb is None else np.asarray(aabb, dtype=np.float64)
    near, far = clip_to_aabb(rays, aabb)
    n_rays = len(rays)
    live = near < far
    span = np.where(live, far - near, 0.0)

    edges = np.arange(n_samples + 1, dtype=np.float64) / n_samples
    s_lo = np.broadcast_to(edges[:-1], (n_rays, n_samples))
    s_hi = np.broadcast_to(edges[1:], (n_rays, n_samples))
    if jitter:
        frac = rng.random((n_rays, n_samples))
    else:
        frac = 0.5
    s_pos = s_lo + (s_hi - s_lo) * frac
    depth = near[:, None] + span[:, None] * s_pos
    pts = rays.origins[:, None, :] + depth[..., None] * rays.dirs[:, None, :]

    keep = np.broadcast_to(live[:, None], (n_rays, n_samples))
    if mode == CULLED:
        occ = occupancy.query_points(pts.reshape(-1, 3))
        keep = keep & occ.reshape(n_rays, n_samples)

    flat = keep.reshape(-1)
    ray_index = np.broadcast_to(
        np.arange(n_rays, dtype=np.int32)[:, None], (n_rays, n_samples))
    counts = keep.sum(axis=1)
    ptr = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return SamplePoints(
        positions=pts.reshape(-1, 3)[flat],
        times=np.repeat(rays.times, counts),
        dirs=np.repeat(rays.dirs, counts, axis=0),
        s_lo=s_lo.reshape(-1)[flat].copy(),
        s_hi=s_hi.reshape(-1)[flat].copy(),
        delta=(span[:, None] * (s_hi - s_lo)).reshape(-1)[flat],
        ray_index=ray_index.reshape(-1)[flat].copy(),
        ptr=ptr, n_rays=n_rays, near=near, far=far)


@dataclass
class RenderTape:
    """Intermediates retained for the volume rendering backward pass."""

    alpha: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    delta: np.ndarray
    color_in: np.ndarray
    ray_index: np.ndarray
    counts: np.ndarray
    background: np.ndarray
    n_rays: int


@dataclass
class RenderOutput:
    color: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    trans: np.ndarray
    tape: RenderTape | None


def volume_render(sigma, color, samples: SamplePoints, background=None,
                  need_tape: bool = True) -> RenderOutput:
    """Composite per-sample densities and colors into per-ray pixels.

    alpha_i = 1 - exp(-sigma_i * delta_i), T_i carries the product of the
    preceding (1 - alpha), and rays that retain opacity o < 1 blend toward
    the background color.
    """
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    color = np.asarray(color, dtype=np.float64)
    m = len(samples)
    if sigma.shape != (m,) or color.shape != (m, 3):
        raise ValueError("sigma/color not aligned with samples")
    if m and not np.isfinite(sigma).all():
        raise ValueError("non-finite density")
    bg = np.zeros(3) if background is None else np.asarray(background, np.float64)

    g = sigma * samples.delta
    cs = np.cumsum(g)
    counts = samples.counts
    # ptr starts of empty rays may equal m; they repeat zero times anyway
    starts = np.minimum(samples.ptr[:-1], max(m - 1, 0))
    ray_base = np.repeat((cs - g)[starts] if m else np.zeros(samples.n_rays),
                         counts)
    trans = np.exp(-((cs - g) - ray_base))
    alpha = -np.expm1(-g)
    w = trans * alpha
    opacity = np.bincount(samples.ray_index, weights=w,
                          minlength=samples.n_rays).astype(np.float64)
    out = np.stack([
        np.bincount(samples.ray_index, weights=w * color[:, k],
                    minlength=samples.n_rays) for k in range(3)],
        axis=1).astype(np.float64)
    out += (1.0 - opacity)[:, None] * bg
    tape = None
    if need_tape:
        tape = RenderTape(alpha=alpha, trans=trans, weights=w,
                          delta=samples.delta, color_in=color,
                          ray_index=samples.ray_index, counts=counts,
                          background=bg, n_rays=samples.n_rays)
    return RenderOutput(color=out, opacity=opacity, weights=w, trans=trans,
                        tape=tape)


def render_backward(tape: RenderTape, d_color, d_weights=None, d_opacity=None):
    """Reverse volume rendering: upstream pixel/weight/opacity grads in,
    per-sample d(sigma) and d(color) out.

    The sigma gradient includes the suffix coupling: raising sigma_i dims
    every later sample on the ray through its transmittance.
    """
    m = tape.weights.shape[0]
    r = tape.n_rays
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_color.shape != (r, 3):
        raise ValueError("d_color does not match tape ray count")
    if d_weights is None:
        d_weights = np.zeros(m)
    else:
        d_weights = np.asarray(d_weights, dtype=np.float64)
        if d_weights.shape != (m,):
            raise ValueError("d_weights does not match tape sample count")
    if d_opacity is None:
        d_opacity = np.zeros(r)
    else:
        d_opacity = np.asarray(d_opacity, dtype=np.float64)
        if d_opacity.shape != (r,):
            raise ValueError("d_opacity does not match tape ray count")

    d_out = np.repeat(d_color, tape.counts, axis=0)
    # dL/dw_i pooled from the three consumers of w: pixel color, raw weight
    # terms, and opacity (the background blend routes -bg through opacity)
    u = (d_weights + np.repeat(d_opacity, tape.counts)
         + ((tape.color_in - tape.background) * d_out).sum(axis=1))
    d_rgb = tape.weights[:, None] * d_out

    uw = u * tape.weights
    cs = np.cumsum(uw)
    ptr = np.zeros(r + 1, dtype=np.int64)
    np.cumsum(tape.counts, out=ptr[1:])
    starts = np.minimum(ptr[:-1], max(m - 1, 0))
    ray_base = np.repeat((cs - uw)[starts] if m else np.zeros(r), tape.counts)
    total = np.bincount(tape.ray_index, weights=uw, minlength=r)
    suffix = np.repeat(total, tape.counts) - (cs - uw - ray_base)
    d_sigma = tape.delta * (u * tape.trans - suffix)
    return d_sigma, d_rgb


class OccupancyGrid:
    """Uniform boolean grid over the scene box, shared across all frames.

    Each cell caches an exponentially averaged density probed at its center;
    the occupancy bit is set exactly when cached * (diagonal / resolution)
    exceeds the transmittance cutoff. Young grids probe every cell per
    update; once matured, each update probes a stochastic half of the cells
    and leaves the other half's average untouched.
    """

    def __init__(self, resolution: int = 128, aabb=None, decay: float = 0.95,
                 cutoff: float = 0.01, mature_after: int = 64):
        if resolution < 1:
            raise ValueError("resolution must be >= 1")
        self.res = int(resolution)
        self.aabb = (DEFAULT_AABB if aabb is None
                     else np.asarray(aabb, dtype=np.float64)).copy()
        self.decay = float(decay)
        self.cutoff = float(cutoff)
        self.mature_after = int(mature_after)
        n = self.res ** 3
        self.cached = np.zeros(n, dtype=np.float64)
        self.bits = np.zeros(n, dtype=bool)
        self.updates = 0
        self._rng = np.random.default_rng(0)
        self._centers = None

    @property
    def step_length(self):
        diag = float(np.linalg.norm(self.aabb[1] - self.aabb[0]))
        return diag / self.res

    def cell_centers(self):
        if self._centers is None:
            r = self.res
            idx = (np.arange(r, dtype=np.float64) + 0.5) / r
            gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
            unit = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
            self._centers = self.aabb[0] + unit * (self.aabb[1] - self.aabb[0])
        return self._centers

    def _rethreshold(self):
        self.bits = self.cached * self.step_length > self.cutoff

    def update(self, density_fn, t: float, chunk: int = 65536,
               full: bool | None = None):
        """EMA the cached density at cell centers for one frame time.

        `full=None` probes every cell while the grid is younger than
        `mature_after` updates and a stochastic half afterwards; `full=True`
        forces a whole-grid probe (used for final refreshes), `full=False`
        a half probe.
        """
        centers = self.cell_centers()
        if full is None:
            full = self.updates < self.mature_after
        if full:
            idx = None
            pts = centers
        else:
            idx = np.flatnonzero(self._rng.random(centers.shape[0]) < 0.5)
            pts = centers[idx]
        sigma = np.empty(pts.shape[0], dtype=np.float64)
        for i in range(0, pts.shape[0], chunk):
            block = pts[i:i + chunk]
            tt = np.full(block.shape[0], float(t))
            sigma[i:i + chunk] = np.asarray(density_fn(block, tt),
                                            dtype=np.float64).reshape(-1)
        if idx is None:
            self.cached = self.decay * self.cached + (1.0 - self.decay) * sigma
        else:
            self.cached[idx] = (self.decay * self.cached[idx]
                                + (1.0 - self.decay) * sigma)
        self._rethreshold()
        self.updates += 1

    def query_points(self, x) -> np.ndarray:
        """Occupancy bit of the cell containing each point; outside is empty."""
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self.aabb[0], self.aabb[1]
        inside = ((x >= lo) & (x <= hi)).all(axis=1)
        cell = np.clip(((x - lo) / (hi - lo) * self.res).astype(np.int64),
                       0, self.res - 1)
        flat = (cell[:, 0] * self.res + cell[:, 1]) * self.res + cell[:, 2]
        return np.where(inside, self.bits[flat], False)


def update_occupancy(grid: OccupancyGrid, field, t: float,
                     full: bool | None = None):
    def probe(pts, tt):
        return field.density(pts.astype(field.dtype), tt.astype(field.dtype))
    grid.update(probe, t, full=full)


def render_image(field, camera: Camera, t: float, n_samples: int = 192,
                 aabb=None, occupancy: OccupancyGrid | None = None,
                 mode: str = DENSE, background=None,
                 chunk: int = 8192) -> np.ndarray:
    """Render a full frame at time t by midpoint sampling, in ray chunks."""
    cols, rows = np.meshgrid(np.arange(camera.width),
                             np.arange(camera.height), indexing="xy")
    pixels = np.stack([cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5], axis=1)
    out = np.empty((pixels.shape[0], 3), dtype=np.float32)
    for i in range(0, pixels.shape[0], chunk):
        rays = generate_rays(camera, pixels[i:i + chunk], t)
        samples = sample_along_rays(rays, n_samples, aabb=aabb, mode=mode,
                                    occupancy=occupancy, jitter=False)
        if len(samples):
            x = samples.positions.astype(field.dtype)
            tt = samples.times.astype(field.dtype)
            d = samples.dirs.astype(field.dtype)
            sigma, color, _ = field.query(x, tt, d, need_tape=False)
        else:
            sigma = np.zeros(0)
            color = np.zeros((0, 3))
        res = volume_render(sigma, color, samples, background=background,
                            need_tape=False)
        out[i:i + chunk] = res.color.astype(np.float32)
    return out.reshape(camera.height, camera.width, 3)
