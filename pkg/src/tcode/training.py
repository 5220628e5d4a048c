"""Optimizers, learning-rate schedules, checkpoints, and the training loop.

One training step is a strict phase pipeline: draw pixels, generate rays,
sample points (dense during warmup, occupancy-culled after), query the
field, volume render, evaluate the blended losses, backpropagate, and take
one optimizer step. The occupancy cache refreshes on a fixed step period,
cycling through the training frame times.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .objectives import LossWeights, dssim, loss_breakdown, psnr
from .pixel_sampler import (DEFAULT_GAMMA, DEFAULT_MILESTONES, PixelSampler,
                            RatioSchedule)
from .rendering import (CULLED, DEFAULT_AABB, DENSE, OccupancyGrid, RayBatch,
                        render_backward, render_image, sample_along_rays,
                        update_occupancy, volume_render)
from .scenes_io import write_png

# curriculum defaults, expressed as fractions of the total step budget so a
# shorter run keeps the same shape; the occupancy period is an absolute
# cache-refresh cadence and does not scale
WARMUP_FRACTION = 4096 / 90000
DISTORTION_FRACTION = 0.2
OCCUPANCY_PERIOD = 16

OPTIMIZER_GROUPS = ("mlp", "mlp_color", "hash_tables", "tcode", "deformation")

CHECKPOINT_MAGIC = b"TCOD"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contained NaN or inf; the step was not applied."""


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # adam | adamw
    lr0: float = 1e-3
    eps: float = 1e-15
    betas: tuple = (0.9, 0.99)
    weight_decay: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        for group, decay in self.weight_decay.items():
            if group not in OPTIMIZER_GROUPS:
                raise ValueError(f"unknown weight-decay group {group!r}")
            if decay < 0:
                raise ValueError("weight decay must be >= 0")

    def decay_for(self, group: str) -> float:
        if group == "mlp_color" and "mlp_color" not in self.weight_decay:
            group = "mlp"
        return float(self.weight_decay.get(group, 0.0))


class Optimizer:
    """Adam/AdamW over a field's parameters with sparse hash-table rows.

    Adam folds decay into the gradient (g + decay*p); AdamW shrinks the
    parameter before the adaptive step. Hash-table rows without a gradient
    this step are skipped entirely, moments included. All gradients are
    validated before anything mutates, so a non-finite gradient leaves the
    parameters exactly as they were. A successful step consumes the sparse
    gradients it applied (rows rezeroed, touched list reset), making the
    grids ready for the next accumulation without a separate zeroing pass.
    """

    def __init__(self, field, config: OptimizerConfig):
        self.field = field
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(p) for k, p in field.params().items()}
        self.v = {k: np.zeros_like(p) for k, p in field.params().items()}

    def step(self, lr: float) -> None:
        cfg = self.config
        params = self.field.params()
        grads = self.field.grads()
        sparse_rows = {}
        for name, g in grads.items():
            grid = self.field.sparse_grid_of(name)
            if grid is not None:
                rows = grid.touched[: int(grid.tcount[0])]
                sparse_rows[name] = rows
                flat = g.reshape(-1, g.shape[-1])
                if rows.size and not kernels.rows_finite(flat, rows):
                    raise NonFiniteGradientError(
                        f"non-finite gradient in {name}")
            elif not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in {name}")

        self.step_count += 1
        b1, b2 = cfg.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        decoupled = cfg.kind == "adamw"
        for name, p in params.items():
            g = grads[name]
            decay = cfg.decay_for(self.field.group_of(name))
            if name in sparse_rows:
                rows = sparse_rows[name]
                if rows.size == 0:
                    continue
                grid = self.field.sparse_grid_of(name)
                f = p.shape[-1]
                # the kernel consumes the gradient rows (zeroes them and
                # their visited flags); dropping the count finishes the reset
                # so the following zero_grad has nothing left to do
                kernels.sparse_adam(
                    p.reshape(-1, f), g.reshape(-1, f),
                    self.m[name].reshape(-1, f), self.v[name].reshape(-1, f),
                    grid.visited, rows, lr, b1, b2, cfg.eps, decay, bc1, bc2,
                    decoupled)
                grid.tcount[0] = 0
            else:
                self._dense(p, g, self.m[name], self.v[name], lr, decay,
                            bc1, bc2, decoupled)

    def _dense(self, p, g, m, v, lr, decay, bc1, bc2, decoupled):
        b1, b2 = self.config.betas
        pv = p.astype(np.float64)
        gv = g.astype(np.float64)
        if decoupled:
            pv -= lr * decay * pv
        else:
            gv += decay * pv
        mv = b1 * m.astype(np.float64) + (1.0 - b1) * gv
        vv = b2 * v.astype(np.float64) + (1.0 - b2) * gv * gv
        m[...] = mv
        v[...] = vv
        p[...] = pv - lr * (mv / bc1) / (np.sqrt(vv / bc2) + self.config.eps)

    def state_tensors(self) -> dict:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict, step_count: int) -> None:
        for name, m in self.m.items():
            m[...] = tensors[f"opt.m.{name}"].reshape(m.shape)
            self.v[name][...] = tensors[f"opt.v.{name}"].reshape(m.shape)
        self.step_count = int(step_count)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "cosine"  # cosine | exp
    lr0: float = 1e-3
    lr_final: float = 1e-3  # exp only

    def __post_init__(self):
        if self.kind not in ("cosine", "exp"):
            raise ValueError(f"unknown lr schedule {self.kind!r}")
        if self.lr0 <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")


def lr_at(schedule: LrSchedule, step: int, total: int) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    f = step / total if total else 0.0
    if schedule.kind == "cosine":
        return schedule.lr0 * 0.5 * (1.0 + math.cos(math.pi * f))
    return schedule.lr0 * (schedule.lr_final / schedule.lr0) ** f


@dataclass(frozen=True)
class ScheduleTable:
    """Resolved step milestones for one run, emitted next to the metrics."""

    total_steps: int
    warmup_steps: int
    distortion_start_step: int
    occupancy_period: int
    ratio_milestones: tuple  # ((step, uniform ratio), ...)
    eval_period: int

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "warmup_steps": self.warmup_steps,
            "distortion_start_step": self.distortion_start_step,
            "occupancy_period": self.occupancy_period,
            "ratio_milestones": [list(m) for m in self.ratio_milestones],
            "eval_period": self.eval_period,
        }


def build_schedule(total_steps: int, warmup_fraction: float = WARMUP_FRACTION,
                   distortion_fraction: float = DISTORTION_FRACTION,
                   occupancy_period: int = OCCUPANCY_PERIOD,
                   ratio_milestones=DEFAULT_MILESTONES,
                   eval_period: int = 0) -> ScheduleTable:
    if total_steps < 0:
        raise ValueError("total_steps must be >= 0")
    if occupancy_period < 1:
        raise ValueError("occupancy_period must be >= 1")
    return ScheduleTable(
        total_steps=int(total_steps),
        warmup_steps=int(round(total_steps * warmup_fraction)),
        distortion_start_step=int(round(total_steps * distortion_fraction)),
        occupancy_period=int(occupancy_period),
        ratio_milestones=tuple((int(round(total_steps * f)), r)
                               for f, r in ratio_milestones),
        eval_period=int(eval_period),
    )


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------
#
# Single little-endian binary file:
#   "TCOD" | u32 version | u32 hash length | config hash bytes
#   then repeated tensor blobs until EOF:
#   u32 name length | name utf-8 | u32 ndim | u64 dims[ndim] | f32 data
#
# Non-tensor state rides along as f32 blobs: integers split into u16 limbs,
# byte strings (RNG state JSON, run config JSON) as one value per byte.


def _encode_u64(x: int) -> np.ndarray:
    return np.array([(int(x) >> (16 * k)) & 0xFFFF for k in range(4)],
                    dtype=np.float32)


def _decode_u64(a: np.ndarray) -> int:
    limbs = np.asarray(a, dtype=np.float64).reshape(4).astype(np.uint64)
    return int(sum(int(v) << (16 * k) for k, v in enumerate(limbs)))


def _encode_bytes(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype=np.uint8).astype(np.float32)


def _decode_bytes(a: np.ndarray) -> bytes:
    return np.asarray(a, dtype=np.float64).astype(np.uint8).tobytes()


def save_checkpoint(path: str, tensors: dict, config_hash: bytes) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_hash)))
        f.write(config_hash)
        for name, value in tensors.items():
            data = np.ascontiguousarray(value, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path: str):
    """Returns (tensors dict, config hash bytes)."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version "
                             f"{version}")
        (hash_len,) = struct.unpack("<I", f.read(4))
        config_hash = f.read(hash_len)
        tensors = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4")
            tensors[name] = data.reshape(shape).astype(np.float32)
    return tensors, config_hash


def training_checkpoint(field, optimizer: Optimizer, step: int,
                        rng: np.random.Generator, config_json: str,
                        occupancy: OccupancyGrid | None = None) -> dict:
    tensors = {}
    for name, p in field.params().items():
        tensors[f"param.{name}"] = p
    tensors.update(optimizer.state_tensors())
    tensors["meta.step"] = _encode_u64(step)
    tensors["meta.opt_step"] = _encode_u64(optimizer.step_count)
    state = json.dumps(rng.bit_generator.state)
    tensors["meta.rng"] = _encode_bytes(state.encode("utf-8"))
    tensors["meta.config"] = _encode_bytes(config_json.encode("utf-8"))
    if occupancy is not None:
        tensors["occ.meta"] = np.array(
            [occupancy.res, occupancy.decay, occupancy.cutoff],
            dtype=np.float32)
        tensors["occ.aabb"] = occupancy.aabb.astype(np.float32)
        tensors["occ.updates"] = _encode_u64(occupancy.updates)
        tensors["occ.cached"] = occupancy.cached.astype(np.float32)
        tensors["occ.bits"] = occupancy.bits.astype(np.float32)
    return tensors


def restore_field(tensors: dict, field) -> None:
    prefix = "param."
    field.load_params({k[len(prefix):]: v for k, v in tensors.items()
                       if k.startswith(prefix)})


def restore_occupancy(tensors: dict) -> OccupancyGrid | None:
    if "occ.meta" not in tensors:
        return None
    res, decay, cutoff = (float(x) for x in tensors["occ.meta"])
    grid = OccupancyGrid(resolution=int(res), aabb=tensors["occ.aabb"],
                         decay=decay, cutoff=cutoff)
    grid.cached = tensors["occ.cached"].astype(np.float64)
    # restore the thresholded bits verbatim; re-deriving them from the f32
    # rounded cache could flip a cell sitting exactly on the cutoff
    grid.bits = tensors["occ.bits"] > 0.5
    grid.updates = _decode_u64(tensors["occ.updates"])
    return grid


def checkpoint_step(tensors: dict) -> int:
    return _decode_u64(tensors["meta.step"])


def checkpoint_rng(tensors: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(
        _decode_bytes(tensors["meta.rng"]).decode("utf-8"))
    return rng


def checkpoint_config(tensors: dict) -> dict:
    return json.loads(_decode_bytes(tensors["meta.config"]).decode("utf-8"))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainSettings:
    total_steps: int = 9000
    ray_batch: int = 512
    seed: int = 1337
    n_samples: int = 192
    occupancy_resolution: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    aabb: np.ndarray = dc_field(
        default_factory=lambda: DEFAULT_AABB.copy())
    optimizer: OptimizerConfig = dc_field(default_factory=OptimizerConfig)
    lr: LrSchedule = dc_field(default_factory=LrSchedule)
    loss: LossWeights = dc_field(default_factory=LossWeights)
    warmup_fraction: float = WARMUP_FRACTION
    distortion_fraction: float = DISTORTION_FRACTION
    occupancy_period: int = OCCUPANCY_PERIOD
    eval_period: int = 0  # 0 = evaluate only at the end
    sampler_gamma: float = DEFAULT_GAMMA
    ratio_milestones: tuple = DEFAULT_MILESTONES

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.ray_batch < 1:
            raise ValueError("ray_batch must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class TrainResult:
    out_dir: str
    checkpoint_path: str
    steps_run: int
    aborted: bool
    abort_reason: str | None
    metrics: list
    train_log: list

    @property
    def final_psnr(self):
        return self.metrics[-1]["psnr"] if self.metrics else None


def _deterministic() -> bool:
    return os.environ.get("TCODE_DETERMINISTIC") == "1"


def _format_csv(rows: list, columns: list) -> str:
    def cell(v):
        return f"{v:.10g}" if isinstance(v, float) else str(v)

    lines = [",".join(columns)]
    lines += [",".join(cell(row[c]) for c in columns) for row in rows]
    return "\n".join(lines) + "\n"


def _ray_batch_for_pixels(dataset, id_maps, pixels):
    """Turn sampler rows (video, frame, row, col) into rays plus targets.

    Pixels are sorted by source frame, which keeps batches deterministic;
    the whole batch is then unprojected in one vectorized pass (intrinsics
    are shared dataset-wide, poses gathered per record).
    """
    order = np.lexsort((pixels[:, 1], pixels[:, 0]))
    px = pixels[order]
    vids, frames, rows, cols = px[:, 0], px[:, 1], px[:, 2], px[:, 3]
    recs = np.empty(px.shape[0], dtype=np.int64)
    for vid in np.unique(vids):
        sel = vids == vid
        recs[sel] = id_maps[int(vid)][frames[sel]]
    fx, fy, cx, cy = dataset.intrinsics
    dirs_cam = np.stack(
        [(cols + 0.5 - cx) / fx, -(rows + 0.5 - cy) / fy,
         -np.ones(px.shape[0])], axis=-1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    poses = dataset.poses[recs]
    dirs = np.einsum("nij,nj->ni", poses[:, :, :3], dirs_cam)
    n = px.shape[0]
    rays = RayBatch(poses[:, :, 3].copy(), dirs,
                    dataset.times[recs].astype(np.float64),
                    np.full(n, float(dataset.near)),
                    np.full(n, float(dataset.far)))
    return rays, dataset.images[recs, rows, cols].astype(np.float64)


def eval_split(dataset, field, split: str, n_samples: int = 192, aabb=None,
               background=(0.0, 0.0, 0.0), occupancy=None,
               renders_dir: str | None = None, step: int | None = None):
    """Render one split and score it; returns (per-frame rows, psnr, dssim).

    Uses occupancy-culled sampling once the grid has been updated at least
    once, matching what training itself converges to.
    """
    indices = dataset.indices(split)
    if len(indices) == 0:
        raise ValueError(f"split {split!r} is empty")
    use_grid = occupancy is not None and occupancy.updates > 0
    rows = []
    for rec in indices:
        rec = int(rec)
        img = render_image(field, dataset.camera_for(rec),
                           float(dataset.times[rec]), n_samples=n_samples,
                           aabb=aabb,
                           occupancy=occupancy if use_grid else None,
                           mode=CULLED if use_grid else DENSE,
                           background=np.asarray(background, np.float64))
        if renders_dir is not None:
            tag = f"step{step:06d}_" if step is not None else ""
            write_png(os.path.join(renders_dir, f"{tag}r{rec:03d}.png"), img)
        target = dataset.images[rec]
        rows.append({"frame": rec, "time": float(dataset.times[rec]),
                     "psnr": psnr(img, target),
                     "dssim": dssim(img, target)})
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_dssim = float(np.mean([r["dssim"] for r in rows]))
    return rows, mean_psnr, mean_dssim


def train(dataset, field, settings: TrainSettings, out_dir: str,
          resume: str | None = None, config_json: str | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Run the full optimization loop and leave artifacts in out_dir.

    Writes schedule.json up front, then per-step rows to train_log.csv,
    per-evaluation rows to metrics.csv, renders/ PNGs for the eval split,
    and ckpt.bin. A non-finite loss or gradient stops the run and the
    checkpoint keeps the last finite parameters. `stop_at` pauses the run
    after that step (checkpoint only, no final evaluation); resuming from
    the checkpoint with the same config continues the exact trajectory.
    """
    os.makedirs(out_dir, exist_ok=True)
    renders_dir = os.path.join(out_dir, "renders")
    os.makedirs(renders_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "ckpt.bin")
    config_json = config_json if config_json is not None else "{}"
    config_hash = _hash_bytes(config_json)

    table = build_schedule(settings.total_steps, settings.warmup_fraction,
                           settings.distortion_fraction,
                           settings.occupancy_period,
                           settings.ratio_milestones, settings.eval_period)
    with open(os.path.join(out_dir, "schedule.json"), "w") as f:
        json.dump(table.to_dict(), f, indent=1)
        f.write("\n")
    weights = LossWeights(
        photo=settings.loss.photo, distortion=settings.loss.distortion,
        opacity=settings.loss.opacity,
        sigma_entropy=settings.loss.sigma_entropy,
        distortion_start_step=table.distortion_start_step)

    rng = np.random.default_rng(settings.seed)
    grid = OccupancyGrid(resolution=settings.occupancy_resolution,
                         aabb=settings.aabb)
    optimizer = Optimizer(field, settings.optimizer)
    start_step = 0
    if resume is not None:
        tensors, stored_hash = load_checkpoint(resume)
        if stored_hash != config_hash:
            raise ValueError("checkpoint config hash does not match the "
                             "current configuration")
        restore_field(tensors, field)
        start_step = checkpoint_step(tensors)
        optimizer.load_state(tensors, _decode_u64(tensors["meta.opt_step"]))
        rng = checkpoint_rng(tensors)
        stored = restore_occupancy(tensors)
        if stored is not None:
            grid = stored

    videos, id_maps = dataset.train_videos()
    sampler = PixelSampler(videos, settings.sampler_gamma,
                           RatioSchedule(tuple(tuple(m) for m
                                               in settings.ratio_milestones)))
    train_times = np.unique(dataset.times[dataset.indices("train")])
    background = np.asarray(settings.background, dtype=np.float64)

    train_log: list = []
    metrics: list = []
    t0 = time.perf_counter()
    abort_reason = None
    end_step = settings.total_steps
    if stop_at is not None:
        end_step = min(max(stop_at, start_step), settings.total_steps)
    step = start_step

    def wall() -> float:
        return 0.0 if _deterministic() else time.perf_counter() - t0

    def run_eval(at_step: int) -> None:
        _, mean_psnr, mean_dssim = eval_split(
            dataset, field, "eval", settings.n_samples, settings.aabb,
            background, occupancy=grid, renders_dir=renders_dir,
            step=at_step)
        metrics.append({"step": at_step, "psnr": mean_psnr,
                        "dssim": mean_dssim, "wall_clock_s": wall()})

    for step in range(start_step, end_step):
        if step % table.occupancy_period == 0 and len(train_times):
            cycle = (step // table.occupancy_period) % len(train_times)
            update_occupancy(grid, field, float(train_times[cycle]))
        mode = DENSE if step < table.warmup_steps else CULLED

        pixels = sampler.draw(step, settings.total_steps,
                              settings.ray_batch, rng)
        rays, targets = _ray_batch_for_pixels(dataset, id_maps, pixels)
        samples = sample_along_rays(rays, settings.n_samples,
                                    aabb=settings.aabb, mode=mode,
                                    occupancy=grid, jitter=True, rng=rng)
        sigma, rgb, tape = field.query(
            samples.positions.astype(field.dtype),
            samples.times.astype(field.dtype),
            samples.dirs.astype(field.dtype), need_tape=True)
        sigma = np.asarray(sigma, dtype=np.float64)
        if len(samples) and not np.isfinite(sigma).all():
            abort_reason = f"non-finite density at step {step}"
            break
        out = volume_render(sigma, rgb, samples, background=background)
        breakdown, lgrads = loss_breakdown(
            step, weights, out.color, targets, out.weights, samples.s_lo,
            samples.s_hi, samples.ray_index, samples.n_rays, out.opacity,
            sigma)
        if not math.isfinite(breakdown.total):
            abort_reason = f"non-finite loss at step {step}"
            break
        d_sigma, d_rgb = render_backward(out.tape, lgrads["d_pred"],
                                         lgrads["d_render_weights"],
                                         lgrads["d_opacity"])
        d_sigma = d_sigma + lgrads["d_sigma"]
        field.zero_grad()
        field.backward(tape, d_sigma.astype(field.dtype),
                       d_rgb.astype(field.dtype))
        lr = lr_at(settings.lr, step, settings.total_steps)
        try:
            optimizer.step(lr)
        except NonFiniteGradientError as err:
            abort_reason = f"{err} at step {step}"
            break
        train_log.append({
            "step": step, "lr": lr, "loss": breakdown.total,
            "photometric": breakdown.photo,
            "distortion": breakdown.distortion,
            "opacity": breakdown.opacity,
            "sigma_entropy": breakdown.sigma_entropy,
            "samples": len(samples),
        })
        done = step + 1
        if (table.eval_period and done % table.eval_period == 0
                and done < settings.total_steps):
            run_eval(done)
            save_checkpoint(ckpt_path, training_checkpoint(
                field, optimizer, done, rng, config_json, grid), config_hash)
    else:
        step = end_step

    if abort_reason is None and step == settings.total_steps:
        # refresh the occupancy cache over every training time before the
        # final evaluation; the cadence-based updates leave it biased toward
        # recently probed frames. The final bits are the union of the
        # per-frame thresholded bits: one grid serves every frame, so a
        # cell hot at any single time must stay sampled.
        union = np.zeros_like(grid.bits)
        for t in train_times:
            update_occupancy(grid, field, float(t), full=True)
            union |= grid.bits
        grid.bits = union
        run_eval(settings.total_steps)

    save_checkpoint(ckpt_path, training_checkpoint(
        field, optimizer, step, rng, config_json, grid), config_hash)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write(_format_csv(metrics, ["step", "psnr", "dssim",
                                      "wall_clock_s"]))
    with open(os.path.join(out_dir, "train_log.csv"), "w") as f:
        f.write(_format_csv(train_log, ["step", "lr", "loss", "photometric",
                                        "distortion", "opacity",
                                        "sigma_entropy", "samples"]))
    return TrainResult(out_dir=out_dir, checkpoint_path=ckpt_path,
                       steps_run=step, aborted=abort_reason is not None,
                       abort_reason=abort_reason, metrics=metrics,
                       train_log=train_log)


def _hash_bytes(config_json: str) -> bytes:
    return hashlib.sha256(config_json.encode("utf-8")).digest()
