"""End-to-end float64 finite-difference verification of the backward pass.

Each trial builds a tiny random field, shoots a few rays through the unit
box, renders them, evaluates the full blended loss, and compares analytic
parameter gradients against central differences. Probes whose +/-h window
crosses a non-smooth point (ReLU mask, warp clamp, hash-cell boundary,
density-entropy clip, opacity clamp) are skipped: the two one-sided
derivatives legitimately differ there.

The error measure |fd - an| / max(|fd|, |an|, 1e-4) is relative for
gradients of ordinary size and absolute (1e-9 at the 1e-5 threshold) for
tiny ones, which keeps the threshold above the ~1e-11 float64
central-difference noise floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import FieldConfig, build_field
from .objectives import SIGMA_CLIP, LossWeights, loss_breakdown
from .rendering import RayBatch, render_backward, sample_along_rays, volume_render

TOLERANCE = 1e-5
FD_STEP = 1e-5
DENOM_FLOOR = 1e-4


@dataclass
class GradcheckReport:
    variant: str
    n_configs: int
    checked: int = 0
    skipped: int = 0
    max_rel: dict = dc_field(default_factory=dict)  # group -> worst error

    @property
    def worst(self) -> float:
        return max(self.max_rel.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.worst < TOLERANCE

    def lines(self) -> list:
        out = [f"variant {self.variant}: {self.n_configs} configs, "
               f"{self.checked} probes checked, {self.skipped} near a kink"]
        for group in sorted(self.max_rel):
            out.append(f"  {group:12s} max rel err {self.max_rel[group]:.3e}")
        out.append(f"  -> {'PASS' if self.passed else 'FAIL'} "
                   f"(threshold {TOLERANCE:g})")
        return out


def _random_config(variant: str, rng: np.random.Generator) -> FieldConfig:
    return FieldConfig(
        variant=variant,
        spatial_levels=int(rng.integers(2, 5)),
        spatial_feat=int(rng.integers(1, 3)),
        spatial_table=128,
        spatial_n_min=float(rng.integers(2, 5)),
        spatial_n_max=float(rng.integers(8, 25)),
        tcode_levels=int(rng.integers(1, 3)),
        tcode_feat=int(rng.integers(2, 7)),
        tcode_table=64,
        tcode_n_min=float(rng.integers(2, 9)),
        tcode_n_max=float(rng.integers(9, 31)),
        tcode_enabled=bool(rng.random() > 0.1),
        hidden_width=int(rng.choice([8, 16])),
        sigma_hidden_layers=int(rng.integers(1, 3)),
        color_hidden_layers=1,
        latent_dim=int(rng.integers(4, 9)),
        fourier_pos=int(rng.integers(2, 5)),
        fourier_time=int(rng.integers(2, 4)),
        fourier_dir=int(rng.integers(2, 4)),
        deform_hidden_layers=int(rng.integers(1, 3)),
        naive4d_pad=int(rng.integers(4, 9)),
    )


def _random_rays(rng: np.random.Generator, n_rays: int) -> RayBatch:
    # origins outside the box, aimed at jittered interior targets so
    # every ray crosses occupied space
    origins = np.where(rng.random((n_rays, 3)) < 0.5, -0.4, 1.4)
    origins += rng.uniform(-0.1, 0.1, (n_rays, 3))
    targets = rng.uniform(0.25, 0.75, (n_rays, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    times = rng.uniform(0, 1, n_rays)
    return RayBatch(origins, dirs, times, np.full(n_rays, 0.05),
                    np.full(n_rays, 4.0))


def _fingerprint(field, tape, sigma, opacity) -> np.ndarray:
    parts = []
    for mlp_tape in (tape.sigma_tape, tape.color_tape, tape.deform_tape):
        if mlp_tape is not None:
            parts.extend(np.asarray(m, dtype=bool).ravel()
                         for m in mlp_tape.masks)
    if tape.clamp_mask is not None:
        parts.append(tape.clamp_mask.astype(bool).ravel())
        # warped query positions move with the deformation parameters, so a
        # probe can push them across a hash-cell boundary; record the cells
        grid = field.sparse_grid_of("spatial.tables")
        pts = tape.st_spatial.points
        for res in grid.res:
            cells = np.floor(pts * float(res)).astype(np.int64)
            parts.append((cells & 1).astype(bool).ravel())
            parts.append(((cells >> 1) & 1).astype(bool).ravel())
    parts.append((sigma < SIGMA_CLIP).ravel())
    parts.append(((opacity > 1e-6) & (opacity <= 1.0)).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def check_variant(variant: str, n_configs: int = 200, seed: int = 0,
                  n_rays: int = 4, samples_per_ray: int = 8,
                  probes_per_param: int = 3) -> GradcheckReport:
    """Run the finite-difference suite for one architecture variant."""
    report = GradcheckReport(variant=variant, n_configs=n_configs)
    for trial in range(n_configs):
        rng = np.random.default_rng([seed, trial])
        cfg = _random_config(variant, rng)
        field = build_field(cfg, seed=int(rng.integers(1 << 31)),
                            dtype=np.float64)
        if variant == "dngpt":
            last = field._mlps["deform_mlp"].weights[-1]
            last[:] = 0.02 * rng.standard_normal(last.shape)

        rays = _random_rays(rng, n_rays)
        samples = sample_along_rays(rays, samples_per_ray, jitter=True,
                                    rng=rng)
        target = rng.uniform(0, 1, (n_rays, 3))
        background = rng.uniform(0, 1, 3)
        weights = LossWeights(photo=1.0, distortion=0.1, opacity=0.05,
                              sigma_entropy=0.05)

        def forward():
            sigma, rgb, tape = field.query(samples.positions, samples.times,
                                           samples.dirs, need_tape=True)
            out = volume_render(sigma, rgb, samples, background=background)
            breakdown, lgrads = loss_breakdown(
                1, weights, out.color, target, out.weights, samples.s_lo,
                samples.s_hi, samples.ray_index, samples.n_rays, out.opacity,
                sigma)
            fp = _fingerprint(field, tape, sigma, out.opacity)
            return breakdown.total, fp, tape, out, lgrads, sigma

        loss0, fp0, tape, out, lgrads, sigma = forward()
        d_sigma, d_rgb = render_backward(out.tape, lgrads["d_pred"],
                                         lgrads["d_render_weights"],
                                         lgrads["d_opacity"])
        d_sigma = d_sigma + lgrads["d_sigma"]
        field.zero_grad()
        field.backward(tape, d_sigma, d_rgb)
        analytic = {k: v.copy() for k, v in field.grads().items()}

        for name, p in field.params().items():
            flat = p.reshape(-1)
            gflat = analytic[name].reshape(-1)
            grid = field.sparse_grid_of(name)
            if grid is not None:
                cnt = int(grid.tcount[0])
                if cnt == 0:
                    continue
                rows = grid.touched[:cnt].astype(np.int64)
                t_size, feat = grid.tables.shape[1:]
                picks = rng.choice(rows, size=min(probes_per_param,
                                                  len(rows)), replace=False)
                cand = [(int(r) % t_size) * feat
                        + (int(r) // t_size) * t_size * feat
                        + int(rng.integers(feat)) for r in picks]
            else:
                cand = rng.choice(flat.size,
                                  size=min(probes_per_param, flat.size),
                                  replace=False)
            group = field.group_of(name)
            for ix in cand:
                orig = flat[ix]
                flat[ix] = orig + FD_STEP
                hi, fp_hi = forward()[:2]
                flat[ix] = orig - FD_STEP
                lo, fp_lo = forward()[:2]
                flat[ix] = orig
                if not np.array_equal(fp_hi, fp_lo):
                    report.skipped += 1
                    continue
                fd = (hi - lo) / (2 * FD_STEP)
                an = float(gflat[ix])
                err = abs(fd - an) / max(abs(fd), abs(an), DENOM_FLOOR)
                report.checked += 1
                if err > report.max_rel.get(group, 0.0):
                    report.max_rel[group] = err
    return report


def run_suite(variants=("hybrid", "naive4d", "dngpt"), n_configs: int = 200,
              seed: int = 0) -> list:
    return [check_variant(v, n_configs=n_configs, seed=seed)
            for v in variants]
