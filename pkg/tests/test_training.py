"""Optimizer, schedule, checkpoint, and training-loop tests."""

import json
import os

import numpy as np
import pytest

from tcode.encoding import HashGridConfig, MultiResHashGrid
from tcode.fields import FieldConfig, build_field
from tcode.rendering import render_image
from tcode.scenes_io import build_scene, generate_dataset, load_dataset
from tcode.training import (LrSchedule, NonFiniteGradientError, Optimizer,
                            OptimizerConfig, TrainSettings, build_schedule,
                            checkpoint_config, checkpoint_rng,
                            checkpoint_step, eval_split, load_checkpoint,
                            lr_at, restore_field, restore_occupancy,
                            save_checkpoint, train, training_checkpoint)
from oracle_utils import oracle_adam_scalar


class ScalarField:
    """Minimal parameter holder: one dense scalar living in group `mlp`."""

    def __init__(self, p0=0.5):
        self.p = np.array([[p0]], dtype=np.float64)
        self.g = np.zeros_like(self.p)

    def params(self):
        return {"mlp.w0": self.p}

    def grads(self):
        return {"mlp.w0": self.g}

    def group_of(self, name):
        return "mlp"

    def sparse_grid_of(self, name):
        return None


class TestOptimizerConfig:
    def test_rejects_unknown_kind_and_group(self):
        with pytest.raises(ValueError):
            OptimizerConfig(kind="sgd")
        with pytest.raises(ValueError):
            OptimizerConfig(weight_decay={"mlps": 1e-7})
        with pytest.raises(ValueError):
            OptimizerConfig(betas=(0.9, 1.0))
        with pytest.raises(ValueError):
            OptimizerConfig(eps=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig(weight_decay={"mlp": -1e-7})

    def test_color_group_falls_back_to_mlp(self):
        cfg = OptimizerConfig(weight_decay={"mlp": 1e-7})
        assert cfg.decay_for("mlp_color") == 1e-7
        cfg = OptimizerConfig(weight_decay={"mlp": 1e-7, "mlp_color": 5e-5})
        assert cfg.decay_for("mlp_color") == 5e-5
        assert cfg.decay_for("deformation") == 0.0


class TestOptimizerDense:
    def test_first_step_closed_form(self):
        f = ScalarField(p0=0.5)
        opt = Optimizer(f, OptimizerConfig(kind="adam", lr0=1e-3, eps=1e-15,
                                           betas=(0.9, 0.999)))
        f.g[0, 0] = 1.0
        opt.step(lr=1e-3)
        # bias-corrected m_hat = v_hat = 1 on the first step
        assert abs(f.p[0, 0] - (0.5 - 1e-3)) < 1e-12

    @pytest.mark.parametrize("kind,decay", [("adam", 0.0), ("adam", 0.03),
                                            ("adamw", 0.03)])
    def test_trajectory_matches_scalar_oracle(self, kind, decay, rng):
        f = ScalarField(p0=0.7)
        cfg = OptimizerConfig(kind=kind, eps=1e-15, betas=(0.9, 0.99),
                              weight_decay={"mlp": decay})
        opt = Optimizer(f, cfg)
        grads = rng.normal(size=10)
        for g in grads:
            f.g[0, 0] = g
            opt.step(lr=0.01)
        expect = oracle_adam_scalar(0.7, grads, 0.01, 0.9, 0.99, 1e-15,
                                    decay, decoupled=(kind == "adamw"))
        assert abs(f.p[0, 0] - expect) < 1e-7

    def test_adam_and_adamw_diverge_under_decay(self):
        fa, fw = ScalarField(0.7), ScalarField(0.7)
        for f, kind in ((fa, "adam"), (fw, "adamw")):
            opt = Optimizer(f, OptimizerConfig(
                kind=kind, weight_decay={"mlp": 0.1}))
            f.g[0, 0] = 0.2
            opt.step(lr=0.01)
        assert fa.p[0, 0] != fw.p[0, 0]

    def test_non_finite_gradient_leaves_params_untouched(self):
        f = ScalarField(0.7)
        opt = Optimizer(f, OptimizerConfig())
        f.g[0, 0] = np.nan
        with pytest.raises(NonFiniteGradientError, match="mlp.w0"):
            opt.step(lr=0.01)
        assert f.p[0, 0] == 0.7
        assert opt.step_count == 0


class TestOptimizerSparse:
    def make_grid_field(self, seed=3):
        grid = MultiResHashGrid(
            HashGridConfig(levels=1, feat_per_level=2, table_size=16,
                           n_min=4, n_max=4, dims=1),
            np.random.default_rng(seed))

        class GridField:
            def params(self):
                return {"spatial.tables": grid.tables}

            def grads(self):
                return {"spatial.tables": grid.grad}

            def group_of(self, name):
                return "hash_tables"

            def sparse_grid_of(self, name):
                return grid

        return grid, GridField()

    def test_untouched_rows_skipped_entirely(self, kernel_backend):
        grid, f = self.make_grid_field()
        before = grid.tables.copy()
        opt = Optimizer(f, OptimizerConfig(weight_decay={"hash_tables": 0.5}))
        opt.step(lr=0.1)  # nothing touched: even heavy decay must not apply
        assert np.array_equal(grid.tables, before)
        assert not opt.m["spatial.tables"].any()

    def test_touched_rows_match_scalar_oracle(self, kernel_backend):
        grid, f = self.make_grid_field()
        x = np.array([[0.40]], dtype=np.float32)
        _, stencil = grid.encode(x)
        touched_rows = np.unique(stencil.idx)
        row, feat = int(touched_rows[0]), 0
        p0 = float(grid.tables[0, row, feat])
        opt = Optimizer(f, OptimizerConfig(kind="adam", eps=1e-15,
                                           weight_decay={"hash_tables": 0.01}))
        seen = []
        rng = np.random.default_rng(8)
        for _ in range(10):
            grid.zero_grad()
            up = rng.normal(size=(1, grid.out_dim)).astype(np.float32)
            grid.encode_backward(stencil, up)
            seen.append(float(grid.grad[0, row, feat]))
            opt.step(lr=0.02)
        expect = oracle_adam_scalar(p0, seen, 0.02, 0.9, 0.99, 1e-15, 0.01,
                                    decoupled=False)
        assert abs(float(grid.tables[0, row, feat]) - expect) < 1e-6
        untouched = np.setdiff1d(np.arange(16), touched_rows)
        assert not opt.m["spatial.tables"][0, untouched].any()

    def test_non_finite_sparse_gradient_rejected(self, kernel_backend):
        grid, f = self.make_grid_field()
        x = np.array([[0.40]], dtype=np.float32)
        _, stencil = grid.encode(x)
        up = np.full((1, grid.out_dim), np.inf, dtype=np.float32)
        grid.encode_backward(stencil, up)
        before = grid.tables.copy()
        opt = Optimizer(f, OptimizerConfig())
        with pytest.raises(NonFiniteGradientError):
            opt.step(lr=0.01)
        assert np.array_equal(grid.tables, before)


class TestLrSchedule:
    def test_cosine_endpoints(self):
        s = LrSchedule(kind="cosine", lr0=1e-3)
        assert lr_at(s, 0, 100) == 1e-3
        assert abs(lr_at(s, 50, 100) - 5e-4) < 1e-18
        assert abs(lr_at(s, 100, 100)) < 1e-19

    def test_exp_decay_endpoints(self):
        s = LrSchedule(kind="exp", lr0=0.01, lr_final=0.001)
        assert lr_at(s, 0, 90) == 0.01
        assert lr_at(s, 90, 90) == 0.001

    def test_positive_before_total(self):
        for kind in ("cosine", "exp"):
            s = LrSchedule(kind=kind, lr0=0.01, lr_final=0.001)
            steps = np.arange(1000)
            assert all(lr_at(s, int(t), 1000) > 0 for t in steps)

    def test_bounds_and_validation(self):
        with pytest.raises(ValueError):
            lr_at(LrSchedule(), 5, 4)
        with pytest.raises(ValueError):
            lr_at(LrSchedule(), -1, 4)
        with pytest.raises(ValueError):
            LrSchedule(kind="linear")
        with pytest.raises(ValueError):
            LrSchedule(lr0=0.0)


class TestScheduleTable:
    def test_reference_milestones(self):
        t = build_schedule(90000)
        assert t.warmup_steps == 4096
        assert t.distortion_start_step == 18000
        assert t.occupancy_period == 16
        assert t.ratio_milestones == ((0, 0.5), (36000, 0.75), (54000, 0.875))

    def test_milestones_scale_with_total_steps(self):
        for total in (1000, 9000, 45000, 90000):
            t = build_schedule(total)
            assert abs(t.warmup_steps / total - 4096 / 90000) <= 0.5 / total
            assert t.distortion_start_step == round(0.2 * total)
            for (step, _), (frac, _) in zip(t.ratio_milestones,
                                            ((0.0, 0), (0.4, 0), (0.6, 0))):
                assert step == round(frac * total)
            # the occupancy period is a cache cadence, never rescaled
            assert t.occupancy_period == 16

    def test_serializes(self):
        d = build_schedule(100).to_dict()
        assert set(d) == {"total_steps", "warmup_steps",
                          "distortion_start_step", "occupancy_period",
                          "ratio_milestones", "eval_period"}


class TestCheckpointFile:
    def test_tensor_round_trip(self, tmp_path, rng):
        tensors = {
            "a.w": rng.normal(size=(3, 4)).astype(np.float32),
            "b": rng.normal(size=(5,)).astype(np.float32),
            "c.deep.name": rng.normal(size=(2, 2, 2)).astype(np.float32),
        }
        p = str(tmp_path / "x.bin")
        save_checkpoint(p, tensors, b"\x01" * 32)
        back, h = load_checkpoint(p)
        assert h == b"\x01" * 32
        assert list(back) == list(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])

    def test_header_plain_fields(self, tmp_path):
        p = str(tmp_path / "x.bin")
        save_checkpoint(p, {}, b"hash")
        raw = open(p, "rb").read()
        assert raw[:4] == b"TCOD"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 4
        assert raw[12:16] == b"hash"

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"PNG\x00junkjunk")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(str(p))


def tiny_field(seed=7, variant="hybrid"):
    cfg = FieldConfig(variant=variant, spatial_levels=4, spatial_table=2**12,
                      spatial_n_min=4, spatial_n_max=32, tcode_feat=8,
                      hidden_width=16, latent_dim=8)
    return cfg, build_field(cfg, seed=seed)


def tiny_dataset(root, layout="multicam", n_frames=3):
    kw = dict(n_frames=n_frames, resolution=16, oracle_samples=64)
    if layout == "multicam":
        kw["n_cameras"] = 2
    generate_dataset(build_scene("drift_sphere"), str(root), layout, **kw)
    return load_dataset(str(root))


def tiny_settings(total, **kw):
    base = dict(total_steps=total, ray_batch=64, n_samples=32,
                occupancy_resolution=8,
                optimizer=OptimizerConfig(lr0=1e-2),
                lr=LrSchedule(lr0=1e-2))
    base.update(kw)
    return TrainSettings(**base)


class TestTrainingCheckpoint:
    def test_state_round_trip(self, tmp_path, rng):
        _, field = tiny_field()
        opt = Optimizer(field, OptimizerConfig())
        gen = np.random.default_rng(42)
        gen.integers(0, 100, 7)  # advance the stream
        tensors = training_checkpoint(field, opt, step=123, rng=gen,
                                      config_json='{"a": 1}')
        p = str(tmp_path / "c.bin")
        save_checkpoint(p, tensors, b"h" * 32)
        back, _ = load_checkpoint(p)
        assert checkpoint_step(back) == 123
        assert checkpoint_config(back) == {"a": 1}
        twin = checkpoint_rng(back)
        assert np.array_equal(twin.integers(0, 10**9, 32),
                              gen.integers(0, 10**9, 32))
        _, field2 = tiny_field(seed=99)
        restore_field(back, field2)
        for k, v in field.params().items():
            assert np.array_equal(v, field2.params()[k])
        assert restore_occupancy(back) is None

    def test_large_step_counter_exact(self, tmp_path):
        _, field = tiny_field()
        opt = Optimizer(field, OptimizerConfig())
        t = training_checkpoint(field, opt, step=(1 << 40) + 12345,
                                rng=np.random.default_rng(0),
                                config_json="{}")
        p = str(tmp_path / "c.bin")
        save_checkpoint(p, t, b"")
        back, _ = load_checkpoint(p)
        assert checkpoint_step(back) == (1 << 40) + 12345


class TestTrainLoop:
    def test_zero_steps_keeps_init_and_still_evaluates(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        cfg, field = tiny_field()
        init = {k: v.copy() for k, v in field.params().items()}
        res = train(ds, field, tiny_settings(0), str(tmp_path / "run"))
        assert not res.aborted
        assert res.steps_run == 0
        for k, v in field.params().items():
            assert np.array_equal(v, init[k])
        assert len(res.metrics) == 1 and res.metrics[0]["step"] == 0
        assert os.path.exists(res.checkpoint_path)
        assert os.listdir(os.path.join(res.out_dir, "renders"))

    def test_loss_decreases(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        _, field = tiny_field()
        res = train(ds, field, tiny_settings(150), str(tmp_path / "run"))
        losses = [r["photometric"] for r in res.train_log]
        head = np.median(losses[: max(1, len(losses) // 20)])
        tail = np.median(losses[int(0.8 * len(losses)):])
        assert tail < head

    def test_deterministic_runs_are_byte_identical(self, tmp_path,
                                                   monkeypatch):
        monkeypatch.setenv("TCODE_DETERMINISTIC", "1")
        ds = tiny_dataset(tmp_path / "d")
        outs = []
        for sub in ("a", "b"):
            _, field = tiny_field()
            train(ds, field, tiny_settings(25), str(tmp_path / sub),
                  config_json="{}")
            outs.append(tmp_path / sub)
        for name in ("metrics.csv", "train_log.csv", "ckpt.bin"):
            assert (outs[0] / name).read_bytes() == \
                (outs[1] / name).read_bytes(), name
        renders = sorted(os.listdir(outs[0] / "renders"))
        assert renders
        for name in renders:
            assert (outs[0] / "renders" / name).read_bytes() == \
                (outs[1] / "renders" / name).read_bytes()

    def test_wall_clock_zeroed_in_deterministic_mode(self, tmp_path,
                                                     monkeypatch):
        monkeypatch.setenv("TCODE_DETERMINISTIC", "1")
        ds = tiny_dataset(tmp_path / "d")
        _, field = tiny_field()
        res = train(ds, field, tiny_settings(2), str(tmp_path / "run"))
        assert res.metrics[0]["wall_clock_s"] == 0.0

    def test_pause_and_resume_matches_straight_run(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        _, fa = tiny_field()
        ra = train(ds, fa, tiny_settings(24), str(tmp_path / "a"),
                   config_json='{"v":1}')
        _, fb = tiny_field()
        half = train(ds, fb, tiny_settings(24), str(tmp_path / "b"),
                     config_json='{"v":1}', stop_at=12)
        assert half.steps_run == 12 and not half.metrics
        rb = train(ds, fb, tiny_settings(24), str(tmp_path / "b2"),
                   resume=half.checkpoint_path, config_json='{"v":1}')
        assert [r["step"] for r in rb.train_log] == list(range(12, 24))
        for k, v in fa.params().items():
            assert np.array_equal(v, fb.params()[k]), k
        assert ra.train_log[12:] == rb.train_log
        assert ra.metrics[-1]["psnr"] == rb.metrics[-1]["psnr"]

    def test_resume_rejects_config_mismatch(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        _, field = tiny_field()
        half = train(ds, field, tiny_settings(6), str(tmp_path / "a"),
                     config_json='{"v":1}', stop_at=3)
        with pytest.raises(ValueError, match="hash"):
            train(ds, field, tiny_settings(6), str(tmp_path / "b"),
                  resume=half.checkpoint_path, config_json='{"v":2}')

    def test_nan_density_aborts_with_last_good_checkpoint(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        cfg, field = tiny_field()

        poisoned = {"calls": 0}
        original = type(field).query

        def query(self, x, t, dirs, need_tape=True):
            poisoned["calls"] += 1
            sigma, rgb, tape = original(self, x, t, dirs, need_tape)
            if poisoned["calls"] > 5:
                sigma = np.asarray(sigma).copy()
                sigma[0] = np.nan
            return sigma, rgb, tape

        field.query = query.__get__(field)
        res = train(ds, field, tiny_settings(40), str(tmp_path / "run"))
        assert res.aborted
        assert "non-finite density" in res.abort_reason
        assert res.steps_run == 5
        tensors, _ = load_checkpoint(res.checkpoint_path)
        assert checkpoint_step(tensors) == 5
        for name, v in tensors.items():
            if name.startswith("param."):
                assert np.isfinite(v).all(), name
        # the logs survive the abort
        assert os.path.exists(os.path.join(res.out_dir, "train_log.csv"))
        assert len(res.train_log) == 5

    def test_schedule_table_emitted(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        _, field = tiny_field()
        res = train(ds, field, tiny_settings(10), str(tmp_path / "run"))
        table = json.load(open(os.path.join(res.out_dir, "schedule.json")))
        assert table["total_steps"] == 10
        assert table["occupancy_period"] == 16

    def test_periodic_eval_rows(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        _, field = tiny_field()
        res = train(ds, field, tiny_settings(9, eval_period=3),
                    str(tmp_path / "run"))
        assert [r["step"] for r in res.metrics] == [3, 6, 9]

    def test_mono_layout_trains(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d", layout="mono", n_frames=9)
        _, field = tiny_field()
        res = train(ds, field, tiny_settings(8), str(tmp_path / "run"))
        assert not res.aborted
        assert len(res.train_log) == 8

    def test_fully_culled_batches_survive(self, tmp_path):
        # an occupancy grid that rejects every cell yields zero-sample
        # steps; the loop must keep stepping rather than crash
        ds = tiny_dataset(tmp_path / "d")
        _, field = tiny_field()
        params = field.params()
        biases = [k for k in params if k.startswith("sigma_mlp.b")]
        last = max(biases, key=lambda k: int(k.rsplit("b", 1)[1]))
        params[last][0] -= 1e4  # density logit underflows to ~0 everywhere
        settings = tiny_settings(6)
        res = train(ds, field, settings, str(tmp_path / "run"))
        assert not res.aborted
        assert [row["samples"] for row in res.train_log][-1] == 0


class TestEvalSplit:
    def test_empty_split_rejected(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        ds.splits[:] = "train"
        _, field = tiny_field()
        with pytest.raises(ValueError, match="empty"):
            eval_split(ds, field, "eval")

    def test_per_frame_rows(self, tmp_path):
        ds = tiny_dataset(tmp_path / "d")
        _, field = tiny_field()
        rows, mean_psnr, mean_dssim = eval_split(ds, field, "eval",
                                                 n_samples=16)
        assert len(rows) == len(ds.indices("eval"))
        assert mean_psnr == pytest.approx(
            np.mean([r["psnr"] for r in rows]))
        assert all(0 <= r["dssim"] <= 1 for r in rows)

    def test_render_matches_written_eval_png(self, tmp_path):
        from tcode.scenes_io import read_png, write_png

        ds = tiny_dataset(tmp_path / "d")
        _, field = tiny_field()
        res = train(ds, field, tiny_settings(4), str(tmp_path / "run"))
        rec = int(ds.indices("eval")[0])
        tensors, _ = load_checkpoint(res.checkpoint_path)
        _, twin = tiny_field(seed=55)
        restore_field(tensors, twin)
        grid = restore_occupancy(tensors)
        img = render_image(twin, ds.camera_for(rec), float(ds.times[rec]),
                           n_samples=32,
                           occupancy=grid if grid.updates else None,
                           mode="culled" if grid.updates else "dense")
        out = str(tmp_path / "again.png")
        write_png(out, img)
        name = f"step{res.steps_run:06d}_r{rec:03d}.png"
        written = os.path.join(res.out_dir, "renders", name)
        assert open(out, "rb").read() == open(written, "rb").read()
