"""Run-config validation, overrides, hashing, and builders."""

import json

import pytest

from tcode import config as C
from tcode.fields import FieldConfig
from tcode.training import OPTIMIZER_GROUPS


class TestDefaults:
    def test_hybrid_recipe(self):
        cfg = C.default_config("hybrid")
        assert cfg["optimizer"]["kind"] == "adam"
        assert cfg["optimizer"]["lr0"] == 1e-3
        assert cfg["optimizer"]["eps"] == 1e-15
        assert (cfg["optimizer"]["beta1"], cfg["optimizer"]["beta2"]) \
            == (0.9, 0.99)
        assert cfg["schedule"]["lr_kind"] == "cosine"
        assert cfg["optimizer"]["weight_decay_mlp"] == 1e-7
        assert cfg["optimizer"]["weight_decay_hash_tables"] == 5e-8
        assert cfg["optimizer"]["weight_decay_deformation"] == 0.0

    def test_naive4d_matches_hybrid_recipe(self):
        hybrid = C.default_config("hybrid")
        naive = C.default_config("naive4d")
        assert naive["optimizer"] == hybrid["optimizer"]
        assert naive["schedule"] == hybrid["schedule"]
        assert naive["architecture"]["variant"] == "naive4d"

    def test_dngpt_recipe(self):
        cfg = C.default_config("dngpt")
        assert cfg["optimizer"]["kind"] == "adamw"
        assert cfg["optimizer"]["lr0"] == 0.01
        assert cfg["schedule"]["lr_kind"] == "exp"
        assert cfg["schedule"]["lr_final"] == 1e-3
        assert cfg["optimizer"]["weight_decay_mlp"] == 0.01
        assert cfg["optimizer"]["weight_decay_mlp_color"] == 5e-5
        assert cfg["optimizer"]["weight_decay_tcode"] == 5e-5

    def test_shared_defaults(self):
        cfg = C.default_config("hybrid")
        assert cfg["seed"] == 1337
        assert cfg["total_steps"] == 9000
        assert cfg["ray_batch"] == 512
        assert cfg["render"]["n_samples"] == 192
        assert cfg["render"]["occupancy_resolution"] == 64
        assert cfg["loss"]["photometric"] == 1.0
        assert cfg["loss"]["distortion"] == 0.0005
        assert cfg["sampler"]["ratio_milestones"] == [[0.0, 0.5],
                                                      [0.4, 0.75],
                                                      [0.6, 0.875]]
        assert cfg["schedule"]["occupancy_period"] == 16

    def test_architecture_matches_field_defaults(self):
        for variant in ("hybrid", "naive4d", "dngpt"):
            cfg = C.default_config(variant)
            assert cfg["architecture"] == \
                FieldConfig.defaults(variant).to_dict()

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown variant"):
            C.default_config("nerf")

    def test_defaults_are_independent_copies(self):
        a = C.default_config("hybrid")
        a["optimizer"]["lr0"] = 99.0
        a["sampler"]["ratio_milestones"].append([1.0, 1.0])
        b = C.default_config("hybrid")
        assert b["optimizer"]["lr0"] == 1e-3
        assert len(b["sampler"]["ratio_milestones"]) == 3


class TestValidate:
    def test_empty_config_fills_defaults(self):
        assert C.validate({}) == C.default_config("hybrid")

    def test_partial_config_keeps_other_defaults(self):
        cfg = C.validate({"optimizer": {"lr0": 0.5}, "seed": 7})
        assert cfg["optimizer"]["lr0"] == 0.5
        assert cfg["optimizer"]["kind"] == "adam"
        assert cfg["seed"] == 7
        assert cfg["total_steps"] == 9000

    def test_variant_switches_section_defaults(self):
        cfg = C.validate({"architecture": {"variant": "dngpt"}})
        assert cfg["optimizer"]["kind"] == "adamw"
        assert cfg["schedule"]["lr_kind"] == "exp"

    def test_unknown_keys_collected_with_dot_paths(self):
        with pytest.raises(ValueError) as err:
            C.validate({"optimizer": {"lr": 1.0, "mu": 2.0}, "bogus": 1})
        msg = str(err.value)
        assert "optimizer.lr" in msg
        assert "optimizer.mu" in msg
        assert "bogus" in msg

    def test_type_errors_reported(self):
        with pytest.raises(ValueError, match="total_steps"):
            C.validate({"total_steps": "many"})
        with pytest.raises(ValueError, match="optimizer.lr0"):
            C.validate({"optimizer": {"lr0": "fast"}})
        with pytest.raises(ValueError, match="tcode_enabled"):
            C.validate({"architecture": {"tcode_enabled": 1}})

    def test_bool_is_not_an_int(self):
        with pytest.raises(ValueError, match="total_steps"):
            C.validate({"total_steps": True})

    def test_int_accepted_for_float_key(self):
        cfg = C.validate({"optimizer": {"lr0": 1}})
        assert cfg["optimizer"]["lr0"] == 1

    def test_bad_variant_named(self):
        with pytest.raises(ValueError, match="nerf"):
            C.validate({"architecture": {"variant": "nerf"}})

    def test_non_object_root(self):
        with pytest.raises(ValueError, match="object"):
            C.validate([1, 2])

    def test_non_object_section(self):
        with pytest.raises(ValueError, match="optimizer"):
            C.validate({"optimizer": 3})


class TestOverrides:
    def test_coercion_by_key_type(self):
        raw = {}
        C.apply_overrides(raw, [
            ("optimizer.lr0", "0.002"),
            ("total_steps", "50"),
            ("architecture.tcode_enabled", "false"),
            ("optimizer.kind", "adamw"),
            ("render.background", "[1, 1, 1]"),
        ])
        cfg = C.validate(raw)
        assert cfg["optimizer"]["lr0"] == 0.002
        assert cfg["total_steps"] == 50
        assert cfg["architecture"]["tcode_enabled"] is False
        assert cfg["optimizer"]["kind"] == "adamw"
        assert cfg["render"]["background"] == [1, 1, 1]

    def test_variant_override_switches_defaults(self):
        raw = {}
        C.apply_overrides(raw, [("architecture.variant", "dngpt")])
        assert C.validate(raw)["optimizer"]["kind"] == "adamw"

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="optimizer.warp"):
            C.apply_overrides({}, [("optimizer.warp", "1")])
        with pytest.raises(ValueError, match="section.key"):
            C.apply_overrides({}, [("a.b.c", "1")])
        with pytest.raises(ValueError, match="unknown"):
            C.apply_overrides({}, [("bogus", "1")])

    def test_bad_literal_rejected(self):
        with pytest.raises(ValueError):
            C.apply_overrides({}, [("total_steps", "soon")])
        with pytest.raises(ValueError, match="boolean"):
            C.apply_overrides({}, [("architecture.tcode_enabled", "maybe")])

    def test_overrides_beat_file_values(self):
        raw = {"optimizer": {"lr0": 0.5}}
        C.apply_overrides(raw, [("optimizer.lr0", "0.25")])
        assert C.validate(raw)["optimizer"]["lr0"] == 0.25


class TestHashAndLoad:
    def test_hash_ignores_key_order(self):
        a = C.validate({"seed": 5, "optimizer": {"lr0": 0.1}})
        b = C.validate({"optimizer": {"lr0": 0.1}, "seed": 5})
        assert C.config_hash(a) == C.config_hash(b)
        assert len(C.config_hash(a)) == 32

    def test_hash_tracks_values(self):
        a = C.validate({"seed": 5})
        b = C.validate({"seed": 6})
        assert C.config_hash(a) != C.config_hash(b)

    def test_canonical_json_round_trips(self):
        cfg = C.default_config("dngpt")
        assert json.loads(C.canonical_json(cfg)) == cfg

    def test_load_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 11, "optimizer":
                                    {"lr0": 0.02}}))
        cfg = C.load(str(path), overrides=[("seed", "12")])
        assert cfg["seed"] == 12
        assert cfg["optimizer"]["lr0"] == 0.02

    def test_load_malformed(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{nope")
        with pytest.raises(ValueError, match="malformed"):
            C.load(str(path))


class TestBuilders:
    def test_field_config(self):
        cfg = C.validate({"architecture": {"variant": "dngpt",
                                           "hidden_width": 32}})
        fc = C.field_config_from(cfg)
        assert fc.variant == "dngpt"
        assert fc.hidden_width == 32

    def test_train_settings(self):
        cfg = C.validate({"total_steps": 123, "ray_batch": 32,
                          "optimizer": {"lr0": 0.5, "beta2": 0.95},
                          "schedule": {"eval_period": 7},
                          "render": {"background": [1.0, 0.5, 0.0]}})
        ts = C.train_settings_from(cfg)
        assert ts.total_steps == 123 and ts.ray_batch == 32
        assert ts.optimizer.lr0 == 0.5
        assert ts.optimizer.betas == (0.9, 0.95)
        assert ts.lr.lr0 == 0.5 and ts.lr.kind == "cosine"
        assert ts.eval_period == 7
        assert ts.background == (1.0, 0.5, 0.0)
        assert set(ts.optimizer.weight_decay) == set(OPTIMIZER_GROUPS)
        assert ts.ratio_milestones == ((0.0, 0.5), (0.4, 0.75),
                                       (0.6, 0.875))

    def test_settings_validate_downstream(self):
        cfg = C.validate({"optimizer": {"kind": "sgd"}})
        with pytest.raises(ValueError, match="sgd"):
            C.train_settings_from(cfg)


class TestHelp:
    def test_every_key_listed(self):
        lines = C.help_lines()
        text = "\n".join(lines)
        cfg = C.default_config("hybrid")
        paths = [k for k in cfg if not isinstance(cfg[k], dict)]
        paths += [f"{s}.{k}" for s in cfg if isinstance(cfg[s], dict)
                  for k in cfg[s]]
        for path in paths:
            assert path in text, path
        assert len(lines) == len(paths)

    def test_lines_carry_defaults(self):
        for line in C.help_lines():
            assert "default" in line
