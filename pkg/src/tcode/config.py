"""Run configuration: one JSON file with typed sections and strict keys.

A config is a plain nested dict. `validate` fills every missing key with
its default (several defaults depend on the architecture variant), rejects
unknown keys, and type-checks the rest, collecting all problems into one
error. Command-line overrides address keys dot-path style
(``optimizer.lr0``) and are applied to the raw dict before validation so a
variant override also switches the variant-dependent defaults.
"""

from __future__ import annotations

import hashlib
import json

from .fields import FieldConfig
from .objectives import LossWeights
from .training import (LrSchedule, OPTIMIZER_GROUPS, OptimizerConfig,
                       TrainSettings)

_ARCH_HELP = {
    "variant": "field architecture: hybrid | naive4d | dngpt",
    "spatial_levels": "resolution levels in the spatial hash grid",
    "spatial_feat": "features per spatial level",
    "spatial_table": "rows per spatial hash table",
    "spatial_n_min": "coarsest spatial grid resolution",
    "spatial_n_max": "finest spatial grid resolution",
    "tcode_levels": "resolution levels in the time hash grid",
    "tcode_feat": "features per time level",
    "tcode_table": "rows per time hash table",
    "tcode_n_min": "coarsest time grid resolution",
    "tcode_n_max": "finest time grid resolution",
    "tcode_enabled": "feed time features (false zeroes them, keeping shape)",
    "hidden_width": "hidden width of every MLP",
    "sigma_hidden_layers": "hidden layers in the density MLP",
    "color_hidden_layers": "hidden layers in the color MLP",
    "latent_dim": "geometry latent passed from density to color",
    "fourier_pos": "position frequency bands of the deformation input",
    "fourier_time": "time frequency bands of the deformation input",
    "fourier_dir": "view-direction frequency bands",
    "deform_hidden_layers": "hidden layers in the deformation MLP",
    "naive4d_pad": "zero padding of the 4D-grid density input",
}

# (hybrid default, help); VARIANT_DEFAULTS below patches other variants
_SCHEMA = {
    "optimizer": {
        "kind": ("adam", "optimizer family: adam | adamw"),
        "lr0": (1e-3, "peak learning rate"),
        "eps": (1e-15, "adaptive-step denominator offset"),
        "beta1": (0.9, "first-moment decay"),
        "beta2": (0.99, "second-moment decay"),
        "weight_decay_mlp": (1e-7, "decay for density-MLP weights"),
        "weight_decay_mlp_color": (1e-7, "decay for color-MLP weights"),
        "weight_decay_hash_tables": (5e-8, "decay for spatial hash tables"),
        "weight_decay_tcode": (5e-8, "decay for time hash tables"),
        "weight_decay_deformation": (0.0, "decay for deformation-MLP "
                                          "weights"),
    },
    "schedule": {
        "lr_kind": ("cosine", "learning-rate curve: cosine | exp"),
        "lr_final": (1e-3, "final learning rate (exp curve only)"),
        "warmup_fraction": (4096 / 90000, "fraction of steps sampled "
                                          "densely before culling starts"),
        "distortion_start_fraction": (0.2, "fraction of steps before the "
                                           "distortion loss switches on"),
        "occupancy_period": (16, "steps between occupancy cache refreshes "
                                 "(absolute, never rescaled)"),
        "eval_period": (0, "steps between held-out evaluations; 0 = final "
                           "only"),
    },
    "loss": {
        "photometric": (1.0, "weight of the squared color error"),
        "distortion": (0.0005, "weight of the along-ray distortion term"),
        "opacity": (0.005, "weight of the opacity entropy term"),
        "sigma_entropy": (0.005, "weight of the density entropy term"),
    },
    "sampler": {
        "gamma": (0.02, "saturation scale of the motion weighting"),
        "ratio_milestones": ([[0.0, 0.5], [0.4, 0.75], [0.6, 0.875]],
                             "(progress fraction, uniform-draw ratio) "
                             "milestones"),
    },
    "render": {
        "n_samples": (192, "ray-marching samples per ray"),
        "occupancy_resolution": (64, "occupancy grid cells per axis"),
        "background": ([0.0, 0.0, 0.0], "background color composited "
                                        "behind transparent rays"),
    },
    "paths": {
        "dataset": ("", "dataset directory (transforms.json inside)"),
        "out_dir": ("", "run output directory"),
        "resume": ("", "checkpoint to continue from (optional)"),
    },
}

_TOP_LEVEL = {
    "seed": (1337, "seed for parameters and sampling"),
    "total_steps": (9000, "optimization steps"),
    "ray_batch": (512, "rays per optimization step"),
}

VARIANT_DEFAULTS = {
    "hybrid": {},
    "naive4d": {},
    "dngpt": {
        "optimizer": {
            "kind": "adamw",
            "lr0": 0.01,
            "weight_decay_mlp": 0.01,
            "weight_decay_mlp_color": 5e-5,
            "weight_decay_hash_tables": 0.01,
            "weight_decay_tcode": 5e-5,
            "weight_decay_deformation": 0.01,
        },
        "schedule": {"lr_kind": "exp", "lr_final": 1e-3},
    },
}


def _read_variant(raw: dict) -> str:
    arch = raw.get("architecture", {})
    variant = arch.get("variant", "hybrid") if isinstance(arch, dict) \
        else "hybrid"
    if variant not in VARIANT_DEFAULTS:
        raise ValueError(f"architecture.variant: unknown variant "
                         f"{variant!r} (choose from "
                         f"{sorted(VARIANT_DEFAULTS)})")
    return variant


def default_config(variant: str = "hybrid") -> dict:
    if variant not in VARIANT_DEFAULTS:
        raise ValueError(f"unknown variant {variant!r}")
    cfg = {k: v for k, (v, _) in _TOP_LEVEL.items()}
    cfg["architecture"] = FieldConfig.defaults(variant).to_dict()
    for section, keys in _SCHEMA.items():
        cfg[section] = {k: v for k, (v, _) in keys.items()}
    for section, patch in VARIANT_DEFAULTS[variant].items():
        cfg[section].update(patch)
    return json.loads(json.dumps(cfg))  # deep copy, JSON-clean values


def _schema_default(section: str, key: str):
    if section == "architecture":
        arch = FieldConfig.defaults("hybrid").to_dict()
        if key not in arch:
            return None
        return arch[key]
    entry = _SCHEMA.get(section, {}).get(key)
    return entry[0] if entry else None


def _check_type(path: str, value, default, errors: list):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, list)
    if not ok:
        errors.append(f"{path}: expected {type(default).__name__}, "
                      f"got {value!r}")


def validate(raw: dict) -> dict:
    """Fill defaults, reject unknown keys, and type-check every value.

    All problems are collected and raised together so a broken config is
    diagnosed in one pass, before any compute starts.
    """
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    variant = _read_variant(raw)
    cfg = default_config(variant)
    errors: list = []
    for key, value in raw.items():
        if key in _TOP_LEVEL:
            _check_type(key, value, cfg[key], errors)
            cfg[key] = value
        elif key in cfg and isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                errors.append(f"{key}: expected an object")
                continue
            for sub, sval in value.items():
                if sub not in cfg[key]:
                    errors.append(f"unknown config key {key}.{sub}")
                    continue
                _check_type(f"{key}.{sub}", sval, cfg[key][sub], errors)
                cfg[key][sub] = sval
        else:
            errors.append(f"unknown config key {key}")
    if errors:
        raise ValueError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def load(path: str, overrides=()) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: malformed JSON ({err})") from err
    apply_overrides(raw, overrides)
    return validate(raw)


def _coerce(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text
    return json.loads(text)


def apply_overrides(raw: dict, pairs) -> dict:
    """Apply (dot.path, text value) pairs onto the raw config in place."""
    for path, text in pairs:
        parts = path.split(".")
        if len(parts) == 1:
            if parts[0] not in _TOP_LEVEL:
                raise ValueError(f"override {path!r}: unknown config key")
            raw[parts[0]] = _coerce(text, _TOP_LEVEL[parts[0]][0])
            continue
        if len(parts) != 2:
            raise ValueError(f"override {path!r}: expected section.key")
        section, key = parts
        default = _schema_default(section, key)
        if default is None:
            raise ValueError(f"override {path!r}: unknown config key")
        raw.setdefault(section, {})[key] = _coerce(text, default)
    return raw


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def identity_config(cfg: dict) -> dict:
    """Copy with the paths section blanked.

    File locations are not part of a run's identity: a checkpoint must
    resume under the same hyperparameters even when the dataset or output
    directory moved, and pointing paths.resume at the checkpoint must not
    change the hash the checkpoint is validated against.
    """
    out = json.loads(canonical_json(cfg))
    out["paths"] = {key: "" for key in out["paths"]}
    return out


def config_hash(cfg: dict) -> bytes:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).digest()


def field_config_from(cfg: dict) -> FieldConfig:
    return FieldConfig(**cfg["architecture"])


def train_settings_from(cfg: dict) -> TrainSettings:
    opt, sch = cfg["optimizer"], cfg["schedule"]
    loss, samp, rend = cfg["loss"], cfg["sampler"], cfg["render"]
    return TrainSettings(
        total_steps=cfg["total_steps"],
        ray_batch=cfg["ray_batch"],
        seed=cfg["seed"],
        n_samples=rend["n_samples"],
        occupancy_resolution=rend["occupancy_resolution"],
        background=tuple(rend["background"]),
        optimizer=OptimizerConfig(
            kind=opt["kind"], lr0=opt["lr0"], eps=opt["eps"],
            betas=(opt["beta1"], opt["beta2"]),
            weight_decay={g: opt[f"weight_decay_{g}"]
                          for g in OPTIMIZER_GROUPS}),
        lr=LrSchedule(kind=sch["lr_kind"], lr0=opt["lr0"],
                      lr_final=sch["lr_final"]),
        loss=LossWeights(photo=loss["photometric"],
                         distortion=loss["distortion"],
                         opacity=loss["opacity"],
                         sigma_entropy=loss["sigma_entropy"]),
        warmup_fraction=sch["warmup_fraction"],
        distortion_fraction=sch["distortion_start_fraction"],
        occupancy_period=sch["occupancy_period"],
        eval_period=sch["eval_period"],
        sampler_gamma=samp["gamma"],
        ratio_milestones=tuple(tuple(m) for m in samp["ratio_milestones"]),
    )


def help_lines() -> list:
    """One line per config key: dot path, default, description."""
    out = []
    for key, (default, text) in _TOP_LEVEL.items():
        out.append(f"{key:42s} default {default!r:18} {text}")
    arch_defaults = FieldConfig.defaults("hybrid").to_dict()
    for key, text in _ARCH_HELP.items():
        path = f"architecture.{key}"
        out.append(f"{path:42s} default {arch_defaults[key]!r:18} {text}")
    for section, keys in _SCHEMA.items():
        for key, (default, text) in keys.items():
            path = f"{section}.{key}"
            out.append(f"{path:42s} default {default!r:18} {text}")
    return out
