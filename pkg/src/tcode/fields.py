"""The three queryable field architectures mapping (x, t, direction) to
(density, color) with full gradient flow for training.

  hybrid: 3D spatial hash features and a 1D time-hash feature vector are
      concatenated into the sigma MLP; direction enters the color MLP as a
      spherical harmonics basis. Space and time stay decoupled: changing t
      moves only the time slice of the concatenated feature.
  naive4d: a single 4D hash of (x, y, z, t); the sigma MLP input is padded
      with zeros to the hybrid width so MLP capacity is identical and only
      the encoding differs.
  dngpt: a deformation MLP maps Fourier-encoded (position, time) to a
      residual warp; the spatial hash is queried at the warped (canonical)
      point, and the time-hash features condition only the color branch to
      absorb appearance changes.

Density uses a truncated-exponential activation on the first sigma-MLP output
channel; the remaining channels form the latent vector fed to the color MLP.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .encoding import (
    FourierEncoding,
    HashGridConfig,
    MultiResHashGrid,
    fourier_encode,
    sh_encode,
)
from .network import Mlp, MlpSpec, trunc_exp, trunc_exp_backward

VARIANTS = ("hybrid", "naive4d", "dngpt")


@dataclass
class FieldConfig:
    variant: str = "hybrid"
    # spatial grid (the 4D grid for naive4d)
    spatial_levels: int = 16
    spatial_feat: int = 2
    spatial_table: int = 2**19
    spatial_n_min: float = 16.0
    spatial_n_max: float = 2048.0
    # time grid
    tcode_levels: int = 1
    tcode_feat: int = 40
    tcode_table: int = 2**9
    tcode_n_min: float = 120.0
    tcode_n_max: float = 120.0
    tcode_enabled: bool = True  # when false the time features are fed as zeros
    # heads
    hidden_width: int = 64
    sigma_hidden_layers: int = 2
    color_hidden_layers: int = 1
    latent_dim: int = 48
    # deformation branch (dngpt only)
    fourier_pos: int = 10
    fourier_time: int = 6
    fourier_dir: int = 4
    deform_hidden_layers: int = 3
    # zero-padding of the sigma input for the 4D control, matching the width
    # the hybrid model gets from its time features
    naive4d_pad: int = 40

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown field variant {self.variant!r}")

    @classmethod
    def defaults(cls, variant: str) -> "FieldConfig":
        if variant == "dngpt":
            return cls(
                variant="dngpt",
                spatial_levels=12,
                tcode_levels=2,
                tcode_feat=20,
                tcode_table=2**7,
                tcode_n_min=30.0,
                tcode_n_max=100.0,
            )
        return cls(variant=variant)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}


@dataclass
class FieldTape:
    n: int
    sigma: np.ndarray
    raw_sigma: np.ndarray
    st_spatial: object = None
    st_tcode: object = None
    sigma_tape: object = None
    color_tape: object = None
    deform_tape: object = None
    clamp_mask: np.ndarray | None = None


def _as_time_column(t, n, dtype):
    t = np.asarray(t, dtype=dtype)
    if t.ndim == 0:
        t = np.full(n, float(t), dtype=dtype)
    if t.shape != (n,):
        raise ValueError(f"time must be scalar or ({n},), got {t.shape}")
    return t[:, None]


class Field:
    """Shared parameter bookkeeping; subclasses implement query/backward."""

    variant = "base"

    def __init__(self, cfg: FieldConfig, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self._grids: dict[str, MultiResHashGrid] = {}
        self._mlps: dict[str, Mlp] = {}
        self._seed = seed

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self._seed, stream])

    # -- parameter bookkeeping ------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for gname, grid in self._grids.items():
            out[f"{gname}.tables"] = grid.tables
        for mname, mlp in self._mlps.items():
            for li in range(mlp.n_layers):
                out[f"{mname}.w{li}"] = mlp.weights[li]
                out[f"{mname}.b{li}"] = mlp.biases[li]
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for gname, grid in self._grids.items():
            out[f"{gname}.tables"] = grid.grad
        for mname, mlp in self._mlps.items():
            for li in range(mlp.n_layers):
                out[f"{mname}.w{li}"] = mlp.grad_w[li]
                out[f"{mname}.b{li}"] = mlp.grad_b[li]
        return out

    def group_of(self, name: str) -> str:
        head = name.split(".")[0]
        return {
            "spatial": "hash_tables",
            "grid4d": "hash_tables",
            "tcode": "tcode",
            "sigma_mlp": "mlp",
            "color_mlp": "mlp_color",
            "deform_mlp": "deformation",
        }[head]

    def sparse_grid_of(self, name: str) -> MultiResHashGrid | None:
        head = name.split(".")[0]
        return self._grids.get(head)

    def param_count(self) -> dict:
        counts = {gname: grid.config.param_count() for gname, grid in self._grids.items()}
        counts.update({mname: mlp.spec.param_count() for mname, mlp in self._mlps.items()})
        counts["total"] = sum(counts.values())
        return counts

    def zero_grad(self) -> None:
        for grid in self._grids.values():
            grid.zero_grad()
        for mlp in self._mlps.values():
            mlp.zero_grad()

    def astype(self, dtype) -> "Field":
        self.dtype = dtype
        for grid in self._grids.values():
            grid.astype(dtype)
        for mlp in self._mlps.values():
            mlp.astype(dtype)
        return self

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        missing = set(own) - set(values)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, arr in own.items():
            src = values[name]
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            np.copyto(arr, src.astype(arr.dtype))

    # -- shared pieces ---------------------------------------------------------

    def _check_query(self, x, dirs):
        if not np.isfinite(x).all():
            raise ValueError("non-finite query position")
        if dirs is not None and len(dirs):  # fully culled batches are empty
            norms = np.linalg.norm(dirs, axis=1)
            if np.abs(norms - 1).max() > 1e-4:
                raise ValueError("query directions must be unit length")

    def _sigma_head(self, sig_in, need_tape):
        out, tape = self._mlps["sigma_mlp"].forward(sig_in, need_tape=need_tape)
        raw = out[:, 0]
        sigma = trunc_exp(raw)
        latent = out[:, 1:]
        return sigma, raw, latent, tape

    def _tcode_features(self, t_col, need_tape):
        grid = self._grids["tcode"]
        if self.cfg.tcode_enabled:
            return grid.encode(t_col, need_stencil=need_tape)
        return np.zeros((t_col.shape[0], grid.out_dim), self.dtype), None


class HybridField(Field):
    variant = "hybrid"

    def __init__(self, cfg: FieldConfig, seed: int, dtype=np.float32):
        super().__init__(cfg, seed, dtype)
        self._grids["spatial"] = MultiResHashGrid(
            HashGridConfig(3, cfg.spatial_levels, cfg.spatial_feat, cfg.spatial_table,
                           cfg.spatial_n_min, cfg.spatial_n_max),
            self._rng(0), dtype)
        self._grids["tcode"] = MultiResHashGrid(
            HashGridConfig(1, cfg.tcode_levels, cfg.tcode_feat, cfg.tcode_table,
                           cfg.tcode_n_min, cfg.tcode_n_max),
            self._rng(1), dtype)
        sig_in = self._grids["spatial"].out_dim + self._grids["tcode"].out_dim
        self._mlps["sigma_mlp"] = Mlp(
            MlpSpec(sig_in, 1 + cfg.latent_dim, cfg.sigma_hidden_layers, cfg.hidden_width),
            self._rng(2), dtype)
        self._mlps["color_mlp"] = Mlp(
            MlpSpec(cfg.latent_dim + 16, 3, cfg.color_hidden_layers, cfg.hidden_width,
                    output_activation="sigmoid"),
            self._rng(3), dtype)

    def _sigma_input(self, x, t, need_tape):
        x = np.ascontiguousarray(x, self.dtype)
        t_col = _as_time_column(t, x.shape[0], self.dtype)
        psi, st_sp = self._grids["spatial"].encode(x, need_stencil=need_tape)
        gamma, st_t = self._tcode_features(t_col, need_tape)
        return np.concatenate([psi, gamma], axis=1), st_sp, st_t

    def density(self, x, t):
        sig_in, _, _ = self._sigma_input(x, t, need_tape=False)
        return trunc_exp(self._mlps["sigma_mlp"].forward_first(sig_in))

    def query(self, x, t, dirs, need_tape=True):
        self._check_query(x, dirs)
        sig_in, st_sp, st_t = self._sigma_input(x, t, need_tape)
        sigma, raw, latent, sig_tape = self._sigma_head(sig_in, need_tape)
        col_in = np.concatenate([latent, sh_encode(np.asarray(dirs, self.dtype))], axis=1)
        color, col_tape = self._mlps["color_mlp"].forward(col_in, need_tape=need_tape)
        tape = None
        if need_tape:
            tape = FieldTape(x.shape[0], sigma, raw, st_spatial=st_sp, st_tcode=st_t,
                             sigma_tape=sig_tape, color_tape=col_tape)
        return sigma, color, tape

    def backward(self, tape: FieldTape, d_sigma, d_color) -> None:
        lat = self.cfg.latent_dim
        d_col_in = self._mlps["color_mlp"].backward(tape.color_tape, d_color)
        d_sig_out = np.empty((tape.n, 1 + lat), self.dtype)
        d_sig_out[:, 0] = trunc_exp_backward(tape.raw_sigma, tape.sigma, d_sigma)
        d_sig_out[:, 1:] = d_col_in[:, :lat]
        d_sig_in = self._mlps["sigma_mlp"].backward(tape.sigma_tape, d_sig_out)
        sp_dim = self._grids["spatial"].out_dim
        self._grids["spatial"].encode_backward(tape.st_spatial, d_sig_in[:, :sp_dim])
        if self.cfg.tcode_enabled:
            self._grids["tcode"].encode_backward(tape.st_tcode, d_sig_in[:, sp_dim:])


class Naive4DField(Field):
    variant = "naive4d"

    def __init__(self, cfg: FieldConfig, seed: int, dtype=np.float32):
        super().__init__(cfg, seed, dtype)
        self._grids["grid4d"] = MultiResHashGrid(
            HashGridConfig(4, cfg.spatial_levels, cfg.spatial_feat, cfg.spatial_table,
                           cfg.spatial_n_min, cfg.spatial_n_max),
            self._rng(5), dtype)
        sig_in = self._grids["grid4d"].out_dim + cfg.naive4d_pad
        self._mlps["sigma_mlp"] = Mlp(
            MlpSpec(sig_in, 1 + cfg.latent_dim, cfg.sigma_hidden_layers, cfg.hidden_width),
            self._rng(2), dtype)
        self._mlps["color_mlp"] = Mlp(
            MlpSpec(cfg.latent_dim + 16, 3, cfg.color_hidden_layers, cfg.hidden_width,
                    output_activation="sigmoid"),
            self._rng(3), dtype)

    def _sigma_input(self, x, t, need_tape):
        x = np.ascontiguousarray(x, self.dtype)
        t_col = _as_time_column(t, x.shape[0], self.dtype)
        xt = np.concatenate([x, t_col], axis=1)
        psi, st = self._grids["grid4d"].encode(xt, need_stencil=need_tape)
        pad = np.zeros((x.shape[0], self.cfg.naive4d_pad), self.dtype)
        return np.concatenate([psi, pad], axis=1), st

    def density(self, x, t):
        sig_in, _ = self._sigma_input(x, t, need_tape=False)
        return trunc_exp(self._mlps["sigma_mlp"].forward_first(sig_in))

    def query(self, x, t, dirs, need_tape=True):
        self._check_query(x, dirs)
        sig_in, st = self._sigma_input(x, t, need_tape)
        sigma, raw, latent, sig_tape = self._sigma_head(sig_in, need_tape)
        col_in = np.concatenate([latent, sh_encode(np.asarray(dirs, self.dtype))], axis=1)
        color, col_tape = self._mlps["color_mlp"].forward(col_in, need_tape=need_tape)
        tape = None
        if need_tape:
            tape = FieldTape(x.shape[0], sigma, raw, st_spatial=st,
                             sigma_tape=sig_tape, color_tape=col_tape)
        return sigma, color, tape

    def backward(self, tape: FieldTape, d_sigma, d_color) -> None:
        lat = self.cfg.latent_dim
        d_col_in = self._mlps["color_mlp"].backward(tape.color_tape, d_color)
        d_sig_out = np.empty((tape.n, 1 + lat), self.dtype)
        d_sig_out[:, 0] = trunc_exp_backward(tape.raw_sigma, tape.sigma, d_sigma)
        d_sig_out[:, 1:] = d_col_in[:, :lat]
        d_sig_in = self._mlps["sigma_mlp"].backward(tape.sigma_tape, d_sig_out)
        g_dim = self._grids["grid4d"].out_dim
        self._grids["grid4d"].encode_backward(tape.st_spatial, d_sig_in[:, :g_dim])


class DngptField(Field):
    variant = "dngpt"

    def __init__(self, cfg: FieldConfig, seed: int, dtype=np.float32):
        super().__init__(cfg, seed, dtype)
        self._grids["spatial"] = MultiResHashGrid(
            HashGridConfig(3, cfg.spatial_levels, cfg.spatial_feat, cfg.spatial_table,
                           cfg.spatial_n_min, cfg.spatial_n_max),
            self._rng(0), dtype)
        self._grids["tcode"] = MultiResHashGrid(
            HashGridConfig(1, cfg.tcode_levels, cfg.tcode_feat, cfg.tcode_table,
                           cfg.tcode_n_min, cfg.tcode_n_max),
            self._rng(1), dtype)
        self.enc_pos = FourierEncoding(cfg.fourier_pos, include_input=True)
        self.enc_time = FourierEncoding(cfg.fourier_time, include_input=True)
        self.enc_dir = FourierEncoding(cfg.fourier_dir, include_input=True)
        eta_dim = self.enc_pos.out_dim(3)
        tau_dim = self.enc_time.out_dim(1)
        dir_dim = self.enc_dir.out_dim(3)
        self._mlps["deform_mlp"] = Mlp(
            MlpSpec(eta_dim + tau_dim, 3, cfg.deform_hidden_layers, cfg.hidden_width),
            self._rng(4), dtype, zero_last_layer=True)
        sig_in = self._grids["spatial"].out_dim + eta_dim
        self._mlps["sigma_mlp"] = Mlp(
            MlpSpec(sig_in, 1 + cfg.latent_dim, cfg.sigma_hidden_layers, cfg.hidden_width),
            self._rng(2), dtype)
        col_in = cfg.latent_dim + tau_dim + self._grids["tcode"].out_dim + dir_dim
        self._mlps["color_mlp"] = Mlp(
            MlpSpec(col_in, 3, cfg.color_hidden_layers, cfg.hidden_width,
                    output_activation="sigmoid"),
            self._rng(3), dtype)

    def _warp(self, x, t_col, need_tape):
        eta = fourier_encode(x, self.enc_pos).astype(self.dtype)
        tau = fourier_encode(t_col, self.enc_time).astype(self.dtype)
        delta, d_tape = self._mlps["deform_mlp"].forward(
            np.concatenate([eta, tau], axis=1), need_tape=need_tape)
        raw = x + delta
        warped = np.clip(raw, 0.0, 1.0)
        clamp_mask = ((raw > 0.0) & (raw < 1.0)).astype(self.dtype)
        return eta, tau, warped, clamp_mask, d_tape

    def _sigma_parts(self, x, t, need_tape):
        x = np.ascontiguousarray(x, self.dtype)
        t_col = _as_time_column(t, x.shape[0], self.dtype)
        eta, tau, warped, clamp_mask, d_tape = self._warp(x, t_col, need_tape)
        psi, st_sp = self._grids["spatial"].encode(warped, need_stencil=need_tape)
        sig_in = np.concatenate([psi, eta], axis=1)
        return sig_in, t_col, tau, st_sp, clamp_mask, d_tape

    def density(self, x, t):
        sig_in, _, _, _, _, _ = self._sigma_parts(x, t, need_tape=False)
        return trunc_exp(self._mlps["sigma_mlp"].forward_first(sig_in))

    def query(self, x, t, dirs, need_tape=True):
        self._check_query(x, dirs)
        sig_in, t_col, tau, st_sp, clamp_mask, d_tape = self._sigma_parts(x, t, need_tape)
        sigma, raw, latent, sig_tape = self._sigma_head(sig_in, need_tape)
        gamma, st_t = self._tcode_features(t_col, need_tape)
        dir_enc = fourier_encode(np.asarray(dirs, self.dtype), self.enc_dir).astype(self.dtype)
        col_in = np.concatenate([latent, tau, gamma, dir_enc], axis=1)
        color, col_tape = self._mlps["color_mlp"].forward(col_in, need_tape=need_tape)
        tape = None
        if need_tape:
            tape = FieldTape(x.shape[0], sigma, raw, st_spatial=st_sp, st_tcode=st_t,
                             sigma_tape=sig_tape, color_tape=col_tape,
                             deform_tape=d_tape, clamp_mask=clamp_mask)
        return sigma, color, tape

    def backward(self, tape: FieldTape, d_sigma, d_color) -> None:
        cfg = self.cfg
        lat = cfg.latent_dim
        tau_dim = self.enc_time.out_dim(1)
        t_dim = self._grids["tcode"].out_dim
        d_col_in = self._mlps["color_mlp"].backward(tape.color_tape, d_color)
        if cfg.tcode_enabled:
            d_gamma = d_col_in[:, lat + tau_dim : lat + tau_dim + t_dim]
            self._grids["tcode"].encode_backward(tape.st_tcode, d_gamma)
        d_sig_out = np.empty((tape.n, 1 + lat), self.dtype)
        d_sig_out[:, 0] = trunc_exp_backward(tape.raw_sigma, tape.sigma, d_sigma)
        d_sig_out[:, 1:] = d_col_in[:, :lat]
        d_sig_in = self._mlps["sigma_mlp"].backward(tape.sigma_tape, d_sig_out)
        sp_dim = self._grids["spatial"].out_dim
        d_psi = np.ascontiguousarray(d_sig_in[:, :sp_dim])
        self._grids["spatial"].encode_backward(tape.st_spatial, d_psi)
        # deformation gradient flows through the warped query position
        d_warped = self._grids["spatial"].encode_backward_points(tape.st_spatial, d_psi)
        self._mlps["deform_mlp"].backward(tape.deform_tape, d_warped * tape.clamp_mask)


def build_field(cfg: FieldConfig, seed: int, dtype=np.float32) -> Field:
    cls = {"hybrid": HybridField, "naive4d": Naive4DField, "dngpt": DngptField}[cfg.variant]
    return cls(cfg, seed, dtype)
