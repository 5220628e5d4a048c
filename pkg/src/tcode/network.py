"""Tiny fully-connected networks with explicit forward/backward passes.

Weights are (fan_in, fan_out) so a batch forward is a plain row-major matmul.
Hidden layers use ReLU; the output layer is linear with an optional Sigmoid
or TruncExp activation. TruncExp is exp(clamp(x, -15, 15)), the saturating
exponential used for volume densities; its derivative is zero outside the
clamp so that analytic gradients agree with finite differences everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRUNC_LO = -15.0
TRUNC_HI = 15.0


def trunc_exp(x: np.ndarray):
    y = np.exp(np.clip(x, TRUNC_LO, TRUNC_HI))
    return y


def trunc_exp_backward(x: np.ndarray, y: np.ndarray, d_y: np.ndarray):
    inside = (x > TRUNC_LO) & (x < TRUNC_HI)
    return d_y * y * inside


def sigmoid(x: np.ndarray):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MlpSpec:
    in_dim: int
    out_dim: int
    hidden_layers: int
    hidden_width: int
    output_activation: str = "none"  # none | sigmoid | truncexp

    def __post_init__(self):
        if min(self.in_dim, self.out_dim, self.hidden_width) < 1 or self.hidden_layers < 0:
            raise ValueError("invalid MLP spec dims")
        if self.output_activation not in ("none", "sigmoid", "truncexp"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    def layer_dims(self):
        dims = [self.in_dim] + [self.hidden_width] * self.hidden_layers + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims())


@dataclass
class MlpTape:
    inputs: list  # input to each layer
    masks: list  # ReLU masks per hidden layer
    pre_out: np.ndarray | None  # pre-activation of the output layer
    out: np.ndarray


class Mlp:
    def __init__(self, spec: MlpSpec, rng: np.random.Generator, dtype=np.float32,
                 zero_last_layer: bool = False):
        self.spec = spec
        self.weights = []
        self.biases = []
        for fan_in, fan_out in spec.layer_dims():
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype))
            self.biases.append(np.zeros(fan_out, dtype))
        if zero_last_layer:
            self.weights[-1][:] = 0
        self.grad_w = [np.zeros_like(w) for w in self.weights]
        self.grad_b = [np.zeros_like(b) for b in self.biases]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def astype(self, dtype) -> "Mlp":
        self.weights = [w.astype(dtype) for w in self.weights]
        self.biases = [b.astype(dtype) for b in self.biases]
        self.grad_w = [g.astype(dtype) for g in self.grad_w]
        self.grad_b = [g.astype(dtype) for g in self.grad_b]
        return self

    def forward(self, x: np.ndarray, need_tape: bool = True):
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected (n, {self.spec.in_dim}) input, got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("non-finite input to mlp_forward")
        x = np.ascontiguousarray(x, dtype=self.weights[0].dtype)
        inputs, masks = [], []
        h = x
        last = self.n_layers - 1
        pre_out = None
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if li < last:
                mask = z > 0
                h = z * mask
                masks.append(mask)
            else:
                pre_out = z
                act = self.spec.output_activation
                if act == "sigmoid":
                    h = sigmoid(z)
                elif act == "truncexp":
                    h = trunc_exp(z)
                else:
                    h = z
        tape = MlpTape(inputs, masks, pre_out, h) if need_tape else None
        return h, tape

    def forward_first(self, x: np.ndarray) -> np.ndarray:
        """Forward pass materializing only the first output column, no tape.

        Density probes over large point batches need just the scalar head,
        so the output layer collapses to a matrix-vector product. Only valid
        for a linear output layer.
        """
        if self.spec.output_activation != "none":
            raise ValueError("forward_first requires a linear output layer")
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected (n, {self.spec.in_dim}) input, got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("non-finite input to mlp_forward")
        h = np.ascontiguousarray(x, dtype=self.weights[0].dtype)
        last = self.n_layers - 1
        for li in range(last):
            z = h @ self.weights[li] + self.biases[li]
            h = z * (z > 0)
        return h @ self.weights[last][:, 0] + self.biases[last][0]

    def backward(self, tape: MlpTape, d_out: np.ndarray) -> np.ndarray:
        """Accumulates parameter grads; returns d(loss)/d(input)."""
        if d_out.shape != tape.out.shape:
            raise ValueError(f"upstream shape {d_out.shape} != {tape.out.shape}")
        d_out = np.ascontiguousarray(d_out, dtype=self.weights[0].dtype)
        act = self.spec.output_activation
        if act == "sigmoid":
            y = tape.out
            d_z = d_out * y * (1 - y)
        elif act == "truncexp":
            d_z = trunc_exp_backward(tape.pre_out, tape.out, d_out)
        else:
            d_z = d_out
        for li in range(self.n_layers - 1, -1, -1):
            x = tape.inputs[li]
            self.grad_w[li] += x.T @ d_z
            self.grad_b[li] += d_z.sum(axis=0)
            d_x = d_z @ self.weights[li].T
            if li > 0:
                d_z = d_x * tape.masks[li - 1]
            else:
                d_z = d_x
        return d_z

    def zero_grad(self) -> None:
        for g in self.grad_w:
            g[:] = 0
        for g in self.grad_b:
            g[:] = 0
