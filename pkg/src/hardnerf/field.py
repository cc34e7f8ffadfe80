"""Radiance field: hash encoding -> density MLP -> colour MLP.

The density MLP maps hash features to 16 outputs; the first is the density
pre-activation, the remaining 15 are a latent passed (with a sinusoidal
view-direction encoding) to the colour MLP, whose 3 outputs are the colour
pre-activations.

``forward_inference`` keeps nothing. ``forward_training`` runs the same code
and additionally returns a :class:`Tape` that ``backward`` consumes once.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import tensorfile
from .encoding import HashGrid, HashGridConfig, encode, encode_backward
from .renderer import SIGMA_CLAMP


@dataclass(frozen=True)
class FieldConfig:
    grid: HashGridConfig = HashGridConfig()
    hidden: int = 64
    density_out: int = 16  # density pre-activation + latent
    color_hidden: int = 64
    color_layers: int = 2
    dir_bands: int = 4

    @property
    def dir_dim(self) -> int:
        return 3 * 2 * self.dir_bands

    @property
    def latent_dim(self) -> int:
        return self.density_out - 1

    def layer_dims(self) -> dict[str, tuple[int, int]]:
        dims = {
            "density0": (self.grid.output_dim, self.hidden),
            "density1": (self.hidden, self.density_out),
        }
        widths = [self.latent_dim + self.dir_dim] + [self.color_hidden] * self.color_layers + [3]
        for k in range(len(widths) - 1):
            dims[f"color{k}"] = (widths[k], widths[k + 1])
        return dims

    @property
    def color_layer_names(self) -> list[str]:
        return [f"color{k}" for k in range(self.color_layers + 1)]

    @property
    def tape_floats_per_sample(self) -> int:
        """Floats a training forward retains per sample: position, hash
        features, each hidden pre-activation, and the colour MLP input."""
        return 3 + self.grid.output_dim + self.hidden + (self.latent_dim + self.dir_dim) + self.color_hidden * self.color_layers

    @property
    def forward_macs_per_sample(self) -> int:
        return self.grid.forward_macs + sum(i * o for i, o in self.layer_dims().values())

    @property
    def density_macs_per_sample(self) -> int:
        dims = self.layer_dims()
        return self.grid.forward_macs + sum(i * o for i, o in (dims["density0"], dims["density1"]))

    @property
    def backward_macs_per_sample(self) -> int:
        """Weight gradients for every layer, input gradients wherever the
        input depends on parameters (not for the view-direction part), and
        the hash-table scatter."""
        dims = self.layer_dims()
        weight_grads = sum(i * o for i, o in dims.values())
        input_grads = sum(i * o for name, (i, o) in dims.items() if name != "color0")
        input_grads += self.latent_dim * dims["color0"][1]
        return weight_grads + input_grads + self.grid.forward_macs


@dataclass
class FieldParams:
    config: FieldConfig
    grid: HashGrid
    weights: dict[str, np.ndarray]  # "<layer>.w" (in, out) and "<layer>.b" (out,)

    @classmethod
    def create(cls, config: FieldConfig = FieldConfig(), seed: int = 0, dtype=np.float32) -> "FieldParams":
        rng = np.random.default_rng(seed)
        grid = HashGrid.create(config.grid, rng=rng, dtype=dtype)
        weights = {}
        for name, (i, o) in config.layer_dims().items():
            bound = np.sqrt(6.0 / i)  # He-uniform for ReLU
            weights[f"{name}.w"] = rng.uniform(-bound, bound, size=(i, o)).astype(dtype)
            weights[f"{name}.b"] = np.zeros(o, dtype=dtype)
        return cls(config, grid, weights)

    @property
    def dtype(self):
        return self.grid.table.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        """Every learnable array by name (shared, not copied)."""
        return {"hash": self.grid.table, **self.weights}

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors().items()}

    def copy(self) -> "FieldParams":
        return FieldParams(
            self.config,
            HashGrid(self.grid.table.copy(), self.grid.config),
            {k: v.copy() for k, v in self.weights.items()},
        )

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(
            self.config,
            HashGrid(self.grid.table.astype(dtype), self.grid.config),
            {k: v.astype(dtype) for k, v in self.weights.items()},
        )

    def save(self, path) -> None:
        meta = {
            "kind": "radiance_field",
            "config": asdict(self.config),
            "layers": {k: list(v) for k, v in self.config.layer_dims().items()},
            "activations": {"hidden": "relu", "sigma": "exp_clamped", "color": "sigmoid"},
        }
        tensorfile.save(path, meta, self.tensors())

    @classmethod
    def load(cls, path) -> "FieldParams":
        meta, tensors = tensorfile.load(path)
        cfg = meta["config"]
        config = FieldConfig(grid=HashGridConfig(**cfg.pop("grid")), **cfg)
        table = tensors.pop("hash")
        return cls(config, HashGrid(table, config.grid), tensors)


@dataclass
class FieldOutput:
    sigma_pre: np.ndarray  # (n,)
    color_pre: np.ndarray  # (n, 3)
    sigma: np.ndarray  # (n,)
    color: np.ndarray  # (n, 3)

    def __len__(self):
        return len(self.sigma)


@dataclass
class Tape:
    positions: np.ndarray
    features: np.ndarray
    z_density: np.ndarray
    color_in: np.ndarray
    z_color: list[np.ndarray]
    params: FieldParams
    consumed: bool = field(default=False)

    @property
    def batch_size(self) -> int:
        return len(self.positions)

    @property
    def float_count(self) -> int:
        arrays = [self.positions, self.features, self.z_density, self.color_in, *self.z_color]
        return int(sum(a.size for a in arrays))


def activate(sigma_pre, color_pre):
    """Density ``exp(min(sigma', 10))`` and colour ``sigmoid(c')``."""
    sigma = np.exp(np.minimum(sigma_pre, SIGMA_CLAMP))
    return sigma, expit(color_pre)


def encode_directions(dirs, bands: int) -> np.ndarray:
    dirs = np.asarray(dirs)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    angles = (dirs[:, None, :] * freqs[:, None]).reshape(len(dirs), -1).astype(dirs.dtype)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _check_inputs(points, view_dirs):
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(view_dirs))):
        raise ValueError("non-finite field input")


def _forward(params: FieldParams, points, view_dirs, record: bool):
    _check_inputs(points, view_dirs)
    cfg = params.config
    w = params.weights
    dtype = params.dtype
    points = np.asarray(points, dtype=dtype)
    view_dirs = np.asarray(view_dirs, dtype=dtype)

    feats = encode(params.grid, points)
    z_d = feats @ w["density0.w"] + w["density0.b"]
    dens = np.maximum(z_d, 0) @ w["density1.w"] + w["density1.b"]
    color_in = np.concatenate([dens[:, 1:], encode_directions(view_dirs, cfg.dir_bands)], axis=1)
    h = color_in
    z_color = []
    names = cfg.color_layer_names
    for name in names[:-1]:
        z = h @ w[f"{name}.w"] + w[f"{name}.b"]
        z_color.append(z)
        h = np.maximum(z, 0)
    color_pre = h @ w[f"{names[-1]}.w"] + w[f"{names[-1]}.b"]
    sigma_pre = dens[:, 0].copy()
    sigma, color = activate(sigma_pre, color_pre)
    out = FieldOutput(sigma_pre, color_pre, sigma, color)
    tape = Tape(points, feats, z_d, color_in, z_color, params) if record else None
    return out, tape


def forward_inference(params: FieldParams, points, view_dirs, ledger=None) -> FieldOutput:
    """Evaluate the field without retaining anything for a backward pass."""
    out, _ = _forward(params, points, view_dirs, record=False)
    if ledger is not None:
        ledger.add_macs("forward_inference", params.config.forward_macs_per_sample * len(out))
    return out


def forward_training(params: FieldParams, points, view_dirs, ledger=None) -> tuple[FieldOutput, Tape]:
    """Evaluate the field and record the intermediates ``backward`` needs."""
    out, tape = _forward(params, points, view_dirs, record=True)
    if ledger is not None:
        ledger.add_macs("forward_training", params.config.forward_macs_per_sample * len(out))
        ledger.retain(tape.float_count)
    return out, tape


def density_only(params: FieldParams, points, ledger=None, chunk: int = 1 << 16) -> np.ndarray:
    """Activated density at unit-cube ``points``; skips the colour MLP."""
    w = params.weights
    points = np.asarray(points, dtype=params.dtype)
    out = np.empty(len(points), dtype=params.dtype)
    for s in range(0, len(points), chunk):
        feats = encode(params.grid, points[s : s + chunk])
        h = np.maximum(feats @ w["density0.w"] + w["density0.b"], 0)
        sigma_pre = h @ w["density1.w"][:, 0] + w["density1.b"][0]
        out[s : s + chunk] = np.exp(np.minimum(sigma_pre, SIGMA_CLAMP))
    if ledger is not None:
        ledger.add_macs("occupancy", params.config.density_macs_per_sample * len(points))
    return out


def backward(tape: Tape, grad_sigma_pre, grad_color_pre, ledger=None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on (sigma', c').

    Returns a dict keyed like ``FieldParams.tensors()``. Consumes the tape.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward")
    n = tape.batch_size
    grad_sigma_pre = np.asarray(grad_sigma_pre).reshape(-1)
    grad_color_pre = np.asarray(grad_color_pre)
    if grad_sigma_pre.shape != (n,) or grad_color_pre.shape != (n, 3):
        raise ValueError(
            f"gradient shapes {grad_sigma_pre.shape}, {grad_color_pre.shape} do not match batch of {n}"
        )
    params = tape.params
    cfg = params.config
    w = params.weights
    dtype = params.dtype
    grads = {}

    names = cfg.color_layer_names
    g = grad_color_pre.astype(dtype)
    inputs = [tape.color_in] + [np.maximum(z, 0) for z in tape.z_color]
    for k in range(len(names) - 1, -1, -1):
        name = names[k]
        grads[f"{name}.w"] = inputs[k].T @ g
        grads[f"{name}.b"] = g.sum(axis=0)
        if k > 0:
            g = (g @ w[f"{name}.w"].T) * (tape.z_color[k - 1] > 0)
        else:
            g_latent = g @ w[f"{name}.w"][: cfg.latent_dim].T

    g_dens = np.concatenate([grad_sigma_pre.astype(dtype)[:, None], g_latent], axis=1)
    h1 = np.maximum(tape.z_density, 0)
    grads["density1.w"] = h1.T @ g_dens
    grads["density1.b"] = g_dens.sum(axis=0)
    g_z = (g_dens @ w["density1.w"].T) * (tape.z_density > 0)
    grads["density0.w"] = tape.features.T @ g_z
    grads["density0.b"] = g_z.sum(axis=0)
    g_feat = g_z @ w["density0.w"].T

    grad_table = np.zeros_like(params.grid.table)
    encode_backward(params.grid, tape.positions, g_feat, grad_table)
    grads["hash"] = grad_table

    tape.consumed = True
    if ledger is not None:
        ledger.add_macs("backward", cfg.backward_macs_per_sample * n)
        ledger.release(tape.float_count)
    return {k: grads[k] for k in params.tensors()}
