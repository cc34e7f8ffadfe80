"""Volume rendering of flattened ray samples, pixel loss, and the analytic
backward pass from the pixel loss down to the field's pre-activation outputs.

Samples are stored ray-major: the samples of ray ``r`` occupy
``ray_offsets[r]:ray_offsets[r + 1]`` and are ordered by increasing ``t``.
All per-ray scans are done with global cumulative sums in float64 and a
per-ray correction, so forward and backward are O(B) with no Python loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
SIGMA_CLAMP = 10.0  # keep in sync with field.activate

# floats per sample retained between composite and backward: sigma, color(3), alpha, T, w
RENDER_FLOATS_PER_SAMPLE = 7
# MACs per sample for compositing: alpha, transmittance, weight, 3 colour accumulations
COMPOSITE_MACS_PER_SAMPLE = 6
RENDER_BACKWARD_MACS_PER_SAMPLE = 16


@dataclass
class RenderResult:
    color: np.ndarray  # (n_rays, 3), background composited
    weights: np.ndarray  # (B,)
    transmittance: np.ndarray  # (B,)  T_i, transmittance in front of sample i
    alpha: np.ndarray  # (B,)
    opacity: np.ndarray  # (n_rays,)  sum of weights
    background: np.ndarray  # (3,)

    @property
    def final_transmittance(self) -> np.ndarray:
        return 1.0 - self.opacity


@dataclass
class GradCache:
    """Per-sample dL/dsigma' (B,) and dL/dc' (B, 3)."""

    sigma_pre: np.ndarray
    color_pre: np.ndarray

    def as_matrix(self) -> np.ndarray:
        return np.concatenate([self.color_pre, self.sigma_pre[:, None]], axis=1)

    def subset(self, indices) -> "GradCache":
        return GradCache(self.sigma_pre[indices], self.color_pre[indices])


def _ray_ids(ray_offsets: np.ndarray) -> np.ndarray:
    counts = np.diff(ray_offsets)
    return np.repeat(np.arange(len(counts)), counts)


def composite_samples(
    sigma,
    color,
    deltas,
    ray_offsets,
    background=DEFAULT_BACKGROUND,
    early_termination: float | None = None,
    ledger=None,
) -> RenderResult:
    """Alpha-composite per-sample density and colour along each ray.

    ``early_termination`` is an inference-only threshold: samples whose
    transmittance has dropped below it contribute nothing.
    """
    sigma = np.asarray(sigma)
    color = np.asarray(color)
    deltas = np.asarray(deltas)
    ray_offsets = np.asarray(ray_offsets)
    if not (len(sigma) == len(color) == len(deltas) == ray_offsets[-1]):
        raise ValueError(
            f"misaligned samples: sigma {len(sigma)}, color {len(color)}, "
            f"deltas {len(deltas)}, ray_offsets end {ray_offsets[-1]}"
        )
    dtype = np.result_type(sigma.dtype, color.dtype, np.float32)
    bg = np.asarray(background, dtype=np.float64)
    n_rays = len(ray_offsets) - 1
    ray_ids = _ray_ids(ray_offsets)

    optical = sigma.astype(np.float64) * deltas.astype(np.float64)
    alpha = -np.expm1(-optical)
    inclusive = np.cumsum(optical)
    exclusive = inclusive - optical
    first = ray_offsets[:-1][ray_ids] if len(ray_ids) else ray_ids
    trans = np.exp(-(exclusive - exclusive[first])) if len(ray_ids) else optical
    weights = trans * alpha
    if early_termination is not None:
        weights = np.where(trans < early_termination, 0.0, weights)

    opacity = np.bincount(ray_ids, weights=weights, minlength=n_rays)
    rgb = np.stack(
        [np.bincount(ray_ids, weights=weights * color[:, k], minlength=n_rays) for k in range(3)],
        axis=1,
    )
    rgb += (1.0 - opacity)[:, None] * bg

    if ledger is not None:
        ledger.add_macs("composite", COMPOSITE_MACS_PER_SAMPLE * len(sigma))
    return RenderResult(
        color=rgb.astype(dtype),
        weights=weights.astype(dtype),
        transmittance=trans.astype(dtype),
        alpha=alpha.astype(dtype),
        opacity=opacity.astype(dtype),
        background=bg.astype(dtype),
    )


def composite(batch, outputs, background=DEFAULT_BACKGROUND, early_termination=None, ledger=None):
    """Render a ``SampleBatch`` given the field's activated outputs."""
    if len(outputs.sigma) != batch.size:
        raise ValueError(f"batch has {batch.size} samples but outputs have {len(outputs.sigma)}")
    return composite_samples(
        outputs.sigma,
        outputs.color,
        batch.deltas,
        batch.ray_offsets,
        background=background,
        early_termination=early_termination,
        ledger=ledger,
    )


def pixel_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Mean over rays of the RGB squared error; also returns per-ray losses."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    per_ray = np.sum(diff * diff, axis=-1)
    loss = float(per_ray.mean()) if len(per_ray) else 0.0
    return loss, per_ray


def backward_to_preactivations(batch, outputs, render: RenderResult, gt, ledger=None) -> GradCache:
    """Gradient of the mean pixel loss w.r.t. each sample's (sigma', c').

    Uses ``dC/ds_i = T_{i+1} (c_i - bg) - sum_{j>i} w_j (c_j - bg)`` with
    ``s_i = sigma_i * delta_i``; the sum over later samples is a per-ray
    suffix scan.
    """
    gt = np.asarray(gt, dtype=np.float64)
    n_rays = len(gt)
    ray_offsets = np.asarray(batch.ray_offsets)
    ray_ids = _ray_ids(ray_offsets)
    dtype = outputs.sigma.dtype

    grad_pixel = 2.0 * (render.color.astype(np.float64) - gt) / max(n_rays, 1)  # (n_rays, 3)
    g = grad_pixel[ray_ids]  # (B, 3)

    w = render.weights.astype(np.float64)
    c = outputs.color.astype(np.float64)
    bg = render.background.astype(np.float64)
    sigma = outputs.sigma.astype(np.float64)
    deltas = np.asarray(batch.deltas, dtype=np.float64)

    grad_color_pre = (w[:, None] * g) * c * (1.0 - c)

    shade = np.sum((c - bg) * g, axis=1)  # (c_i - bg) . dL/dC per sample
    trans_next = render.transmittance.astype(np.float64) * np.exp(-sigma * deltas)
    contrib = w * shade
    inclusive = np.cumsum(contrib)
    if len(ray_ids):
        last = ray_offsets[1:][ray_ids] - 1
        suffix = inclusive[last] - inclusive
    else:
        suffix = contrib
    grad_optical = trans_next * shade - suffix
    active = outputs.sigma_pre.astype(np.float64) < SIGMA_CLAMP
    grad_sigma_pre = grad_optical * deltas * sigma * active

    if not (np.all(np.isfinite(grad_sigma_pre)) and np.all(np.isfinite(grad_color_pre))):
        raise FloatingPointError("non-finite gradient in volume rendering backward")
    if ledger is not None:
        ledger.add_macs("render_backward", RENDER_BACKWARD_MACS_PER_SAMPLE * len(w))
    return GradCache(grad_sigma_pre.astype(dtype), grad_color_pre.astype(dtype))
