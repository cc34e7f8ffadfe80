"""Online hard-sample selection from propagated pixel-loss gradients.

Pipeline per iteration::

    G   = importance(cache)              per-sample gradient norm
    R   = variance_reduction(G)          VoG reduction of importance vs uniform sampling
    tau = batch_ratio(R)                 (1 - R) ** -0.5
    tau_ema = update_tau_ema(...)        running average of tau
    b   = hard_batch_size(B, tau_ema)    round(B / tau_ema), clamped to [b_min, B]
    idx = draw_hard_indices(G, b, rng)   proportional to G, without replacement
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

R_MAX = 1.0 - 1e-6
DEFAULT_B_MIN = 256


class DegenerateImportance(ValueError):
    """All importance values are zero; callers fall back to uniform sampling."""


@dataclass
class ImportanceState:
    alpha_tau: float
    tau_ema: float = 1.0
    b_min: int = DEFAULT_B_MIN
    G: np.ndarray | None = None
    R: float = 0.0
    tau: float = 1.0
    b: int = 0
    B: int = 0
    padded_draws: int = 0  # draws that had to fill from zero-importance samples
    degenerate: int = 0  # iterations with all-zero importance

    @property
    def uniform(self) -> float:
        return 1.0 / self.B if self.B else float("nan")

    def step(self, G: np.ndarray) -> int:
        """Update R, tau, tau_ema and b from a fresh importance vector."""
        self.G = G
        self.B = len(G)
        try:
            self.R = variance_reduction(G)
        except DegenerateImportance:
            self.R = 0.0
            self.degenerate += 1
        self.tau = batch_ratio(self.R)
        self.tau_ema = update_tau_ema(self.tau_ema, self.tau, self.alpha_tau)
        self.b = hard_batch_size(self.B, self.tau_ema, self.b_min)
        return self.b


def importance(cache) -> np.ndarray:
    """L2 norm of each sample's 4-vector (dL/dc', dL/dsigma')."""
    g = np.concatenate([np.asarray(cache.color_pre, dtype=np.float64),
                        np.asarray(cache.sigma_pre, dtype=np.float64)[:, None]], axis=1)
    return np.sqrt(np.sum(g * g, axis=1))


def normalize(G) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    total = G.sum()
    if not total > 0:
        raise DegenerateImportance("importance vector sums to zero")
    return G / total


def variance_reduction(G) -> float:
    """``||G_hat - U||^2 / sum(G_hat^2)`` on the normalised importance, clamped to [0, R_MAX].

    With ``sum(G_hat) = 1`` this equals ``var(G) / (var(G) + mean(G)^2)``,
    which is what gets evaluated. Deviations are taken about the median so
    a constant ``G`` gives exactly 0.
    """
    G = np.asarray(G, dtype=np.float64)
    if not G.sum() > 0:
        raise DegenerateImportance("importance vector sums to zero")
    d = G - np.median(G)
    var = max(float(np.mean(d * d) - np.mean(d) ** 2), 0.0)
    mean = float(np.mean(G))
    r = var / (var + mean * mean)
    return float(min(r, R_MAX))


def batch_ratio(R: float) -> float:
    if not 0.0 <= R < 1.0:
        raise ValueError(f"R must lie in [0, 1), got {R}")
    return float((1.0 - R) ** -0.5)


def update_tau_ema(tau_ema: float, tau: float, alpha_tau: float) -> float:
    return (1.0 - alpha_tau) * tau_ema + alpha_tau * tau


def hard_batch_size(B: int, tau_ema: float, b_min: int = DEFAULT_B_MIN) -> int:
    if B < 1:
        raise ValueError("B must be >= 1")
    b = int(np.round(B / tau_ema))
    return int(min(max(b, b_min), B))


def draw_hard_indices(
    G, b: int, rng: np.random.Generator, replace: bool = False, stats: ImportanceState | None = None
) -> np.ndarray:
    """Draw ``b`` indices with probability proportional to ``G``.

    Without replacement this is successive sampling, implemented with
    exponential keys ``E_i / G_i`` (the ``b`` smallest win). If fewer than
    ``b`` entries are positive, all positive ones are taken and the rest
    are filled uniformly from the zero-importance samples.
    """
    G = np.asarray(G, dtype=np.float64)
    B = len(G)
    if b <= 0:
        return np.empty(0, dtype=np.int64)
    if b > B and not replace:
        raise ValueError(f"cannot draw {b} of {B} samples")
    positive = np.flatnonzero(G > 0)
    if replace:
        if len(positive) == 0:
            return rng.integers(0, B, size=b)
        return rng.choice(B, size=b, replace=True, p=G / G.sum())
    if len(positive) < b:
        if stats is not None:
            stats.padded_draws += 1
        zeros = np.flatnonzero(G <= 0)
        fill = rng.choice(zeros, size=b - len(positive), replace=False)
        return np.sort(np.concatenate([positive, fill]))
    keys = rng.standard_exponential(len(positive)) / G[positive]
    if b == len(positive):
        chosen = positive
    else:
        chosen = positive[np.argpartition(keys, b - 1)[:b]]
    return np.sort(chosen)


def reweight_factors(G, indices, b: int) -> np.ndarray:
    """Importance weights ``1 / (b * p_i)`` for the selected samples (ablation only)."""
    p = normalize(G)
    return 1.0 / (b * p[indices])
