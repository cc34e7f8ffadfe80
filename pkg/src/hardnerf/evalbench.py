"""Image metrics, distribution statistics and cost-model checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .ledger import NETWORK_PHASES, CostLedger

PSNR_CAP = 99.0


def psnr(image, reference) -> float:
    """``10 log10(1 / MSE)`` for unit-range images; ``inf`` when identical."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def capped(value: float) -> float:
    return min(value, PSNR_CAP)


class DegenerateDistribution(ValueError):
    pass


def skewness(values) -> float:
    """Adjusted Fisher-Pearson sample skewness ``G1``."""
    x = np.asarray(values, dtype=np.float64).ravel()
    n = len(x)
    if n < 3:
        raise DegenerateDistribution("skewness needs at least 3 values")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if not m2 > 0:
        raise DegenerateDistribution("zero variance")
    m3 = np.mean(d * d * d)
    g1 = m3 / m2**1.5
    return float(np.sqrt(n * (n - 1)) / (n - 2) * g1)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    normalized: bool = True

    @property
    def density(self) -> np.ndarray:
        widths = np.diff(self.edges)
        total = self.counts.sum()
        return self.counts / (total * widths) if total else np.zeros_like(widths)

    def integral(self) -> float:
        return float(np.sum(self.density * np.diff(self.edges)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_left", "bin_right", "density"])
            for lo, hi, d in zip(self.edges[:-1], self.edges[1:], self.density):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(d))])


def pdf_histogram(values, n_bins: int = 50, log_scale: bool = False) -> Histogram:
    """Normalised histogram; ``log_scale`` uses geometric bins over the
    positive values (non-positive values land in the first bin)."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if len(x) == 0:
        raise ValueError("pdf_histogram needs at least one value")
    lo, hi = x.min(), x.max()
    if log_scale:
        pos = x[x > 0]
        if len(pos) == 0:
            raise ValueError("log-scale histogram needs positive values")
        lo, hi = pos.min(), pos.max()
        if hi == lo:
            hi = lo * 1.0001
        edges = np.geomspace(lo, hi, n_bins + 1)
        x = np.clip(x, lo, hi)
    else:
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(x, bins=edges)
    return Histogram(edges, counts)


def theoretical_runtime_fraction(B: int, b: int) -> float:
    """Network runtime of two forwards plus one backward on ``b`` samples,
    relative to forward+backward on ``B``, with backward = 2x forward:
    ``(B + 3b) / (3B)``. Equals 4/3 at ``b == B``."""
    if B <= 0 or not 0 <= b <= B:
        raise ValueError(f"need 0 <= b <= B and B > 0, got B={B}, b={b}")
    return (B + 3 * b) / (3 * B)


def measured_runtime_fraction(B: int, b: int, multiplier: float) -> float:
    """Same model with the measured backward/forward multiplier ``k``:
    ``(B + (1 + k) b) / ((1 + k) B)``."""
    return (B + (1 + multiplier) * b) / ((1 + multiplier) * B)


def _network_macs(history) -> np.ndarray:
    return np.array([sum(rec["macs"].get(p, 0) for p in NETWORK_PHASES) for rec in history], dtype=np.float64)


def measured_network_fraction(ledger_hm: CostLedger | list, ledger_base: CostLedger | list) -> float:
    """Network-phase MACs of the mining run over the baseline run, summed
    over matched iterations. Accepts ledgers or their ``history`` lists."""
    hm = ledger_hm.history if isinstance(ledger_hm, CostLedger) else ledger_hm
    base = ledger_base.history if isinstance(ledger_base, CostLedger) else ledger_base
    n = min(len(hm), len(base))
    if n == 0:
        raise ValueError("empty ledgers")
    return float(_network_macs(hm[:n]).sum() / _network_macs(base[:n]).sum())


def export_ray_importance(positions, importance, path, extra: dict | None = None) -> int:
    """Write one ray's samples as an ASCII PLY point cloud with importance
    mapped to the red channel. Returns the number of records."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    importance = np.asarray(importance, dtype=np.float64).ravel()
    if len(positions) != len(importance):
        raise ValueError("positions and importance differ in length")
    top = importance.max() if len(importance) else 0.0
    red = np.round(255 * importance / top).astype(int) if top > 0 else np.zeros(len(importance), int)
    extra = extra or {}
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(positions)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float importance",
        *[f"property float {name}" for name in extra],
        "end_header",
    ]
    for i, (p, r, g) in enumerate(zip(positions, red, importance)):
        cols = [f"{p[0]:.6g}", f"{p[1]:.6g}", f"{p[2]:.6g}", str(r), "0", "0", f"{g:.6g}"]
        cols += [f"{float(v[i]):.6g}" for v in extra.values()]
        lines.append(" ".join(cols))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return len(positions)


def read_ply_vertices(path) -> tuple[list[str], np.ndarray]:
    with open(path) as f:
        lines = f.read().splitlines()
    end = lines.index("end_header")
    names = [l.split()[-1] for l in lines[:end] if l.startswith("property")]
    rows = [list(map(float, l.split())) for l in lines[end + 1 :] if l.strip()]
    return names, np.array(rows).reshape(-1, len(names))


def trend_slope(x, y) -> float:
    """Least-squares slope of ``y`` against ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0])
