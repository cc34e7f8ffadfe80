"""Training loop: baseline (one graph-building pass over all samples) and
hard-sample mining (inference pass over all samples, graph-building pass
and backward over the mined subset)."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import field as fieldmod
from . import hardmine, parallel, rng as rngmod
from .evalbench import PSNR_CAP, DegenerateDistribution, psnr, skewness
from .field import FieldParams
from .ledger import CostLedger
from .optim import Adam
from .renderer import RENDER_FLOATS_PER_SAMPLE, backward_to_preactivations, composite, pixel_loss
from .sampler import OccupancyGrid, PixelPool, Rays, default_step, sample_pixels, sample_points, update_occupancy
from .scene import Dataset

log = logging.getLogger(__name__)

MODES = ("baseline", "hardmine")

CSV_COLUMNS = (
    "iter", "wallclock_ms", "loss", "B", "b", "R", "tau", "tau_ema",
    "macs_fwd", "macs_bwd", "macs_other", "macs_cum", "graph_floats", "peak_floats",
    "skew", "psnr_val",
)


@dataclass
class TrainerConfig:
    mode: str = "hardmine"
    n_rays: int = 1024
    iterations: int = 3000
    budget_macs: int | None = None
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    seed: int = 0
    deterministic: bool = True
    occupancy_period: int = 16
    occupancy_resolution: int = 64
    occupancy_decay: float = 0.95
    occupancy_threshold: float = 0.01
    occupancy_fraction: float = 1.0
    samples_across: int = 128
    eval_period: int = 250
    b_min: int = hardmine.DEFAULT_B_MIN
    with_replacement: bool = False
    reweight: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("n_rays", "occupancy_period", "occupancy_resolution", "samples_across", "eval_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class IterationMetrics:
    iter: int
    wallclock_ms: float
    loss: float
    B: int
    b: int
    R: float
    tau: float
    tau_ema: float
    macs_fwd: int
    macs_bwd: int
    macs_other: int
    macs_cum: int
    graph_floats: int
    peak_floats: int
    skew: float
    psnr_val: float | None = None

    def row(self, include_time: bool = True) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            if name == "wallclock_ms" and not include_time:
                out.append("")
            elif v is None or (isinstance(v, float) and math.isnan(v)):
                out.append("")
            elif name == "psnr_val":
                out.append(repr(min(float(v), PSNR_CAP)))
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


class Trainer:
    def __init__(self, config: TrainerConfig, dataset: Dataset, params: FieldParams | None = None):
        self.config = config
        self.dataset = dataset
        parallel.set_deterministic(config.deterministic)
        dtype = np.dtype(config.dtype)
        self.params = params if params is not None else FieldParams.create(seed=config.seed, dtype=dtype)
        self.optimizer = Adam(
            {"hash": config.lr_hash, "default": config.lr_mlp}, (config.beta1, config.beta2), config.eps
        )
        self.pool = PixelPool(dataset)
        self.step_size = default_step(dataset.scene, config.samples_across)
        self.occupancy = OccupancyGrid(
            config.occupancy_resolution, config.occupancy_decay, config.occupancy_threshold,
            step_size=self.step_size,
        )
        self.ledger = CostLedger()
        self.importance = hardmine.ImportanceState(alpha_tau=1.0 / len(dataset.train_indices), b_min=config.b_min)
        self.bounds = dataset.scene.bounds
        self.background = dataset.scene.background
        self.iteration = 0
        self.macs_cum = 0
        self.events: Counter = Counter()
        self.last_batch = None
        self.last_cache = None
        self.last_render = None

    # -- shared phases -------------------------------------------------

    def _maybe_update_occupancy(self) -> None:
        cfg = self.config
        if self.iteration % cfg.occupancy_period:
            return
        gen = rngmod.stream(cfg.seed, rngmod.OCCUPANCY, self.iteration)
        update_occupancy(
            self.occupancy,
            lambda pts: fieldmod.density_only(self.params, pts, ledger=self.ledger),
            gen,
            fraction=cfg.occupancy_fraction,
        )

    def _sample(self):
        cfg = self.config
        rays, gt, _ = sample_pixels(self.pool, cfg.n_rays, rngmod.stream(cfg.seed, rngmod.PIXELS, self.iteration))
        batch = sample_points(
            rays, self.occupancy, self.step_size, self.bounds, rngmod.stream(cfg.seed, rngmod.JITTER, self.iteration)
        )
        return batch, gt

    def _render_and_cache(self, batch, outputs, gt):
        render = composite(batch, outputs, background=self.background, ledger=self.ledger)
        self.ledger.retain(RENDER_FLOATS_PER_SAMPLE * batch.size, kind="render")
        loss, _ = pixel_loss(render.color, gt)
        cache = backward_to_preactivations(batch, outputs, render, gt, ledger=self.ledger)
        self.ledger.release(RENDER_FLOATS_PER_SAMPLE * batch.size, kind="render")
        self.last_batch, self.last_render, self.last_cache = batch, render, cache
        return loss, cache

    def _apply(self, grads) -> None:
        if not self.optimizer.step(self.params.tensors(), grads):
            self.events["skipped_nonfinite"] += 1

    def _finish(self, t0, loss, B, b, R, tau, tau_ema, G) -> IterationMetrics:
        rec = self.ledger.end_iteration()
        macs = rec["macs"]
        self.macs_cum += rec["macs_total"]
        try:
            skew = skewness(G) if G is not None else float("nan")
        except DegenerateDistribution:
            skew = float("nan")
        m = IterationMetrics(
            iter=self.iteration,
            wallclock_ms=(time.perf_counter() - t0) * 1e3,
            loss=loss,
            B=B,
            b=b,
            R=R,
            tau=tau,
            tau_ema=tau_ema,
            macs_fwd=macs.get("forward_inference", 0) + macs.get("forward_training", 0),
            macs_bwd=macs.get("backward", 0),
            macs_other=sum(v for k, v in macs.items() if k not in ("forward_inference", "forward_training", "backward")),
            macs_cum=self.macs_cum,
            graph_floats=rec["peak_graph_floats"],
            peak_floats=rec["peak_total_floats"],
            skew=skew,
        )
        self.iteration += 1
        return m

    def _skip_empty(self, t0) -> IterationMetrics:
        self.events["empty_batch"] += 1
        log.warning("iteration %d: ray sampling produced no samples, skipping update", self.iteration)
        nan = float("nan")
        return self._finish(t0, nan, 0, 0, nan, nan, self.importance.tau_ema, None)

    # -- steps ---------------------------------------------------------

    def train_step_hardmine(self) -> IterationMetrics:
        t0 = time.perf_counter()
        cfg = self.config
        self._maybe_update_occupancy()
        batch, gt = self._sample()
        B = batch.size
        if B == 0:
            return self._skip_empty(t0)

        self.ledger.snapshot("inference")
        outputs = fieldmod.forward_inference(self.params, batch.positions, batch.view_dirs, ledger=self.ledger)
        loss, cache = self._render_and_cache(batch, outputs, gt)
        G = hardmine.importance(cache)
        st = self.importance
        b = st.step(G)

        draw_rng = rngmod.stream(cfg.seed, rngmod.HARD_DRAW, self.iteration)
        if st.R == 0.0 and not np.any(G > 0):
            hard = np.sort(draw_rng.choice(B, size=b, replace=False))
        else:
            hard = hardmine.draw_hard_indices(G, b, draw_rng, replace=cfg.with_replacement, stats=st)
        grad_sigma = cache.sigma_pre[hard]
        grad_color = cache.color_pre[hard]
        if cfg.reweight and np.any(G > 0):
            f = hardmine.reweight_factors(G, hard, b).astype(grad_sigma.dtype)
            grad_sigma = grad_sigma * f
            grad_color = grad_color * f[:, None]

        self.ledger.snapshot("cache")
        _, tape = fieldmod.forward_training(self.params, batch.positions[hard], batch.view_dirs[hard], ledger=self.ledger)
        self.ledger.snapshot("graph")
        grads = fieldmod.backward(tape, grad_sigma, grad_color, ledger=self.ledger)
        self._apply(grads)
        self.last_hard = hard
        return self._finish(t0, loss, B, b, st.R, st.tau, st.tau_ema, G)

    def train_step_baseline(self) -> IterationMetrics:
        t0 = time.perf_counter()
        self._maybe_update_occupancy()
        batch, gt = self._sample()
        B = batch.size
        if B == 0:
            return self._skip_empty(t0)

        outputs, tape = fieldmod.forward_training(self.params, batch.positions, batch.view_dirs, ledger=self.ledger)
        self.ledger.snapshot("graph")
        loss, cache = self._render_and_cache(batch, outputs, gt)
        grads = fieldmod.backward(tape, cache.sigma_pre, cache.color_pre, ledger=self.ledger)
        self._apply(grads)
        # importance statistics are diagnostics only in this mode
        G = hardmine.importance(cache)
        try:
            R = hardmine.variance_reduction(G)
        except hardmine.DegenerateImportance:
            R = 0.0
        self.last_hard = None
        return self._finish(t0, loss, B, B, R, hardmine.batch_ratio(R), float("nan"), G)

    def step(self) -> IterationMetrics:
        if self.config.mode == "hardmine":
            return self.train_step_hardmine()
        return self.train_step_baseline()

    # -- evaluation ----------------------------------------------------

    def render_view(self, camera, early_termination: float | None = None, chunk: int = 4096) -> np.ndarray:
        return render_image(
            self.params, camera, self.occupancy, self.step_size, self.bounds, self.background,
            early_termination=early_termination, chunk=chunk,
        )

    def evaluate(self) -> float:
        """Mean PSNR over the validation views."""
        scores = [
            psnr(self.render_view(self.dataset.cameras[i]), self.dataset.images[i])
            for i in self.dataset.val_indices
        ]
        return float(np.mean(scores)) if scores else float("nan")


def render_image(params, camera, occupancy, step_size, bounds, background, early_termination=None, chunk=4096):
    """Render a full image from a trained field (no jitter, no graph)."""
    origins, dirs = camera.rays()
    out = np.empty((len(origins), 3))
    for s in range(0, len(origins), chunk):
        rays = Rays.through_bounds(origins[s : s + chunk], dirs[s : s + chunk], bounds)
        batch = sample_points(rays, occupancy, step_size, bounds, rng=None)
        outputs = fieldmod.forward_inference(params, batch.positions, batch.view_dirs)
        res = composite(batch, outputs, background=background, early_termination=early_termination)
        out[s : s + chunk] = res.color
    return np.clip(out.reshape(camera.height, camera.width, 3), 0.0, 1.0)


@dataclass
class TrainResult:
    trainer: Trainer
    metrics: list[IterationMetrics]

    @property
    def params(self) -> FieldParams:
        return self.trainer.params

    @property
    def final_psnr(self) -> float:
        evals = [m.psnr_val for m in self.metrics if m.psnr_val is not None]
        return evals[-1] if evals else float("nan")


def train(config: TrainerConfig, dataset: Dataset, out_dir=None, progress=None, callback=None) -> TrainResult:
    """Run to the iteration or MAC budget, evaluating every ``eval_period``
    iterations and at the end. Writes checkpoint and CSV when ``out_dir`` is set."""
    trainer = Trainer(config, dataset)
    metrics: list[IterationMetrics] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    def done():
        if trainer.iteration >= config.iterations:
            return True
        return config.budget_macs is not None and trainer.macs_cum >= config.budget_macs

    while not done():
        m = trainer.step()
        last = done()
        if (m.iter + 1) % config.eval_period == 0 or last:
            m.psnr_val = trainer.evaluate()
            if progress is not None:
                progress(m)
        metrics.append(m)
        if callback is not None:
            callback(trainer, m)

    result = TrainResult(trainer, metrics)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_metrics_csv(metrics, path, include_time: bool = True) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for m in metrics:
            w.writerow(m.row(include_time))


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
        header = reader.fieldnames or []
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in header}


def write_outputs(result: TrainResult, out_dir) -> None:
    out_dir = Path(out_dir)
    tr = result.trainer
    deterministic = tr.config.deterministic
    tr.params.save(out_dir / "field.bin")
    tr.occupancy.dump(out_dir / "occupancy.bin")
    write_metrics_csv(result.metrics, out_dir / "metrics.csv", include_time=not deterministic)
    if deterministic:
        # wall-clock varies run to run; keep it out of the reproducible CSV
        with open(out_dir / "timings.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "wallclock_ms"])
            for m in result.metrics:
                w.writerow([m.iter, f"{m.wallclock_ms:.3f}"])
    summary = {
        "iterations": tr.iteration,
        "macs_total": tr.macs_cum,
        "backward_multiplier": tr.ledger.backward_multiplier,
        "events": dict(tr.events),
        "padded_draws": tr.importance.padded_draws,
        "final_psnr": result.final_psnr if math.isfinite(result.final_psnr) else None,
        "step_size": tr.step_size,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    (out_dir / "trainer_config.json").write_text(json.dumps(asdict(tr.config), indent=1, sort_keys=True))
