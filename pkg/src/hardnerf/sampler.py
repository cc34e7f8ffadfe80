"""Pixel sampling, occupancy-pruned ray marching and the occupancy grid."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scene import Dataset, Scene, ray_box


@dataclass
class Rays:
    origins: np.ndarray  # (n, 3) world
    directions: np.ndarray  # (n, 3) unit
    t_near: np.ndarray  # (n,)
    t_far: np.ndarray  # (n,)

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.t_near[idx], self.t_far[idx])

    @classmethod
    def through_bounds(cls, origins, directions, bounds) -> "Rays":
        t_near, t_far = ray_box(origins, directions, bounds)
        return cls(origins, directions, t_near, t_far)


@dataclass
class SampleBatch:
    positions: np.ndarray  # (B, 3) unit-cube coordinates
    deltas: np.ndarray  # (B,) world units
    t: np.ndarray  # (B,)
    ray_offsets: np.ndarray  # (n_rays + 1,)
    ray_ids: np.ndarray  # (B,)
    view_dirs: np.ndarray  # (B, 3)

    @property
    def size(self) -> int:
        return len(self.t)

    @property
    def n_rays(self) -> int:
        return len(self.ray_offsets) - 1


class PixelPool:
    """Every training pixel as a ray with its ground-truth colour.

    Only views in the train split are included; ``image_ids`` records the
    source view of each pixel so draws can be audited.
    """

    def __init__(self, dataset: Dataset):
        origins, dirs, colors, ids = [], [], [], []
        for i in dataset.train_indices:
            o, d = dataset.cameras[i].rays()
            origins.append(o)
            dirs.append(d)
            colors.append(dataset.images[i].reshape(-1, 3))
            ids.append(np.full(len(o), i))
        if not origins:
            raise ValueError("dataset has no training views")
        self.rays = Rays.through_bounds(np.concatenate(origins), np.concatenate(dirs), dataset.scene.bounds)
        self.colors = np.concatenate(colors).astype(np.float32)
        self.image_ids = np.concatenate(ids)

    def __len__(self):
        return len(self.colors)


def sample_pixels(source, n_rays: int, rng: np.random.Generator, replace: bool = True):
    """Uniformly draw ``n_rays`` training pixels; returns ``(rays, gt_colors, pixel_ids)``."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    pool = source if isinstance(source, PixelPool) else PixelPool(source)
    if not replace and n_rays == len(pool):
        ids = rng.permutation(len(pool))
    else:
        ids = rng.choice(len(pool), size=n_rays, replace=replace)
    return pool.rays[ids], pool.colors[ids], ids


class OccupancyGrid:
    """Density EMA per cell over the unit cube.

    A cell is occupied where ``EMA * step_size > threshold``: the threshold
    is a minimum optical thickness over one marching step, as in
    Instant-NGP. With ``step_size=None`` it applies to the density itself.
    """

    def __init__(
        self,
        resolution: int = 64,
        decay: float = 0.95,
        threshold: float = 0.01,
        initial: float = 0.0,
        step_size: float | None = None,
    ):
        self.resolution = resolution
        self.decay = decay
        self.threshold = threshold
        self.step_size = step_size
        self.ema = np.full((resolution,) * 3, initial, dtype=np.float32)
        self.refresh()

    @property
    def density_threshold(self) -> float:
        return self.threshold / self.step_size if self.step_size else self.threshold

    def refresh(self) -> None:
        self.occupied = self.ema > self.density_threshold

    @classmethod
    def full(cls, resolution: int = 64, **kw) -> "OccupancyGrid":
        grid = cls(resolution, **kw)
        grid.ema[:] = 1.0
        grid.refresh()
        return grid

    def cell_of(self, unit_points) -> np.ndarray:
        cells = np.floor(np.asarray(unit_points) * self.resolution).astype(np.int64)
        return np.clip(cells, 0, self.resolution - 1)

    def lookup(self, unit_points) -> np.ndarray:
        c = self.cell_of(unit_points)
        return self.occupied[c[:, 0], c[:, 1], c[:, 2]]

    @property
    def occupied_fraction(self) -> float:
        return float(self.occupied.mean())

    def dump(self, path) -> None:
        """Write a JSON header line followed by the packed occupancy bits (x-major)."""
        bits = np.packbits(self.occupied.reshape(-1))
        header = {"resolution": self.resolution, "threshold": self.threshold, "decay": self.decay,
                  "step_size": self.step_size,
                  "order": "x-major (x*R*R + y*R + z)", "bitorder": "big", "nbytes": int(bits.size)}
        with open(path, "wb") as f:
            f.write(json.dumps(header).encode("utf-8") + b"\n")
            f.write(bits.tobytes())

    @classmethod
    def load_dump(cls, path) -> "OccupancyGrid":
        with open(path, "rb") as f:
            header = json.loads(f.readline())
            bits = np.frombuffer(f.read(header["nbytes"]), dtype=np.uint8)
        r = header["resolution"]
        grid = cls(r, decay=header["decay"], threshold=header["threshold"], step_size=header.get("step_size"))
        occ = np.unpackbits(bits)[: r**3].astype(bool).reshape(r, r, r)
        grid.ema = np.where(occ, 2.0 * grid.density_threshold, 0.0).astype(np.float32)
        grid.refresh()
        return grid


def update_occupancy(grid: OccupancyGrid, density_fn, rng: np.random.Generator, fraction: float = 1.0) -> np.ndarray:
    """Refresh a random ``fraction`` of cells from ``density_fn`` at a random
    point inside each: ``ema = max(decay * ema, sigma)``. Returns the flat
    ids of the updated cells."""
    r = grid.resolution
    n_cells = r**3
    if fraction >= 1.0:
        cells = np.arange(n_cells)
    else:
        cells = np.sort(rng.choice(n_cells, size=max(1, int(fraction * n_cells)), replace=False))
    ijk = np.stack(np.unravel_index(cells, (r, r, r)), axis=1)
    points = (ijk + rng.random((len(cells), 3))) / r
    sigma = np.asarray(density_fn(points), dtype=np.float32)
    flat = grid.ema.reshape(-1)
    flat[cells] = np.maximum(grid.decay * flat[cells], sigma)
    grid.refresh()
    return cells


def default_step(scene: Scene, samples_across: int = 128) -> float:
    """World step size giving ``samples_across`` steps along the bounds diagonal."""
    return float(np.linalg.norm(scene.bounds[1] - scene.bounds[0])) / samples_across


def sample_points(
    rays: Rays,
    occgrid: OccupancyGrid | None,
    step_size: float,
    bounds,
    rng: np.random.Generator | None = None,
) -> SampleBatch:
    """March each ray from ``t_near`` in steps of ``step_size`` with one
    uniform offset per ray (none when ``rng`` is None), dropping samples in
    unoccupied cells.

    Each kept sample owns the segment ``[t, min(t + step, t_far)]``, so
    consecutive kept samples satisfy ``delta_i = t_{i+1} - t_i``.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    bounds = np.asarray(bounds, dtype=np.float64)
    n = len(rays)
    jitter = rng.random(n) * step_size if rng is not None else np.zeros(n)
    length = np.maximum(rays.t_far - rays.t_near - jitter, 0.0)
    counts = np.where(rays.t_far > rays.t_near, np.ceil(length / step_size - 1e-9).astype(np.int64), 0)
    ray_ids = np.repeat(np.arange(n), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    k = np.arange(len(ray_ids)) - starts[ray_ids]
    t = rays.t_near[ray_ids] + jitter[ray_ids] + k * step_size
    deltas = np.minimum(step_size, rays.t_far[ray_ids] - t)
    world = rays.origins[ray_ids] + t[:, None] * rays.directions[ray_ids]
    unit = np.clip((world - bounds[0]) / (bounds[1] - bounds[0]), 0.0, 1.0)

    keep = deltas > 0
    if occgrid is not None:
        keep &= occgrid.lookup(unit)
    ray_ids = ray_ids[keep]
    offsets = np.concatenate([[0], np.cumsum(np.bincount(ray_ids, minlength=n))])
    return SampleBatch(
        positions=unit[keep],
        deltas=deltas[keep],
        t=t[keep],
        ray_offsets=offsets,
        ray_ids=ray_ids,
        view_dirs=rays.directions[ray_ids],
    )
