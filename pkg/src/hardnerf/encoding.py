"""Multiresolution hash-grid encoding with trilinear interpolation.

Level ``l`` has ``floor(base_resolution * growth**l)`` vertices per axis.
Levels whose vertex count fits in the table are indexed densely; the rest
go through a spatial hash. The encoding is linear in the table entries,
which is what makes ``encode_backward`` a plain scatter-add.
The forward and scatter loops are compiled with numba.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numba
import numpy as np

from . import _kernels, parallel, tensorfile

# per-axis hash multipliers (first axis unscaled), as in Instant-NGP
PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    base_resolution: int = 16
    growth: float = 1.5
    table_size: int = 2**14
    feature_dim: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not self.growth > 1:
            raise ValueError("growth must exceed 1")
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")

    @property
    def resolutions(self) -> list[int]:
        return [int(np.floor(self.base_resolution * self.growth**l)) for l in range(self.levels)]

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim

    def is_dense(self, level: int) -> bool:
        return self.resolutions[level] ** 3 <= self.table_size

    @property
    def forward_macs(self) -> int:
        """Per-sample MACs: corner weight products plus the feature blend."""
        return self.levels * 8 * (2 + self.feature_dim)


@dataclass
class HashGrid:
    table: np.ndarray  # (levels, table_size, feature_dim)
    config: HashGridConfig

    @classmethod
    def create(cls, config: HashGridConfig = HashGridConfig(), rng=None, dtype=np.float32) -> "HashGrid":
        rng = np.random.default_rng(0) if rng is None else rng
        shape = (config.levels, config.table_size, config.feature_dim)
        return cls(rng.uniform(-1e-4, 1e-4, size=shape).astype(dtype), config)

    def save(self, path) -> None:
        tensorfile.save(path, {"kind": "hash_grid", "config": asdict(self.config)}, {"table": self.table})

    @classmethod
    def load(cls, path) -> "HashGrid":
        meta, tensors = tensorfile.load(path)
        return cls(tensors["table"], HashGridConfig(**meta["config"]))


def hash_index(coords, level: int, config: HashGridConfig) -> np.ndarray:
    """Table index of integer vertex ``coords`` (..., 3) at ``level``."""
    coords = np.asarray(coords, dtype=np.int64)
    res = config.resolutions[level]
    if config.is_dense(level):
        return coords[..., 0] + res * coords[..., 1] + res * res * coords[..., 2]
    c = coords.astype(np.uint32)
    h = c[..., 0] * np.uint32(PRIMES[0])
    h ^= c[..., 1] * np.uint32(PRIMES[1])
    h ^= c[..., 2] * np.uint32(PRIMES[2])
    return (h & np.uint32(config.table_size - 1)).astype(np.int64)


def corner_lookup(positions, config: HashGridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Flat table indices (n, L, 8) into ``table.reshape(-1, F)`` and
    trilinear weights (n, L, 8) for every level.

    Vectorised numpy form of the lookup the compiled kernels perform.

    Corner ``c`` has offset ``(c & 1, c >> 1 & 1, c >> 2 & 1)``.
    """
    x = np.clip(np.asarray(positions), 0.0, 1.0)
    n = len(x)
    idx = np.empty((n, config.levels, 8), dtype=np.int64)
    wts = np.empty((n, config.levels, 8), dtype=x.dtype)
    for level, res in enumerate(config.resolutions):
        scaled = x * (res - 1)
        cell = np.minimum(scaled.astype(np.int64), res - 2)
        frac = scaled - cell
        wx, wy, wz = (np.stack([1 - frac[:, k], frac[:, k]], axis=1) for k in range(3))
        wts[:, level] = (wz[:, :, None, None] * wy[:, None, :, None] * wx[:, None, None, :]).reshape(n, 8)
        base = level * config.table_size
        if config.is_dense(level):
            lin = cell[:, 0] + res * cell[:, 1] + res * res * cell[:, 2]
            offs = np.array([(c & 1) + res * (c >> 1 & 1) + res * res * (c >> 2 & 1) for c in range(8)])
            idx[:, level] = lin[:, None] + (offs + base)
        else:
            c = cell.astype(np.uint32)
            hx, hy, hz = ((np.stack([c[:, k], c[:, k] + np.uint32(1)], axis=1) * np.uint32(PRIMES[k])) for k in range(3))
            h = hz[:, :, None, None] ^ hy[:, None, :, None] ^ hx[:, None, None, :]
            idx[:, level] = (h & np.uint32(config.table_size - 1)).reshape(n, 8).astype(np.int64) + base
    return idx, wts


def _level_arrays(config: HashGridConfig):
    res = np.array(config.resolutions, dtype=np.int64)
    dense = np.array([config.is_dense(l) for l in range(config.levels)])
    return res, dense


def encode(grid: HashGrid, positions, table=None) -> np.ndarray:
    """Features (n, L*F) for unit-cube ``positions`` (n, 3).

    ``table`` substitutes another table of the grid's shape; the encoding
    is linear in it.
    """
    cfg = grid.config
    table = grid.table if table is None else table
    flat = np.ascontiguousarray(table.reshape(-1, cfg.feature_dim))
    x = np.ascontiguousarray(positions, dtype=flat.dtype)
    out = np.empty((len(x), cfg.output_dim), dtype=flat.dtype)
    res, dense = _level_arrays(cfg)
    _kernels.encode_forward(x, flat, res, dense, cfg.table_size, out)
    return out


def encode_backward(grid: HashGrid, positions, upstream, grad_table) -> None:
    """Accumulate ``d(encode)/d(table)^T upstream`` into ``grad_table`` in place.

    Deterministic mode scatters samples in index order; fast mode splits
    them over ``HARDMINE_THREADS`` private buffers that are summed after.
    """
    cfg = grid.config
    upstream = np.ascontiguousarray(upstream, dtype=grad_table.dtype)
    if not np.any(upstream):
        return
    x = np.ascontiguousarray(positions, dtype=grad_table.dtype)
    flat = grad_table.reshape(-1, cfg.feature_dim)
    res, dense = _level_arrays(cfg)
    threads = parallel.num_threads()
    if parallel.is_deterministic() or threads == 1:
        _kernels.encode_scatter(x, upstream, res, dense, cfg.table_size, flat, 0, len(x))
    else:
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        _kernels.encode_scatter_chunked(x, upstream, res, dense, cfg.table_size, flat, threads)
