import zlib

import numpy as np
import pytest

from hardnerf import parallel
from hardnerf.encoding import HashGridConfig
from hardnerf.field import FieldConfig, FieldParams

# small enough for finite differences, still one dense and one hashed level
TINY_GRID = HashGridConfig(levels=2, base_resolution=4, growth=2.0, table_size=2**6, feature_dim=2)
TINY_FIELD = FieldConfig(grid=TINY_GRID, hidden=8, density_out=5, color_hidden=8, color_layers=2, dir_bands=2)


@pytest.fixture(autouse=True)
def _deterministic():
    parallel.set_deterministic(True)
    yield
    parallel.set_deterministic(True)


@pytest.fixture
def tiny_params():
    """Float64 field with a table large enough to matter in the output."""
    p = FieldParams.create(TINY_FIELD, seed=3, dtype=np.float64)
    p.grid.table[:] = np.random.default_rng(4).uniform(-1, 1, p.grid.table.shape)
    for k, v in p.weights.items():
        if k.endswith(".b"):
            v[:] = np.random.default_rng(zlib.crc32(k.encode())).uniform(-0.2, 0.2, v.shape)
    return p


def unit_dirs(n, rng):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
