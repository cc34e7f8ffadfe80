"""Compiled inner loops for the hash-grid encoding."""

from __future__ import annotations

import numba as nb
import numpy as np

P1 = np.uint64(2654435761)
P2 = np.uint64(805459861)


@nb.njit(cache=True, inline="always")
def _cell(v, res):
    v = min(max(v, 0.0), 1.0)
    s = v * (res - 1)
    c = int(s)
    if c > res - 2:
        c = res - 2
    return c, s - c


@nb.njit(cache=True, inline="always")
def _index(cx, cy, cz, res, dense, mask):
    if dense:
        return np.int64(cx + res * cy + res * res * cz)
    h = np.uint64(cx) ^ (np.uint64(cy) * P1) ^ (np.uint64(cz) * P2)
    return np.int64(h & mask)


@nb.njit(cache=True)
def encode_forward(x, table, resolutions, dense, table_size, out):
    n = x.shape[0]
    n_levels = resolutions.shape[0]
    nf = table.shape[1]
    mask = np.uint64(table_size - 1)
    for i in range(n):
        for l in range(n_levels):
            res = resolutions[l]
            cx, fx = _cell(x[i, 0], res)
            cy, fy = _cell(x[i, 1], res)
            cz, fz = _cell(x[i, 2], res)
            base = l * table_size
            for f in range(nf):
                out[i, l * nf + f] = 0.0
            for corner in range(8):
                bx = corner & 1
                by = (corner >> 1) & 1
                bz = (corner >> 2) & 1
                w = (fz if bz else 1 - fz) * (fy if by else 1 - fy) * (fx if bx else 1 - fx)
                row = base + _index(cx + bx, cy + by, cz + bz, res, dense[l], mask)
                for f in range(nf):
                    out[i, l * nf + f] += w * table[row, f]


@nb.njit(cache=True)
def encode_scatter(x, upstream, resolutions, dense, table_size, grad, start, stop):
    n_levels = resolutions.shape[0]
    nf = grad.shape[1]
    mask = np.uint64(table_size - 1)
    for i in range(start, stop):
        for l in range(n_levels):
            res = resolutions[l]
            cx, fx = _cell(x[i, 0], res)
            cy, fy = _cell(x[i, 1], res)
            cz, fz = _cell(x[i, 2], res)
            base = l * table_size
            for corner in range(8):
                bx = corner & 1
                by = (corner >> 1) & 1
                bz = (corner >> 2) & 1
                w = (fz if bz else 1 - fz) * (fy if by else 1 - fy) * (fx if bx else 1 - fx)
                row = base + _index(cx + bx, cy + by, cz + bz, res, dense[l], mask)
                for f in range(nf):
                    grad[row, f] += w * upstream[i, l * nf + f]


@nb.njit(cache=True, parallel=True)
def encode_scatter_chunked(x, upstream, resolutions, dense, table_size, grad, n_chunks):
    n = x.shape[0]
    partial = np.zeros((n_chunks,) + grad.shape, dtype=grad.dtype)
    for k in nb.prange(n_chunks):
        encode_scatter(x, upstream, resolutions, dense, table_size, partial[k], k * n // n_chunks, (k + 1) * n // n_chunks)
    for k in range(n_chunks):
        grad += partial[k]
