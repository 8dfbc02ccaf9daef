"""Uniform cell hash over ball centres (cell side = edge length 1)."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

CELL_SIZE = 1.0


@dataclass(frozen=True)
class CellIndex:
    lo: np.ndarray  # (d,) lower corner of cell (0, ..., 0)
    shape: np.ndarray  # (d,) number of cells per axis
    strides: np.ndarray  # (d,) flat-index strides
    order: np.ndarray  # point indices sorted by cell
    cell_start: np.ndarray  # (ncells + 1,) CSR offsets into ``order``
    offsets: np.ndarray  # (3**d, d) neighbour cell offsets

    @classmethod
    def build(cls, points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> "CellIndex":
        points = np.asarray(points, dtype=np.float64)
        d = len(lo)
        lo = np.asarray(lo, dtype=np.float64) - CELL_SIZE
        hi = np.asarray(hi, dtype=np.float64) + CELL_SIZE
        shape = np.maximum(np.ceil((hi - lo) / CELL_SIZE).astype(np.int64), 1)
        strides = np.ones(d, dtype=np.int64)
        for k in range(d - 2, -1, -1):
            strides[k] = strides[k + 1] * shape[k + 1]
        ncells = int(np.prod(shape))
        if len(points):
            cells = np.floor((points - lo) / CELL_SIZE).astype(np.int64)
            cells = np.clip(cells, 0, shape - 1)
            flat = cells @ strides
        else:
            flat = np.zeros(0, dtype=np.int64)
        order = np.argsort(flat, kind="stable").astype(np.int64)
        counts = np.bincount(flat, minlength=ncells)
        cell_start = np.zeros(ncells + 1, dtype=np.int64)
        np.cumsum(counts, out=cell_start[1:])
        offsets = np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=np.int64)
        return cls(lo, shape, strides, order, cell_start, offsets)

    @property
    def ncells(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def padded(self) -> np.ndarray:
        """(ncells, kmax) table of point indices, ``-1`` padded (numpy backend)."""
        counts = np.diff(self.cell_start)
        kmax = max(int(counts.max()) if len(counts) else 0, 1)
        table = np.full((self.ncells, kmax), -1, dtype=np.int64)
        rank = np.arange(len(self.order)) - np.repeat(self.cell_start[:-1], counts)
        cell_of = np.repeat(np.arange(self.ncells), counts)
        table[cell_of, rank] = self.order
        return table

    def cell_coords(self, x: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(x, dtype=np.float64) - self.lo) / CELL_SIZE).astype(np.int64)

    def candidates(self, x: np.ndarray) -> np.ndarray:
        """Indices (-1 padded) of every centre in the 3**d cells around each row of x."""
        x = np.atleast_2d(x)
        cc = self.cell_coords(x)[:, None, :] + self.offsets[None, :, :]
        inside = np.all((cc >= 0) & (cc < self.shape), axis=2)
        flat = np.where(inside, (np.clip(cc, 0, self.shape - 1) * self.strides).sum(axis=2), 0)
        cand = self.padded[flat]  # (n, 3**d, kmax)
        cand = np.where(inside[:, :, None], cand, -1)
        return cand.reshape(len(x), -1)
