"""Uniform cell grids for the 1D coordinate range and the 2D configuration space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid1D:
    """n uniform cells on [lo, hi], periodic or not. Values live at cell centers."""

    lo: float
    hi: float
    n: int
    periodic: bool = False

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid needs at least 2 cells")
        if not self.hi > self.lo:
            raise ValueError("empty grid range")

    @classmethod
    def torus(cls, n, lo=0.0, hi=1.0):
        return cls(lo, hi, n, periodic=True)

    @classmethod
    def interval(cls, lo, hi, n):
        return cls(lo, hi, n, periodic=False)

    @property
    def h(self):
        return (self.hi - self.lo) / self.n

    @property
    def length(self):
        return self.hi - self.lo

    @property
    def centers(self):
        return self.lo + (np.arange(self.n) + 0.5) * self.h

    @property
    def edges(self):
        return self.lo + np.arange(self.n + 1) * self.h

    def index_of(self, z):
        """Cell index containing z (periodic wrap or clipped to the range)."""
        pos = (np.asarray(z) - self.lo) / self.h
        idx = np.floor(pos).astype(int)
        if self.periodic:
            return idx % self.n
        return np.clip(idx, 0, self.n - 1)


@dataclass(frozen=True)
class Grid2D:
    """Tensor grid: x cells (torus or interval) times y cells (truncated interval)."""

    x: Grid1D
    y: Grid1D

    @classmethod
    def for_model(cls, model, n_x, n_y):
        xlo, xhi = model.x_bounds
        xg = Grid1D(xlo, xhi, n_x, periodic=(model.x_kind == "torus"))
        ylo, yhi = model.y_bounds
        return cls(xg, Grid1D.interval(ylo, yhi, n_y))

    @property
    def cell_area(self):
        return self.x.h * self.y.h

    @property
    def shape(self):
        return (self.x.n, self.y.n)
