"""Deterministic density solvers.

Two solvers share one conservative explicit finite-volume discretization:

* Fp2dSolver evolves the full 2D density of the biased dynamics on the
  torus-times-truncated-interval geometry, either recomputing the bias
  from the current density before every step (the self-consistent,
  nonlinear evolution) or holding a frozen bias (linear evolution).
* Marginal1dSolver evolves the closed 1D coordinate equations: pure
  diffusion on the torus, drift-diffusion under a confining potential on
  a truncated line.

Face fluxes combine a drift part (centered face density by default,
upwind optional) with a centered diffusive part. Mass is conserved to
rounding because fluxes telescope. Positivity is protected by the
advertised time-step bound

    dt <= min(hx, hy)^2 / (4/beta + 2 max|drift| min(hx, hy)),

checked before stepping; a negative cell after a step is treated as a
logic error, not clipped. The module works in units where beta = 1 (the
driver rescales potentials and time for other temperatures).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grids import Grid1D, Grid2D
from .model import LinearXi

VARIANTS = ("abf_metric", "abf_plain", "frozen_bias")
MARGINAL_KINDS = ("heat_torus", "drift_line")


class CflError(ValueError):
    def __init__(self, dt, admissible):
        super().__init__(f"dt={dt:g} violates the positivity bound; admissible dt <= {admissible:.6g}")
        self.admissible = admissible


class NegativeDensityError(RuntimeError):
    """A cell went negative: the step-size logic is broken upstream."""


@dataclass
class DensityField:
    grid: Grid2D
    values: np.ndarray
    time: float = 0.0

    def mass(self):
        return float(self.values.sum() * self.grid.cell_area)

    @classmethod
    def from_function(cls, grid, fn, normalize=True, time=0.0):
        vals = np.asarray(fn(grid.x.centers[:, None], grid.y.centers[None, :]), dtype=float)
        if normalize:
            vals = vals / (vals.sum() * grid.cell_area)
        return cls(grid=grid, values=vals, time=time)


@dataclass
class Field1D:
    grid: Grid1D
    values: np.ndarray
    time: float = 0.0

    def mass(self):
        return float(self.values.sum() * self.grid.h)

    @classmethod
    def from_function(cls, grid, fn, normalize=True, time=0.0):
        vals = np.asarray(fn(grid.centers), dtype=float)
        if normalize:
            vals = vals / (vals.sum() * grid.h)
        return cls(grid=grid, values=vals, time=time)


def extract_marginal(field):
    """y-integrated density per x column; preserves mass exactly."""
    vals = field.values.sum(axis=1) * field.grid.y.h
    return Field1D(grid=field.grid.x, values=vals, time=field.time)


# ---------------------------------------------------------------------------
# 2D solver


class Fp2dSolver:
    """Explicit conservative solver for the biased density evolution.

    variant "abf_metric" and "abf_plain" recompute the bias from the
    density before every step; for the linear coordinate their drift
    fields coincide, and both names are accepted so run configurations
    read naturally. variant "frozen_bias" keeps the supplied per-column
    bias fixed, making the evolution linear.
    """

    def __init__(self, model, grid, variant="abf_metric", advect="centered",
                 frozen_bias=None, use_numba=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if advect not in ("centered", "upwind"):
            raise ValueError("advect must be 'centered' or 'upwind'")
        if abs(model.beta - 1.0) > 1e-12:
            raise ValueError("density solvers run at beta = 1; rescale the potential and time")
        if not isinstance(model.xi, LinearXi):
            raise ValueError("density solver supports only the linear coordinate xi = x")
        if model.x_kind != "torus":
            raise ValueError("density solver supports only a periodic coordinate range")
        self.model = model
        self.grid = grid
        self.variant = variant
        self.advect = advect
        self.use_numba = _kernels.HAVE_NUMBA if use_numba is None else use_numba

        pot = model.potential
        xe = grid.x.edges[:-1]          # left edge of each cell; n_x faces on the torus
        xc = grid.x.centers
        yc = grid.y.centers
        ye_int = grid.y.edges[1:-1]     # interior y faces only; boundary flux is zero
        self.dxv_xface = np.asarray(pot.dx(xe[:, None], yc[None, :]), dtype=float)
        self.dxv_cell = np.asarray(pot.dx(xc[:, None], yc[None, :]), dtype=float)
        self.uy = -np.asarray(pot.dy(xc[:, None], ye_int[None, :]), dtype=float)

        if variant == "frozen_bias":
            if frozen_bias is None:
                raise ValueError("frozen_bias variant needs a bias table")
            self.frozen_ap = self._resample_bias(frozen_bias)
        else:
            self.frozen_ap = None

        # static positivity bound: the bias is a density-weighted average of the
        # force table, so |bias| never exceeds max |dx V| over a column
        bias_bound = (np.max(np.abs(self.frozen_ap)) if self.frozen_ap is not None
                      else np.max(np.abs(self.dxv_cell)))
        drift_bound = max(np.max(np.abs(self.dxv_xface)) + bias_bound,
                          np.max(np.abs(self.uy)) if self.uy.size else 0.0)
        hmin = min(grid.x.h, grid.y.h)
        self.admissible_dt = hmin * hmin / (4.0 + 2.0 * drift_bound * hmin)

        # per-face scheme masks: a centered face density keeps cells nonnegative
        # only while the face Peclet number |u| h / 2 stays at or below one, so
        # faces that can exceed it (Gaussian tails on coarse grids) fall back to
        # upwind regardless of the requested default
        if advect == "centered":
            self.cx = (np.abs(self.dxv_xface) + bias_bound) * grid.x.h * 0.5 <= 1.0
            self.cy = np.abs(self.uy) * grid.y.h * 0.5 <= 1.0
        else:
            self.cx = np.zeros_like(self.dxv_xface, dtype=bool)
            self.cy = np.zeros_like(self.uy, dtype=bool)

    def _resample_bias(self, bias):
        """Per-column bias values from a bias profile or a plain array."""
        if hasattr(bias, "lookup"):
            return np.asarray(bias.lookup(self.grid.x.centers), dtype=float)
        if hasattr(bias, "aprime_at"):
            return np.asarray(bias.aprime_at(self.grid.x.centers), dtype=float)
        arr = np.asarray(bias, dtype=float)
        if arr.shape != (self.grid.x.n,):
            raise ValueError("bias array must hold one value per x column")
        return arr

    def bias_from_field(self, values):
        """Density-weighted column average of the force table (the self-consistent bias)."""
        if self.use_numba:
            ap = np.empty(self.grid.x.n)
            _kernels.row_bias_kernel(values, self.dxv_cell, ap)
            return ap
        return (values * self.dxv_cell).sum(axis=1) / values.sum(axis=1)

    def check_dt(self, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if dt > self.admissible_dt * (1 + 1e-12):
            raise CflError(dt, self.admissible_dt)

    def current_bias(self, values):
        if self.frozen_ap is not None:
            return self.frozen_ap
        return self.bias_from_field(values)

    def step_into(self, values, out, dt, ap):
        ap_face = 0.5 * (ap + np.roll(ap, 1))
        if self.use_numba:
            neg = _kernels.fp2d_step_kernel(values, out, ap_face, self.dxv_xface,
                                            self.uy, self.grid.x.h, self.grid.y.h,
                                            dt, self.cx, self.cy)
            return bool(neg)
        hx, hy = self.grid.x.h, self.grid.y.h
        ux = ap_face[:, None] - self.dxv_xface
        vroll = np.roll(values, 1, axis=0)
        psix = np.where(self.cx, 0.5 * (values + vroll),
                        np.where(ux > 0.0, vroll, values))
        jx = ux * psix - (values - vroll) / hx
        divx = (np.roll(jx, -1, axis=0) - jx) / hx
        psiy = np.where(self.cy, 0.5 * (values[:, 1:] + values[:, :-1]),
                        np.where(self.uy > 0.0, values[:, :-1], values[:, 1:]))
        jy = self.uy * psiy - (values[:, 1:] - values[:, :-1]) / hy
        divy = np.empty_like(values)
        divy[:, 0] = jy[:, 0] / hy
        divy[:, -1] = -jy[:, -1] / hy
        divy[:, 1:-1] = (jy[:, 1:] - jy[:, :-1]) / hy
        np.subtract(values, dt * (divx + divy), out=out)
        return bool(out.min() < 0.0)

    def step(self, field, dt):
        """One step; returns a new field. For long runs prefer run()."""
        self.check_dt(dt)
        ap = self.current_bias(field.values)
        out = np.empty_like(field.values)
        neg = self.step_into(field.values, out, dt, ap)
        if neg:
            raise NegativeDensityError(f"negative cell at t={field.time + dt:g}")
        return DensityField(grid=field.grid, values=out, time=field.time + dt)

    def run(self, field, dt, n_steps, on_output=None, output_every=1):
        """Advance n_steps with double buffering.

        on_output(step_index, time, values, bias) is called at step 0,
        every output_every steps, and at the final step. The values array
        is a live buffer; callbacks must copy what they keep.
        """
        self.check_dt(dt)
        cur = field.values.copy()
        nxt = np.empty_like(cur)
        t0 = field.time
        ap = self.current_bias(cur)
        if on_output is not None:
            on_output(0, t0, cur, ap)
        for s in range(1, n_steps + 1):
            neg = self.step_into(cur, nxt, dt, ap)
            if neg:
                raise NegativeDensityError(f"negative cell at step {s}")
            cur, nxt = nxt, cur
            ap = self.current_bias(cur)
            if on_output is not None and (s % output_every == 0 or s == n_steps):
                on_output(s, t0 + s * dt, cur, ap)
        return DensityField(grid=field.grid, values=cur, time=t0 + n_steps * dt)


def fp2d_step(field, model, profile, dt, variant="abf_metric", advect="centered"):
    """Single-step functional surface over Fp2dSolver."""
    frozen = profile if variant == "frozen_bias" else None
    solver = Fp2dSolver(model, field.grid, variant=variant, advect=advect, frozen_bias=frozen)
    return solver.step(field, dt)


# ---------------------------------------------------------------------------
# 1D marginal solver


class Marginal1dSolver:
    """Closed coordinate-marginal equations: torus diffusion or confined line."""

    def __init__(self, grid, kind="heat_torus", confinement=None, use_numba=None):
        if kind not in MARGINAL_KINDS:
            raise ValueError(f"unknown marginal kind {kind!r}")
        if kind == "heat_torus" and not grid.periodic:
            raise ValueError("heat_torus needs a periodic grid")
        if kind == "drift_line":
            if grid.periodic:
                raise ValueError("drift_line needs an interval grid")
            if confinement is None:
                raise ValueError("drift_line needs a confining potential")
        self.grid = grid
        self.kind = kind
        self.use_numba = _kernels.HAVE_NUMBA if use_numba is None else use_numba
        if kind == "heat_torus":
            self.u_edges = np.zeros(grid.n)          # one face per cell on the torus
        else:
            self.u_edges = np.zeros(grid.n + 1)
            self.u_edges[1:-1] = -np.asarray(confinement.dz(grid.edges[1:-1]), dtype=float)
        drift_bound = float(np.max(np.abs(self.u_edges))) if self.u_edges.size else 0.0
        self.admissible_dt = grid.h * grid.h / (2.0 + 2.0 * drift_bound * grid.h)

    def check_dt(self, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if dt > self.admissible_dt * (1 + 1e-12):
            raise CflError(dt, self.admissible_dt)

    def step_into(self, values, out, dt):
        if self.use_numba:
            return bool(_kernels.marginal_step_kernel(values, out, self.u_edges,
                                                      self.grid.h, dt, self.grid.periodic))
        h = self.grid.h
        if self.grid.periodic:
            vroll = np.roll(values, 1)
            j = self.u_edges * 0.5 * (values + vroll) - (values - vroll) / h
            div = (np.roll(j, -1) - j) / h
        else:
            j = np.zeros(self.grid.n + 1)
            j[1:-1] = (self.u_edges[1:-1] * 0.5 * (values[1:] + values[:-1])
                       - (values[1:] - values[:-1]) / h)
            div = (j[1:] - j[:-1]) / h
        np.subtract(values, dt * div, out=out)
        return bool(out.min() < 0.0)

    def step(self, field, dt):
        self.check_dt(dt)
        out = np.empty_like(field.values)
        neg = self.step_into(field.values, out, dt)
        if neg:
            raise NegativeDensityError(f"negative cell at t={field.time + dt:g}")
        return Field1D(grid=field.grid, values=out, time=field.time + dt)

    def run(self, field, dt, n_steps, on_output=None, output_every=1):
        self.check_dt(dt)
        cur = field.values.copy()
        nxt = np.empty_like(cur)
        t0 = field.time
        if on_output is not None:
            on_output(0, t0, cur)
        for s in range(1, n_steps + 1):
            neg = self.step_into(cur, nxt, dt)
            if neg:
                raise NegativeDensityError(f"negative cell at step {s}")
            cur, nxt = nxt, cur
            if on_output is not None and (s % output_every == 0 or s == n_steps):
                on_output(s, t0 + s * dt, cur)
        return Field1D(grid=field.grid, values=cur, time=t0 + n_steps * dt)


def marginal_step(field1d, model, dt, kind="heat_torus"):
    """Single-step functional surface over Marginal1dSolver."""
    solver = Marginal1dSolver(field1d.grid, kind=kind, confinement=model.confinement)
    return solver.step(field1d, dt)
