"""Entropies, Fisher information, force error, and decay-rate fits.

All quantities live on discrete densities: arrays of cell values
integrating via sums times the cell measure. The relative entropy splits
exactly, at the discrete level, into a marginal part plus a
conditional part when the marginals are the discrete row sums; tests
rely on that being an algebraic identity, not a continuum limit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .grids import Grid1D, Grid2D

log = logging.getLogger(__name__)


def relative_entropy(p, q, cell_measure):
    """Sum of p ln(p/q) times the cell measure, with 0 ln 0 = 0.

    Mass of p where q vanishes means the divergence is infinite; the
    offending cell is logged and +inf returned as the sentinel.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0.0
    bad = support & (q <= 0.0)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        log.warning("relative_entropy: p has mass where q = 0 (first cell %s)", idx)
        return math.inf
    terms = np.zeros_like(p)
    np.log(np.divide(p, q, out=np.ones_like(p), where=support),
           out=terms, where=support)
    return float(np.sum(p * terms) * cell_measure)


def total_variation(p, q, cell_measure):
    """L1 distance between two discrete densities (ranges over [0, 2])."""
    return float(np.sum(np.abs(np.asarray(p) - np.asarray(q))) * cell_measure)


def _grad_along(r, h, periodic, axis):
    if periodic:
        return (np.roll(r, -1, axis=axis) - np.roll(r, 1, axis=axis)) / (2.0 * h)
    return np.gradient(r, h, axis=axis)


def fisher_information(p, q, grid, axes=None):
    """Sum of |grad ln(p/q)|^2 p times the cell measure.

    Gradients are centered differences, wrapped on periodic axes and
    one-sided at interval boundaries. For a 2D grid, axes selects the
    directions entering the squared gradient ("y",) gives the
    slice-tangential information for the linear coordinate.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0.0
    if np.any(support & (q <= 0.0)):
        return math.inf
    if not np.all(support):
        log.warning("fisher_information: zero-mass cells present; their weight is zero "
                    "but neighboring gradients are degraded")
    r = np.log(np.divide(p, q, out=np.ones_like(p), where=support))
    if isinstance(grid, Grid1D):
        g = _grad_along(r, grid.h, grid.periodic, 0)
        sq = g * g
        cell = grid.h
    elif isinstance(grid, Grid2D):
        axes = ("x", "y") if axes is None else axes
        sq = np.zeros_like(r)
        if "x" in axes:
            g = _grad_along(r, grid.x.h, grid.x.periodic, 0)
            sq += g * g
        if "y" in axes:
            g = _grad_along(r, grid.y.h, grid.y.periodic, 1)
            sq += g * g
        cell = grid.cell_area
    else:
        raise TypeError("grid must be Grid1D or Grid2D")
    return float(np.sum(sq * p) * cell)


# ---------------------------------------------------------------------------
# entropy decomposition


@dataclass(frozen=True)
class EntropySplit:
    total: float
    macro: float
    micro: float
    excluded_mass: float
    valid: bool


def entropy_decomposition(values, equil, mass_floor=1e-30, max_excluded=0.01):
    """Total, marginal, and conditional relative entropies against the equilibrium.

    The conditional part averages per-slice divergences of the
    renormalized columns, weighting by the current marginal; slices whose
    marginal mass falls under the floor are excluded and their weight
    recorded. The record is flagged invalid when exclusions exceed
    max_excluded of total mass. The total is computed independently from
    the full 2D arrays.
    """
    grid = equil.grid
    hx, hy = grid.x.h, grid.y.h
    psi = np.asarray(values, dtype=float)
    psi_inf = equil.psi

    marg = psi.sum(axis=1) * hy
    marg_inf = psi_inf.sum(axis=1) * hy

    total = relative_entropy(psi, psi_inf, hx * hy)
    macro = relative_entropy(marg, marg_inf, hx)

    included = marg * hx >= mass_floor
    excluded_mass = float(np.sum(marg[~included]) * hx)
    micro = 0.0
    if np.any(included):
        cond = psi[included] / marg[included][:, None] * hy
        cond_inf = psi_inf[included] / marg_inf[included][:, None] * hy
        support = cond > 0.0
        if np.any(support & (cond_inf <= 0.0)):
            micro = math.inf
        else:
            terms = np.zeros_like(cond)
            np.log(np.divide(cond, cond_inf, out=np.ones_like(cond), where=support),
                   out=terms, where=support)
            e_m = (cond * terms).sum(axis=1)            # per-slice divergence, unit cell
            micro = float(np.sum(e_m * marg[included]) * hx)
    valid = excluded_mass <= max_excluded
    if not valid:
        log.warning("entropy_decomposition: %.3g of mass in excluded slices", excluded_mass)
    return EntropySplit(total=total, macro=macro, micro=micro,
                        excluded_mass=excluded_mass, valid=valid)


def force_error(force_values, bin_edges, oracle_profile, marginal_density):
    """Marginal-weighted squared distance between a force table and the reference.

    The reference profile is resampled at bin centers by linear
    interpolation.
    """
    edges = np.asarray(bin_edges, dtype=float)
    centers = 0.5 * (edges[:-1] + edges[1:])
    ref = oracle_profile.aprime_at(centers)
    widths = np.diff(edges)
    diff = np.asarray(force_values, dtype=float) - ref
    return float(np.sum(diff * diff * np.asarray(marginal_density) * widths))


# ---------------------------------------------------------------------------
# decay fits and inequality monitors


@dataclass(frozen=True)
class DecayFit:
    rate: float
    r_squared: float
    n_used: int
    window: tuple
    shrunk: bool


def fit_decay_rate(times, values, window=None, min_points=5):
    """Least-squares slope of ln(value) against time, returned as a positive decay rate.

    Nonpositive values inside the window are dropped (flagged as a
    shrunk window); fewer than min_points surviving points is an error.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    sel = np.ones_like(t, dtype=bool)
    if window is not None:
        sel &= (t >= window[0]) & (t <= window[1])
    positive = v > 0.0
    shrunk = bool(np.any(sel & ~positive))
    if shrunk:
        log.warning("fit_decay_rate: dropping %d nonpositive values", int(np.sum(sel & ~positive)))
    sel &= positive
    if np.sum(sel) < min_points:
        raise ValueError(f"only {int(np.sum(sel))} usable points in the fit window; need {min_points}")
    ts = t[sel]
    ys = np.log(v[sel])
    slope, intercept = np.polyfit(ts, ys, 1)
    pred = slope * ts + intercept
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return DecayFit(rate=float(-slope), r_squared=r2, n_used=int(np.sum(sel)),
                    window=(float(ts[0]), float(ts[-1])), shrunk=shrunk)


@dataclass(frozen=True)
class DiagnosticsRecord:
    """One output-time row of the convergence diagnostics."""

    time: float
    e_total: float
    e_macro: float
    e_micro: float
    fisher_macro: float
    tv_macro: float
    force_error_sq: float
    empty_bins: int

    CSV_HEADER = "t,E_total,E_macro,E_micro,fisher_macro,tv_macro,force_error_sq,empty_bins"

    def csv_row(self):
        nums = [self.time, self.e_total, self.e_macro, self.e_micro,
                self.fisher_macro, self.tv_macro, self.force_error_sq]
        return ",".join(f"{x:.17e}" for x in nums) + f",{self.empty_bins}"


def envelope_constant(e_micro0, i0, consts):
    """Prefactor of the conditional-entropy decay envelope from measured initial data."""
    denom = abs(consts.rho / (consts.m ** 2) - consts.r) / consts.beta
    forcing = consts.M_const / denom * math.sqrt(i0 / (2.0 * consts.rho))
    return 2.0 * max(math.sqrt(max(e_micro0, 0.0)), forcing)


def decay_envelope_check(times, e_micro, consts, c_const, slack=0.10):
    """sqrt(conditional entropy) under C exp(-lambda t), with multiplicative slack."""
    t = np.asarray(times, dtype=float)
    em = np.asarray(e_micro, dtype=float)
    bound = c_const * np.exp(-consts.lam * t) * (1.0 + slack)
    ok = np.sqrt(np.maximum(em, 0.0)) <= bound
    worst = float(np.max(np.sqrt(np.maximum(em, 0.0)) - bound))
    return bool(np.all(ok)), worst


def force_bound_check(e_micro, force_err, consts):
    """Force error under (2 M^2 / rho) times the conditional entropy, per output time."""
    em = np.asarray(e_micro, dtype=float)
    fe = np.asarray(force_err, dtype=float)
    bound = (2.0 * consts.M_const ** 2 / consts.rho) * em
    ok = fe <= bound * (1.0 + 1e-12) + 1e-300
    worst = float(np.max(fe - bound))
    return bool(np.all(ok)), worst
