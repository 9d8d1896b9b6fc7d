"""Reference quantities by deterministic quadrature.

Everything the convergence tests treat as ground truth comes from here:
slice normalizers Z(z), the free-energy profile A(z) and the mean force
A'(z), the equilibrium density of the biased dynamics, its flat (or
confinement-shaped) coordinate marginal, and conditional slice measures.

Quadrature is composite trapezoid over the truncated y range, refined by
doubling with one Richardson extrapolation level until the relative
change drops below the requested tolerance. The integrands are smooth
with rapidly decaying tails, so convergence is fast and the stopping
test is reliable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Grid2D
from .model import LinearXi, local_mean_force

_TINY = 1e-300


class QuadratureError(RuntimeError):
    """Refinement hit the node cap before the tolerance was met."""

    def __init__(self, message, worst_index=None):
        super().__init__(message)
        self.worst_index = worst_index


class EmptySliceError(ValueError):
    """Slice mass under the configured floor; caller decides the fallback."""


class NormalizerUnderflowError(ValueError):
    """exp(-beta V) underflowed; rescale beta or the domain."""


@dataclass(frozen=True)
class QuadratureSpec:
    rel_tol: float = 1e-10
    max_nodes: int = 2 ** 16
    start_nodes: int = 65


def refined_quadrature(f, lo, hi, spec=QuadratureSpec(), label=""):
    """Integrate f over [lo, hi] by trapezoid doubling with Richardson extrapolation.

    f maps a node vector (n,) to integrand values (..., n); the leading
    axes are integrated in one batch and convergence is required for all
    of them jointly. Returns the extrapolated values with shape (...).
    """
    n = spec.start_nodes
    t_prev = None
    r_prev = None
    worst = None
    while n <= spec.max_nodes:
        nodes = np.linspace(lo, hi, n)
        vals = np.asarray(f(nodes))
        h = (hi - lo) / (n - 1)
        t = h * (vals[..., 0] * 0.5 + vals[..., 1:-1].sum(axis=-1) + vals[..., -1] * 0.5)
        if t_prev is not None:
            r = (4.0 * t - t_prev) / 3.0
            if r_prev is not None:
                # convergence relative to the batch scale: components passing
                # through zero must not stall the stopping test on roundoff
                diff = np.abs(r - r_prev)
                scale = max(float(np.max(np.abs(r))), _TINY)
                if float(np.max(diff)) <= spec.rel_tol * scale:
                    return r
                if np.ndim(diff) > 0:
                    worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
            r_prev = r
        t_prev = t
        n = 2 * (n - 1) + 1
    raise QuadratureError(f"quadrature did not converge below {spec.rel_tol:g} "
                          f"within {spec.max_nodes} nodes"
                          f"{' at ' + label if label else ''}", worst_index=worst)


# ---------------------------------------------------------------------------
# free-energy profile


@dataclass(frozen=True)
class FreeEnergyProfile:
    """A(z), A'(z), and the slice normalizers on an ordered coordinate grid.

    A is pinned to zero at the first grid point; on a periodic coordinate
    range the profile interpolates with wraparound.
    """

    z_grid: np.ndarray
    a_values: np.ndarray
    aprime_values: np.ndarray
    z_sigma_values: np.ndarray
    periodic: bool = True
    period: float = 1.0

    def _interp(self, z, values):
        if self.periodic:
            zq = np.mod(np.asarray(z, dtype=float) - self.z_grid[0], self.period) + self.z_grid[0]
            zs = np.concatenate([self.z_grid, [self.z_grid[0] + self.period]])
            vs = np.concatenate([values, [values[0]]])
            return np.interp(zq, zs, vs)
        return np.interp(np.asarray(z, dtype=float), self.z_grid, values)

    def a_at(self, z):
        return self._interp(z, self.a_values)

    def aprime_at(self, z):
        return self._interp(z, self.aprime_values)

    def bin_mean_force(self, edges):
        """Exact bin averages of A' from free-energy differences, (A(hi)-A(lo))/width.

        On a periodic range A itself is periodic (the pinning constant
        cancels in differences), so wrapped edges need no special casing.
        """
        edges = np.asarray(edges, dtype=float)
        return (self.a_at(edges[1:]) - self.a_at(edges[:-1])) / np.diff(edges)


def compute_free_energy(model, z_grid, quad=QuadratureSpec()):
    """Tabulate Z(z), A(z) (pinned at the first point), and A'(z) by slice quadrature.

    Restricted to the linear coordinate xi = x, for which slices are
    vertical lines and the slice measure is plain dy.
    """
    if not isinstance(model.xi, LinearXi):
        raise ValueError("slice quadrature supports only the linear coordinate xi = x")
    z = np.asarray(z_grid, dtype=float)
    ylo, yhi = model.y_bounds
    beta = model.beta
    pot = model.potential

    def integrand(y):
        zz = z[:, None]
        yy = y[None, :]
        boltz = np.exp(-beta * pot.value(zz, yy))
        return np.stack([boltz, pot.dx(zz, yy) * boltz])

    try:
        res = refined_quadrature(integrand, ylo, yhi, quad, label="free-energy slices")
    except QuadratureError as exc:
        if exc.worst_index is not None:
            raise QuadratureError(f"{exc} (worst slice z = {z[exc.worst_index[-1]]:g})",
                                  worst_index=exc.worst_index) from exc
        raise
    z_sigma = res[0]
    num = res[1]
    if np.any(z_sigma < 1e-280):
        bad = z[int(np.argmin(z_sigma))]
        raise NormalizerUnderflowError(
            f"slice normalizer underflow at z={bad:g}; rescale beta or shrink the domain")
    a_vals = -(np.log(z_sigma) - np.log(z_sigma[0])) / beta
    aprime = num / z_sigma
    periodic = model.x_kind == "torus"
    return FreeEnergyProfile(z, a_vals, aprime, z_sigma,
                             periodic=periodic, period=model.x_period)


def mean_force_consistency(model, profile, quad=QuadratureSpec(), fd_step=1e-4):
    """Max gap between the centered difference of A and the quadrature A'.

    The difference uses a dedicated small step, not the profile spacing:
    with A''' of order (2 pi)^3 the grid-spaced difference would sit far
    above the quadrature accuracy.
    """
    z = profile.z_grid
    beta = model.beta
    pot = model.potential
    ylo, yhi = model.y_bounds

    def integrand(y):
        zz = np.concatenate([z + fd_step, z - fd_step])[:, None]
        return np.exp(-beta * pot.value(zz, y[None, :]))

    vals = refined_quadrature(integrand, ylo, yhi, quad, label="consistency check")
    n = len(z)
    dA = -(np.log(vals[:n]) - np.log(vals[n:])) / (2 * fd_step * beta)
    return float(np.max(np.abs(dA - profile.aprime_values)))


# ---------------------------------------------------------------------------
# equilibrium densities


@dataclass(frozen=True)
class EquilibriumDensities:
    """Cell-centered equilibrium of the biased dynamics and its coordinate marginal.

    psi is normalized to unit mass on the grid; raw_mass records the mass
    of the analytic tabulation before that normalization (a consistency
    diagnostic, close to 1 whenever the grid resolves the density).
    """

    grid: Grid2D
    psi: np.ndarray
    psi_xi: np.ndarray
    z_const: float
    z_xi: float
    raw_mass: float
    beta: float

    def conditional_slice(self, z):
        """Renormalized conditional density on the y cells of the column holding z."""
        i = int(self.grid.x.index_of(z))
        col = self.psi[i]
        mass = col.sum() * self.grid.y.h
        return self.grid.y.centers, col / mass


def compute_equilibrium(model, profile, grid, quad=QuadratureSpec()):
    """Tabulate the equilibrium density exp(-beta(V - A o xi + W o xi)) / (Z Z^xi).

    Slice normalizers are recomputed at the grid's own column centers so
    the tabulation is the exact continuum density at cell centers (up to
    quadrature tolerance), independent of the profile resolution.
    """
    if not isinstance(model.xi, LinearXi):
        raise ValueError("equilibrium tabulation supports only the linear coordinate")
    zc = grid.x.centers
    if profile is not None and not profile.periodic:
        if zc[0] < profile.z_grid[0] - grid.x.h or zc[-1] > profile.z_grid[-1] + grid.x.h:
            raise ValueError("profile does not cover the grid's coordinate range")
    beta = model.beta
    pot = model.potential
    ylo, yhi = model.y_bounds

    def boltz(y):
        return np.exp(-beta * pot.value(zc[:, None], y[None, :]))

    z_col = refined_quadrature(boltz, ylo, yhi, quad, label="equilibrium columns")
    if np.any(z_col < 1e-280):
        raise NormalizerUnderflowError("column normalizer underflow; rescale beta or the domain")

    if model.x_kind == "torus":
        psi_xi = np.ones_like(zc)
        z_xi = model.x_period
    else:
        w_vals = np.exp(-beta * model.confinement_value(zc))
        z_xi = float(np.sum(w_vals) * grid.x.h)
        psi_xi = w_vals / z_xi

    yc = grid.y.centers
    cond = np.exp(-beta * pot.value(zc[:, None], yc[None, :])) / z_col[:, None]
    psi = cond * psi_xi[:, None]
    raw_mass = float(psi.sum() * grid.cell_area)
    psi = psi / raw_mass

    z_const = float(np.sum(z_col) * grid.x.h)
    return EquilibriumDensities(grid=grid, psi=psi, psi_xi=psi_xi,
                                z_const=z_const, z_xi=z_xi, raw_mass=raw_mass,
                                beta=beta)


def conditional_expectation_of_force(model, densities, z, mass_floor=1e-30):
    """Average of the local mean force over the density's slice nearest z.

    Works on EquilibriumDensities or on any object with .grid and
    .values / .psi arrays (a density field). Uses the same cell-centered
    rectangle rule as the rest of the grid machinery.
    """
    grid = densities.grid
    values = getattr(densities, "values", None)
    if values is None:
        values = densities.psi
    i = int(grid.x.index_of(z))
    col = values[i]
    mass = float(col.sum() * grid.y.h)
    if mass < mass_floor:
        raise EmptySliceError(f"slice mass {mass:.3e} below floor {mass_floor:g} at z={z:g}")
    yc = grid.y.centers
    f = local_mean_force(model, np.full_like(yc, grid.x.centers[i]), yc)
    return float((f * col).sum() / col.sum())
