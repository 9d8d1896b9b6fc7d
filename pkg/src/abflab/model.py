"""Model problems on a two-dimensional configuration space.

A model problem bundles a potential energy surface V(x, y), a scalar
reaction coordinate with nonvanishing gradient, an optional confining
potential acting on the coordinate value, and the domain geometry:
x lives on the unit torus or on an interval, y on a truncated interval.
Every other module (free-energy quadrature, samplers, density solvers,
diagnostics) consumes the same ModelProblem instance.

The canonical potential family is

    V(x, y) = c cos(2 pi x) + a y sin(2 pi x) + (k/2) y^2

on the torus-times-line geometry. Its conditional distributions in y are
Gaussian, so the free-energy profile has a closed form, and the decay
constants of the biased dynamics (m, M, rho, r, lambda) are all finite
and computable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

#: |grad xi| below this is treated as a degenerate coordinate gradient.
GRAD_FLOOR = 1e-12


class DegenerateGradientError(ValueError):
    """Reaction-coordinate gradient below the safe-division floor."""


class EvaluationError(ValueError):
    """A model quantity evaluated to a non-finite value."""


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class CosinePotential:
    """V(x, y) = c cos(2 pi x) + a y sin(2 pi x) + (k/2) y^2.

    Periodic barrier of height 2c along x, harmonic well of stiffness k
    in y, bilinear x-y coupling of strength a. The y-convex part
    a y sin(2 pi x) + (k/2) y^2 has constant curvature k in y, and the
    bounded x-only part is c cos(2 pi x); that split is what
    convergence_constants() consumes.
    """

    c: float = 1.0
    a: float = 0.5
    k: float = 4.0

    def value(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (self.c * np.cos(TWO_PI * x)
                + self.a * y * np.sin(TWO_PI * x)
                + 0.5 * self.k * y * y)

    def dx(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return TWO_PI * (-self.c * np.sin(TWO_PI * x) + self.a * y * np.cos(TWO_PI * x))

    def dy(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.a * np.sin(TWO_PI * x) + self.k * y

    def dxy(self, x, y):
        x = np.asarray(x, dtype=float)
        return TWO_PI * self.a * np.cos(TWO_PI * x) * np.ones_like(np.asarray(y, dtype=float))

    # convex/bounded split used by convergence_constants
    def convex_yy(self, x, y):
        return self.k * np.ones_like(np.asarray(x, dtype=float) + np.asarray(y, dtype=float))

    def bounded_part(self, x):
        return self.c * np.cos(TWO_PI * np.asarray(x, dtype=float))

    def conditional_y(self, x, beta):
        """Mean and standard deviation of y given x under exp(-beta V)."""
        if self.k <= 0:
            raise ValueError("conditional in y requires k > 0")
        mean = -self.a * np.sin(TWO_PI * np.asarray(x, dtype=float)) / self.k
        std = 1.0 / math.sqrt(beta * self.k)
        return mean, std

    def scaled(self, factor):
        return CosinePotential(self.c * factor, self.a * factor, self.k * factor)


# ---------------------------------------------------------------------------
# reaction coordinates


@dataclass(frozen=True)
class LinearXi:
    """xi(x, y) = x. Unit gradient everywhere, zero curvature correction."""

    constant_gradient = True

    def value(self, x, y):
        return np.asarray(x, dtype=float)

    def grad(self, x, y):
        x = np.asarray(x, dtype=float)
        return np.ones_like(x), np.zeros_like(x)


@dataclass(frozen=True)
class CustomXi:
    """User-supplied coordinate: callables for xi(x, y) and its gradient.

    The curvature term div(grad xi / |grad xi|^2) is differenced
    numerically from grad_fn unless the gradient is declared constant.
    """

    fn: object
    grad_fn: object
    constant_gradient: bool = False

    def value(self, x, y):
        return np.asarray(self.fn(x, y), dtype=float)

    def grad(self, x, y):
        gx, gy = self.grad_fn(x, y)
        return np.asarray(gx, dtype=float), np.asarray(gy, dtype=float)


# ---------------------------------------------------------------------------
# confining potential on the coordinate range


@dataclass(frozen=True)
class QuadraticConfinement:
    """W(z) = (alpha/2) z^2, curvature alpha > 0."""

    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("confinement curvature must be positive")

    def value(self, z):
        return 0.5 * self.alpha * np.asarray(z, dtype=float) ** 2

    def dz(self, z):
        return self.alpha * np.asarray(z, dtype=float)

    def d2z(self, z):
        return self.alpha * np.ones_like(np.asarray(z, dtype=float))


# ---------------------------------------------------------------------------
# the model problem


@dataclass(frozen=True)
class ModelProblem:
    """Physical setup shared by all modules.

    x_kind is "torus" (periodic coordinate range, confinement must be
    absent) or "interval". The y range is a truncated interval; the
    truncation rationale is recorded in y_note.
    """

    potential: object
    beta: float = 1.0
    xi: object = field(default_factory=LinearXi)
    confinement: object | None = None
    x_kind: str = "torus"
    x_bounds: tuple = (0.0, 1.0)
    y_bounds: tuple = (-4.0, 4.0)
    y_note: str = ""

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.x_kind not in ("torus", "interval"):
            raise ValueError("x_kind must be 'torus' or 'interval'")
        if self.x_kind == "torus" and self.confinement is not None:
            raise ValueError("no confining potential on a periodic coordinate range")
        if not self.x_bounds[1] > self.x_bounds[0]:
            raise ValueError("empty x range")
        if not self.y_bounds[1] > self.y_bounds[0]:
            raise ValueError("empty y range")

    @property
    def x_period(self):
        return self.x_bounds[1] - self.x_bounds[0]

    @property
    def linear_xi(self):
        return isinstance(self.xi, LinearXi)

    def confinement_value(self, z):
        if self.confinement is None:
            return np.zeros_like(np.asarray(z, dtype=float))
        return self.confinement.value(z)

    def confinement_dz(self, z):
        if self.confinement is None:
            return np.zeros_like(np.asarray(z, dtype=float))
        return self.confinement.dz(z)


def make_cosine_model(c=1.0, a=0.5, k=4.0, beta=1.0, l_factor=8.0):
    """Canonical model: cosine-family potential on the torus-times-line.

    The unbounded y direction is truncated to [-L, L] with
    L = l_factor / sqrt(beta k); at the default l_factor = 8 the
    equilibrium conditional Gaussian carries less than 1e-12 of its mass
    outside the truncation.
    """
    if k <= 0:
        raise ValueError("y stiffness k must be positive")
    half_width = l_factor / math.sqrt(beta * k)
    note = (f"y truncated to +-{half_width:g}; equilibrium conditional mass outside "
            f"is below 1e-12 for l_factor >= 8")
    return ModelProblem(
        potential=CosinePotential(c, a, k),
        beta=beta,
        y_bounds=(-half_width, half_width),
        y_note=note,
    )


# ---------------------------------------------------------------------------
# operations


def _div_scaled_grad(xi, x, y, h=1e-5):
    """div(grad xi / |grad xi|^2) by central differences of the gradient field."""

    def scaled(xx, yy):
        gx, gy = xi.grad(xx, yy)
        g2 = gx * gx + gy * gy
        return gx / g2, gy / g2

    sxp, _ = scaled(np.asarray(x) + h, y)
    sxm, _ = scaled(np.asarray(x) - h, y)
    _, syp = scaled(x, np.asarray(y) + h)
    _, sym = scaled(x, np.asarray(y) - h)
    return (sxp - sxm) / (2 * h) + (syp - sym) / (2 * h)


def local_mean_force(model, x, y):
    """Pointwise force whose conditional average along the coordinate is the mean force.

    F = grad V . grad xi / |grad xi|^2 - (1/beta) div(grad xi / |grad xi|^2);
    for the linear coordinate xi = x this is just dV/dx. Accepts scalars
    or arrays.
    """
    pot = model.potential
    if model.linear_xi:
        f = pot.dx(x, y)
    else:
        gx, gy = model.xi.grad(x, y)
        g2 = gx * gx + gy * gy
        if np.any(g2 < GRAD_FLOOR ** 2):
            raise DegenerateGradientError(f"|grad xi| below floor near x={x!r}, y={y!r}")
        f = (pot.dx(x, y) * gx + pot.dy(x, y) * gy) / g2
        if not model.xi.constant_gradient:
            f = f - _div_scaled_grad(model.xi, x, y) / model.beta
    if not np.all(np.isfinite(f)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(f)))
        raise EvaluationError(f"non-finite potential derivative at x={x!r}, y={y!r} (first index {bad[0]})")
    return f


def projections(model, x, y, floor=GRAD_FLOOR):
    """Orthogonal projectors at a point: (P, Q) with Q along grad xi, P = Id - Q."""
    gx, gy = model.xi.grad(x, y)
    gx = float(gx)
    gy = float(gy)
    g2 = gx * gx + gy * gy
    if g2 < floor * floor:
        raise DegenerateGradientError(f"|grad xi| = {math.sqrt(g2):.3e} below floor {floor:g} at ({x}, {y})")
    q = np.array([[gx * gx, gx * gy], [gx * gy, gy * gy]]) / g2
    return np.eye(2) - q, q


@dataclass(frozen=True)
class ConvergenceConstants:
    """Decay constants of the biased dynamics for the admissible potential class.

    m bounds |grad xi|, M_const bounds the coupling derivative of the
    local mean force, rho is the uniform log-Sobolev constant of the
    conditional equilibria, r the macroscopic coordinate-relaxation rate,
    and lam = (1/beta) min(rho / m^2, r) the overall rate.
    """

    m: float
    M_const: float
    rho: float
    r: float
    lam: float
    beta: float = 1.0


R_TORUS = 4.0 * math.pi ** 2


def convergence_constants(model, n_x=256, n_y=256):
    """Estimate (m, M, rho, r, lambda) by sup/inf scans on a nested grid.

    Requires the potential to declare its convex/bounded split
    (convex_yy and bounded_part); the bound on the coupling uses the
    mixed derivative dxy V, valid for the linear coordinate. Doubling
    n_x, n_y refines the scan monotonically: the x nodes include the
    endpoints of the period and the y nodes include the truncation
    boundary.
    """
    pot = model.potential
    if not (hasattr(pot, "convex_yy") and hasattr(pot, "bounded_part")):
        raise ValueError("potential does not declare a convex/bounded split")

    xlo, xhi = model.x_bounds
    if model.x_kind == "torus":
        xs = xlo + np.arange(n_x) * (xhi - xlo) / n_x
    else:
        xs = np.linspace(xlo, xhi, n_x + 1)
    ys = np.linspace(model.y_bounds[0], model.y_bounds[1], n_y + 1)
    xg, yg = np.meshgrid(xs, ys, indexing="ij")

    gx, gy = model.xi.grad(xg, yg)
    m = float(np.max(np.sqrt(gx * gx + gy * gy)))

    m_const = float(np.max(np.abs(pot.dxy(xg, yg))))

    min_curv = float(np.min(pot.convex_yy(xg, yg)))
    if min_curv <= 0:
        raise ValueError(f"convex part has non-positive y curvature ({min_curv:g}); "
                         "the conditional equilibria have no uniform log-Sobolev constant")
    v1 = pot.bounded_part(xs)
    rho = min_curv * math.exp(-(float(np.max(v1)) - float(np.min(v1))))

    if model.x_kind == "torus":
        r = R_TORUS
    else:
        if model.confinement is None:
            raise ValueError("interval coordinate range needs a convex confining potential "
                             "to set the macroscopic rate")
        r = float(np.min(model.confinement.d2z(xs)))
        if r <= 0:
            raise ValueError("confinement curvature must be positive on the range")

    lam = (1.0 / model.beta) * min(rho / (m * m), r)
    return ConvergenceConstants(m=m, M_const=m_const, rho=rho, r=r, lam=lam, beta=model.beta)
