"""Interacting-replica sampler of the adaptively biased dynamics.

N replicas evolve by Euler-Maruyama; before every step the running
mean-force estimate is refreshed as a binned conditional average of the
local mean force over the current ensemble, and the step drift adds that
estimate back along the coordinate. Two drift schemes are provided: the
plain gradient flow, and the metric-weighted variant whose extra factors
of |grad xi| give the coordinate marginal a plain diffusive evolution.
For the linear coordinate the two schemes coincide.

Reproducibility: Gaussian increments come from a counter-based generator
keyed by (seed, step index), so a trajectory is a pure function of
(seed, config) regardless of how the work is scheduled. Particle i reads
row i of the step's increment block, which is the same as keying by
(seed, step, particle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .model import CosinePotential, LinearXi, local_mean_force
from .oracle import refined_quadrature, QuadratureSpec


class ParticleBlowupError(RuntimeError):
    """A position went non-finite; reports step count and particle index."""


def gaussian_increments(seed, step_index, n):
    """Standard-normal pairs for one step, a pure function of (seed, step_index, n)."""
    key = np.array([seed, step_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal((n, 2))


def _init_generator(seed):
    # step index 0 is reserved for initialization draws
    key = np.array([seed, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def reflect(values, lo, hi):
    """Fold values into [lo, hi]; in-range values pass through untouched.

    Multiple reflections are handled by the modulus; the fold is applied
    only to escaped values so the common path injects no rounding.
    """
    out = np.array(values, dtype=float, copy=True)
    outside = (out < lo) | (out > hi)
    if np.any(outside):
        span = hi - lo
        t = np.mod(out[outside] - lo, 2.0 * span)
        out[outside] = lo + np.where(t <= span, t, 2.0 * span - t)
    return out


@dataclass(frozen=True)
class ParticleEnsemble:
    """Replica positions plus the counter-based generator state (seed, step_count)."""

    x: np.ndarray
    y: np.ndarray
    seed: int
    time: float = 0.0
    step_count: int = 0
    init_note: str | None = None

    @property
    def n(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class BiasProfile:
    """Piecewise-constant mean-force estimate on a 1D bin grid.

    tau = 0 replaces bin values by the fresh conditional averages at each
    update; tau > 0 relaxes toward them with rate dt / tau. Empty bins
    hold their previous value (initially zero).
    """

    bin_edges: np.ndarray
    force: np.ndarray
    occupancy: np.ndarray
    tau: float = 0.0
    interpolate: bool = False

    @classmethod
    def zeros(cls, n_bins, lo=0.0, hi=1.0, tau=0.0, interpolate=False):
        return cls(bin_edges=np.linspace(lo, hi, n_bins + 1),
                   force=np.zeros(n_bins),
                   occupancy=np.zeros(n_bins, dtype=np.int64),
                   tau=tau, interpolate=interpolate)

    @property
    def n_bins(self):
        return len(self.force)

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def widths(self):
        return np.diff(self.bin_edges)

    def bin_index(self, z):
        idx = np.searchsorted(self.bin_edges, np.asarray(z), side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def lookup(self, z):
        """Bias force at coordinate values: per-bin constant, or linear through bin centers."""
        if not self.interpolate:
            return self.force[self.bin_index(z)]
        lo, hi = self.bin_edges[0], self.bin_edges[-1]
        period = hi - lo
        zq = np.mod(np.asarray(z, dtype=float) - lo, period) + lo
        cs = np.concatenate([[self.centers[-1] - period], self.centers,
                             [self.centers[0] + period]])
        fs = np.concatenate([[self.force[-1]], self.force, [self.force[0]]])
        return np.interp(zq, cs, fs)

    def bias_potential(self, z):
        """Integral of the piecewise-constant force from the lower range edge to z."""
        z = np.asarray(z, dtype=float)
        widths = self.widths
        cum = np.concatenate([[0.0], np.cumsum(self.force * widths)])
        idx = self.bin_index(z)
        return cum[idx] + self.force[idx] * (z - self.bin_edges[idx])


# ---------------------------------------------------------------------------
# initialization


def init_ensemble(model, n_particles, init_dist, seed, point=None, y_span=None):
    """Draw the starting ensemble.

    init_dist "uniform": x uniform over the coordinate range, y uniform
    over y_span (default: the middle half of the truncated range), so
    every bin is occupied in expectation. "equilibrium": the unbiased
    Boltzmann law of the potential, sampled by inverse transform in x and
    the conditional in y. "point": all replicas at the given point,
    permitted but flagged since most bins start empty.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if init_dist not in ("uniform", "equilibrium", "point"):
        raise ValueError(f"unknown init_dist {init_dist!r}")
    if seed is None or seed < 0:
        raise ValueError("particle runs need a non-negative seed")
    xlo, xhi = model.x_bounds
    ylo, yhi = model.y_bounds
    note = None

    if init_dist == "point":
        if point is None:
            raise ValueError("point init needs a point")
        px, py = point
        if not (xlo <= px <= xhi and ylo <= py <= yhi):
            raise ValueError("init point outside the domain")
        x = np.full(n_particles, float(px))
        y = np.full(n_particles, float(py))
        note = "point init: all mass in one bin; empty-bin fallback will engage"
    elif init_dist == "uniform":
        gen = _init_generator(seed)
        u = gen.random((n_particles, 2))
        x = xlo + u[:, 0] * (xhi - xlo)
        if y_span is None:
            quarter = 0.25 * (yhi - ylo)
            y_span = (ylo + quarter, yhi - quarter)
        y = y_span[0] + u[:, 1] * (y_span[1] - y_span[0])
    else:
        x, y = _sample_boltzmann(model, n_particles, seed)

    return ParticleEnsemble(x=x, y=y, seed=int(seed), init_note=note)


def _marginal_weight_table(model, n_nodes=2049):
    """Slice normalizers of exp(-beta V) on a dense coordinate grid."""
    xlo, xhi = model.x_bounds
    zs = np.linspace(xlo, xhi, n_nodes)
    pot = model.potential
    beta = model.beta

    def boltz(y):
        return np.exp(-beta * pot.value(zs[:, None], y[None, :]))

    w = refined_quadrature(boltz, model.y_bounds[0], model.y_bounds[1],
                           QuadratureSpec(rel_tol=1e-9), label="init marginal")
    return zs, w


def _inverse_cdf(u, nodes, weights):
    mids = 0.5 * (weights[1:] + weights[:-1]) * np.diff(nodes)
    cdf = np.concatenate([[0.0], np.cumsum(mids)])
    cdf /= cdf[-1]
    return np.interp(u, cdf, nodes)


def _conditional_y_samples(model, x, gen):
    """y | x under exp(-beta V): exact Gaussian when available, else inverse transform."""
    pot = model.potential
    ylo, yhi = model.y_bounds
    if isinstance(pot, CosinePotential) and pot.k > 0:
        mean, std = pot.conditional_y(x, model.beta)
        return reflect(mean + std * gen.standard_normal(x.shape[0]), ylo, yhi)
    u = gen.random(x.shape[0])
    ys = np.linspace(ylo, yhi, 1025)
    out = np.empty_like(x)
    n_cols = 256
    cols = np.clip(((x - model.x_bounds[0]) / model.x_period * n_cols).astype(int), 0, n_cols - 1)
    for c in np.unique(cols):
        sel = cols == c
        xc = model.x_bounds[0] + (c + 0.5) * model.x_period / n_cols
        w = np.exp(-model.beta * pot.value(np.full_like(ys, xc), ys))
        out[sel] = _inverse_cdf(u[sel], ys, w)
    return out


def _sample_boltzmann(model, n, seed):
    gen = _init_generator(seed)
    u = gen.random(n)
    zs, w = _marginal_weight_table(model)
    x = _inverse_cdf(u, zs, w)
    y = _conditional_y_samples(model, x, gen)
    return x, y


def sample_biased_equilibrium(model, n, seed):
    """i.i.d. draws from the stationary law of the biased dynamics.

    Biasing flattens only the coordinate marginal; the conditionals in y
    are those of the unbiased Boltzmann law, so sampling is uniform in x
    plus the conditional in y. Torus range only.
    """
    if model.x_kind != "torus":
        raise ValueError("biased-equilibrium sampling implemented for the torus range")
    gen = _init_generator(seed)
    x = model.x_bounds[0] + gen.random(n) * model.x_period
    y = _conditional_y_samples(model, x, gen)
    return ParticleEnsemble(x=x, y=y, seed=int(seed))


# ---------------------------------------------------------------------------
# bias update and stepping


def _force_and_bins(ensemble, model, profile):
    xi_vals = model.xi.value(ensemble.x, ensemble.y)
    lo, hi = profile.bin_edges[0], profile.bin_edges[-1]
    if np.any((xi_vals < lo) | (xi_vals > hi)):
        raise ValueError("bias bins do not cover all coordinate values")
    f = local_mean_force(model, ensemble.x, ensemble.y)
    if not np.all(np.isfinite(f)):
        bad = int(np.argmax(~np.isfinite(f)))
        raise ParticleBlowupError(f"non-finite force at particle {bad}")
    idx = profile.bin_index(xi_vals)
    if model.xi.constant_gradient:
        wts = None
    else:
        gx, gy = model.xi.grad(ensemble.x, ensemble.y)
        wts = 1.0 / np.sqrt(gx * gx + gy * gy)
    return xi_vals, f, idx, wts


def _binned_update(profile, f, idx, weights, dt):
    n_bins = profile.n_bins
    counts = np.bincount(idx, minlength=n_bins)
    if weights is None:
        num = np.bincount(idx, weights=f, minlength=n_bins)
        den = counts.astype(float)
    else:
        num = np.bincount(idx, weights=weights * f, minlength=n_bins)
        den = np.bincount(idx, weights=weights, minlength=n_bins)
    occupied = counts > 0
    mean = np.where(occupied, num / np.where(den > 0, den, 1.0), 0.0)
    if profile.tau == 0.0:
        new_force = np.where(occupied, mean, profile.force)
    else:
        new_force = np.where(occupied,
                             profile.force + (dt / profile.tau) * (mean - profile.force),
                             profile.force)
    return replace(profile, force=new_force, occupancy=counts.astype(np.int64))


def update_bias(ensemble, model, profile, dt):
    """Refresh the binned mean-force estimate from the current ensemble.

    Per bin: the 1/|grad xi|-weighted average of the local mean force over
    member particles (weights identically one for the linear coordinate).
    tau = 0 replaces, tau > 0 relaxes; empty bins keep their value.
    """
    _, f, idx, wts = _force_and_bins(ensemble, model, profile)
    return _binned_update(profile, f, idx, wts, dt)


def _drift(ensemble, model, profile, scheme):
    pot = model.potential
    x, y = ensemble.x, ensemble.y
    xi_vals = model.xi.value(x, y)
    fb = profile.lookup(xi_vals)
    gx, gy = model.xi.grad(x, y)
    wprime = model.confinement_dz(xi_vals)
    ux = -(pot.dx(x, y) - fb * gx + wprime * gx)
    uy = -(pot.dy(x, y) - fb * gy + wprime * gy)
    if scheme == "plain":
        return ux, uy, None
    g2 = gx * gx + gy * gy
    if not model.xi.constant_gradient:
        h = 1e-5

        def log_inv_g2(xx, yy):
            ggx, ggy = model.xi.grad(xx, yy)
            return -np.log(ggx * ggx + ggy * ggy)

        corr_x = (log_inv_g2(x + h, y) - log_inv_g2(x - h, y)) / (2 * h)
        corr_y = (log_inv_g2(x, y + h) - log_inv_g2(x, y - h)) / (2 * h)
        ux = ux + corr_x / model.beta
        uy = uy + corr_y / model.beta
    ginv2 = 1.0 / g2
    return ux * ginv2, uy * ginv2, np.sqrt(ginv2)


def step(ensemble, model, profile, dt, scheme="metric", noise=None):
    """One Euler-Maruyama step with the current bias profile.

    scheme "plain" uses the gradient drift of the biased potential;
    "metric" rescales drift and noise by inverse powers of |grad xi| and
    adds the log-metric correction. The coordinate wraps on the torus
    (clips on an interval) and y reflects at the truncation boundary.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if scheme not in ("metric", "plain"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if noise is None:
        noise = gaussian_increments(ensemble.seed, ensemble.step_count + 1, ensemble.n)
    ux, uy, amp_scale = _drift(ensemble, model, profile, scheme)
    amp = math.sqrt(2.0 * dt / model.beta)
    if amp_scale is not None:
        gx_noise = amp * amp_scale * noise[:, 0]
        gy_noise = amp * amp_scale * noise[:, 1]
    else:
        gx_noise = amp * noise[:, 0]
        gy_noise = amp * noise[:, 1]
    xn = ensemble.x + ux * dt + gx_noise
    yn = ensemble.y + uy * dt + gy_noise
    finite = np.isfinite(xn) & np.isfinite(yn)
    if not np.all(finite):
        bad = int(np.argmax(~finite))
        raise ParticleBlowupError(
            f"non-finite position at step {ensemble.step_count + 1}, particle {bad}")
    xlo, xhi = model.x_bounds
    if model.x_kind == "torus":
        xn = xlo + np.mod(xn - xlo, xhi - xlo)
        # mod of a tiny negative can round up to the period itself
        xn = np.where(xn >= xhi, xlo, xn)
    else:
        xn = np.clip(xn, xlo, xhi)
    yn = reflect(yn, model.y_bounds[0], model.y_bounds[1])
    return replace(ensemble, x=xn, y=yn, time=ensemble.time + dt,
                   step_count=ensemble.step_count + 1)


def ito_force_estimate(pos_prev, pos_next, model, profile, dt, noise_used):
    """Mean-force sample from the coordinate increment alone.

    Rearranges the coordinate's stochastic increment under the
    metric-weighted dynamics (no confinement) so that the local mean
    force never has to be evaluated:

        estimate = bias(xi_prev) + (dxi - sqrt(2/beta) u . dB) / dt,

    with u the unit coordinate gradient at the pre-step position, dB the
    Gaussian increment actually used, and dxi taken along the shortest
    torus arc.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if model.confinement is not None:
        raise ValueError("increment estimator assumes no confining potential")
    xp, yp = pos_prev
    xn, yn = pos_next
    xi_p = model.xi.value(xp, yp)
    xi_n = model.xi.value(xn, yn)
    dxi = xi_n - xi_p
    if model.x_kind == "torus" and isinstance(model.xi, LinearXi):
        period = model.x_period
        dxi = dxi - period * np.round(dxi / period)
    gx, gy = model.xi.grad(xp, yp)
    gnorm = np.sqrt(gx * gx + gy * gy)
    noise = np.asarray(noise_used)
    db = math.sqrt(dt) * (gx * noise[..., 0] + gy * noise[..., 1]) / gnorm
    return profile.lookup(xi_p) + (dxi - math.sqrt(2.0 / model.beta) * db) / dt


def empirical_marginal(ensemble, bin_edges, model=None):
    """Normalized histogram density of the coordinate values; unit mass by construction."""
    if model is None or isinstance(model.xi, LinearXi):
        xi_vals = ensemble.x
    else:
        xi_vals = model.xi.value(ensemble.x, ensemble.y)
    counts, _ = np.histogram(xi_vals, bins=bin_edges)
    widths = np.diff(bin_edges)
    return counts / (ensemble.n * widths)


# ---------------------------------------------------------------------------
# fused fast path (canonical family, linear coordinate, torus, no confinement)


def supports_fast_path(model, profile, scheme):
    return (_kernels.HAVE_NUMBA
            and isinstance(model.potential, CosinePotential)
            and isinstance(model.xi, LinearXi)
            and model.x_kind == "torus"
            and model.x_bounds == (0.0, 1.0)
            and model.confinement is None
            and not profile.interpolate
            and np.allclose(np.diff(profile.bin_edges), profile.widths[0])
            and scheme in ("metric", "plain"))


class FastLoop:
    """Compiled update-then-step passes for the canonical family.

    Semantically identical to update_bias() and step(); forces and bin
    indices computed during the update are kept so drivers can feed
    accumulators without re-evaluating anything.
    """

    def __init__(self, model, n_particles, n_bins):
        self.model = model
        self.pot = model.potential
        self.fvals = np.empty(n_particles)
        self.idx = np.empty(n_particles, dtype=np.int64)
        self.num = np.empty(n_bins)
        self.cnt = np.empty(n_bins, dtype=np.int64)
        self.xn = np.empty(n_particles)
        self.yn = np.empty(n_particles)

    def update_bias(self, ensemble, profile, dt):
        """Refresh the profile from the ensemble; caches forces and bin indices."""
        _kernels.cosine_bias_kernel(ensemble.x, ensemble.y, self.pot.c, self.pot.a,
                                    self.pot.k, profile.n_bins,
                                    self.fvals, self.idx, self.num, self.cnt)
        occupied = self.cnt > 0
        mean = np.where(occupied, self.num / np.where(occupied, self.cnt, 1), 0.0)
        if profile.tau == 0.0:
            new_force = np.where(occupied, mean, profile.force)
        else:
            new_force = np.where(occupied,
                                 profile.force + (dt / profile.tau) * (mean - profile.force),
                                 profile.force)
        return replace(profile, force=new_force, occupancy=self.cnt.copy())

    def step(self, ensemble, profile, dt, noise):
        """Advance using the forces cached by the last update_bias call."""
        sqrt2dt = math.sqrt(2.0 * dt / self.model.beta)
        ok = _kernels.cosine_step_kernel(ensemble.x, ensemble.y, self.fvals, self.idx,
                                         profile.force, noise, dt, sqrt2dt,
                                         self.pot.c, self.pot.a, self.pot.k,
                                         self.model.y_bounds[0], self.model.y_bounds[1],
                                         self.xn, self.yn)
        if not ok:
            raise ParticleBlowupError(f"non-finite position at step {ensemble.step_count + 1}")
        return replace(ensemble, x=self.xn.copy(), y=self.yn.copy(),
                       time=ensemble.time + dt, step_count=ensemble.step_count + 1)
