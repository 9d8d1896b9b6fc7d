"""Compiled inner loops. Pure-numpy fallbacks live beside the call sites.

Every kernel is a straight transcription of the corresponding numpy
expression with a fixed loop order, so results are deterministic and
agree with the fallback to rounding. fastmath stays off: reassociation
would break the bit-reproducibility contract.
"""

from __future__ import annotations

import math

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True, fastmath=False)(fn)
    return fn


@_njit
def fp2d_step_kernel(v, out, ap_face, dxv_xface, uy, hx, hy, dt, cx, cy):
    """One conservative finite-volume step on the torus-times-interval grid.

    x faces carry drift (bias minus potential slope), y faces are
    interior only (zero flux at the truncation boundary). Face densities
    are centered where the per-face masks cx, cy allow (face Peclet at
    most 2, so positivity survives) and upwind elsewhere; the diffusive
    flux is always centered. Returns True if any cell went negative.
    """
    nx, ny = v.shape
    neg = False
    for i in range(nx):
        im = i - 1 if i > 0 else nx - 1
        ip = i + 1 if i < nx - 1 else 0
        for j in range(ny):
            ux_l = ap_face[i] - dxv_xface[i, j]
            ux_r = ap_face[ip] - dxv_xface[ip, j]
            if cx[i, j]:
                fl = 0.5 * (v[i, j] + v[im, j])
            else:
                fl = v[im, j] if ux_l > 0.0 else v[i, j]
            if cx[ip, j]:
                fr = 0.5 * (v[ip, j] + v[i, j])
            else:
                fr = v[i, j] if ux_r > 0.0 else v[ip, j]
            jx_l = ux_l * fl - (v[i, j] - v[im, j]) / hx
            jx_r = ux_r * fr - (v[ip, j] - v[i, j]) / hx
            if j == 0:
                jy_b = 0.0
            else:
                u = uy[i, j - 1]
                if cy[i, j - 1]:
                    fb = 0.5 * (v[i, j] + v[i, j - 1])
                else:
                    fb = v[i, j - 1] if u > 0.0 else v[i, j]
                jy_b = u * fb - (v[i, j] - v[i, j - 1]) / hy
            if j == ny - 1:
                jy_t = 0.0
            else:
                u = uy[i, j]
                if cy[i, j]:
                    ft = 0.5 * (v[i, j + 1] + v[i, j])
                else:
                    ft = v[i, j] if u > 0.0 else v[i, j + 1]
                jy_t = u * ft - (v[i, j + 1] - v[i, j]) / hy
            r = v[i, j] - dt * ((jx_r - jx_l) / hx + (jy_t - jy_b) / hy)
            out[i, j] = r
            if r < 0.0:
                neg = True
    return neg


@_njit
def row_bias_kernel(v, dxv_cell, ap):
    """Per-column density-weighted average of the force table."""
    nx, ny = v.shape
    for i in range(nx):
        num = 0.0
        den = 0.0
        for j in range(ny):
            num += v[i, j] * dxv_cell[i, j]
            den += v[i, j]
        ap[i] = num / den


@_njit
def marginal_step_kernel(v, out, u_edges, h, dt, periodic):
    """One conservative 1D step: drift at interior faces plus centered diffusion."""
    n = v.shape[0]
    neg = False
    for i in range(n):
        if periodic:
            im = i - 1 if i > 0 else n - 1
            ip = i + 1 if i < n - 1 else 0
            j_l = u_edges[i] * 0.5 * (v[i] + v[im]) - (v[i] - v[im]) / h
            j_r = u_edges[ip] * 0.5 * (v[ip] + v[i]) - (v[ip] - v[i]) / h
        else:
            if i == 0:
                j_l = 0.0
            else:
                j_l = u_edges[i] * 0.5 * (v[i] + v[i - 1]) - (v[i] - v[i - 1]) / h
            if i == n - 1:
                j_r = 0.0
            else:
                j_r = u_edges[i + 1] * 0.5 * (v[i + 1] + v[i]) - (v[i + 1] - v[i]) / h
        r = v[i] - dt * (j_r - j_l) / h
        out[i] = r
        if r < 0.0:
            neg = True
    return neg


@_njit
def cosine_bias_kernel(x, y, c, a, k, nbins, fvals, idx, num, cnt):
    """Force values, bin indices, and per-bin sums for the cosine family on [0, 1)."""
    two_pi = 2.0 * math.pi
    for b in range(nbins):
        num[b] = 0.0
        cnt[b] = 0
    for i in range(x.shape[0]):
        f = two_pi * (-c * math.sin(two_pi * x[i]) + a * y[i] * math.cos(two_pi * x[i]))
        b = int(x[i] * nbins)
        if b >= nbins:
            b = nbins - 1
        if b < 0:
            b = 0
        fvals[i] = f
        idx[i] = b
        num[b] += f
        cnt[b] += 1


@_njit
def cosine_step_kernel(x, y, fvals, idx, force, g, dt, sqrt2dt, c, a, k, ylo, yhi, xn, yn):
    """Euler-Maruyama update for the cosine family, torus x and reflected y."""
    two_pi = 2.0 * math.pi
    span = yhi - ylo
    ok = True
    for i in range(x.shape[0]):
        fb = force[idx[i]]
        drift_x = fb - fvals[i]
        drift_y = -(a * math.sin(two_pi * x[i]) + k * y[i])
        xi = x[i] + drift_x * dt + sqrt2dt * g[i, 0]
        if xi < 0.0 or xi >= 1.0:
            xi = xi % 1.0
            if xi >= 1.0:          # mod of a tiny negative can round up to 1
                xi = 0.0
        yi = y[i] + drift_y * dt + sqrt2dt * g[i, 1]
        if yi < ylo or yi > yhi:
            t = (yi - ylo) % (2.0 * span)
            yi = ylo + (t if t <= span else 2.0 * span - t)
        xn[i] = xi
        yn[i] = yi
        if not (math.isfinite(xi) and math.isfinite(yi)):
            ok = False
    return ok
