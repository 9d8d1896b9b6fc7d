"""Experiment orchestration: configs, run drivers, persistence, comparisons.

A run goes oracle -> (density solver | particle sampler | 1D marginal)
-> diagnostics -> rate fits, writing a fixed set of artifacts into a
fresh output directory:

    config_echo.txt   resolved configuration, reparseable
    profile.csv       z, A, Aprime, Z_sigma        (reference profile)
    diagnostics.csv   one row per output time
    bias_final.csv    bin_lo, bin_hi, force, occupancy
    summary.json      constants, fitted rates, inequality monitors
    snapshots         particle CSVs or field CSVs plus sidecar metadata

Temperatures other than beta = 1 are handled here by the exact rescaling
t -> t / beta with potentials scaled by beta: the core solvers always run
at unit temperature, and times, rates, and force tables are mapped back
to physical units on output.
"""

from __future__ import annotations

import json
import math
import os
import time as time_mod
from dataclasses import dataclass, fields, replace

import numpy as np

from . import particles as prt
from .diagnostics import (DecayFit, DiagnosticsRecord, decay_envelope_check,
                          entropy_decomposition, envelope_constant, fisher_information,
                          fit_decay_rate, force_bound_check, force_error,
                          relative_entropy, total_variation)
from .grids import Grid1D, Grid2D
from .model import (ConvergenceConstants, CosinePotential, ModelProblem,
                    QuadraticConfinement, convergence_constants, make_cosine_model)
from .oracle import (QuadratureSpec, compute_equilibrium, compute_free_energy,
                     mean_force_consistency)
from .pde import (DensityField, Field1D, Fp2dSolver, Marginal1dSolver,
                  NegativeDensityError, extract_marginal)

RUN_KINDS = ("pde_abf_metric", "pde_abf_plain", "pde_frozen",
             "particles_metric", "particles_plain", "marginal_only", "oracle_only")

PDE_KINDS = ("pde_abf_metric", "pde_abf_plain", "pde_frozen")
PARTICLE_KINDS = ("particles_metric", "particles_plain")

ENV_OUT = "ABFLAB_OUT"


class ConfigError(ValueError):
    """Configuration failed validation; nothing was written."""


@dataclass
class ExperimentConfig:
    """Flat, echoable description of one experiment."""

    kind: str = "oracle_only"
    # model
    c: float = 1.0
    a: float = 0.5
    k: float = 4.0
    beta: float = 1.0
    y_half_width: float = 0.0        # 0 = auto: 8 / sqrt(beta k)
    alpha: float = 1.0               # confinement curvature for line marginal runs
    # resolution
    n_x: int = 128
    n_y: int = 128
    n_z: int = 256                   # reference-profile grid
    n_bins: int = 32
    n_particles: int = 100000
    # time stepping
    dt: float = 0.0                  # 0 = auto (0.9 of the positivity bound; 1e-3 for particles)
    t_end: float = 1.0
    output_stride: int = 0           # 0 = auto (about 200 rows)
    snapshot_stride: int = 0         # 0 = final snapshot only
    # dynamics
    tau: float = 0.0
    seed: int = -1
    scheme_advect: str = "centered"  # face density for the drift flux: centered | upwind
    bias_interp: bool = False
    marginal_kind: str = "heat_torus"
    # initial data
    init: str = ""                   # default depends on kind; see resolve()
    init_eps_x: float = 0.5
    init_y_shift: float = 0.5
    init_z_shift: float = 1.0
    init_point_x: float = 0.5
    init_point_y: float = 0.0
    # monitors
    closure_tol: float = 1e-3
    envelope_slack: float = 0.10
    collect_increment_estimator: bool = False
    # plumbing
    threads: int = 1
    out: str = ""
    overwrite: bool = False


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text):
    """Parse flat key=value lines with # comments into an ExperimentConfig."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kwargs[key] = _coerce(key, value, known[key], lineno)
    return ExperimentConfig(**kwargs)


def _coerce(key, value, ftype, lineno):
    name = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if name == "bool":
            low = value.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError("not a boolean")
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {value!r} ({exc})") from exc


def config_echo_text(config):
    lines = [f"{f.name} = {_echo_value(getattr(config, f.name))}"
             for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def _echo_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# internal (beta = 1) setup


@dataclass
class RunSetup:
    """Everything derived from the config: internal model, grids, time scaling."""

    config: ExperimentConfig
    model: object                 # internal model, beta = 1
    constants: ConvergenceConstants | None
    time_scale: float             # physical time = time_scale * internal time
    force_scale: float            # physical force = force_scale * internal force
    t_end_internal: float
    dt_internal: float
    output_every: int
    n_steps: int


def resolve(config):
    """Validate the config and derive the internal beta = 1 setup."""
    cfg = replace(config)
    if cfg.kind not in RUN_KINDS:
        raise ConfigError(f"unknown run kind {cfg.kind!r}")
    if cfg.beta <= 0:
        raise ConfigError("beta must be positive")
    if cfg.t_end <= 0 and cfg.kind != "oracle_only":
        raise ConfigError("t_end must be positive")
    if cfg.kind in PARTICLE_KINDS and cfg.seed < 0:
        raise ConfigError("particle runs need a non-negative seed")
    if cfg.scheme_advect not in ("centered", "upwind"):
        raise ConfigError("scheme_advect must be centered or upwind")
    if not cfg.init:
        cfg.init = {"pde_frozen": "equilibrium"}.get(cfg.kind, "perturbed")
        if cfg.kind in PARTICLE_KINDS:
            cfg.init = "equilibrium"
    if cfg.kind in PARTICLE_KINDS and cfg.init not in ("uniform", "equilibrium", "point"):
        raise ConfigError(f"particle init must be uniform/equilibrium/point, not {cfg.init!r}")
    if cfg.collect_increment_estimator:
        if cfg.kind not in PARTICLE_KINDS or cfg.bias_interp or cfg.tau != 0.0:
            raise ConfigError("the increment estimator needs a particle run with "
                              "piecewise-constant bins and tau = 0")

    beta = cfg.beta
    time_scale = beta            # physical t = beta * internal t
    force_scale = 1.0 / beta
    if cfg.kind == "marginal_only" and cfg.marginal_kind == "drift_line":
        model = _line_model(cfg)
    else:
        half = cfg.y_half_width if cfg.y_half_width > 0 else 8.0 / math.sqrt(beta * cfg.k)
        l_factor = half * math.sqrt(1.0 * (beta * cfg.k))
        model = make_cosine_model(beta * cfg.c, beta * cfg.a, beta * cfg.k,
                                  beta=1.0, l_factor=l_factor)
    constants = None
    if cfg.kind != "marginal_only" or cfg.marginal_kind == "heat_torus":
        try:
            constants = convergence_constants(model)
        except ValueError:
            constants = None

    t_end_i = cfg.t_end / time_scale
    dt_i = cfg.dt / time_scale if cfg.dt > 0 else 0.0
    setup = RunSetup(config=cfg, model=model, constants=constants,
                     time_scale=time_scale, force_scale=force_scale,
                     t_end_internal=t_end_i, dt_internal=dt_i,
                     output_every=max(cfg.output_stride, 0), n_steps=0)
    return setup


def _line_model(cfg):
    # 1D line marginal runs carry the confinement on an interval range;
    # only the confinement and domain matter for the marginal solver
    beta = cfg.beta
    alpha_i = beta * cfg.alpha
    half = 8.0 / math.sqrt(alpha_i)
    return ModelProblem(potential=CosinePotential(0.0, 0.0, max(beta * cfg.k, 1.0)),
                        beta=1.0,
                        confinement=QuadraticConfinement(alpha_i),
                        x_kind="interval", x_bounds=(-half, half),
                        y_bounds=(-4.0, 4.0),
                        y_note="line marginal run; y unused")


# ---------------------------------------------------------------------------
# output plumbing


def resolve_out_dir(config):
    if config.out:
        path = config.out
        if os.path.exists(path) and os.listdir(path) and not config.overwrite:
            raise ConfigError(f"output dir {path!r} is not empty; pass overwrite")
        os.makedirs(path, exist_ok=True)
        return path
    root = os.environ.get(ENV_OUT, "runs")
    stamp = time_mod.strftime("%Y%m%d-%H%M%S")
    base = f"{config.kind}-{stamp}-{os.getpid()}"
    path = os.path.join(root, base)
    counter = 0
    while os.path.exists(path):
        counter += 1
        path = os.path.join(root, f"{base}-{counter}")
    os.makedirs(path)
    return path


def _fmt(x):
    return f"{float(x):.17e}"


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def write_profile_csv(path, profile, force_scale=1.0):
    rows = (f"{_fmt(z)},{_fmt(a * force_scale)},{_fmt(ap * force_scale)},{_fmt(zs)}"
            for z, a, ap, zs in zip(profile.z_grid, profile.a_values,
                                    profile.aprime_values, profile.z_sigma_values))
    write_csv(path, "z,A,Aprime,Z_sigma", rows)


def write_bias_csv(path, edges, force, occupancy, force_scale=1.0):
    rows = (f"{_fmt(lo)},{_fmt(hi)},{_fmt(f * force_scale)},{int(occ)}"
            for lo, hi, f, occ in zip(edges[:-1], edges[1:], force, occupancy))
    write_csv(path, "bin_lo,bin_hi,force,occupancy", rows)


def write_field_snapshot(dir_path, tag, field, meta):
    os.makedirs(dir_path, exist_ok=True)
    csv_path = os.path.join(dir_path, f"{tag}.csv")
    xc = field.grid.x.centers
    yc = field.grid.y.centers
    rows = []
    for i in range(field.grid.x.n):
        for j in range(field.grid.y.n):
            rows.append(f"{i},{j},{_fmt(xc[i])},{_fmt(yc[j])},{_fmt(field.values[i, j])}")
    write_csv(csv_path, "i,j,x_center,y_center,value", rows)
    with open(os.path.join(dir_path, f"{tag}.meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_particle_snapshot(dir_path, tag, ensemble):
    os.makedirs(dir_path, exist_ok=True)
    rows = (f"{i},{_fmt(x)},{_fmt(y)}"
            for i, (x, y) in enumerate(zip(ensemble.x, ensemble.y)))
    write_csv(os.path.join(dir_path, f"{tag}.csv"), "particle_id,x,y", rows)


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, DecayFit):
        return _jsonable({"rate": value.rate, "r_squared": value.r_squared,
                          "n_used": value.n_used, "window": value.window,
                          "shrunk": value.shrunk})
    if isinstance(value, ConvergenceConstants):
        return _jsonable({"m": value.m, "M": value.M_const, "rho": value.rho,
                          "r": value.r, "lambda": value.lam, "beta": value.beta})
    return value


def write_summary(path, summary):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# initial data


def pde_initial_field(setup, grid, equil):
    cfg = setup.config
    kind = cfg.init
    if kind == "equilibrium":
        return DensityField(grid=grid, values=equil.psi.copy())
    if kind == "uniform":
        return DensityField.from_function(grid, lambda x, y: np.ones_like(x + y))
    if kind == "perturbed":
        k_int = setup.model.potential.k
        eps = cfg.init_eps_x
        if not -1.0 < eps < 1.0:
            raise ConfigError("init_eps_x must lie in (-1, 1) to keep the density positive")
        y0 = cfg.init_y_shift

        def fn(x, y):
            return (1.0 + eps * np.cos(2.0 * math.pi * x)) * np.exp(-0.5 * k_int * (y - y0) ** 2)

        return DensityField.from_function(grid, fn)
    raise ConfigError(f"unknown init {kind!r} for a density run")


def marginal_initial_field(setup, grid):
    cfg = setup.config
    if cfg.marginal_kind == "heat_torus":
        eps = cfg.init_eps_x
        return Field1D.from_function(grid, lambda z: 1.0 + eps * np.cos(2.0 * math.pi * z))
    alpha_i = setup.model.confinement.alpha
    z0 = cfg.init_z_shift

    def fn(z):
        return np.exp(-0.5 * alpha_i * (z - z0) ** 2)

    return Field1D.from_function(grid, fn)


# ---------------------------------------------------------------------------
# run drivers


def _preflight(setup):
    """Time-step admissibility before anything is written."""
    cfg = setup.config
    if setup.dt_internal <= 0:
        return
    try:
        if cfg.kind in PDE_KINDS:
            # the self-consistent bias bound max|dxV| dominates any frozen
            # profile's bound, so this admissibility check is conservative
            # for every variant
            grid = Grid2D.for_model(setup.model, cfg.n_x, cfg.n_y)
            Fp2dSolver(setup.model, grid, variant="abf_metric",
                       advect=cfg.scheme_advect).check_dt(setup.dt_internal)
        elif cfg.kind == "marginal_only":
            if cfg.marginal_kind == "heat_torus":
                Marginal1dSolver(Grid1D.torus(cfg.n_x)).check_dt(setup.dt_internal)
            else:
                model = setup.model
                grid = Grid1D.interval(model.x_bounds[0], model.x_bounds[1], cfg.n_x)
                Marginal1dSolver(grid, kind="drift_line",
                                 confinement=model.confinement).check_dt(setup.dt_internal)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run(config):
    """Execute one experiment; returns (exit_code, summary, out_dir)."""
    setup = resolve(config)
    cfg = setup.config
    _preflight(setup)
    out_dir = resolve_out_dir(cfg)
    with open(os.path.join(out_dir, "config_echo.txt"), "w", encoding="utf-8") as fh:
        fh.write(config_echo_text(cfg))

    z_grid = np.arange(cfg.n_z) / cfg.n_z * 1.0
    summary = {"kind": cfg.kind, "out_dir": out_dir,
               "constants": setup.constants, "monitors": {}, "rates": {}}

    if cfg.kind == "marginal_only" and cfg.marginal_kind == "drift_line":
        profile = None
    else:
        profile = compute_free_energy(setup.model, z_grid)
        write_profile_csv(os.path.join(out_dir, "profile.csv"), profile, setup.force_scale)
        summary["profile"] = {
            "consistency_max_diff": mean_force_consistency(setup.model, profile) * setup.force_scale,
            "aprime_at_quarter": float(profile.aprime_at(0.25)) * setup.force_scale,
        }

    if cfg.kind == "oracle_only":
        summary["monitors"]["profile_consistency"] = {
            "pass": summary["profile"]["consistency_max_diff"] <= 1e-6,
            "fatal": True,
            "value": summary["profile"]["consistency_max_diff"],
        }
    elif cfg.kind in PDE_KINDS:
        _run_pde(setup, profile, out_dir, summary)
    elif cfg.kind in PARTICLE_KINDS:
        _run_particles(setup, profile, out_dir, summary)
    elif cfg.kind == "marginal_only":
        _run_marginal(setup, out_dir, summary)

    exit_code = 0
    for mon in summary["monitors"].values():
        if mon.get("fatal") and not mon.get("pass"):
            exit_code = 1
    summary["exit_code"] = exit_code
    summary = _jsonable(summary)      # returned summary matches the file contract
    write_summary(os.path.join(out_dir, "summary.json"), summary)
    return exit_code, summary, out_dir


def _auto_outputs(n_steps, stride, target=200):
    if stride > 0:
        return stride
    return max(1, n_steps // target)


def _snap_dt(setup, auto_dt):
    """Step count and dt: explicit dt is honored, auto dt snaps onto t_end."""
    if setup.dt_internal > 0:
        dt = setup.dt_internal
        return dt, max(1, int(round(setup.t_end_internal / dt)))
    n_steps = max(1, int(math.ceil(setup.t_end_internal / auto_dt - 1e-12)))
    return setup.t_end_internal / n_steps, n_steps


def _physical_records(records, time_scale, force_scale):
    out = []
    for rec in records:
        out.append(replace(rec, time=rec.time * time_scale,
                           force_error_sq=rec.force_error_sq * force_scale ** 2,
                           fisher_macro=rec.fisher_macro))
    return out


def _fit_or_none(times, values, window=None):
    try:
        return fit_decay_rate(times, values, window=window)
    except ValueError:
        return None


def _scale_fit(fit, time_scale):
    if fit is None:
        return None
    return replace(fit, rate=fit.rate / time_scale,
                   window=(fit.window[0] * time_scale, fit.window[1] * time_scale))


def _auto_window(times, values, rel_floor=1e-4, abs_floor=1e-13):
    """Fit window from t = 0 until values first fall under the resolvable floor.

    The relative floor keeps the fit inside the cleanly decaying band,
    above the saturation level set by spatial truncation.
    """
    v = np.asarray(values, dtype=float)
    t = np.asarray(times, dtype=float)
    if v[0] <= 0:
        return None
    floor = max(abs_floor, v[0] * rel_floor)
    below = np.nonzero(v < floor)[0]
    t_hi = t[below[0]] if below.size else t[-1]
    if t_hi <= t[0]:
        return None
    return (float(t[0]), float(t_hi))


def _run_pde(setup, oracle_profile, out_dir, summary):
    cfg = setup.config
    grid = Grid2D.for_model(setup.model, cfg.n_x, cfg.n_y)
    equil = compute_equilibrium(setup.model, oracle_profile, grid)
    variant = {"pde_abf_metric": "abf_metric", "pde_abf_plain": "abf_plain",
               "pde_frozen": "frozen_bias"}[cfg.kind]
    frozen = oracle_profile.aprime_at(grid.x.centers) if variant == "frozen_bias" else None
    solver = Fp2dSolver(setup.model, grid, variant=variant, advect=cfg.scheme_advect,
                        frozen_bias=frozen)
    dt, n_steps = _snap_dt(setup, 0.9 * solver.admissible_dt)
    solver.check_dt(dt)
    every = _auto_outputs(n_steps, cfg.output_stride)

    field0 = pde_initial_field(setup, grid, equil)
    marg_inf = equil.psi.sum(axis=1) * grid.y.h

    co_marginal = variant in ("abf_metric", "abf_plain")
    if co_marginal:
        heat = Marginal1dSolver(grid.x, kind="heat_torus")
        heat.check_dt(dt)
        marg_values = field0.values.sum(axis=1) * grid.y.h
        marg_next = np.empty_like(marg_values)

    records = []
    closure = []
    snap_dir = os.path.join(out_dir, "snapshots")

    def record(step_i, t, values, ap):
        split = entropy_decomposition(values, equil)
        marg = values.sum(axis=1) * grid.y.h
        fisher = fisher_information(marg, marg_inf, grid.x)
        tv = total_variation(marg, marg_inf, grid.x.h)
        ferr = force_error(ap, grid.x.edges, oracle_profile, marg)
        records.append(DiagnosticsRecord(
            time=t, e_total=split.total, e_macro=split.macro, e_micro=split.micro,
            fisher_macro=fisher, tv_macro=tv, force_error_sq=ferr, empty_bins=0))
        if co_marginal:
            closure.append(total_variation(marg, marg_values, grid.x.h))
        if cfg.snapshot_stride > 0 and step_i % cfg.snapshot_stride == 0:
            write_field_snapshot(snap_dir, f"field_{step_i:09d}",
                                 DensityField(grid=grid, values=values, time=t),
                                 {"n_x": grid.x.n, "n_y": grid.y.n,
                                  "time": t * setup.time_scale, "variant": variant})

    cur = field0.values.copy()
    nxt = np.empty_like(cur)
    ap = solver.current_bias(cur)
    record(0, 0.0, cur, ap)
    for s in range(1, n_steps + 1):
        neg = solver.step_into(cur, nxt, dt, ap)
        if neg:
            raise NegativeDensityError(f"negative cell at step {s}")
        cur, nxt = nxt, cur
        ap = solver.current_bias(cur)
        if co_marginal:
            heat.step_into(marg_values, marg_next, dt)
            marg_values, marg_next = marg_next, marg_values
        if s % every == 0 or s == n_steps:
            record(s, s * dt, cur, ap)

    final_field = DensityField(grid=grid, values=cur, time=n_steps * dt)
    write_field_snapshot(snap_dir, "field_final", final_field,
                         {"n_x": grid.x.n, "n_y": grid.y.n,
                          "time": n_steps * dt * setup.time_scale, "variant": variant})
    write_bias_csv(os.path.join(out_dir, "bias_final.csv"), grid.x.edges, ap,
                   np.zeros(grid.x.n, dtype=int), setup.force_scale)

    phys = _physical_records(records, setup.time_scale, setup.force_scale)
    write_csv(os.path.join(out_dir, "diagnostics.csv"), DiagnosticsRecord.CSV_HEADER,
              (r.csv_row() for r in phys))

    times_i = np.array([r.time for r in records])
    e_micro = np.array([r.e_micro for r in records])
    e_total = np.array([r.e_total for r in records])
    consts = setup.constants

    summary["initial"] = {"E_total": records[0].e_total, "E_macro": records[0].e_macro,
                          "E_micro": records[0].e_micro, "fisher_macro": records[0].fisher_macro}
    summary["final"] = {"E_total": records[-1].e_total, "E_micro": records[-1].e_micro,
                        "tv_macro": records[-1].tv_macro,
                        "force_error_sq": phys[-1].force_error_sq}
    summary["dt_internal"] = dt
    summary["n_steps"] = n_steps

    summary["rates"]["E_micro"] = _scale_fit(
        _fit_or_none(times_i, e_micro, _auto_window(times_i, e_micro)), setup.time_scale)
    summary["rates"]["E_total"] = _scale_fit(
        _fit_or_none(times_i, e_total, _auto_window(times_i, e_total)), setup.time_scale)
    t_end_i = times_i[-1]
    summary["rates"]["E_total_second_half"] = _scale_fit(
        _fit_or_none(times_i, e_total, (0.5 * t_end_i, t_end_i)), setup.time_scale)

    if variant in ("abf_metric", "abf_plain") and consts is not None:
        c_env = envelope_constant(records[0].e_micro, records[0].fisher_macro, consts)
        ok_env, worst_env = decay_envelope_check(times_i, e_micro, consts, c_env,
                                                 slack=cfg.envelope_slack)
        summary["monitors"]["entropy_envelope"] = {
            "pass": ok_env, "fatal": True, "C": c_env,
            "lambda_internal": consts.lam, "worst_gap": worst_env}
        ferr_i = np.array([r.force_error_sq for r in records])
        ok_fb, worst_fb = force_bound_check(e_micro, ferr_i, consts)
        summary["monitors"]["force_error_bound"] = {
            "pass": ok_fb, "fatal": True, "worst_gap": worst_fb}
        summary["monitors"]["marginal_closure"] = {
            "pass": bool(max(closure) <= cfg.closure_tol), "fatal": False,
            "max_l1": float(max(closure)), "tol": cfg.closure_tol}
        summary["closure_l1_max"] = float(max(closure))
    if variant == "frozen_bias":
        if cfg.init == "equilibrium":
            # stationary start: the only drift is toward the discrete fixed
            # point, which sits at truncation distance from the tabulation
            tol = 1e-4
            summary["monitors"]["stationary_start"] = {
                "pass": bool(np.max(e_total) <= tol), "fatal": True,
                "max_E_total": float(np.max(e_total)), "tol": tol}
        else:
            # relaxation from a perturbed start: entropy decays while it sits
            # above the discrete-fixed-point floor
            floor = 1e-6
            diffs = np.diff(e_total)
            above = np.maximum(e_total[1:], e_total[:-1]) > floor
            tol = 1e-12 * max(1.0, abs(e_total[0]))
            summary["monitors"]["entropy_monotone"] = {
                "pass": bool(np.all(diffs[above] <= tol)), "fatal": True,
                "floor": floor,
                "max_rise": float(diffs[above].max()) if np.any(above) else 0.0}
    if cfg.kind == "pde_abf_plain":
        fit = summary["rates"]["E_total_second_half"]
        summary["monitors"]["total_entropy_decay"] = {
            "pass": bool(fit is not None and fit.rate > 0 and fit.r_squared >= 0.95),
            "fatal": True,
            "rate": None if fit is None else fit.rate,
            "r_squared": None if fit is None else fit.r_squared}


def _run_particles(setup, oracle_profile, out_dir, summary):
    cfg = setup.config
    model = setup.model
    dt, n_steps = _snap_dt(setup, 1e-3)
    every = _auto_outputs(n_steps, cfg.output_stride)
    scheme = "metric" if cfg.kind == "particles_metric" else "plain"

    point = (cfg.init_point_x, cfg.init_point_y) if cfg.init == "point" else None
    ens = prt.init_ensemble(model, cfg.n_particles, cfg.init, cfg.seed, point=point)
    profile = prt.BiasProfile.zeros(cfg.n_bins, tau=cfg.tau, interpolate=cfg.bias_interp)
    fast = prt.supports_fast_path(model, profile, scheme)
    loop = prt.FastLoop(model, ens.n, cfg.n_bins) if fast else None

    collect = cfg.collect_increment_estimator
    if collect:
        nb = cfg.n_bins
        acc = {name: np.zeros(nb) for name in
               ("est_sum", "est_sumsq", "dir_sum", "dir_sumsq")}
        acc["count"] = np.zeros(nb, dtype=np.int64)

    edges = profile.bin_edges
    records = []
    snap_dir = os.path.join(out_dir, "snapshots")
    amp = math.sqrt(2.0 * dt / model.beta)

    hist_grid = Grid1D(edges[0], edges[-1], cfg.n_bins,
                       periodic=(model.x_kind == "torus"))

    def record(step_i, t, ens_now, prof_now):
        hist = prt.empirical_marginal(ens_now, edges)
        widths = np.diff(edges)
        tv = float(np.sum(np.abs(hist - 1.0) * widths))
        pos = hist > 0
        e_macro = float(np.sum(hist[pos] * np.log(hist[pos]) * widths[pos]))
        empty = int(np.sum(~pos))
        if empty == 0:
            fisher = fisher_information(hist, np.ones_like(hist), hist_grid)
        else:
            fisher = math.nan
        ferr = force_error(prof_now.force, edges, oracle_profile, hist)
        records.append(DiagnosticsRecord(
            time=t, e_total=math.nan, e_macro=e_macro, e_micro=math.nan,
            fisher_macro=fisher, tv_macro=tv, force_error_sq=ferr, empty_bins=empty))
        if cfg.snapshot_stride > 0 and step_i % cfg.snapshot_stride == 0:
            write_particle_snapshot(snap_dir, f"particles_{step_i:09d}", ens_now)

    for s in range(n_steps + 1):
        if fast:
            profile = loop.update_bias(ens, profile, dt)
        else:
            profile = prt.update_bias(ens, model, profile, dt)
        if s % every == 0 or s == n_steps:
            record(s, s * dt, ens, profile)
        if s == n_steps:
            break
        noise = prt.gaussian_increments(ens.seed, ens.step_count + 1, ens.n)
        if collect:
            x_prev = ens.x.copy()
        if fast:
            fvals = loop.fvals
            idx = loop.idx
            ens = loop.step(ens, profile, dt, noise)
        else:
            xi_vals, fvals, idx, wts = prt._force_and_bins(ens, model, profile)
            ens = prt.step(ens, model, profile, dt, scheme=scheme, noise=noise)
        if collect:
            dxi = ens.x - x_prev
            dxi -= np.round(dxi)
            est = profile.force[idx] + (dxi - amp * noise[:, 0]) / dt
            acc["count"] += np.bincount(idx, minlength=cfg.n_bins)
            acc["est_sum"] += np.bincount(idx, weights=est, minlength=cfg.n_bins)
            acc["est_sumsq"] += np.bincount(idx, weights=est * est, minlength=cfg.n_bins)
            acc["dir_sum"] += np.bincount(idx, weights=fvals, minlength=cfg.n_bins)
            acc["dir_sumsq"] += np.bincount(idx, weights=fvals * fvals, minlength=cfg.n_bins)

    write_particle_snapshot(snap_dir, "particles_final", ens)
    write_bias_csv(os.path.join(out_dir, "bias_final.csv"), edges, profile.force,
                   profile.occupancy, setup.force_scale)
    phys = _physical_records(records, setup.time_scale, setup.force_scale)
    write_csv(os.path.join(out_dir, "diagnostics.csv"), DiagnosticsRecord.CSV_HEADER,
              (r.csv_row() for r in phys))

    times_i = np.array([r.time for r in records])
    tv = np.array([r.tv_macro for r in records])
    summary["final"] = {"tv_macro": float(tv[-1]),
                        "force_error_sq": phys[-1].force_error_sq,
                        "empty_bins": records[-1].empty_bins}
    summary["dt_internal"] = dt
    summary["n_steps"] = n_steps
    tv_floor = 3.4 * math.sqrt(cfg.n_bins / cfg.n_particles)
    summary["monitors"]["histogram_flat"] = {
        "pass": bool(tv[-1] <= tv_floor), "fatal": True,
        "tv_final": float(tv[-1]), "tol": tv_floor}
    summary["rates"]["tv_macro"] = _scale_fit(
        _fit_or_none(times_i, tv, _auto_window(times_i, tv, rel_floor=1e-2)),
        setup.time_scale)

    # per-bin force agreement against exact bin averages of the reference force
    ref = oracle_profile.bin_mean_force(edges)
    se = _final_bin_se(setup, ens, profile)
    gap = np.abs(profile.force - ref)
    summary["bias_agreement"] = {
        "per_bin_gap": gap * setup.force_scale,
        "per_bin_se": se * setup.force_scale,
        "bins_within_3se": int(np.sum(gap <= 3.0 * se)),
        "n_bins": cfg.n_bins,
    }
    if collect:
        cnt = np.maximum(acc["count"], 1)
        est_mean = acc["est_sum"] / cnt
        dir_mean = acc["dir_sum"] / cnt
        est_var = np.maximum(acc["est_sumsq"] / cnt - est_mean ** 2, 0.0)
        dir_var = np.maximum(acc["dir_sumsq"] / cnt - dir_mean ** 2, 0.0)
        se_comb = np.sqrt((est_var + dir_var) / cnt)
        summary["increment_estimator"] = {
            "est_mean": est_mean * setup.force_scale,
            "direct_mean": dir_mean * setup.force_scale,
            "se_combined": se_comb * setup.force_scale,
            "count": acc["count"],
        }


def _final_bin_se(setup, ens, profile):
    """Standard error of the final per-bin force means from the final ensemble."""
    f = prt.local_mean_force(setup.model, ens.x, ens.y)
    idx = profile.bin_index(ens.x)
    nb = profile.n_bins
    cnt = np.maximum(np.bincount(idx, minlength=nb), 1)
    mean = np.bincount(idx, weights=f, minlength=nb) / cnt
    var = np.bincount(idx, weights=f * f, minlength=nb) / cnt - mean ** 2
    var = np.maximum(var, 0.0) * cnt / np.maximum(cnt - 1, 1)
    return np.sqrt(var / cnt)


def _run_marginal(setup, out_dir, summary):
    cfg = setup.config
    if cfg.marginal_kind == "heat_torus":
        grid = Grid1D.torus(cfg.n_x)
        solver = Marginal1dSolver(grid, kind="heat_torus")
        inf_values = np.ones(grid.n)
    else:
        model = setup.model
        grid = Grid1D.interval(model.x_bounds[0], model.x_bounds[1], cfg.n_x)
        solver = Marginal1dSolver(grid, kind="drift_line", confinement=model.confinement)
        w = np.exp(-model.confinement.value(grid.centers))
        inf_values = w / (w.sum() * grid.h)

    dt, n_steps = _snap_dt(setup, 0.9 * solver.admissible_dt)
    solver.check_dt(dt)
    every = _auto_outputs(n_steps, cfg.output_stride)
    field0 = marginal_initial_field(setup, grid)

    records = []

    def on_output(step_i, t, values):
        fisher = fisher_information(values, inf_values, grid)
        e_mac = relative_entropy(values, inf_values, grid.h)
        tv = total_variation(values, inf_values, grid.h)
        records.append(DiagnosticsRecord(
            time=t, e_total=e_mac, e_macro=e_mac, e_micro=0.0,
            fisher_macro=fisher, tv_macro=tv, force_error_sq=math.nan, empty_bins=0))

    solver.run(field0, dt, n_steps, on_output=on_output, output_every=every)
    phys = _physical_records(records, setup.time_scale, setup.force_scale)
    write_csv(os.path.join(out_dir, "diagnostics.csv"), DiagnosticsRecord.CSV_HEADER,
              (r.csv_row() for r in phys))
    times_i = np.array([r.time for r in records])
    fisher = np.array([r.fisher_macro for r in records])
    summary["dt_internal"] = dt
    summary["n_steps"] = n_steps
    summary["rates"]["fisher_macro"] = _scale_fit(
        _fit_or_none(times_i, fisher, _auto_window(times_i, fisher)), setup.time_scale)
    summary["initial"] = {"fisher_macro": float(fisher[0])}
    summary["final"] = {"fisher_macro": float(fisher[-1])}


# ---------------------------------------------------------------------------
# comparisons and rate plots


class CompareError(RuntimeError):
    pass


def _flatten(prefix, obj, out):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool) and obj is not None:
        out[prefix] = float(obj)


def compare_runs(dir_a, dir_b, tolerances=None):
    """Per-metric deltas between the summaries of two runs.

    tolerances maps flattened metric names (or "default") to allowed
    absolute deltas; metrics beyond tolerance are marked. Returns
    (report, exit_code): 0 clean, 1 tolerance exceeded, 2 missing input.
    """
    tolerances = tolerances or {}
    summaries = []
    problems = []
    for d in (dir_a, dir_b):
        path = os.path.join(d, "summary.json")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                summaries.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            problems.append(f"{path}: {exc}")
            summaries.append(None)
    if problems:
        return {"problems": problems}, 2
    flat_a, flat_b = {}, {}
    _flatten("", summaries[0], flat_a)
    _flatten("", summaries[1], flat_b)
    report = {"metrics": {}, "only_a": sorted(set(flat_a) - set(flat_b)),
              "only_b": sorted(set(flat_b) - set(flat_a))}
    exceeded = False
    for key in sorted(set(flat_a) & set(flat_b)):
        delta = flat_a[key] - flat_b[key]
        tol = tolerances.get(key, tolerances.get("default"))
        entry = {"a": flat_a[key], "b": flat_b[key], "delta": delta}
        if tol is not None:
            entry["tol"] = tol
            entry["ok"] = abs(delta) <= tol
            exceeded = exceeded or not entry["ok"]
        report["metrics"][key] = entry
    bias = _compare_bias_tables(dir_a, dir_b, tolerances.get("bias_force"))
    if bias is not None:
        report["bias"] = bias
        if "ok" in bias and not bias["ok"]:
            exceeded = True
    return report, (1 if exceeded else 0)


def load_bias_csv(run_dir):
    path = os.path.join(run_dir, "bias_final.csv")
    data = np.genfromtxt(path, delimiter=",", names=True)
    edges = np.concatenate([data["bin_lo"], [data["bin_hi"][-1]]])
    return edges, np.atleast_1d(data["force"]), np.atleast_1d(data["occupancy"])


def _compare_bias_tables(dir_a, dir_b, tol):
    """Per-bin force deltas when both runs share a bin layout."""
    try:
        edges_a, force_a, _ = load_bias_csv(dir_a)
        edges_b, force_b, _ = load_bias_csv(dir_b)
    except OSError:
        return None
    if edges_a.shape != edges_b.shape or not np.allclose(edges_a, edges_b):
        return {"note": "bin layouts differ; per-bin comparison skipped"}
    delta = np.abs(force_a - force_b)
    out = {"max_delta": float(delta.max()), "per_bin_delta": delta.tolist()}
    if tol is not None:
        out["tol"] = tol
        out["ok"] = bool(np.all(delta <= tol))
    return out


GNUPLOT_TEMPLATE = """# decay-rate plots; run with: gnuplot rates.gp
set datafile separator ','
set logscale y
set xlabel 't'
set ylabel 'diagnostic'
set key outside
plot 'diagnostics.csv' using 1:2 with lines title 'E_total', \\
     'diagnostics.csv' using 1:3 with lines title 'E_macro', \\
     'diagnostics.csv' using 1:4 with lines title 'E_micro', \\
     'diagnostics.csv' using 1:5 with lines title 'fisher_macro', \\
     'diagnostics.csv' using 1:7 with lines title 'force_error_sq'
pause -1
"""


def write_rates_script(run_dir):
    path = os.path.join(run_dir, "rates.gp")
    if not os.path.exists(os.path.join(run_dir, "diagnostics.csv")):
        raise CompareError(f"no diagnostics.csv in {run_dir}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(GNUPLOT_TEMPLATE)
    return path
