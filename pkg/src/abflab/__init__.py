"""Adaptive-biasing-force laboratory.

A small numerical lab for the adaptively biased overdamped dynamics on a
two-dimensional configuration space: a quadrature oracle for the free
energy along a reaction coordinate, an interacting-particle sampler and a
deterministic Fokker-Planck solver for the self-consistently biased
evolution, entropy and Fisher-information diagnostics, and a harness
that ties them into reproducible experiments.
"""

from .diagnostics import (DiagnosticsRecord, EntropySplit, entropy_decomposition,
                          fisher_information, fit_decay_rate, force_error,
                          relative_entropy, total_variation)
from .grids import Grid1D, Grid2D
from .model import (ConvergenceConstants, CosinePotential, CustomXi, LinearXi,
                    ModelProblem, QuadraticConfinement, convergence_constants,
                    local_mean_force, make_cosine_model, projections)
from .oracle import (EquilibriumDensities, FreeEnergyProfile, QuadratureSpec,
                     compute_equilibrium, compute_free_energy,
                     conditional_expectation_of_force, mean_force_consistency)
from .particles import (BiasProfile, ParticleEnsemble, empirical_marginal,
                        gaussian_increments, init_ensemble, ito_force_estimate,
                        sample_biased_equilibrium, step, update_bias)
from .pde import (DensityField, Field1D, Fp2dSolver, Marginal1dSolver,
                  extract_marginal, fp2d_step, marginal_step)
from .harness import ExperimentConfig, compare_runs, run

__version__ = "0.1.0"

__all__ = [
    "BiasProfile", "ConvergenceConstants", "CosinePotential", "CustomXi",
    "DensityField", "DiagnosticsRecord", "EntropySplit", "EquilibriumDensities",
    "ExperimentConfig", "Field1D", "Fp2dSolver", "FreeEnergyProfile", "Grid1D",
    "Grid2D", "LinearXi", "Marginal1dSolver", "ModelProblem", "ParticleEnsemble",
    "QuadraticConfinement", "QuadratureSpec", "compare_runs",
    "compute_equilibrium", "compute_free_energy",
    "conditional_expectation_of_force", "convergence_constants",
    "empirical_marginal", "entropy_decomposition", "extract_marginal",
    "fisher_information", "fit_decay_rate", "force_error", "fp2d_step",
    "gaussian_increments", "init_ensemble", "ito_force_estimate",
    "local_mean_force", "make_cosine_model", "marginal_step",
    "mean_force_consistency", "projections", "relative_entropy", "run",
    "sample_biased_equilibrium", "step", "total_variation", "update_bias",
]
