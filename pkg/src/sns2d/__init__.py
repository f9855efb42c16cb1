"""Spectral toolkit for the 2D stochastic Navier-Stokes equation on the
periodic square: colored-noise sampling, controlled/skeleton dynamics, and
large-deviation experiments."""

__version__ = "0.1.0"

from .fields import SpectralField, TensorField, load_field, save_field, taylor_green
from .grid import SpectralGrid, grid_for
from .spectral import (
    BesovParams,
    besov_norm,
    dyadic_block,
    fractional_power,
    h_inner,
    heat_semigroup,
    leray_project,
    lp_norm,
    sobolev_norm,
    stokes_apply,
    tensor_sobolev_norm,
)
from .nonlinear import DealiasRule, b_bilinear, b_self, tensor_product
from .noise import (
    NoiseSpec,
    PowerSchedule,
    RngStream,
    besov_moment_check,
    covariance_weight,
    lambda_beta_bound,
    lp_log_moment_check,
    ou_stationary_sample,
    ou_step,
    renorm_constant,
    wick_square,
    wiener_increment,
)
from .dynamics import (
    ControlPath,
    IntegratorConfig,
    Trajectory,
    duhamel_gamma,
    phi_eps,
    solve_controlled,
    solve_shifted,
    solve_skeleton,
    solve_stochastic,
    step_skeleton,
)
from .ldp import (
    ActionReport,
    ConvergenceReport,
    OptimizerSettings,
    action,
    action_refinement,
    besov_convergence_experiment,
    h_convergence_experiment,
    laplace_check,
    minimize_action,
    residual,
    trajectory_space_norm,
    tube_probability,
)
