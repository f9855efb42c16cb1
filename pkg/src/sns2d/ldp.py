"""Large-deviation layer: action functional, minimum-action paths, and the
convergence, tube-probability and Laplace-principle experiments."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import noise as noise_mod
from .dynamics import ControlPath, IntegratorConfig, Trajectory, solve_controlled, solve_skeleton, solve_stochastic
from .fields import SpectralField
from .nonlinear import DealiasRule, b_core, b_linearized_adjoint_core
from .noise import NoiseSpec, RngStream
from .spectral import BesovParams, besov_norm, h_norm_of, sobolev_norm


@dataclass
class ActionReport:
    """Action value with the residual path behind it.

    value = (1/2) * discrete L^2(0,T;H) norm squared of the residual
    f' - Af - b(f).
    """

    value: float
    residual_path: ControlPath
    dt: float


def residual(f: Trajectory, rule: DealiasRule) -> ControlPath:
    """Residual f'(t) - A f(t) - b(f(t)) on the trajectory's grid.

    Time derivative by centered differences (one-sided at the endpoints);
    one value per grid time.
    """
    if f.n_steps < 2:
        raise ValueError("need at least 2 steps to form the residual")
    c = f.coeffs
    dt = f.dt
    n = c.shape[0]
    dfdt = np.empty_like(c)
    dfdt[0] = (c[1] - c[0]) / dt
    dfdt[-1] = (c[-1] - c[-2]) / dt
    dfdt[1:-1] = (c[2:] - c[:-2]) / (2.0 * dt)
    grid = f.grid
    out = np.empty_like(c)
    for i in range(n):
        out[i] = dfdt[i] + grid.ksq * c[i] - b_core(c[i], grid, rule)
    return ControlPath(grid, dt, out)


def action(f: Trajectory, rule: DealiasRule = None) -> ActionReport:
    """Action of a trajectory: trapezoid quadrature of (1/2)|residual|_H^2.

    Paths that are not time-differentiable have no finite action; their
    reported value grows like 1/dt under refinement, which callers detect
    with ``action_refinement_diverges``.
    """
    if rule is None:
        rule = DealiasRule.two_thirds(f.grid.cutoff)
    res = residual(f, rule)
    sq = 2.0 * np.sum(np.abs(res.values) ** 2, axis=1)
    weights = np.full(sq.shape[0], f.dt)
    weights[0] = weights[-1] = 0.5 * f.dt
    return ActionReport(value=0.5 * float(np.dot(weights, sq)), residual_path=res, dt=f.dt)


def control_action(phi: ControlPath) -> float:
    """(1/2) |phi|^2 in the discrete L^2(0,T;H) norm."""
    return 0.5 * phi.l2h_norm_sq()


@dataclass
class ActionRefinementReport:
    """Action of one path evaluated on a hierarchy of time grids.

    For time-differentiable paths the sequence converges; for rough
    (e.g. noise-driven) paths it grows like 1/dt, which ``diverging``
    flags instead of reporting a sentinel infinity.
    """

    dts: list
    actions: list
    diverging: bool


def action_refinement(
    f: Trajectory, strides=(8, 4, 2, 1), rule: DealiasRule = None
) -> ActionRefinementReport:
    """Evaluate the action on subsampled copies of a trajectory (coarse to
    fine).  A path with square-integrable derivative shows a stabilizing
    sequence; a rough path roughly doubles per halving."""
    dts, actions = [], []
    for s in sorted(strides, reverse=True):
        if f.n_steps % s or f.n_steps // s < 2:
            raise ValueError(f"stride {s} does not subsample {f.n_steps} steps")
        sub = Trajectory(f.grid, f.dt * s, f.coeffs[::s].copy())
        dts.append(sub.dt)
        actions.append(action(sub, rule).value)
    growing = all(b > a for a, b in zip(actions, actions[1:]))
    doubling = actions[-1] > 1.5 * actions[0] if len(actions) > 1 else False
    return ActionRefinementReport(dts=dts, actions=actions, diverging=growing and doubling)


# ---------------------------------------------------------------------------
# minimum-action (instanton) solver


@dataclass(frozen=True)
class OptimizerSettings:
    max_iterations: int = 500
    relative_tolerance: float = 1e-8
    endpoint_tolerance: float = 1e-3
    initial_penalty: float = 10.0
    penalty_growth: float = 2.0
    max_penalty_rounds: int = 12
    armijo_constant: float = 1e-4
    backtrack_factor: float = 0.5
    initial_step: float = 1.0
    min_step: float = 1e-12


@dataclass
class MinimizeReport:
    action: float
    endpoint_error: float
    objective: float
    penalty_weight: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def _forward_states(phi_vals, u0_coeffs, grid, rule, decay, psi1, dt, disable_b):
    n = phi_vals.shape[0]
    states = np.empty((n + 1, grid.n_modes), dtype=np.complex128)
    states[0] = u0_coeffs
    for step in range(n):
        F = phi_vals[step]
        if not disable_b:
            F = F + b_core(states[step], grid, rule)
        states[step + 1] = decay * states[step] + dt * psi1 * F
    return states


def action_objective_and_gradient(
    phi_vals: np.ndarray,
    u0: SpectralField,
    target: SpectralField,
    weight: float,
    cfg: IntegratorConfig,
    want_gradient: bool = True,
):
    """Penalized objective J = (1/2)|phi|^2_{L2H} + weight |u(T) - target|_H^2
    and its gradient in the discrete L^2(0,T;H) metric, via the adjoint of the
    exponential-Euler recursion."""
    if cfg.scheme != "exponential_euler":
        raise ValueError("the adjoint gradient is implemented for exponential_euler")
    grid = u0.grid
    rule = cfg.rule(grid.cutoff)
    dt = cfg.dt
    z = grid.ksq * dt
    decay = np.exp(-z)
    psi1 = -np.expm1(-z) / z
    states = _forward_states(
        phi_vals, u0.coeffs, grid, rule, decay, psi1, dt, cfg.disable_nonlinearity
    )
    mismatch = states[-1] - target.coeffs
    endpoint_sq = 2.0 * float(np.sum(np.abs(mismatch) ** 2))
    control_sq = dt * 2.0 * float(np.sum(np.abs(phi_vals) ** 2))
    J = 0.5 * control_sq + weight * endpoint_sq
    if not want_gradient:
        return J, None, states
    n = phi_vals.shape[0]
    grad = np.empty_like(phi_vals)
    lam = 2.0 * weight * mismatch
    for step in range(n - 1, -1, -1):
        grad[step] = phi_vals[step] + psi1 * lam
        if step > 0:
            propagated = decay * lam
            if not cfg.disable_nonlinearity:
                propagated = propagated + dt * b_linearized_adjoint_core(
                    states[step], psi1 * lam, grid, rule
                )
            lam = propagated
    return J, grad, states


def minimize_action(
    u0: SpectralField,
    target: SpectralField,
    t_final: float,
    cfg: IntegratorConfig,
    opt: OptimizerSettings = OptimizerSettings(),
    phi0: ControlPath = None,
):
    """Gradient descent with backtracking on the endpoint-penalized action.

    The penalty weight doubles until the endpoint error drops below the
    configured tolerance; returns (control, MinimizeReport) where the report
    carries the discrete action (1/2)|phi*|^2 of the minimizer.
    """
    grid = u0.grid
    n = max(2, round(t_final / cfg.dt))
    phi_vals = (
        phi0.values.copy() if phi0 is not None else np.zeros((n, grid.n_modes), dtype=np.complex128)
    )
    dt = cfg.dt
    weight = opt.initial_penalty
    history = []
    iterations = 0
    converged = False
    for round_idx in range(opt.max_penalty_rounds):
        J, grad, states = action_objective_and_gradient(phi_vals, u0, target, weight, cfg)
        step_size = opt.initial_step
        for _ in range(opt.max_iterations):
            iterations += 1
            gnorm_sq = dt * 2.0 * float(np.sum(np.abs(grad) ** 2))
            if gnorm_sq == 0.0:
                break
            step_size = min(step_size * 2.0, opt.initial_step * 1e6)
            accepted = False
            while step_size >= opt.min_step:
                trial = phi_vals - step_size * grad
                J_trial, _, _ = action_objective_and_gradient(
                    trial, u0, target, weight, cfg, want_gradient=False
                )
                if J_trial <= J - opt.armijo_constant * step_size * gnorm_sq:
                    accepted = True
                    break
                step_size *= opt.backtrack_factor
            if not accepted:
                break
            drop = J - J_trial
            phi_vals = trial
            J, grad, states = action_objective_and_gradient(phi_vals, u0, target, weight, cfg)
            history.append({"round": round_idx, "objective": J, "weight": weight})
            if drop <= opt.relative_tolerance * max(abs(J), 1e-300):
                break
        endpoint_err = h_norm_of(states[-1] - target.coeffs)
        if endpoint_err < opt.endpoint_tolerance:
            converged = True
            break
        if round_idx < opt.max_penalty_rounds - 1:
            weight *= opt.penalty_growth
    phi = ControlPath(grid, dt, phi_vals)
    report = MinimizeReport(
        action=control_action(phi),
        endpoint_error=endpoint_err,
        objective=J,
        penalty_weight=weight,
        iterations=iterations,
        converged=converged,
        history=history,
    )
    return phi, report


# ---------------------------------------------------------------------------
# convergence experiments


@dataclass
class ConvergenceReport:
    """Distance-versus-epsilon sweep with a fitted log-log decay slope."""

    norm: str
    epsilons: list
    deltas: list
    means: list
    stderrs: list
    replicas: int
    slope: float
    slope_stderr: float

    def decaying_at_two_sigma(self) -> bool:
        return self.slope - 2.0 * self.slope_stderr > 0.0

    def rows(self):
        return [
            {
                "epsilon": e,
                "delta": d,
                "mean_distance": m,
                "stderr": s,
                "replicas": self.replicas,
            }
            for e, d, m, s in zip(self.epsilons, self.deltas, self.means, self.stderrs)
        ]


def fit_loglog(xs, ys):
    """OLS slope of log(y) against log(x) with its standard error."""
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.asarray(ys, dtype=float))
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 sweep points to fit a slope")
    xc = x - x.mean()
    slope = float(np.dot(xc, y) / np.dot(xc, xc))
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    s_sq = float(np.dot(resid, resid)) / (n - 2)
    return slope, math.sqrt(s_sq / float(np.dot(xc, xc)))


def _sweep_distances(u0, phi, schedule, gamma, eta, epsilons, replicas, cfg, rng, distance):
    skeleton = solve_skeleton(u0, phi, cfg)
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    means, stderrs, deltas = [], [], []
    for i, eps in enumerate(sorted(epsilons, reverse=True)):
        spec = NoiseSpec.at_epsilon(eps, schedule, gamma=gamma, eta=eta)
        deltas.append(spec.delta)
        dists = np.empty(replicas)
        for r in range(replicas):
            traj = solve_controlled(u0, phi, spec, cfg, stream.child(i).child(r))
            dists[r] = distance(traj, skeleton)
        means.append(float(np.mean(dists)))
        stderrs.append(float(np.std(dists, ddof=1) / math.sqrt(replicas)))
    return sorted(epsilons, reverse=True), deltas, means, stderrs


def h_convergence_experiment(
    u0: SpectralField,
    phi: ControlPath,
    schedule,
    eta: float,
    epsilons,
    replicas: int,
    cfg: IntegratorConfig,
    rng,
    gamma: float = 1.0,
    force: bool = False,
) -> ConvergenceReport:
    """Coupled sup-in-time H distance between the controlled solution and the
    skeleton solution across a noise sweep.

    Requires the schedule to satisfy both delta(eps) -> 0 and the scaling
    condition eps * delta(eps)^(-eta) -> 0 (checked along the sweep; the
    latter can be overridden with force=True for negative controls).  The
    pathwise same-grid coupling upper-bounds the distributional convergence
    being probed.
    """
    noise_mod.validate_vanishing_schedule(schedule, epsilons)
    noise_mod.validate_scaling_condition(schedule, epsilons, eta, force=force)
    eps_s, deltas, means, stderrs = _sweep_distances(
        u0, phi, schedule, gamma, eta, epsilons, replicas, cfg, rng,
        distance=lambda a, b: a.sup_h_distance(b),
    )
    slope, se = fit_loglog(eps_s, means)
    return ConvergenceReport("H", eps_s, deltas, means, stderrs, replicas, slope, se)


def besov_convergence_experiment(
    u0: SpectralField,
    phi: ControlPath,
    besov: BesovParams,
    schedule,
    epsilons,
    replicas: int,
    cfg: IntegratorConfig,
    rng,
    gamma: float = 1.0,
    grid_factor: int = 2,
) -> ConvergenceReport:
    """Same sweep measured in sup-in-time Besov norm; only delta(eps) -> 0 is
    required of the schedule.  The initial condition must carry the Sobolev
    regularity sigma + 1 - 2/p demanded of the Besov exponents."""
    besov.validate()
    noise_mod.validate_vanishing_schedule(schedule, epsilons)
    theta = besov.min_initial_regularity()
    if not math.isfinite(sobolev_norm(u0, max(theta, 0.0))):
        raise ValueError(f"initial condition lacks H^{theta} regularity")
    eps_s, deltas, means, stderrs = _sweep_distances(
        u0, phi, schedule, gamma, None, epsilons, replicas, cfg, rng,
        distance=lambda a, b: a.sup_distance(
            b, lambda f: besov_norm(f, besov.sigma, besov.p, grid_factor)
        ),
    )
    slope, se = fit_loglog(eps_s, means)
    return ConvergenceReport(
        f"B^{besov.sigma}_{besov.p}", eps_s, deltas, means, stderrs, replicas, slope, se
    )


def trajectory_space_norm(
    traj: Trajectory, besov: BesovParams, grid_factor: int = 2
) -> float:
    """sup_t |.|_{B^sigma_p} plus the L^beta(0,T) norm of |.|_{B^alpha_p}."""
    sup_term = traj.sup_norm(lambda f: besov_norm(f, besov.sigma, besov.p, grid_factor))
    vals = np.array(
        [
            besov_norm(traj.state(i), besov.alpha, besov.p, grid_factor)
            for i in range(traj.coeffs.shape[0])
        ]
    )
    weights = np.full(vals.size, traj.dt)
    weights[0] = weights[-1] = 0.5 * traj.dt
    time_term = float(np.dot(weights, vals**besov.beta) ** (1.0 / besov.beta))
    return sup_term + time_term


# ---------------------------------------------------------------------------
# tube probabilities and the Laplace principle


@dataclass
class TubeReport:
    radius: float
    p_hat: float
    ci_low: float
    ci_high: float
    hits: int
    replicas: int
    distances: np.ndarray = None

    def at_radius(self, radius: float) -> "TubeReport":
        """Re-threshold the stored sample of sup distances (same paths)."""
        return _tube_from_distances(self.distances, radius)


def wilson_interval(hits: int, n: int, z: float = 1.96):
    if n == 0:
        raise ValueError("empty sample")
    p = hits / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _tube_from_distances(distances, radius):
    n = distances.size
    hits = int(np.sum(distances <= radius))
    lo, hi = wilson_interval(hits, n)
    return TubeReport(
        radius=float(radius),
        p_hat=hits / n,
        ci_low=lo,
        ci_high=hi,
        hits=hits,
        replicas=n,
        distances=distances,
    )


def tube_probability(
    u0: SpectralField,
    center: Trajectory,
    radius: float,
    spec: NoiseSpec,
    cfg: IntegratorConfig,
    replicas: int,
    rng,
) -> TubeReport:
    """Monte Carlo probability that the stochastic path stays within the
    given sup-in-time H radius of the center trajectory (Wilson interval).

    When no path hits, p_hat = 0 and the upper confidence bound is the
    informative part of the report.
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    dists = np.empty(replicas)
    for r in range(replicas):
        traj = solve_stochastic(u0, spec, cfg, center.t_final, stream.child(r))
        dists[r] = traj.sup_h_distance(center)
    return _tube_from_distances(dists, radius)


class ClippedEndpointDistance:
    """Bounded continuous trajectory functional a * |u(T) - target|_H^2,
    clipped at a ceiling (keeps exponential moments finite)."""

    def __init__(self, target: SpectralField, scale: float = 1.0, clip: float = 10.0):
        self.target = target
        self.scale = scale
        self.clip = clip

    def __call__(self, traj: Trajectory) -> float:
        d = h_norm_of(traj.coeffs[-1] - self.target.coeffs)
        return min(self.clip, self.scale * d * d)

    def endpoint_value(self, endpoint: SpectralField) -> float:
        d = h_norm_of(endpoint.coeffs - self.target.coeffs)
        return min(self.clip, self.scale * d * d)


class ConstantFunctional:
    def __init__(self, value: float):
        self.value = value

    def __call__(self, traj: Trajectory) -> float:
        return self.value

    def endpoint_value(self, endpoint: SpectralField) -> float:
        return self.value


@dataclass
class LaplaceReport:
    epsilons: list
    lhs: list
    ess: list
    rhs: float
    variance_flag: bool

    def rows(self):
        return [
            {"epsilon": e, "lhs": l, "rhs": self.rhs, "gap": abs(l - self.rhs), "ess": s}
            for e, l, s in zip(self.epsilons, self.lhs, self.ess)
        ]


def laplace_check(
    functional,
    u0: SpectralField,
    schedule,
    epsilons,
    replicas: int,
    cfg: IntegratorConfig,
    t_final: float,
    rng,
    gamma: float = 1.0,
    n_candidates: int = 5,
    opt: OptimizerSettings = OptimizerSettings(),
) -> LaplaceReport:
    """Monte Carlo Laplace functional -eps log E exp(-G(u)/eps) across a noise
    sweep against the variational value inf_f (G(f) + action(f)).

    The infimum is searched over minimum-action paths steered to a family of
    endpoint candidates between the free-decay endpoint and the functional's
    target (exact for constant functionals, a one-parameter probe otherwise).
    Flags the sweep when the exponential estimator's effective sample size
    degenerates.
    """
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    lhs, ess_list = [], []
    for i, eps in enumerate(sorted(epsilons, reverse=True)):
        spec = NoiseSpec.at_epsilon(eps, schedule, gamma=gamma)
        vals = np.empty(replicas)
        for r in range(replicas):
            traj = solve_stochastic(u0, spec, cfg, t_final, stream.child(i).child(r))
            vals[r] = functional(traj)
        w = np.exp(-(vals - vals.min()) / eps)
        ess = float(w.sum() ** 2 / np.dot(w, w))
        log_mean = math.log(float(np.mean(w))) - vals.min() / eps
        lhs.append(-eps * log_mean)
        ess_list.append(ess)

    # variational side
    n = max(2, round(t_final / cfg.dt))
    free = solve_skeleton(u0, ControlPath.zero(u0.cutoff, cfg.dt, n), cfg)
    free_end = free.coeffs[-1]
    if isinstance(functional, ConstantFunctional):
        rhs = functional.value
    else:
        best = functional(free)  # zero-control candidate, zero action
        tgt = functional.target.coeffs
        for s in np.linspace(0.0, 1.0, n_candidates)[1:]:
            cand = SpectralField(u0.grid, (1.0 - s) * free_end + s * tgt)
            phi_star, rep = minimize_action(u0, cand, t_final, cfg, opt)
            traj = solve_skeleton(u0, phi_star, cfg)
            best = min(best, functional(traj) + rep.action)
        rhs = best
    # exponential reweighting degenerates when few paths carry all the mass
    flag = any(e < min(max(10.0, 0.01 * replicas), 0.5 * replicas) for e in ess_list)
    return LaplaceReport(
        epsilons=sorted(epsilons, reverse=True),
        lhs=lhs,
        ess=ess_list,
        rhs=rhs,
        variance_flag=flag,
    )
