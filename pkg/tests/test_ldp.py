import numpy as np
import pytest

from sns2d import (
    BesovParams,
    ControlPath,
    DealiasRule,
    IntegratorConfig,
    NoiseSpec,
    OptimizerSettings,
    PowerSchedule,
    RngStream,
    SpectralField,
    action,
    besov_convergence_experiment,
    h_convergence_experiment,
    laplace_check,
    minimize_action,
    residual,
    taylor_green,
    tube_probability,
)
from sns2d.dynamics import Trajectory, solve_skeleton, solve_stochastic
from sns2d.grid import grid_for
from sns2d.ldp import (
    ClippedEndpointDistance,
    ConstantFunctional,
    action_objective_and_gradient,
    action_refinement,
    control_action,
    fit_loglog,
    trajectory_space_norm,
    wilson_interval,
)
from sns2d.noise import unit_complex_normals


def generic_field(cutoff=8, amplitude=0.3, seed=2):
    return taylor_green(cutoff, 1.0) + SpectralField.random(
        cutoff, np.random.default_rng(seed), amplitude=amplitude, decay=1.0
    )


def varying_control(cutoff, dt, n):
    f1 = SpectralField.from_modes(cutoff, {(1, 0): 0.5}).coeffs
    f2 = SpectralField.from_modes(cutoff, {(2, 1): 0.25 - 0.1j}).coeffs
    t = np.arange(n) * dt
    vals = np.cos(2 * np.pi * t)[:, None] * f1[None, :]
    vals += np.sin(4 * t)[:, None] * f2[None, :]
    return ControlPath(grid_for(cutoff), dt, vals)


# ------------------------------------------------------------ residual/action


def test_residual_of_constant_single_mode_trajectory():
    # f constant in time: residual = -Af - b(f); b vanishes on a pair mode
    f = SpectralField.from_modes(6, {(2, 0): 0.7})
    coeffs = np.tile(f.coeffs, (11, 1))
    traj = Trajectory(f.grid, 0.05, coeffs)
    res = residual(traj, DealiasRule.two_thirds(6))
    for i in (0, 5, 10):
        assert np.allclose(res.values[i], 4.0 * f.coeffs, rtol=1e-13)


def test_residual_requires_two_steps():
    f = SpectralField.from_modes(6, {(1, 0): 1.0})
    traj = Trajectory(f.grid, 0.1, np.tile(f.coeffs, (2, 1)))
    with pytest.raises(ValueError):
        residual(traj, DealiasRule.two_thirds(6))


def smooth_field(cutoff=8):
    # low-mode data: divided differences resolve every retained decay rate
    return taylor_green(cutoff, 1.0) + SpectralField.from_modes(
        cutoff, {(2, 1): 0.2 - 0.1j, (0, 3): 0.1j, (3, 2): 0.05}
    )


def test_residual_recovers_constant_control():
    u0 = smooth_field()
    dt = 0.005
    f = SpectralField.from_modes(8, {(1, 0): 0.5})
    phi = ControlPath.constant(f, dt, round(0.2 / dt))
    traj = solve_skeleton(u0, phi, IntegratorConfig(dt=dt))
    res = residual(traj, DealiasRule.two_thirds(8))
    interior = res.values[1:-1] - f.coeffs[None, :]
    err = np.max(np.sqrt(2.0 * np.sum(np.abs(interior) ** 2, axis=1)))
    assert err < 2e-2


def test_action_duality_under_refinement():
    u0 = smooth_field()
    gaps = []
    dts = (0.02, 0.01, 0.005)
    for dt in dts:
        phi = varying_control(8, dt, round(0.4 / dt))
        traj = solve_skeleton(u0, phi, IntegratorConfig(dt=dt))
        gaps.append(abs(action(traj).value - control_action(phi)) / control_action(phi))
    slope, _ = fit_loglog(dts, gaps)
    assert slope >= 1.0
    assert gaps[-1] < 0.02


def test_free_decay_action_vanishes_under_refinement():
    u0 = smooth_field()
    vals = []
    for dt in (0.02, 0.01, 0.005):
        phi = ControlPath.zero(8, dt, round(0.3 / dt))
        traj = solve_skeleton(u0, phi, IntegratorConfig(dt=dt))
        vals.append(action(traj).value)
    assert vals[-1] < vals[0]
    assert vals[-1] < 1e-4


def test_rough_path_action_diverges():
    # stationary OU path: difference quotients scale like 1/dt
    spec = NoiseSpec(epsilon=0.5, delta=0.1, gamma=1.0)
    cfg = IntegratorConfig(dt=0.00125, disable_nonlinearity=True)
    traj = solve_stochastic(SpectralField.zero(6), spec, cfg, 0.2, RngStream(17))
    report = action_refinement(traj, strides=(8, 4, 2, 1))
    assert report.diverging
    assert report.actions[-1] > 3.0 * report.actions[0]
    # a smooth path under the same refinement stabilizes
    smooth = solve_skeleton(
        generic_field(6), ControlPath.zero(6, 0.00125, 160), IntegratorConfig(dt=0.00125)
    )
    smooth_report = action_refinement(smooth, strides=(8, 4, 2, 1))
    assert not smooth_report.diverging


# ------------------------------------------------------- minimization


def test_adjoint_gradient_matches_finite_differences():
    cfg = IntegratorConfig(dt=0.025)
    u0 = taylor_green(6, 0.5)
    rng = np.random.default_rng(14)
    target = SpectralField.random(6, rng, amplitude=0.2, decay=1.0)
    n = round(0.25 / cfg.dt)
    g = grid_for(6)
    phi = 0.2 * unit_complex_normals(rng, (n, g.n_modes))
    J, grad, _ = action_objective_and_gradient(phi, u0, target, 5.0, cfg)
    h = 1e-6
    for _ in range(5):
        d = unit_complex_normals(rng, phi.shape)
        Jp, _, _ = action_objective_and_gradient(
            phi + h * d, u0, target, 5.0, cfg, want_gradient=False
        )
        Jm, _, _ = action_objective_and_gradient(
            phi - h * d, u0, target, 5.0, cfg, want_gradient=False
        )
        fd = (Jp - Jm) / (2 * h)
        pairing = cfg.dt * 2.0 * float(np.real(np.sum(grad * np.conj(d))))
        assert abs(fd - pairing) <= 1e-5 * abs(fd)


def test_adjoint_gradient_requires_exponential_euler():
    cfg = IntegratorConfig(dt=0.05, scheme="etd2")
    u0 = taylor_green(6, 0.5)
    with pytest.raises(ValueError):
        action_objective_and_gradient(
            np.zeros((4, u0.grid.n_modes), complex), u0, u0, 1.0, cfg
        )


def test_minimize_action_reachable_target_is_free():
    u0 = generic_field(6)
    cfg = IntegratorConfig(dt=0.02)
    free = solve_skeleton(u0, ControlPath.zero(6, 0.02, 10), cfg)
    phi_star, rep = minimize_action(
        u0, free.final(), 0.2, cfg, OptimizerSettings(endpoint_tolerance=1e-8)
    )
    assert rep.action <= 1e-12
    assert rep.endpoint_error <= 1e-8
    assert rep.converged


def test_minimize_action_linear_matches_per_mode_ridge():
    # with the nonlinearity disabled the penalized problem splits per mode
    cfg = IntegratorConfig(dt=0.02, disable_nonlinearity=True)
    u0 = generic_field(4, amplitude=0.4)
    rng = np.random.default_rng(8)
    target = SpectralField.random(4, rng, amplitude=0.3, decay=1.0)
    t_final = 0.2
    weight = 2.0
    opt = OptimizerSettings(
        max_iterations=4000,
        relative_tolerance=1e-16,
        endpoint_tolerance=1e9,
        initial_penalty=weight,
        max_penalty_rounds=1,
    )
    phi_star, rep = minimize_action(u0, target, t_final, cfg, opt)
    g = u0.grid
    n = round(t_final / cfg.dt)
    z = g.ksq * cfg.dt
    m = np.exp(-z)
    a = cfg.dt * (-np.expm1(-z) / z)
    powers = m[None, :] ** np.arange(n - 1, -1, -1)[:, None]
    S = np.sum(powers**2, axis=0)
    r = (m**n * u0.coeffs - target.coeffs) / (1.0 + 2.0 * weight * a**2 * S / cfg.dt)
    oracle = -(2.0 * weight * a / cfg.dt)[None, :] * powers * r[None, :]
    scale = np.max(np.abs(oracle))
    assert np.max(np.abs(phi_star.values - oracle)) < 1e-6 * scale
    J_oracle, _, _ = action_objective_and_gradient(
        oracle, u0, target, weight, cfg, want_gradient=False
    )
    assert rep.objective <= J_oracle * (1.0 + 1e-10)


def test_minimize_action_penalty_rounds_hit_endpoint():
    u0 = generic_field(6, amplitude=0.2)
    cfg = IntegratorConfig(dt=0.02)
    target = 0.6 * solve_skeleton(u0, ControlPath.zero(6, 0.02, 10), cfg).final()
    opt = OptimizerSettings(endpoint_tolerance=5e-3, max_iterations=200)
    phi_star, rep = minimize_action(u0, target, 0.2, cfg, opt)
    assert rep.converged
    assert rep.endpoint_error < 5e-3
    assert rep.action > 0.0
    assert rep.action == pytest.approx(control_action(phi_star), rel=1e-12)


# ------------------------------------------------------- convergence sweeps


def test_h_convergence_small_sweep():
    u0 = taylor_green(6, 0.4)
    cfg = IntegratorConfig(dt=0.02)
    phi = ControlPath.constant(SpectralField.from_modes(6, {(1, 0): 0.4}), 0.02, 15)
    report = h_convergence_experiment(
        u0, phi, PowerSchedule(0.5), 1.0, [1e-1, 1e-2, 1e-3], replicas=6,
        cfg=cfg, rng=RngStream(23),
    )
    assert report.means[0] > report.means[-1]
    assert report.decaying_at_two_sigma()
    rows = report.rows()
    assert rows[0]["epsilon"] == 0.1
    assert {"epsilon", "delta", "mean_distance", "stderr", "replicas"} <= set(rows[0])


def test_h_convergence_rejects_bad_scaling():
    u0 = taylor_green(6, 0.4)
    cfg = IntegratorConfig(dt=0.02)
    phi = ControlPath.zero(6, 0.02, 10)
    with pytest.raises(ValueError, match="scaling condition"):
        h_convergence_experiment(
            u0, phi, PowerSchedule(2.0), 1.0, [1e-1, 1e-2], replicas=2,
            cfg=cfg, rng=RngStream(1),
        )
    with pytest.raises(ValueError, match="delta"):
        h_convergence_experiment(
            u0, phi, PowerSchedule(-1.0), 1.0, [1e-1, 1e-2], replicas=2,
            cfg=cfg, rng=RngStream(1),
        )


def test_besov_convergence_small_sweep():
    u0 = taylor_green(6, 0.4)
    cfg = IntegratorConfig(dt=0.02)
    phi = ControlPath.constant(SpectralField.from_modes(6, {(1, 0): 0.4}), 0.02, 15)
    besov = BesovParams(sigma=-0.25, p=4.0, alpha=0.3, beta=3.0)
    report = besov_convergence_experiment(
        u0, phi, besov, PowerSchedule(1.0), [1e-1, 1e-2, 1e-3], replicas=6,
        cfg=cfg, rng=RngStream(29),
    )
    assert report.means[0] > report.means[-1]
    assert report.decaying_at_two_sigma()
    with pytest.raises(ValueError, match="sigma > max"):
        besov_convergence_experiment(
            u0, phi, BesovParams(-0.8, 4.0, 0.3, 3.0), PowerSchedule(1.0),
            [1e-1, 1e-2], replicas=2, cfg=cfg, rng=RngStream(1),
        )


def test_trajectory_space_norm_zero_and_positive():
    zero = Trajectory(grid_for(6), 0.1, np.zeros((6, grid_for(6).n_modes), complex))
    besov = BesovParams(sigma=-0.25, p=4.0, alpha=0.3, beta=3.0)
    assert trajectory_space_norm(zero, besov) == 0.0
    traj = solve_skeleton(
        generic_field(6), ControlPath.zero(6, 0.05, 5), IntegratorConfig(dt=0.05)
    )
    assert trajectory_space_norm(traj, besov) > 0.0


# ------------------------------------------------------------------- tubes


def test_wilson_interval_basics():
    lo, hi = wilson_interval(50, 100)
    assert 0.4 < lo < 0.5 < hi < 0.6
    lo0, hi0 = wilson_interval(0, 100)
    assert lo0 == 0.0 and hi0 > 0.0


def test_tube_probability_monotone_and_saturating():
    u0 = taylor_green(6, 0.4)
    cfg = IntegratorConfig(dt=0.02)
    center = solve_skeleton(u0, ControlPath.zero(6, 0.02, 15), cfg)
    spec = NoiseSpec(epsilon=0.01, delta=0.1, gamma=1.0)
    rep = tube_probability(u0, center, 0.05, spec, cfg, replicas=40, rng=RngStream(31))
    assert rep.replicas == 40
    probs = [rep.at_radius(r).p_hat for r in (0.01, 0.05, 0.2, 1.0, np.inf)]
    assert all(b >= a for a, b in zip(probs, probs[1:]))
    assert probs[-1] == 1.0
    # small noise concentrates around the deterministic path
    assert rep.at_radius(0.5).p_hat == 1.0


# ----------------------------------------------------------------- Laplace


def test_laplace_constant_functionals_exact():
    cfg = IntegratorConfig(dt=0.02)
    for c in (0.0, 0.7):
        report = laplace_check(
            ConstantFunctional(c), SpectralField.zero(6), PowerSchedule(0.5),
            [1e-1, 1e-2], replicas=4, cfg=cfg, t_final=0.1, rng=RngStream(3),
        )
        assert report.rhs == c
        for lhs in report.lhs:
            assert lhs == pytest.approx(c, abs=1e-12)
        assert not report.variance_flag


def test_laplace_endpoint_functional_smoke():
    cfg = IntegratorConfig(dt=0.02)
    target = SpectralField.from_modes(6, {(1, 0): 0.05})
    functional = ClippedEndpointDistance(target, scale=1.0, clip=5.0)
    report = laplace_check(
        functional, SpectralField.zero(6), PowerSchedule(0.5), [5e-2, 1e-2],
        replicas=30, cfg=cfg, t_final=0.2, rng=RngStream(7), n_candidates=3,
    )
    rows = report.rows()
    assert len(rows) == 2
    assert report.rhs >= 0.0
    for row in rows:
        assert row["lhs"] >= -1e-9
        assert row["gap"] >= 0.0


def test_zero_noise_member_has_zero_distance():
    # the degenerate eps = 0 member of the controlled family is the skeleton
    from sns2d import solve_controlled

    u0 = taylor_green(6, 0.4)
    cfg = IntegratorConfig(dt=0.02)
    phi = ControlPath.constant(SpectralField.from_modes(6, {(1, 0): 0.4}), 0.02, 10)
    spec = NoiseSpec(epsilon=0.0, delta=0.0, gamma=1.0)
    ctl = solve_controlled(u0, phi, spec, cfg, RngStream(0))
    skel = solve_skeleton(u0, phi, cfg)
    assert ctl.sup_h_distance(skel) == 0.0


def test_contrast_schedule_fails_h_but_passes_besov():
    # delta(eps) = eps keeps eps * delta^(-1) constant: inadmissible for the
    # strong-space sweep at eta = 1, while the Besov sweep only needs
    # delta(eps) -> 0
    u0 = taylor_green(6, 0.4)
    cfg = IntegratorConfig(dt=0.02)
    phi = ControlPath.constant(SpectralField.from_modes(6, {(1, 0): 0.4}), 0.02, 10)
    sched = PowerSchedule(1.0)
    with pytest.raises(ValueError, match="scaling condition"):
        h_convergence_experiment(
            u0, phi, sched, 1.0, [1e-1, 1e-2, 1e-3], replicas=2, cfg=cfg,
            rng=RngStream(1),
        )
    besov = BesovParams(sigma=-0.25, p=4.0, alpha=0.3, beta=3.0)
    report = besov_convergence_experiment(
        u0, phi, besov, sched, [1e-1, 1e-2, 1e-3], replicas=4, cfg=cfg,
        rng=RngStream(2),
    )
    assert report.means[-1] < report.means[0]


def test_tube_escape_probability_decreases_with_noise():
    u0 = taylor_green(6, 0.4)
    cfg = IntegratorConfig(dt=0.02)
    center = solve_skeleton(u0, ControlPath.zero(6, 0.02, 15), cfg)
    radius = 0.12
    escapes = []
    for i, eps in enumerate((0.05, 0.005)):
        spec = NoiseSpec(epsilon=eps, delta=0.1, gamma=1.0)
        rep = tube_probability(u0, center, radius, spec, cfg, 60, RngStream(41 + i))
        escapes.append(1.0 - rep.p_hat)
    assert escapes[1] <= escapes[0]


def test_residual_of_heat_flow_is_minus_nonlinearity():
    # path generated with the nonlinearity disabled: f' - Af = O(dt^2), so
    # the full residual reduces to -b(f) along the path
    from sns2d.nonlinear import b_core

    u0 = smooth_field()
    dt = 0.002
    cfg = IntegratorConfig(dt=dt, disable_nonlinearity=True)
    traj = solve_skeleton(u0, ControlPath.zero(8, dt, round(0.1 / dt)), cfg)
    rule = DealiasRule.two_thirds(8)
    res = residual(traj, rule)
    worst = 0.0
    for i in range(1, traj.n_steps):
        expected = -b_core(traj.coeffs[i], traj.grid, rule)
        diff = res.values[i] - expected
        worst = max(worst, float(np.sqrt(2.0 * np.sum(np.abs(diff) ** 2))))
    scale = max(
        float(np.sqrt(2.0 * np.sum(np.abs(b_core(traj.coeffs[0], traj.grid, rule)) ** 2))),
        1e-30,
    )
    assert worst < 5e-3 * max(scale, 1.0)


def test_laplace_endpoint_gap_shrinks_with_noise():
    # with the free-decay endpoint as target the variational value is zero
    # and the Monte Carlo side decays with the noise strength
    u0 = taylor_green(6, 0.3)
    cfg = IntegratorConfig(dt=0.02)
    free = solve_skeleton(u0, ControlPath.zero(6, 0.02, 10), cfg)
    functional = ClippedEndpointDistance(free.final(), scale=1.0, clip=5.0)
    lhs = []
    for i, eps in enumerate((0.2, 0.02, 0.002)):
        spec = NoiseSpec(epsilon=eps, delta=0.1, gamma=1.0)
        vals = np.empty(200)
        for r in range(200):
            traj = solve_stochastic(u0, spec, cfg, 0.2, RngStream(600 + i).child(r))
            vals[r] = functional(traj)
        w = np.exp(-(vals - vals.min()) / eps)
        lhs.append(vals.min() - eps * np.log(float(np.mean(w))))
    assert all(v >= 0.0 for v in lhs)
    assert lhs[2] < lhs[1] < lhs[0]
