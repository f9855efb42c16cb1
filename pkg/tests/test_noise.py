import math
from fractions import Fraction

import numpy as np
import pytest

from sns2d import (
    DealiasRule,
    NoiseSpec,
    PowerSchedule,
    RngStream,
    SpectralField,
    covariance_weight,
    lambda_beta_bound,
    ou_stationary_sample,
    ou_step,
    renorm_constant,
    wick_square,
    wiener_increment,
)
from sns2d.grid import grid_for
from sns2d.noise import (
    RenormTailError,
    besov_moment_check,
    l2_moment_exact,
    lattice_power_sum,
    lp_log_moment_check,
    mode_variances,
    ou_step_batch,
    schedule_from_dict,
    stationary_batch,
    validate_scaling_condition,
    validate_vanishing_schedule,
)


def test_noise_spec_validation():
    NoiseSpec(epsilon=0.1, delta=0.01)
    with pytest.raises(ValueError):
        NoiseSpec(epsilon=-1.0, delta=0.1)
    with pytest.raises(ValueError):
        NoiseSpec(epsilon=0.1, delta=0.1, gamma=0.0)


def test_schedules():
    sched = PowerSchedule(0.5)
    assert sched(0.04) == pytest.approx(0.2)
    assert schedule_from_dict({"kind": "power", "exponent": 1.0})(0.3) == 0.3
    with pytest.raises(ValueError):
        schedule_from_dict({"kind": "mystery"})
    validate_vanishing_schedule(sched, [0.1, 0.01, 0.001])
    with pytest.raises(ValueError, match="delta"):
        validate_vanishing_schedule(PowerSchedule(-0.5), [0.1, 0.01])
    # vanishing delta but eps * delta^(-eta) growing
    grower = PowerSchedule(2.0)
    validate_vanishing_schedule(grower, [0.1, 0.01])
    with pytest.raises(ValueError, match="scaling condition"):
        validate_scaling_condition(grower, [0.1, 0.01], eta=1.0)
    validate_scaling_condition(grower, [0.1, 0.01], eta=1.0, force=True)
    validate_scaling_condition(PowerSchedule(0.5), [0.1, 0.01], eta=1.0)


def test_covariance_weight_values():
    spec0 = NoiseSpec(epsilon=1.0, delta=0.0, gamma=1.0)
    for k in ((1, 0), (3, 4)):
        assert covariance_weight(k, spec0) == 1.0
    spec = NoiseSpec(epsilon=1.0, delta=1.0, gamma=1.0)
    assert covariance_weight((1, 0), spec) == pytest.approx(1.0 / math.sqrt(2.0))
    vals = [covariance_weight((k, 0), spec) for k in range(1, 6)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_rng_stream_reproducible():
    a = RngStream(123, (4, 5)).generator().standard_normal(8)
    b = RngStream(123, (4, 5)).generator().standard_normal(8)
    assert np.array_equal(a, b)
    c = RngStream(123, (4, 6)).generator().standard_normal(8)
    assert not np.array_equal(a, c)
    assert RngStream(1).child(2).stream_id == (2,)


def test_wiener_increment_statistics():
    spec = NoiseSpec(epsilon=1.0, delta=0.2, gamma=1.0)
    g = grid_for(6)
    dt = 0.05
    R = 40_000
    gen = RngStream(7).generator()
    samples = np.empty((R, g.n_modes), dtype=np.complex128)
    for i in range(R):
        samples[i] = wiener_increment(spec, dt, gen, 6).coeffs
    lam2 = 1.0 / (1.0 + spec.delta * g.ksq)
    mean = samples.mean(axis=0)
    # centered: 4 sigma of the mean of either part is 4 sqrt(var/2/R)
    bound = 4.0 * np.sqrt(lam2 * dt / 2.0 / R)
    assert np.all(np.abs(mean.real) < bound)
    assert np.all(np.abs(mean.imag) < bound)
    var = np.mean(np.abs(samples) ** 2, axis=0)
    assert np.max(np.abs(var - lam2 * dt) / (lam2 * dt)) < 0.05
    # independent streams decorrelate
    other = np.empty_like(samples[:, 0])
    gen2 = RngStream(8).generator()
    for i in range(R):
        other[i] = wiener_increment(spec, dt, gen2, 6).coeffs[0]
    corr = np.mean(samples[:, 0] * np.conj(other))
    assert abs(corr) < 4.0 * lam2[0] * dt / math.sqrt(R)
    with pytest.raises(ValueError):
        wiener_increment(spec, 0.0, gen, 6)


def test_ou_stationary_variances():
    spec = NoiseSpec(epsilon=0.4, delta=0.1, gamma=1.0)
    g = grid_for(6)
    # mode (1,0) at alpha=0: eps lambda^2 / 2
    lam_sq = 1.0 / 1.1
    gen = RngStream(3).generator()
    Z = stationary_batch(g, spec, 0.0, gen, 30_000)
    i = g.mode_index[(1, 0)]
    assert np.mean(np.abs(Z[:, i]) ** 2) == pytest.approx(
        spec.epsilon * lam_sq / 2.0, rel=0.05
    )
    exact = mode_variances(g, spec, 0.0)
    emp = np.mean(np.abs(Z) ** 2, axis=0)
    assert np.max(np.abs(emp - exact) / exact) < 0.12
    # damping kills the variance
    big = mode_variances(g, spec, 1e9)
    assert np.max(big) < 1e-9


def test_ou_step_limits(random_field):
    spec = NoiseSpec(epsilon=0.0, delta=0.1, gamma=1.0)
    z = random_field(6)
    stepped = ou_step(z, spec, 0.5, 0.25, RngStream(0))
    expected = z.coeffs * np.exp(-(z.grid.ksq + 0.5) * 0.25)
    assert np.allclose(stepped.coeffs, expected, rtol=1e-14)
    with pytest.raises(ValueError):
        ou_step(z, spec, 0.0, -0.1, RngStream(0))


def test_ou_step_preserves_stationary_law():
    from scipy.stats import ks_2samp

    spec = NoiseSpec(epsilon=0.7, delta=0.05, gamma=1.0)
    g = grid_for(6)
    s = RngStream(77)
    R = 8000
    Z = stationary_batch(g, spec, 0.0, s.child(0).generator(), R)
    Zs = ou_step_batch(Z, g, spec, 0.0, 0.04, s.child(1).generator())
    fresh = stationary_batch(g, spec, 0.0, s.child(2).generator(), R)
    energy = lambda W: 2.0 * np.sum(np.abs(W) ** 2, axis=1)
    assert ks_2samp(energy(Zs), energy(fresh)).pvalue > 0.01
    emp = np.mean(np.abs(Zs) ** 2, axis=0)
    exact = mode_variances(g, spec, 0.0)
    assert np.max(np.abs(emp - exact) / exact) < 0.2


def test_renorm_constant_axis_symmetry_exact_rational():
    # k1^2- and k2^2-weighted sums agree exactly on the symmetric truncation
    delta = Fraction(1, 10)
    C = 12
    s1 = Fraction(0)
    s2 = Fraction(0)
    for a in range(-C, C + 1):
        for b in range(-C, C + 1):
            if a == 0 and b == 0:
                continue
            ksq = Fraction(a * a + b * b)
            lam2 = 1 / (1 + delta * ksq)
            s1 += Fraction(a * a) / ksq**2 * lam2
            s2 += Fraction(b * b) / ksq**2 * lam2
    assert s1 == s2
    implementation = renorm_constant(0.1, 1.0, C)
    reference = float(s1) / (8.0 * math.pi**2)
    assert implementation == pytest.approx(reference, rel=1e-13)


def test_renorm_constant_monotone_and_vanishing():
    thetas = [renorm_constant(d, 1.0, 64) for d in (0.01, 0.1, 1.0, 10.0)]
    assert all(b < a for a, b in zip(thetas, thetas[1:]))
    assert renorm_constant(1e8, 1.0, 64) < 1e-8


def test_renorm_tail_corrected_is_cutoff_independent():
    a = renorm_constant(0.1, 1.0, 64, tail_tol=1e-8)
    b = renorm_constant(0.1, 1.0, 256, tail_tol=1e-8)
    assert abs(a - b) < 1e-12
    # generic-gamma quadrature path agrees with the analytic gamma = 1 path
    g1 = renorm_constant(0.25, 1.0, 48, tail_tol=1e-6)
    from sns2d.noise import _bare_renorm_sum, _tail_generic

    generic = (_bare_renorm_sum(0.25, 1.0, 48) + _tail_generic(0.25, 1.0, 48)[0]) / (
        16.0 * math.pi**2
    )
    assert generic == pytest.approx(g1, abs=1e-9)
    c1 = renorm_constant(0.5, 1.5, 24, tail_tol=1e-6)
    c2 = renorm_constant(0.5, 1.5, 96, tail_tol=1e-6)
    assert abs(c1 - c2) < 1e-9


def test_renorm_tail_tol_unreachable_reports_cutoff():
    with pytest.raises(RenormTailError) as err:
        renorm_constant(0.1, 1.0, 4, tail_tol=1e-16)
    assert err.value.required_cutoff > 4


def test_wick_square_deterministic_input():
    spec = NoiseSpec(epsilon=2.0, delta=0.1, gamma=1.0)
    rule = DealiasRule.none(8)
    z = SpectralField.from_modes(8, {(1, 0): 1.0})
    from sns2d import tensor_product

    plain = tensor_product(z, z, rule)
    wick = wick_square(z, spec, rule)
    theta = renorm_constant(spec.delta, spec.gamma, 8)
    diff = plain.comps - wick.comps
    n = 8
    assert diff[0, 0, n, n] == pytest.approx(spec.epsilon * theta, rel=1e-14)
    assert diff[1, 1, n, n] == pytest.approx(spec.epsilon * theta, rel=1e-14)
    diff[0, 0, n, n] = diff[1, 1, n, n] = 0.0
    assert np.max(np.abs(diff)) == 0.0


def test_wick_square_zero_mode_centered():
    # theta at the field's truncation is the exact stationary mean per eps
    spec = NoiseSpec(epsilon=0.6, delta=0.2, gamma=1.0)
    g = grid_for(6)
    rule = DealiasRule.none(6)
    gen = RngStream(5).generator()
    R = 4000
    diag = np.empty((R, 2))
    off = np.empty(R)
    for r in range(R):
        z = SpectralField(g, stationary_batch(g, spec, 0.0, gen, 1)[0])
        zm = wick_square(z, spec, rule).zero_mode()
        diag[r] = zm[0, 0], zm[1, 1]
        off[r] = zm[0, 1]
    for col in range(2):
        se = diag[:, col].std(ddof=1) / math.sqrt(R)
        assert abs(diag[:, col].mean()) < 4.0 * se
    assert abs(off.mean()) < 4.0 * off.std(ddof=1) / math.sqrt(R)


def test_lambda_beta_bound_properties():
    spec = NoiseSpec(epsilon=0.3, delta=0.05, gamma=1.0)
    val, tail = lambda_beta_bound(spec, 0.125, cutoff=128)
    half, _ = lambda_beta_bound(
        NoiseSpec(epsilon=0.15, delta=0.05, gamma=1.0), 0.125, cutoff=128
    )
    assert half == pytest.approx(0.5 * val, rel=1e-14)
    # decreasing delta increases every weight
    looser, _ = lambda_beta_bound(
        NoiseSpec(epsilon=0.3, delta=0.01, gamma=1.0), 0.125, cutoff=128
    )
    assert looser > val
    with pytest.raises(ValueError):
        lambda_beta_bound(spec, 0.3)
    # eta = 1/4, gamma = 1, delta = eps: ratio to eps * delta^(-eta) bounded
    ratios = []
    for eps in (1e-1, 1e-2, 1e-3, 1e-4):
        s = NoiseSpec(epsilon=eps, delta=eps, gamma=1.0)
        v, _ = lambda_beta_bound(s, beta=1.0 / 8.0, cutoff=256)
        ratios.append(v / (eps * eps ** (-0.25)))
    assert max(ratios) / min(ratios) < 5.0


def test_lattice_power_sum_tail():
    val, tail = lattice_power_sum(-3.0, cutoff=128)
    val2, tail2 = lattice_power_sum(-3.0, cutoff=256)
    assert val < val2 < val + tail * 1.5
    assert tail2 < tail


def test_lp_log_moment_p2_closed_form():
    spec = NoiseSpec(epsilon=0.5, delta=0.1, gamma=1.0)
    rep = lp_log_moment_check(spec, 2.0, 4000, RngStream(11), cutoff=8)
    assert rep.closed_form == pytest.approx(
        l2_moment_exact(grid_for(8), spec), rel=1e-14
    )
    assert rep.estimate == pytest.approx(rep.closed_form, rel=0.05)
    assert rep.ratio == rep.estimate / rep.bound


def test_lp_log_moment_epsilon_scaling():
    # Gaussian scaling: the p-th moment scales like eps^(p/2)
    vals = []
    for i, eps in enumerate((0.4, 0.1)):
        spec = NoiseSpec(epsilon=eps, delta=0.1, gamma=1.0)
        rep = lp_log_moment_check(spec, 4.0, 400, RngStream(21).child(i), cutoff=6)
        vals.append(rep.estimate)
    assert vals[0] / vals[1] == pytest.approx((0.4 / 0.1) ** 2, rel=0.2)


def test_besov_moment_check_scaling_and_validation():
    sched = PowerSchedule(1.0)
    reps = []
    for i, eps in enumerate((0.2, 0.05)):
        spec = NoiseSpec.at_epsilon(eps, sched)
        reps.append(
            besov_moment_check(
                spec, -0.75, -0.5, 4.0, 2.0, horizon=0.1, dt=0.02,
                replicas=150, rng=RngStream(31).child(i), cutoff=6,
            )
        )
    # kappa = 2: estimate scales like eps within Monte Carlo error
    assert reps[0].estimate / reps[1].estimate == pytest.approx(4.0, rel=0.35)
    assert reps[0].ratio < 10.0
    with pytest.raises(ValueError):
        besov_moment_check(
            NoiseSpec(0.1, 0.1), -0.5, -0.75, 4.0, 2.0, 0.1, 0.02, 10,
            RngStream(0), 6,
        )


def test_sampling_reproducibility():
    spec = NoiseSpec(epsilon=0.3, delta=0.1, gamma=1.0)
    a = ou_stationary_sample(spec, 0.0, RngStream(9, (1,)), 8)
    b = ou_stationary_sample(spec, 0.0, RngStream(9, (1,)), 8)
    assert np.array_equal(a.coeffs, b.coeffs)


def test_ou_transition_small_step_limits():
    from sns2d.noise import ou_transition

    spec = NoiseSpec(epsilon=0.4, delta=0.1, gamma=1.0)
    g = grid_for(6)
    decay, std = ou_transition(g, spec, 0.0, 1e-9)
    assert np.max(np.abs(decay - 1.0)) < 1e-6
    assert np.max(std) < 1e-4
    # the injected variance follows eps lam^2 dt in the small-step limit
    lam2 = 1.0 / (1.0 + spec.delta * g.ksq)
    assert np.allclose(std**2, spec.epsilon * lam2 * 1e-9, rtol=1e-6)


def test_lattice_power_sum_matches_direct_enumeration():
    val, tail = lattice_power_sum(-3.0, cutoff=20)
    direct = 0.0
    for a in range(-20, 21):
        for b in range(-20, 21):
            if (a, b) != (0, 0):
                direct += (a * a + b * b) ** -1.5
    assert val == pytest.approx(direct, rel=1e-13)
    assert tail > 0.0


def test_lattice_power_sum_with_weight_matches_direct():
    val, _ = lattice_power_sum(-1.5, delta=0.3, gamma=1.2, weight_power=2.0, cutoff=12)
    direct = 0.0
    for a in range(-12, 13):
        for b in range(-12, 13):
            if (a, b) != (0, 0):
                ksq = float(a * a + b * b)
                direct += ksq**-0.75 / (1.0 + 0.3 * ksq**1.2) ** 2
    assert val == pytest.approx(direct, rel=1e-13)
