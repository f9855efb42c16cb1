"""Colored noise model: covariance weights, exact OU sampling, renormalization.

The noise covariance acts diagonally on the divergence-free basis with
weights lambda_k = (1 + delta |k|^(2 gamma))^(-1/2); delta sets the
correlation scale (delta -> 0 approaches space-time white noise) and the
overall strength is sqrt(epsilon).
"""

import functools
import math
from dataclasses import dataclass

import numpy as np

from .fields import SpectralField, TensorField
from .grid import grid_for


@dataclass(frozen=True)
class PowerSchedule:
    """Correlation schedule delta(eps) = scale * eps^exponent."""

    exponent: float
    scale: float = 1.0

    def __call__(self, epsilon: float) -> float:
        return self.scale * epsilon**self.exponent

    def to_dict(self):
        return {"kind": "power", "exponent": self.exponent, "scale": self.scale}


def schedule_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "power":
        return PowerSchedule(
            exponent=float(d["exponent"]), scale=float(d.get("scale", 1.0))
        )
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class NoiseSpec:
    """Noise parameters at one working point.

    epsilon: noise strength (variance scale), > 0 in stochastic runs.
    delta:   correlation scale, > 0.
    gamma:   smoothing exponent, > 0.
    eta:     scaling exponent used by the strong-space convergence checks.
    schedule: optional map eps -> delta(eps) the working point was drawn from.
    """

    epsilon: float
    delta: float
    gamma: float = 1.0
    eta: float = None
    schedule: object = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")

    @classmethod
    def at_epsilon(cls, epsilon, schedule, gamma=1.0, eta=None):
        return cls(
            epsilon=epsilon,
            delta=schedule(epsilon),
            gamma=gamma,
            eta=eta,
            schedule=schedule,
        )


def validate_vanishing_schedule(schedule, epsilons):
    """Check delta(eps) > 0 and decreasing along a descending epsilon sweep."""
    eps = sorted(epsilons, reverse=True)
    deltas = [schedule(e) for e in eps]
    if any(d <= 0 for d in deltas):
        raise ValueError("schedule must produce positive delta(eps)")
    for a, b in zip(deltas, deltas[1:]):
        if not b < a:
            raise ValueError(
                "schedule must satisfy delta(eps) -> 0: "
                f"delta is not decreasing along the sweep ({a} -> {b})"
            )
    return deltas


def validate_scaling_condition(schedule, epsilons, eta, force=False):
    """Check eps * delta(eps)^(-eta) decreasing along a descending sweep.

    This is the admissibility condition for convergence measured in the H
    norm; pass force=True to run a schedule as a negative control anyway.
    """
    eps = sorted(epsilons, reverse=True)
    vals = [e * schedule(e) ** (-eta) for e in eps]
    ok = all(b < a for a, b in zip(vals, vals[1:]))
    if not ok and not force:
        raise ValueError(
            "schedule violates the scaling condition "
            "eps * delta(eps)^(-eta) -> 0 "
            f"(eta={eta}, values along sweep: {vals}); "
            "pass force=True to run it as a negative control"
        )
    return vals


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream: (seed, stream_id) fixes every draw.

    stream_id is a tuple so substreams can be derived without collisions;
    ``child(i)`` appends i.  Functions taking ``rng`` accept either an
    RngStream (stateless: a fresh generator per call) or a numpy Generator
    (stateful: consumed sequentially).
    """

    seed: int
    stream_id: tuple = ()

    def __post_init__(self):
        sid = self.stream_id
        if isinstance(sid, int):
            sid = (sid,)
        object.__setattr__(self, "stream_id", tuple(int(i) for i in sid))

    def child(self, i: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + (int(i),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        return np.random.default_rng(ss)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"expected RngStream, Generator or int seed, got {type(rng)}")


def unit_complex_normals(gen: np.random.Generator, shape) -> np.ndarray:
    """Complex normals with E|z|^2 = 1 (independent real/imag parts)."""
    if isinstance(shape, int):
        shape = (shape,)
    xi = gen.standard_normal((2,) + tuple(shape))
    return (xi[0] + 1j * xi[1]) / np.sqrt(2.0)


def covariance_weight(k, spec: NoiseSpec) -> float:
    """lambda_k = (1 + delta |k|^(2 gamma))^(-1/2) for a single wavenumber."""
    k1, k2 = k
    ksq = float(k1 * k1 + k2 * k2)
    return 1.0 / math.sqrt(1.0 + spec.delta * ksq**spec.gamma)


def covariance_weights(grid, spec: NoiseSpec) -> np.ndarray:
    """lambda_k over the stored half-lattice."""
    return 1.0 / np.sqrt(1.0 + spec.delta * grid.ksq**spec.gamma)


def mode_variances(grid, spec: NoiseSpec, alpha: float = 0.0) -> np.ndarray:
    """Stationary OU variance eps lambda_k^2 / (2(|k|^2 + alpha)) per stored mode."""
    lam2 = 1.0 / (1.0 + spec.delta * grid.ksq**spec.gamma)
    return spec.epsilon * lam2 / (2.0 * (grid.ksq + alpha))


def l2_moment_exact(grid, spec: NoiseSpec, alpha: float = 0.0) -> float:
    """E |z|_{L^2}^2 for the stationary process at the grid truncation."""
    return 2.0 * float(np.sum(mode_variances(grid, spec, alpha)))


def wiener_increment(spec: NoiseSpec, dt: float, rng, cutoff: int) -> SpectralField:
    """Increment of the colored Wiener process over dt (noise-strength free).

    Mode k gets an independent complex Gaussian with E|.|^2 = lambda_k^2 dt;
    the epsilon factor is applied by callers.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    g = grid_for(cutoff)
    gen = as_generator(rng)
    std = covariance_weights(g, spec) * math.sqrt(dt)
    return SpectralField(g, std * unit_complex_normals(gen, g.n_modes))


def stationary_std(grid, spec: NoiseSpec, alpha: float = 0.0) -> np.ndarray:
    return np.sqrt(mode_variances(grid, spec, alpha))


def ou_stationary_sample(spec: NoiseSpec, alpha: float, rng, cutoff: int) -> SpectralField:
    """Draw from the stationary law of dz = (A - alpha) z dt + sqrt(eps) dw."""
    g = grid_for(cutoff)
    gen = as_generator(rng)
    std = stationary_std(g, spec, alpha)
    return SpectralField(g, std * unit_complex_normals(gen, g.n_modes))


def stationary_batch(grid, spec, alpha, gen, replicas: int) -> np.ndarray:
    """(replicas, n_modes) array of independent stationary samples."""
    std = stationary_std(grid, spec, alpha)
    return std[None, :] * unit_complex_normals(gen, (replicas, grid.n_modes))


def ou_transition(grid, spec: NoiseSpec, alpha: float, dt: float):
    """Per-mode exact OU transition: (decay multiplier, injected std)."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    rate = grid.ksq + alpha
    decay = np.exp(-rate * dt)
    lam2 = 1.0 / (1.0 + spec.delta * grid.ksq**spec.gamma)
    var = spec.epsilon * lam2 * (-np.expm1(-2.0 * rate * dt)) / (2.0 * rate)
    return decay, np.sqrt(var)


def ou_step(z: SpectralField, spec: NoiseSpec, alpha: float, dt: float, rng) -> SpectralField:
    """One exact OU transition: z <- decay * z + Gaussian with the exact
    step variance, so stationarity is preserved exactly in law."""
    gen = as_generator(rng)
    decay, std = ou_transition(z.grid, spec, alpha, dt)
    g = std * unit_complex_normals(gen, z.grid.n_modes)
    return z.with_coeffs(decay * z.coeffs + g)


def ou_step_batch(Z: np.ndarray, grid, spec, alpha, dt, gen) -> np.ndarray:
    decay, std = ou_transition(grid, spec, alpha, dt)
    g = std[None, :] * unit_complex_normals(gen, Z.shape)
    return decay[None, :] * Z + g


# ---------------------------------------------------------------------------
# renormalization constant


class RenormTailError(ValueError):
    def __init__(self, message, required_cutoff):
        super().__init__(message)
        self.required_cutoff = required_cutoff


def _bare_renorm_sum(delta: float, gamma: float, cutoff: int) -> float:
    """sum over 0 < max|k_i| <= cutoff of 1/(|k|^2 (1 + delta |k|^(2 gamma)))."""
    r = np.arange(-cutoff, cutoff + 1)
    ksq = (r[:, None] ** 2 + r[None, :] ** 2).astype(np.float64)
    ksq[cutoff, cutoff] = np.inf
    return float(np.sum(1.0 / (ksq * (1.0 + delta * ksq**gamma))))


def _coth(x):
    # coth(x) = 1 + 2/(e^(2x) - 1); safe against overflow (-> 1)
    with np.errstate(over="ignore"):
        return 1.0 + 2.0 / np.expm1(2.0 * x)


def _axis_tail(w2: np.ndarray, cutoff: int) -> np.ndarray:
    """sum_{b > cutoff} 1/(w^2 + b^2) for each w^2 >= 0, via the coth series."""
    b = np.arange(1, cutoff + 1, dtype=np.float64)
    partial = np.sum(1.0 / (w2[:, None] + b[None, :] ** 2), axis=1)
    out = np.empty_like(w2)
    zero = w2 == 0.0
    w = np.sqrt(np.where(zero, 1.0, w2))
    full_half = (np.pi * _coth(np.pi * w) / w - 1.0 / np.where(zero, 1.0, w2)) / 2.0
    out[~zero] = full_half[~zero] - partial[~zero]
    out[zero] = np.pi**2 / 6.0 - partial[zero]
    return out


def _tail_gamma_one(delta: float, cutoff: int):
    """Exact-to-roundoff tail of the renormalization sum for gamma = 1.

    Splits 1/(x(1+delta x)) = 1/x - 1/(x + 1/delta); the |k2| > C strip is
    summed with the closed-form cotangent series, the |k1| > C strip with
    Euler-Maclaurin after collapsing the k2 direction analytically.
    Returns (tail, error_estimate).
    """
    s = 1.0 / delta
    C = cutoff
    A = C + 1.0
    f = lambda a: np.pi / a - np.pi / np.sqrt(a * a + s)
    fp = lambda a: -np.pi / a**2 + np.pi * a * (a * a + s) ** -1.5
    fppp = (
        lambda a: -6.0 * np.pi / a**4
        - 9.0 * np.pi * a * (a * a + s) ** -2.5
        + 15.0 * np.pi * a**3 * (a * a + s) ** -3.5
    )
    integral = np.pi * np.log((A + np.sqrt(A * A + s)) / (2.0 * A))
    strip1 = 2.0 * (integral + f(A) / 2.0 - fp(A) / 12.0 + fppp(A) / 720.0)
    a = np.arange(-C, C + 1, dtype=np.float64)
    strip2 = 2.0 * float(np.sum(_axis_tail(a * a, C) - _axis_tail(a * a + s, C)))
    # next Euler-Maclaurin term is f^(5)(A)/30240; |f^(5)| <= ~300 pi / A^6
    err = 2.0 * 300.0 * np.pi / A**6 / 30240.0 + 1e-15 * abs(strip1 + strip2)
    return strip1 + strip2, err


_EM_STENCIL_1 = (np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0)
_EM_STENCIL_3 = (np.array([1.0, -8.0, 13.0, 0.0, -13.0, 8.0, -1.0]) / 8.0)


def _em_tail_sum(f, start, integral):
    """sum_{n >= start} f(n) via Euler-Maclaurin with stencil derivatives.

    ``integral`` must equal int_start^inf f; the first and third derivative
    corrections are taken from 7-point finite differences (f is smooth and
    slowly varying at the boundary, so unit-step stencils are ample).
    Returns (value, remainder_estimate).
    """
    pts = np.array([f(start + j) for j in range(-3, 4)])
    d1 = float(np.dot(_EM_STENCIL_1, pts))
    d3 = float(np.dot(_EM_STENCIL_3, pts))
    value = integral + pts[3] / 2.0 - d1 / 12.0 + d3 / 720.0
    return value, abs(d3) / 720.0 * 0.1 + 1e-15 * abs(value)


def _tail_generic(delta: float, gamma: float, cutoff: int):
    """Tail for general gamma: quadrature integrals plus Euler-Maclaurin
    boundary corrections (float arithmetic; error well below 1e-9 for the
    cutoffs used here)."""
    from scipy.integrate import quad

    C = cutoff

    def h(x):
        return 1.0 / (x * (1.0 + delta * x**gamma))

    def psi(a):
        # sum over the free axis collapses to an integral for a > cutoff
        val, _ = quad(lambda y: h(a * a + y * y), 0, np.inf, limit=200)
        return 2.0 * val

    # int_{a >= A} int_{b in R} h(a^2 + b^2) in polar form:
    # int_A^inf 2 arccos(A/r) h(r^2) r dr, split to isolate the sqrt edge
    A = C + 1.0
    wedge = lambda r: 2.0 * np.arccos(np.minimum(1.0, A / r)) * h(r * r) * r
    near, near_err = quad(wedge, A, 2.0 * A, limit=200)
    far, far_err = quad(wedge, 2.0 * A, np.inf, limit=200)
    strip1, err1 = _em_tail_sum(psi, C + 1, near + far)
    strip1 *= 2.0
    err1 = 2.0 * (err1 + near_err + far_err)

    strip2 = 0.0
    err2 = 0.0
    for a in range(-C, C + 1):
        fa = lambda b: h(a * a + b * b)
        integral, _ = quad(fa, C + 1, np.inf, limit=200)
        val, err = _em_tail_sum(fa, C + 1, integral)
        strip2 += 2.0 * val
        err2 += 2.0 * err
    total = strip1 + strip2
    return total, err1 + err2 + 1e-13 * abs(total)


@functools.lru_cache(maxsize=None)
def _renorm_value(delta: float, gamma: float, cutoff: int, with_tail: bool):
    bare = _bare_renorm_sum(delta, gamma, cutoff)
    if not with_tail:
        return bare / (16.0 * math.pi**2), 0.0
    if gamma == 1.0:
        tail, err = _tail_gamma_one(delta, cutoff)
    else:
        tail, err = _tail_generic(delta, gamma, cutoff)
    return (bare + tail) / (16.0 * math.pi**2), err / (16.0 * math.pi**2)


def renorm_constant(delta, gamma=1.0, cutoff=128, tail_tol=None) -> float:
    """Renormalization constant theta_delta.

    theta_delta = 1/(2 (2 pi)^2) sum_k k1^2/|k|^4 lambda_k(delta)^2, computed
    in the symmetrized form (1/(16 pi^2)) sum_k lambda_k^2/|k|^2, which makes
    the k1^2- and k2^2-weighted versions equal by construction.

    With tail_tol=None the sum runs over the truncated lattice
    max(|k_i|) <= cutoff only (the consistent constant for fields living at
    that truncation).  With a tolerance the lattice tail beyond the cutoff is
    added via an analytically corrected estimate; if the estimated residual
    exceeds tail_tol a RenormTailError reports the required cutoff.
    """
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    value, err = _renorm_value(float(delta), float(gamma), int(cutoff), tail_tol is not None)
    if tail_tol is not None and err > tail_tol:
        needed = int(math.ceil((cutoff + 1) * (err / tail_tol) ** (1.0 / 6.0)))
        raise RenormTailError(
            f"tail estimate {err:.3e} exceeds tail_tol {tail_tol:.3e} at "
            f"cutoff {cutoff}; approximately cutoff >= {needed} required",
            required_cutoff=needed,
        )
    return value


def wick_square(z: SpectralField, spec: NoiseSpec, rule) -> TensorField:
    """Renormalized square z x z - eps theta I.

    The subtracted constant is the truncated-lattice theta at the rule's
    effective cutoff, which is exactly the stationary mean of the squared
    components per unit eps, so the zero-mode diagonal is centered.
    """
    from .nonlinear import tensor_product

    t = tensor_product(z, z, rule)
    theta = renorm_constant(spec.delta, spec.gamma, rule.effective_cutoff)
    comps = t.comps.copy()
    n = t.grid.cutoff
    comps[0, 0, n, n] -= spec.epsilon * theta
    comps[1, 1, n, n] -= spec.epsilon * theta
    return TensorField(t.grid, comps)


# ---------------------------------------------------------------------------
# lattice sums with tail estimates


def lattice_power_sum(exponent, delta=0.0, gamma=1.0, weight_power=1.0, cutoff=512):
    """sum over k != 0 of |k|^exponent (1 + delta |k|^(2 gamma))^(-weight_power).

    Returns (truncated sum, integral tail estimate beyond the cutoff).
    """
    from scipy.integrate import quad

    r = np.arange(-cutoff, cutoff + 1)
    ksq = (r[:, None] ** 2 + r[None, :] ** 2).astype(np.float64)
    ksq[cutoff, cutoff] = np.inf
    vals = ksq ** (exponent / 2.0)
    if delta > 0:
        vals = vals / (1.0 + delta * ksq**gamma) ** weight_power
    total = float(np.sum(vals))

    def integrand(rr):
        v = rr ** (exponent + 1.0)
        if delta > 0:
            v /= (1.0 + delta * rr ** (2.0 * gamma)) ** weight_power
        return 2.0 * np.pi * v

    tail, _ = quad(integrand, cutoff, np.inf, limit=200)
    return total, float(tail)


def lambda_beta_bound(spec: NoiseSpec, beta: float, cutoff: int = 512):
    """Driver quantity eps sum_k |k|^(-2(1-2 beta)) (1 + delta |k|^(2 gamma))^(-1).

    beta must lie in (0, 1/4).  Returns (value, tail_estimate); the sweep
    experiments compare the value against c * eps * delta^(-eta) with
    beta = eta * gamma / 2.
    """
    if not (0.0 < beta < 0.25):
        raise ValueError(f"beta must lie in (0, 1/4), got {beta}")
    s, tail = lattice_power_sum(
        exponent=-2.0 * (1.0 - 2.0 * beta),
        delta=spec.delta,
        gamma=spec.gamma,
        weight_power=1.0,
        cutoff=cutoff,
    )
    return spec.epsilon * s, spec.epsilon * tail


# ---------------------------------------------------------------------------
# moment checks


@dataclass
class MomentReport:
    """Monte Carlo moment estimate paired with its computable bound."""

    epsilon: float
    delta: float
    replicas: int
    estimate: float
    stderr: float
    bound: float
    ratio: float
    closed_form: float = None

    def rows(self):
        return [
            {
                "epsilon": self.epsilon,
                "delta": self.delta,
                "replicas": self.replicas,
                "estimate": self.estimate,
                "stderr": self.stderr,
                "bound": self.bound,
                "ratio": self.ratio,
                "closed_form": self.closed_form,
            }
        ]


def lp_log_moment_check(
    spec: NoiseSpec,
    p: float,
    replicas: int,
    rng,
    cutoff: int,
    alpha: float = 0.0,
    grid_factor: int = 2,
) -> MomentReport:
    """Estimate E |z|_{L^p}^p for the stationary process against the
    logarithmic bound (eps log((1 + delta)/delta))^(p/2).

    The process is stationary, so a fixed-time estimate represents every t.
    For p = 2 the exact mode-variance sum is attached as closed_form.
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    g = grid_for(cutoff)
    gen = as_generator(rng)
    Z = stationary_batch(g, spec, alpha, gen, replicas)
    if p == 2:
        samples = 2.0 * np.sum(np.abs(Z) ** 2, axis=1)
        closed = l2_moment_exact(g, spec, alpha)
    else:
        from .spectral import lp_norm

        samples = np.empty(replicas)
        for i in range(replicas):
            samples[i] = lp_norm(SpectralField(g, Z[i]), p, grid_factor) ** p
        closed = None
    est = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / math.sqrt(replicas))
    bound = (spec.epsilon * math.log((1.0 + spec.delta) / spec.delta)) ** (p / 2.0)
    return MomentReport(
        epsilon=spec.epsilon,
        delta=spec.delta,
        replicas=replicas,
        estimate=est,
        stderr=se,
        bound=bound,
        ratio=est / bound,
        closed_form=closed,
    )


def besov_moment_check(
    spec: NoiseSpec,
    sigma: float,
    sigma_prime: float,
    p: float,
    kappa: float,
    horizon: float,
    dt: float,
    replicas: int,
    rng,
    cutoff: int,
    alpha: float = 0.0,
    grid_factor: int = 2,
    tail_cutoff: int = 512,
) -> MomentReport:
    """Estimate E sup_{t <= T} |z(t)|_{B^sigma_p}^kappa against the mode-sum
    bound (eps sum_k |k|^(2(sigma' - 1)))^(kappa/2) for sigma < sigma' < 0."""
    if not (sigma < sigma_prime < 0):
        raise ValueError(
            f"need sigma < sigma_prime < 0, got sigma={sigma}, "
            f"sigma_prime={sigma_prime}"
        )
    from .spectral import besov_norm

    g = grid_for(cutoff)
    stream = rng if isinstance(rng, RngStream) else RngStream(0)
    n_steps = max(1, round(horizon / dt))
    sups = np.empty(replicas)
    for i in range(replicas):
        gen = as_generator(stream.child(i)) if isinstance(rng, RngStream) else as_generator(rng)
        z = SpectralField(g, stationary_batch(g, spec, alpha, gen, 1)[0])
        best = besov_norm(z, sigma, p, grid_factor)
        for _ in range(n_steps):
            z = ou_step(z, spec, alpha, dt, gen)
            best = max(best, besov_norm(z, sigma, p, grid_factor))
        sups[i] = best**kappa
    s, tail = lattice_power_sum(2.0 * (sigma_prime - 1.0), cutoff=tail_cutoff)
    bound = (spec.epsilon * s) ** (kappa / 2.0)
    est = float(np.mean(sups))
    se = float(np.std(sups, ddof=1) / math.sqrt(replicas))
    return MomentReport(
        epsilon=spec.epsilon,
        delta=spec.delta,
        replicas=replicas,
        estimate=est,
        stderr=se,
        bound=bound,
        ratio=est / bound,
    )
