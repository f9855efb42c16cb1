"""Experiment orchestration: validated configs, deterministic runs, reports.

Configs are strict JSON documents (schema_version 1, unknown keys rejected).
A run writes results.csv / summary.json / config.json atomically into a
directory named by the config hash; (config, seed) determines every numeric
output byte.
"""

import dataclasses
import hashlib
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .dynamics import ControlPath, IntegratorConfig, solve_skeleton
from .fields import SpectralField, load_field, taylor_green
from .grid import grid_for
from .ldp import (
    ClippedEndpointDistance,
    ConstantFunctional,
    OptimizerSettings,
    besov_convergence_experiment,
    fit_loglog,
    h_convergence_experiment,
    laplace_check,
    minimize_action,
    tube_probability,
)
from .noise import (
    NoiseSpec,
    RngStream,
    besov_moment_check,
    lp_log_moment_check,
    mode_variances,
    ou_step_batch,
    renorm_constant,
    schedule_from_dict,
    stationary_batch,
    wick_square,
)
from .nonlinear import DealiasRule
from .spectral import BesovParams, tensor_sobolev_norm

SCHEMA_VERSION = 1
KINDS = (
    "ou_checks",
    "renorm",
    "lp_moment",
    "besov_moment",
    "converge_h",
    "converge_besov",
    "wick_decay",
    "instanton",
    "laplace",
    "tube",
)

_REQUIRED = object()


def _take(d, allowed, context):
    """Strict dict extraction: unknown keys rejected, defaults applied."""
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ValueError(f"{context}: expected a mapping, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValueError(f"{context}: unknown keys {sorted(unknown)}")
    out = {}
    for key, default in allowed.items():
        if key in d:
            out[key] = d[key]
        elif default is _REQUIRED:
            raise ValueError(f"{context}: missing required key {key!r}")
        else:
            out[key] = default
    return out


@dataclass
class ExperimentConfig:
    kind: str
    numerics: dict
    noise: dict
    statistics: dict
    io: dict
    params: dict
    thresholds: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        top = _take(
            raw,
            {
                "schema_version": _REQUIRED,
                "kind": _REQUIRED,
                "numerics": {},
                "noise": {},
                "statistics": {},
                "io": {},
                "params": {},
                "thresholds": {},
            },
            "config",
        )
        if top["schema_version"] != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported schema_version {top['schema_version']}; "
                f"this toolkit reads version {SCHEMA_VERSION}"
            )
        kind = top["kind"]
        if kind not in KINDS:
            raise ValueError(f"unknown experiment kind {kind!r}; choose from {KINDS}")
        numerics = _take(
            top["numerics"],
            {
                "cutoff": 16,
                "dt": 0.01,
                "t_final": 0.5,
                "grid_factor": 2,
                "dealias": "two_thirds",
                "scheme": "exponential_euler",
            },
            "numerics",
        )
        noise = _take(
            top["noise"],
            {
                "gamma": 1.0,
                "eta": None,
                "epsilon": None,
                "delta": None,
                "epsilons": None,
                "schedule": None,
            },
            "noise",
        )
        statistics = _take(
            top["statistics"], {"replicas": 100, "seed": 0}, "statistics"
        )
        io_cfg = _take(top["io"], {"dump_trajectories": False}, "io")
        cfg = cls(
            kind=kind,
            numerics=numerics,
            noise=noise,
            statistics=statistics,
            io=io_cfg,
            params=top["params"],
            thresholds=top["thresholds"],
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "numerics": self.numerics,
            "noise": self.noise,
            "statistics": self.statistics,
            "io": self.io,
            "params": self.params,
            "thresholds": self.thresholds,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(
            dt=self.numerics["dt"],
            scheme=self.numerics["scheme"],
            dealias=self.numerics["dealias"],
            grid_factor=self.numerics["grid_factor"],
        )

    def schedule(self):
        if self.noise["schedule"] is None:
            raise ValueError(f"{self.kind}: noise.schedule is required")
        return schedule_from_dict(self.noise["schedule"])

    def spec(self) -> NoiseSpec:
        if self.noise["epsilon"] is None or self.noise["delta"] is None:
            raise ValueError(f"{self.kind}: noise.epsilon and noise.delta are required")
        return NoiseSpec(
            epsilon=self.noise["epsilon"],
            delta=self.noise["delta"],
            gamma=self.noise["gamma"],
            eta=self.noise["eta"],
        )

    def validate(self):
        self.integrator()  # raises on bad numerics
        if self.numerics["cutoff"] < 1:
            raise ValueError("numerics.cutoff must be >= 1")
        if self.statistics["replicas"] < 1:
            raise ValueError("statistics.replicas must be >= 1")
        self.params = _PARAM_SCHEMAS[self.kind](self)
        return self


# --------------------------------------------------------------------------
# per-kind parameter schemas


def _params_ou(cfg):
    p = _take(cfg.params, {"alphas": [0.0, 1.0]}, "params(ou_checks)")
    cfg.spec()
    if any(a < 0 for a in p["alphas"]):
        raise ValueError("ou_checks: damping constants must satisfy alpha >= 0")
    return p


def _params_renorm(cfg):
    p = _take(
        cfg.params,
        {
            "deltas": [0.1, 0.01],
            "cutoffs": [128, 256],
            "tail_tol": 1e-8,
            "wick_replicas": 10000,
            "crosscheck_replicas": 20,
        },
        "params(renorm)",
    )
    cfg.spec()
    return p


def _params_lp_moment(cfg):
    p = _take(
        cfg.params, {"p": 2.0, "deltas": [1e-1, 1e-2, 1e-3, 1e-4]}, "params(lp_moment)"
    )
    if cfg.noise["epsilon"] is None:
        raise ValueError("lp_moment: noise.epsilon is required")
    return p


def _params_besov_moment(cfg):
    p = _take(
        cfg.params,
        {
            "sigma": -0.75,
            "sigma_prime": -0.5,
            "p": 4.0,
            "kappa": 2.0,
            "epsilons": [1e-1, 1e-2, 1e-3],
        },
        "params(besov_moment)",
    )
    if not (p["sigma"] < p["sigma_prime"] < 0):
        raise ValueError(
            "besov_moment: need sigma < sigma_prime < 0, got "
            f"sigma={p['sigma']}, sigma_prime={p['sigma_prime']}"
        )
    cfg.schedule()
    return p


def _params_converge_h(cfg):
    p = _take(
        cfg.params,
        {
            "initial": {"kind": "taylor_green", "amplitude": 0.5},
            "control": {"kind": "mode", "k": [1, 0], "value": [0.5, 0.0]},
            "force": False,
        },
        "params(converge_h)",
    )
    cfg.schedule()
    if cfg.noise["eta"] is None:
        raise ValueError(
            "converge_h: noise.eta is required (scaling condition "
            "eps * delta(eps)^(-eta) -> 0)"
        )
    if not cfg.noise["epsilons"]:
        raise ValueError("converge_h: noise.epsilons sweep is required")
    return p


def _params_converge_besov(cfg):
    p = _take(
        cfg.params,
        {
            "initial": {"kind": "taylor_green", "amplitude": 0.5},
            "control": {"kind": "mode", "k": [1, 0], "value": [0.5, 0.0]},
            "sigma": -0.25,
            "p": 4.0,
            "alpha": 0.3,
            "beta": 3.0,
        },
        "params(converge_besov)",
    )
    # raises with the violated inequality named
    BesovParams(sigma=p["sigma"], p=p["p"], alpha=p["alpha"], beta=p["beta"]).validate()
    cfg.schedule()
    if not cfg.noise["epsilons"]:
        raise ValueError("converge_besov: noise.epsilons sweep is required")
    return p


def _params_wick_decay(cfg):
    p = _take(
        cfg.params,
        {"sigma": -0.5, "epsilons": [1e-1, 1e-2, 1e-3]},
        "params(wick_decay)",
    )
    if p["sigma"] >= 0:
        raise ValueError("wick_decay: sigma must be negative")
    cfg.schedule()
    return p


def _params_instanton(cfg):
    p = _take(
        cfg.params,
        {
            "initial": {"kind": "taylor_green", "amplitude": 0.5},
            "target": {"kind": "free_decay"},
            "endpoint_tolerance": 1e-3,
            "max_iterations": 500,
            "gradient_check_directions": 0,
        },
        "params(instanton)",
    )
    return p


def _params_laplace(cfg):
    p = _take(
        cfg.params,
        {
            "functional": {"kind": "constant", "value": 0.0},
            "epsilons": [1e-1, 1e-2],
            "candidates": 5,
        },
        "params(laplace)",
    )
    f = _take(
        p["functional"],
        {"kind": _REQUIRED, "value": 0.0, "scale": 1.0, "clip": 10.0, "target": None},
        "params(laplace).functional",
    )
    if f["kind"] not in ("constant", "clipped_endpoint"):
        raise ValueError(f"laplace: unknown functional kind {f['kind']!r}")
    p["functional"] = f
    cfg.schedule()
    return p


def _params_tube(cfg):
    p = _take(
        cfg.params,
        {
            "initial": {"kind": "taylor_green", "amplitude": 0.5},
            "radii": [0.1, 0.2, 0.5],
        },
        "params(tube)",
    )
    cfg.spec()
    if cfg.statistics["replicas"] < 2:
        raise ValueError("tube: need at least 2 replicas")
    return p


_PARAM_SCHEMAS = {
    "ou_checks": _params_ou,
    "renorm": _params_renorm,
    "lp_moment": _params_lp_moment,
    "besov_moment": _params_besov_moment,
    "converge_h": _params_converge_h,
    "converge_besov": _params_converge_besov,
    "wick_decay": _params_wick_decay,
    "instanton": _params_instanton,
    "laplace": _params_laplace,
    "tube": _params_tube,
}


# --------------------------------------------------------------------------
# field / control builders


def build_initial(cutoff: int, descr: dict, stream: RngStream) -> SpectralField:
    d = _take(
        descr,
        {
            "kind": _REQUIRED,
            "amplitude": 1.0,
            "decay": 1.0,
            "k": None,
            "value": None,
            "path": None,
        },
        "initial",
    )
    kind = d["kind"]
    if kind == "zero":
        return SpectralField.zero(cutoff)
    if kind == "taylor_green":
        return taylor_green(cutoff, d["amplitude"])
    if kind == "random":
        return SpectralField.random(
            cutoff, stream.generator(), amplitude=d["amplitude"], decay=d["decay"]
        )
    if kind == "mode":
        re, im = d["value"]
        return SpectralField.from_modes(cutoff, {tuple(d["k"]): re + 1j * im})
    if kind == "file":
        return load_field(d["path"])
    raise ValueError(f"unknown initial-condition kind {kind!r}")


def build_control(cutoff, dt, n_steps, descr, stream: RngStream) -> ControlPath:
    d = _take(
        descr,
        {
            "kind": _REQUIRED,
            "k": None,
            "value": None,
            "gamma": 1.0,
            "decay": 1.0,
            "amplitude": 1.0,
        },
        "control",
    )
    kind = d["kind"]
    if kind == "zero":
        return ControlPath.zero(cutoff, dt, n_steps)
    if kind == "mode":
        re, im = d["value"]
        f = SpectralField.from_modes(cutoff, {tuple(d["k"]): re + 1j * im})
        return ControlPath.constant(f, dt, n_steps)
    if kind == "taylor_green":
        return ControlPath.constant(taylor_green(cutoff, d["amplitude"]), dt, n_steps)
    if kind == "random_ball":
        return ControlPath.random_in_ball(
            cutoff, dt, n_steps, d["gamma"], stream.generator(), decay=d["decay"]
        )
    raise ValueError(f"unknown control kind {kind!r}")


# --------------------------------------------------------------------------
# runners


def _run_ou_checks(cfg: ExperimentConfig, run_dir=None):
    from scipy.stats import ks_2samp

    th = _take(
        cfg.thresholds,
        {"max_variance_rel_err": 0.05, "min_ks_pvalue": 0.01},
        "thresholds(ou_checks)",
    )
    g = grid_for(cfg.numerics["cutoff"])
    spec = cfg.spec()
    replicas = cfg.statistics["replicas"]
    dt = cfg.numerics["dt"]
    stream = RngStream(cfg.statistics["seed"])
    chunk = 2000
    rows = []
    summary = {"alphas": [], "ks_pvalue": {}, "max_variance_rel_err": 0.0}
    for idx, alpha in enumerate(cfg.params["alphas"]):
        s = stream.child(idx)
        gen_a = s.child(0).generator()
        gen_b = s.child(1).generator()
        var_acc = np.zeros(g.n_modes)
        stepped_norms = []
        fresh_norms = []
        done = 0
        while done < replicas:
            m = min(chunk, replicas - done)
            Z = stationary_batch(g, spec, alpha, gen_a, m)
            var_acc += np.sum(np.abs(Z) ** 2, axis=0)
            Zs = ou_step_batch(Z, g, spec, alpha, dt, gen_a)
            stepped_norms.append(2.0 * np.sum(np.abs(Zs) ** 2, axis=1))
            fresh_norms.append(
                2.0 * np.sum(np.abs(stationary_batch(g, spec, alpha, gen_b, m)) ** 2, axis=1)
            )
            done += m
        emp = var_acc / replicas
        exact = mode_variances(g, spec, alpha)
        rel = np.abs(emp - exact) / exact
        ks = ks_2samp(np.concatenate(stepped_norms), np.concatenate(fresh_norms))
        for i in range(g.n_modes):
            rows.append(
                {
                    "alpha": alpha,
                    "k1": int(g.k1[i]),
                    "k2": int(g.k2[i]),
                    "emp_var": emp[i],
                    "exact_var": exact[i],
                    "rel_err": rel[i],
                }
            )
        summary["alphas"].append(alpha)
        summary["ks_pvalue"][str(alpha)] = float(ks.pvalue)
        summary["max_variance_rel_err"] = max(
            summary["max_variance_rel_err"], float(np.max(rel))
        )
    summary["passed"] = summary["max_variance_rel_err"] <= th["max_variance_rel_err"] and all(
        v >= th["min_ks_pvalue"] for v in summary["ks_pvalue"].values()
    )
    return rows, summary


def _run_renorm(cfg: ExperimentConfig, run_dir=None):
    th = _take(
        cfg.thresholds,
        {"pair_agreement": 1e-8, "max_wick_zscore": 3.0, "crosscheck_tol": 1e-10},
        "thresholds(renorm)",
    )
    p = cfg.params
    gamma = cfg.noise["gamma"]
    rows = []
    worst_pair = 0.0
    for delta in p["deltas"]:
        values = []
        for cut in p["cutoffs"]:
            theta = renorm_constant(delta, gamma, cut, tail_tol=p["tail_tol"])
            values.append(theta)
            rows.append({"kind": "theta", "delta": delta, "cutoff": cut, "value": theta,
                         "stderr": None, "zscore": None})
        worst_pair = max(worst_pair, max(values) - min(values))

    # Monte Carlo: zero-mode diagonal of the renormalized square is centered
    spec = cfg.spec()
    g = grid_for(cfg.numerics["cutoff"])
    rule = DealiasRule.make(cfg.numerics["dealias"], g.cutoff)
    keep = (np.abs(g.k1) <= rule.effective_cutoff) & (np.abs(g.k2) <= rule.effective_cutoff)
    w11 = (g.k2**2 / g.ksq / (2.0 * np.pi**2))[keep]
    w22 = (g.k1**2 / g.ksq / (2.0 * np.pi**2))[keep]
    theta_trunc = renorm_constant(spec.delta, gamma, rule.effective_cutoff)
    gen = RngStream(cfg.statistics["seed"]).child(100).generator()
    R = p["wick_replicas"]
    chunk = 2000
    sums = {"m11": [], "m22": []}
    done = 0
    while done < R:
        m = min(chunk, R - done)
        Z = stationary_batch(g, spec, 0.0, gen, m)[:, keep]
        a2 = np.abs(Z) ** 2
        sums["m11"].append(a2 @ w11 - spec.epsilon * theta_trunc)
        sums["m22"].append(a2 @ w22 - spec.epsilon * theta_trunc)
        done += m
    for name in ("m11", "m22"):
        vals = np.concatenate(sums[name])
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(R))
        rows.append(
            {"kind": f"wick_{name}", "delta": spec.delta, "cutoff": g.cutoff,
             "value": mean, "stderr": se, "zscore": abs(mean) / se}
        )

    # the coefficient formula above must agree with the tensor operation
    gen2 = RngStream(cfg.statistics["seed"]).child(101).generator()
    worst_cross = 0.0
    for _ in range(p["crosscheck_replicas"]):
        z = SpectralField(g, stationary_batch(g, spec, 0.0, gen2, 1)[0])
        t = wick_square(z, spec, rule)
        zm = t.zero_mode()
        cs = z.coeffs[keep]
        direct11 = float(np.abs(cs) ** 2 @ w11) - spec.epsilon * theta_trunc
        direct22 = float(np.abs(cs) ** 2 @ w22) - spec.epsilon * theta_trunc
        worst_cross = max(
            worst_cross, abs(zm[0, 0] - direct11), abs(zm[1, 1] - direct22)
        )

    zscores = [r["zscore"] for r in rows if r["zscore"] is not None]
    summary = {
        "pair_agreement": worst_pair,
        "max_wick_zscore": max(zscores),
        "wick_crosscheck_err": worst_cross,
        "symmetrized_form": True,
        "passed": worst_pair <= th["pair_agreement"]
        and max(zscores) <= th["max_wick_zscore"]
        and worst_cross <= th["crosscheck_tol"],
    }
    return rows, summary


def _run_lp_moment(cfg: ExperimentConfig, run_dir=None):
    th = _take(
        cfg.thresholds,
        {"max_closed_form_rel_err": 0.05, "max_ratio_spread": 3.0},
        "thresholds(lp_moment)",
    )
    stream = RngStream(cfg.statistics["seed"])
    rows = []
    ratios = []
    worst_rel = 0.0
    for i, delta in enumerate(cfg.params["deltas"]):
        spec = NoiseSpec(cfg.noise["epsilon"], delta, cfg.noise["gamma"])
        rep = lp_log_moment_check(
            spec,
            cfg.params["p"],
            cfg.statistics["replicas"],
            stream.child(i),
            cfg.numerics["cutoff"],
            grid_factor=cfg.numerics["grid_factor"],
        )
        rows.extend(rep.rows())
        ratios.append(rep.ratio)
        if rep.closed_form is not None:
            worst_rel = max(worst_rel, abs(rep.estimate - rep.closed_form) / rep.closed_form)
    spread = max(ratios) / min(ratios)
    summary = {
        "ratio_spread": spread,
        "max_closed_form_rel_err": worst_rel,
        "passed": spread <= th["max_ratio_spread"]
        and worst_rel <= th["max_closed_form_rel_err"],
    }
    return rows, summary


def _run_besov_moment(cfg: ExperimentConfig, run_dir=None):
    th = _take(cfg.thresholds, {"max_ratio_spread": 10.0}, "thresholds(besov_moment)")
    stream = RngStream(cfg.statistics["seed"])
    schedule = cfg.schedule()
    p = cfg.params
    rows, ratios = [], []
    for i, eps in enumerate(sorted(p["epsilons"], reverse=True)):
        spec = NoiseSpec.at_epsilon(eps, schedule, gamma=cfg.noise["gamma"])
        rep = besov_moment_check(
            spec,
            p["sigma"],
            p["sigma_prime"],
            p["p"],
            p["kappa"],
            cfg.numerics["t_final"],
            cfg.numerics["dt"],
            cfg.statistics["replicas"],
            stream.child(i),
            cfg.numerics["cutoff"],
            grid_factor=cfg.numerics["grid_factor"],
        )
        rows.extend(rep.rows())
        ratios.append(rep.ratio)
    spread = max(ratios) / min(ratios)
    summary = {"ratio_spread": spread, "passed": spread <= th["max_ratio_spread"]}
    return rows, summary


def _convergence_common(cfg):
    stream = RngStream(cfg.statistics["seed"])
    cutoff = cfg.numerics["cutoff"]
    integ = cfg.integrator()
    n_steps = max(2, round(cfg.numerics["t_final"] / integ.dt))
    u0 = build_initial(cutoff, cfg.params["initial"], stream.child(900))
    phi = build_control(cutoff, integ.dt, n_steps, cfg.params["control"], stream.child(901))
    return stream, integ, u0, phi


def _dump_convergence_paths(cfg, run_dir, stream, integ, u0, phi):
    """Optional per-run dumps: the skeleton path and replica 0 of each sweep
    member (reproduced from the same substreams the sweep used)."""
    from .dynamics import save_trajectory, solve_controlled

    schedule = cfg.schedule()
    skeleton = solve_skeleton(u0, phi, integ)
    save_trajectory(skeleton, os.path.join(run_dir, "skeleton.csv"))
    for i, eps in enumerate(sorted(cfg.noise["epsilons"], reverse=True)):
        spec = NoiseSpec.at_epsilon(
            eps, schedule, gamma=cfg.noise["gamma"], eta=cfg.noise["eta"]
        )
        traj = solve_controlled(u0, phi, spec, integ, stream.child(1).child(i).child(0))
        save_trajectory(traj, os.path.join(run_dir, f"controlled_{i}.csv"))


def _run_converge_h(cfg: ExperimentConfig, run_dir=None):
    th = _take(cfg.thresholds, {"slope_sigmas": 2.0}, "thresholds(converge_h)")
    stream, integ, u0, phi = _convergence_common(cfg)
    if cfg.io["dump_trajectories"] and run_dir:
        _dump_convergence_paths(cfg, run_dir, stream, integ, u0, phi)
    report = h_convergence_experiment(
        u0,
        phi,
        cfg.schedule(),
        cfg.noise["eta"],
        cfg.noise["epsilons"],
        cfg.statistics["replicas"],
        integ,
        stream.child(1),
        gamma=cfg.noise["gamma"],
        force=cfg.params["force"],
    )
    summary = {
        "norm": report.norm,
        "slope": report.slope,
        "slope_stderr": report.slope_stderr,
        "passed": report.slope - th["slope_sigmas"] * report.slope_stderr > 0.0,
    }
    return report.rows(), summary


def _run_converge_besov(cfg: ExperimentConfig, run_dir=None):
    th = _take(cfg.thresholds, {"slope_sigmas": 2.0}, "thresholds(converge_besov)")
    stream, integ, u0, phi = _convergence_common(cfg)
    if cfg.io["dump_trajectories"] and run_dir:
        _dump_convergence_paths(cfg, run_dir, stream, integ, u0, phi)
    p = cfg.params
    besov = BesovParams(sigma=p["sigma"], p=p["p"], alpha=p["alpha"], beta=p["beta"])
    report = besov_convergence_experiment(
        u0,
        phi,
        besov,
        cfg.schedule(),
        cfg.noise["epsilons"],
        cfg.statistics["replicas"],
        integ,
        stream.child(1),
        gamma=cfg.noise["gamma"],
        grid_factor=cfg.numerics["grid_factor"],
    )
    summary = {
        "norm": report.norm,
        "slope": report.slope,
        "slope_stderr": report.slope_stderr,
        "passed": report.slope - th["slope_sigmas"] * report.slope_stderr > 0.0,
    }
    return report.rows(), summary


def _run_wick_decay(cfg: ExperimentConfig, run_dir=None):
    th = _take(cfg.thresholds, {"slope_sigmas": 2.0}, "thresholds(wick_decay)")
    stream = RngStream(cfg.statistics["seed"])
    schedule = cfg.schedule()
    g = grid_for(cfg.numerics["cutoff"])
    rule = DealiasRule.make(cfg.numerics["dealias"], g.cutoff)
    sigma = cfg.params["sigma"]
    R = cfg.statistics["replicas"]
    rows, eps_sorted, means = [], sorted(cfg.params["epsilons"], reverse=True), []
    stderrs = []
    for i, eps in enumerate(eps_sorted):
        spec = NoiseSpec.at_epsilon(eps, schedule, gamma=cfg.noise["gamma"])
        gen = stream.child(i).generator()
        vals = np.empty(R)
        for r in range(R):
            z = SpectralField(g, stationary_batch(g, spec, 0.0, gen, 1)[0])
            vals[r] = tensor_sobolev_norm(wick_square(z, spec, rule), sigma)
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(R))
        means.append(mean)
        stderrs.append(se)
        rows.append(
            {"epsilon": eps, "delta": spec.delta, "mean_norm": mean, "stderr": se,
             "replicas": R}
        )
    slope, slope_se = fit_loglog(eps_sorted, means)
    summary = {
        "sigma": sigma,
        "slope": slope,
        "slope_stderr": slope_se,
        "passed": slope - th["slope_sigmas"] * slope_se > 0.0,
    }
    return rows, summary


def _run_instanton(cfg: ExperimentConfig, run_dir=None):
    th = _take(cfg.thresholds, {"max_gradient_rel_err": 1e-5}, "thresholds(instanton)")
    stream = RngStream(cfg.statistics["seed"])
    cutoff = cfg.numerics["cutoff"]
    integ = cfg.integrator()
    t_final = cfg.numerics["t_final"]
    u0 = build_initial(cutoff, cfg.params["initial"], stream.child(900))
    tgt_descr = cfg.params["target"]
    if tgt_descr.get("kind") == "free_decay":
        n = max(2, round(t_final / integ.dt))
        free = solve_skeleton(u0, ControlPath.zero(cutoff, integ.dt, n), integ)
        target = free.final()
    else:
        target = build_initial(cutoff, tgt_descr, stream.child(902))
    opt = OptimizerSettings(
        max_iterations=cfg.params["max_iterations"],
        endpoint_tolerance=cfg.params["endpoint_tolerance"],
    )
    phi_star, rep = minimize_action(u0, target, t_final, integ, opt)
    if cfg.io["dump_trajectories"] and run_dir:
        from .dynamics import save_trajectory

        save_trajectory(
            solve_skeleton(u0, phi_star, integ),
            os.path.join(run_dir, "instanton.csv"),
        )
    rows = [
        {"iteration": i, "round": h["round"], "objective": h["objective"], "weight": h["weight"]}
        for i, h in enumerate(rep.history)
    ]
    if not rows:  # converged without any descent step (target already reachable)
        rows = [
            {
                "iteration": 0,
                "round": 0,
                "objective": rep.objective,
                "weight": rep.penalty_weight,
            }
        ]
    summary = {
        "action": rep.action,
        "endpoint_error": rep.endpoint_error,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "penalty_weight": rep.penalty_weight,
    }
    nd = cfg.params["gradient_check_directions"]
    if nd:
        from .ldp import action_objective_and_gradient
        from .noise import unit_complex_normals

        gen = stream.child(903).generator()
        # check away from the minimizer, where the gradient is generic
        base = phi_star.values + 0.2 * unit_complex_normals(gen, phi_star.values.shape)
        J0, grad, _ = action_objective_and_gradient(
            base, u0, target, rep.penalty_weight, integ
        )
        worst = 0.0
        h = 1e-6
        for _ in range(nd):
            direction = unit_complex_normals(gen, base.shape)
            Jp, _, _ = action_objective_and_gradient(
                base + h * direction, u0, target, rep.penalty_weight, integ,
                want_gradient=False,
            )
            Jm, _, _ = action_objective_and_gradient(
                base - h * direction, u0, target, rep.penalty_weight, integ,
                want_gradient=False,
            )
            fd = (Jp - Jm) / (2 * h)
            pred = integ.dt * 2.0 * float(np.real(np.sum(grad * np.conj(direction))))
            worst = max(worst, abs(fd - pred) / max(abs(fd), 1e-300))
        summary["gradient_rel_err"] = worst
        summary["passed"] = rep.converged and worst <= th["max_gradient_rel_err"]
    else:
        summary["passed"] = rep.converged
    return rows, summary


def _run_laplace(cfg: ExperimentConfig, run_dir=None):
    th = _take(cfg.thresholds, {"allow_variance_flag": True}, "thresholds(laplace)")
    stream = RngStream(cfg.statistics["seed"])
    cutoff = cfg.numerics["cutoff"]
    integ = cfg.integrator()
    f = cfg.params["functional"]
    if f["kind"] == "constant":
        functional = ConstantFunctional(f["value"])
    else:
        target = build_initial(cutoff, f["target"], stream.child(902))
        functional = ClippedEndpointDistance(target, scale=f["scale"], clip=f["clip"])
    u0 = SpectralField.zero(cutoff)
    report = laplace_check(
        functional,
        u0,
        cfg.schedule(),
        cfg.params["epsilons"],
        cfg.statistics["replicas"],
        integ,
        cfg.numerics["t_final"],
        stream.child(1),
        gamma=cfg.noise["gamma"],
        n_candidates=cfg.params["candidates"],
    )
    summary = {
        "rhs": report.rhs,
        "variance_flag": report.variance_flag,
        "passed": th["allow_variance_flag"] or not report.variance_flag,
    }
    return report.rows(), summary


def _run_tube(cfg: ExperimentConfig, run_dir=None):
    _take(cfg.thresholds, {}, "thresholds(tube)")
    stream = RngStream(cfg.statistics["seed"])
    cutoff = cfg.numerics["cutoff"]
    integ = cfg.integrator()
    u0 = build_initial(cutoff, cfg.params["initial"], stream.child(900))
    n = max(2, round(cfg.numerics["t_final"] / integ.dt))
    center = solve_skeleton(u0, ControlPath.zero(cutoff, integ.dt, n), integ)
    if cfg.io["dump_trajectories"] and run_dir:
        from .dynamics import save_trajectory

        save_trajectory(center, os.path.join(run_dir, "center.csv"))
    radii = sorted(cfg.params["radii"])
    first = tube_probability(
        u0, center, radii[0], cfg.spec(), integ, cfg.statistics["replicas"], stream.child(1)
    )
    rows = []
    last_p = -1.0
    monotone = True
    for radius in radii:
        rep = first.at_radius(radius)
        monotone = monotone and rep.p_hat >= last_p
        last_p = rep.p_hat
        rows.append(
            {
                "radius": radius,
                "p_hat": rep.p_hat,
                "ci_low": rep.ci_low,
                "ci_high": rep.ci_high,
                "hits": rep.hits,
                "replicas": rep.replicas,
            }
        )
    summary = {"monotone_in_radius": monotone, "passed": monotone}
    return rows, summary


_RUNNERS = {
    "ou_checks": _run_ou_checks,
    "renorm": _run_renorm,
    "lp_moment": _run_lp_moment,
    "besov_moment": _run_besov_moment,
    "converge_h": _run_converge_h,
    "converge_besov": _run_converge_besov,
    "wick_decay": _run_wick_decay,
    "instanton": _run_instanton,
    "laplace": _run_laplace,
    "tube": _run_tube,
}


# --------------------------------------------------------------------------
# persistence


def _format_cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv_atomic(path, rows):
    if not rows:
        raise ValueError("refusing to write an empty results table")
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_format_cell(row.get(c)) for c in cols))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_json_atomic(path, obj):
    _atomic_write(path, json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunRecord:
    kind: str
    config_hash: str
    run_dir: str
    passed: bool
    version: str = __version__
    created: str = ""
    seed: int = 0
    seed_scheme: str = "SeedSequence(seed, spawn_key=stream path); replica r of sweep member i draws from child(i).child(r)"
    results_csv: str = ""
    summary_json: str = ""

    def to_dict(self):
        return dataclasses.asdict(self)


def run(config: ExperimentConfig, outdir: str) -> RunRecord:
    """Execute one experiment; writes results into <outdir>/<kind>-<hash12>."""
    h = config.config_hash()
    run_dir = os.path.join(outdir, f"{config.kind}-{h[:12]}")
    os.makedirs(run_dir, exist_ok=True)
    rows, summary = _RUNNERS[config.kind](config, run_dir)
    summary = {
        "kind": config.kind,
        "config_hash": h,
        "seed": config.statistics["seed"],
        **summary,
    }
    results_csv = os.path.join(run_dir, "results.csv")
    summary_json = os.path.join(run_dir, "summary.json")
    write_csv_atomic(results_csv, rows)
    write_json_atomic(summary_json, summary)
    _atomic_write(os.path.join(run_dir, "config.json"), config.canonical_json() + "\n")
    record = RunRecord(
        kind=config.kind,
        config_hash=h,
        run_dir=run_dir,
        passed=bool(summary.get("passed", True)),
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
        seed=config.statistics["seed"],
        results_csv=results_csv,
        summary_json=summary_json,
    )
    write_json_atomic(os.path.join(run_dir, "record.json"), record.to_dict())
    return record


def set_by_path(raw: dict, dotted: str, value):
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def _sweep_member(job):
    value, raw, outdir = job
    config = ExperimentConfig.from_dict(raw)
    return value, run(config, outdir)


def sweep(raw_config: dict, axis: str, values, outdir: str, workers: int = 1):
    """Independent runs along one config axis; returns the list of records.

    Member failures are recorded per member and do not abort the others.
    Each member writes only into its own hash-named directory, so the pool
    members share no state and the merged output is order-independent.
    """
    import concurrent.futures
    import copy

    jobs = []
    for v in values:
        raw = copy.deepcopy(raw_config)
        set_by_path(raw, axis, v)
        jobs.append((v, raw, outdir))
    records, errors = [], []

    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_sweep_member, job) for job in jobs]
            for job, fut in zip(jobs, futures):
                try:
                    records.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - reported per member
                    errors.append((job[0], str(exc)))
    else:
        for job in jobs:
            try:
                records.append(_sweep_member(job))
            except Exception as exc:  # noqa: BLE001 - reported per member
                errors.append((job[0], str(exc)))
    merged = [
        {"axis": axis, "value": v, "run_dir": r.run_dir, "passed": r.passed}
        for v, r in records
    ] + [{"axis": axis, "value": v, "run_dir": "ERROR: " + msg, "passed": False} for v, msg in errors]
    if merged:
        write_csv_atomic(os.path.join(outdir, "sweep.csv"), merged)
    return [r for _, r in records], errors


def report(run_dirs, out_path=None):
    """Merge finished runs of one kind into a plot-ready table and a summary."""
    if not run_dirs:
        raise ValueError("no runs given")
    summaries = []
    tables = []
    for d in run_dirs:
        with open(os.path.join(d, "summary.json")) as fh:
            summaries.append(json.load(fh))
        with open(os.path.join(d, "results.csv")) as fh:
            lines = fh.read().strip().split("\n")
        cols = lines[0].split(",")
        for ln in lines[1:]:
            row = dict(zip(cols, ln.split(",")))
            row["run_dir"] = d
            tables.append(row)
    kinds = {s["kind"] for s in summaries}
    if len(kinds) != 1:
        raise ValueError(f"cannot merge mixed experiment kinds: {sorted(kinds)}")
    kind = kinds.pop()
    text = [f"experiment kind: {kind}", f"runs merged: {len(run_dirs)}"]
    for d, s in zip(run_dirs, summaries):
        detail = {k: v for k, v in s.items() if k not in ("kind", "config_hash")}
        text.append(f"  {d}: {json.dumps(detail, sort_keys=True, default=_json_default)}")
    all_passed = all(s.get("passed", True) for s in summaries)
    text.append(f"all passed: {all_passed}")
    if out_path:
        write_csv_atomic(out_path, tables)
    return "\n".join(text), all_passed
