"""Named experiments: the comparison tables, the identification trace and figure data.

Each experiment takes a parameter dict (defaults below, overridable), a master
seed and an output directory, writes CSV files there and returns a summary
dict.  Per-repeat randomness is derived from ``(seed, experiment key, repeat)``
so results do not depend on how repeats are distributed over workers.
"""

from __future__ import annotations

import csv
import json
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import implicit_sampler as isam
from .filter_engine import FilterConfig, run_filter
from .oracle_diagnostics import build_quadrature, equal_probability_partition, rn_histogram, write_histogram_csv
from .param_ident import RmConfig, identify
from .sde_model import OBSERVATIONS, double_well, generate_synthetic, linear_obs, potential, zero_drift


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _workers() -> int:
    return max(1, int(os.environ.get("IPF_THREADS", "1")))


def _pmap(fn, args, workers=None):
    workers = workers or _workers()
    if workers <= 1 or len(args) < 2:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args), chunksize=max(1, len(args) // (4 * workers))))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")


# ---------------------------------------------------------------------------
# Table I: double-well reconstruction error


def _table1_repeat(seed, r, M, p):
    model = double_well(p["sigma"], p["dt"], p["literal_drift"])
    obs = linear_obs(p["s"])
    x0 = np.array([p["x0"]])
    traj, data = generate_synthetic(model, obs, x0, p["n_steps"], derive_seed(seed, 1, r))
    cfg = FilterConfig(M, p["proposal"], resample_every=1, seed=derive_seed(seed, 2, r, M), workers=1)
    out = run_filter(model, obs, data, cfg, x0)
    est = out.means[-1, 0]
    return data[-1, 0] - est, traj.states[-1, 0] - est


def table1(p, seed, out_dir):
    rows = []
    for M in p["m_values"]:
        res = np.array(_pmap(_table1_repeat, [(seed, r, M, p) for r in range(p["repeats"])]))
        obs_d, truth_d = (res[:, 0], res[:, 1]) if p["discrepancy"] == "observed" else (res[:, 1], res[:, 0])
        R = obs_d.size
        mean, mean_se = _mean_se(obs_d)
        var = float(obs_d.var(ddof=1))
        var_se = var * math.sqrt(2.0 / (R - 1)) if R > 1 else float("nan")
        rows.append([M, mean, mean_se, var, var_se, float(truth_d.mean()), float(truth_d.var(ddof=1)) if R > 1 else float("nan")])
    other = "truth" if p["discrepancy"] == "observed" else "observed"
    _write_rows(
        Path(out_dir) / "table1.csv",
        ["M", "mean", "mean_se", "variance", "variance_se", f"{other}_mean", f"{other}_variance"],
        rows,
    )
    return {"rows": rows}


# ---------------------------------------------------------------------------
# Tables II and IV: Radon-Nikodym histograms


def _static(p):
    obs = OBSERVATIONS[p["obs"]](p["s"])
    return obs, isam.static_objective(obs, p["b"], p["sigma"])


def _histograms(p, seed, out_dir, name):
    obs, obj = _static(p)
    q = build_quadrature(obj)
    Y = equal_probability_partition(q, p["K"])
    L = p["L"]
    prior = math.sqrt(p["sigma"]) * np.random.default_rng(derive_seed(seed, 3)).standard_normal(L)
    xi = np.random.default_rng(derive_seed(seed, 4)).standard_normal((L, 1))
    sol = isam.sample(obj, xi)
    pos = np.asarray(sol.position)[:, 0]
    lw = sol.log_weight - np.max(sol.log_weight)
    h_std = rn_histogram(prior, partition=Y)
    h_imp = rn_histogram(pos, partition=Y)
    h_imp_w = rn_histogram(pos, np.exp(lw), partition=Y)
    fs, fi, fw = h_std.frequencies, h_imp.frequencies, h_imp_w.frequencies
    extra = {
        "se_standard": np.sqrt(fs * (1 - fs) / L),
        "se_implicit": np.sqrt(fi * (1 - fi) / L),
        "freq_implicit_weighted": fw,
    }
    write_histogram_csv(Path(out_dir) / f"{name}.csv", Y, fs, fi, extra)
    return {"partition": Y, "standard": fs, "implicit": fi, "implicit_weighted": fw, "method": sol.method}


def table2(p, seed, out_dir):
    return _histograms(p, seed, out_dir, "table2")


def table4(p, seed, out_dir):
    return _histograms(p, seed, out_dir, "table4")


# ---------------------------------------------------------------------------
# Tables III and V: posterior mean estimates


def _mean_repeat(seed, r, b, proposal, p):
    model = zero_drift(1, p["sigma"], 1.0)
    obs = OBSERVATIONS[p["obs"]](p["s"])
    cfg = FilterConfig(p["particles"], proposal, resample_every=0, seed=derive_seed(seed, 5, r, int(round(b * 1000))), workers=1)
    out = run_filter(model, obs, np.array([[b]]), cfg, np.zeros(1))
    return float(out.means[-1, 0])


def _mean_table(p, seed, out_dir, name):
    rows = []
    for b in p["b_values"]:
        exact = build_quadrature(isam.static_objective(OBSERVATIONS[p["obs"]](p["s"]), b, p["sigma"])).mean()
        cols = [b, exact]
        for proposal in ("sir", "implicit_auto"):
            est = _pmap(_mean_repeat, [(seed, r, b, proposal, p) for r in range(p["repeats"])])
            cols += list(_mean_se(est))
        rows.append(cols)
    _write_rows(Path(out_dir) / f"{name}.csv", ["b", "exact", "standard", "standard_se", "implicit", "implicit_se"], rows)
    return {"rows": rows}


def table3(p, seed, out_dir):
    return _mean_table(p, seed, out_dir, "table3")


def table5(p, seed, out_dir):
    return _mean_table(p, seed, out_dir, "table5")


# ---------------------------------------------------------------------------
# Table VI: noise identification


def _table6_trial(seed, k, p):
    s_star = p["sigma_star"]
    template = zero_drift(1, s_star, p["dt"])
    obs = linear_obs(p["s"])
    _, data = generate_synthetic(template, obs, np.zeros(1), p["n_steps"], derive_seed(seed, 6, k))
    cfg = RmConfig(
        p["start_factor"] * s_star,
        C=p["C"],
        max_iterations=p["iterations"],
        segment_length=p["segment_length"],
        n_particles=p["particles"],
        n_steps=p["n_steps"],
        seed=derive_seed(seed, 7, k),
        update=p["update"],
    )
    tr = identify(template, obs, data, cfg)
    return [s / s_star for s in tr.sigmas], list(tr.T_values)


def table6(p, seed, out_dir):
    trials = _pmap(_table6_trial, [(seed, k, p) for k in range(p["trials"])])
    n_rows = max(len(t[0]) for t in trials)
    rows = []
    for n in range(n_rows):
        first = trials[0][0][n] if n < len(trials[0][0]) else float("nan")
        T = trials[0][1][n] if n < len(trials[0][1]) else float("nan")
        # trials that stopped early keep their last value
        vals = [t[0][min(n, len(t[0]) - 1)] for t in trials]
        rows.append([n, first, T, *_mean_se(vals)])
    _write_rows(Path(out_dir) / "table6.csv", ["iteration", "sigma_over_sigma_star", "T", "trial_mean", "trial_se"], rows)
    finals = np.array([t[0][-1] for t in trials])
    lo, hi = p["band"]
    frac = float(np.mean((finals >= lo) & (finals <= hi)))
    _write_rows(Path(out_dir) / "table6_trials.csv", ["trial", "final_sigma_over_sigma_star"], list(enumerate(finals)))
    return {"rows": rows, "finals": finals, "fraction_in_band": frac}


# ---------------------------------------------------------------------------
# figure data


def figure_data(p, seed, out_dir):
    out_dir = Path(out_dir)
    x = np.linspace(-1.5, 1.5, p["grid_points"])
    _write_rows(out_dir / "fig1_potential.csv", ["x", "V"], zip(x, potential(x)))

    obs = OBSERVATIONS["cubic"](p["s"])
    obj = isam.static_objective(obs, p["b_fig3"], p["sigma_fig3"])
    o1 = obj.component(0)
    z, fz = isam.find_minimum(obj)
    sub = isam.build_u_substitute(o1, z[0] if np.ndim(z) else z, fz)
    xs = np.linspace(-3, 3, p["grid_points"])
    F = np.ravel(obj.eval(xs[:, None]))
    F0 = np.ravel(sub.f0_eval(xs))
    _write_rows(out_dir / "fig3_substitute.csv", ["x", "F", "F0"], zip(xs, F, F0))

    model = double_well(p["sigma"], p["dt"])
    lobs = linear_obs(p["s_fig2"])
    traj, data = generate_synthetic(model, lobs, np.zeros(1), p["n_steps"], derive_seed(seed, 8))
    out = run_filter(model, lobs, data, FilterConfig(p["particles"], seed=derive_seed(seed, 9)), np.zeros(1))
    _write_rows(out_dir / "fig2_reconstruction.csv", ["t", "truth", "estimate", "estimate_sd"], zip(traj.times, traj.states[:, 0], out.means[:, 0], np.sqrt(out.variances[:, 0])))
    zs = z[0] if np.ndim(z) else z
    return {
        "F0_min": float(np.ravel(sub.f0_eval(np.atleast_1d(zs)))[0]),
        "F0_grid_min": float(np.min(F0)),
        "F_min": float(fz),
        "F_grid_max": float(np.max(F)),
    }


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class Experiment:
    name: str
    run: object
    defaults: dict
    fast: dict = field(default_factory=dict)
    particles_key: str | None = "particles"
    repeats_key: str | None = "repeats"
    description: str = ""


EXPERIMENTS = {
    e.name: e
    for e in [
        Experiment(
            "table1",
            table1,
            dict(m_values=[100, 50, 20, 10, 5, 1], repeats=10_000, sigma=0.1, s=0.025, dt=0.01, n_steps=100, x0=0.0,
                 literal_drift=False, discrepancy="observed", proposal="implicit_auto"),
            fast=dict(repeats=1000),
            particles_key="m_values",
            description="double-well reconstruction error vs particle count",
        ),
        Experiment("table2", table2, dict(b=2.0, sigma=0.1, s=0.1, obs="linear", L=10_000, K=10),
                   particles_key="L", repeats_key=None, description="RN histogram, linear observation"),
        Experiment("table3", table3, dict(b_values=[0.0, 0.5, 1.0, 1.5, 2.0], particles=30, repeats=100, sigma=0.1, s=0.1, obs="linear"),
                   description="posterior mean estimates, linear observation"),
        Experiment("table4", table4, dict(b=1.5, sigma=0.1, s=0.1, obs="cubic", L=10_000, K=10),
                   particles_key="L", repeats_key=None, description="RN histogram, cubic observation"),
        Experiment("table5", table5, dict(b_values=[0.0, 0.5, 1.0, 1.5, 2.0, 2.5], particles=1000, repeats=20, sigma=0.1, s=0.1, obs="cubic"),
                   fast=dict(repeats=5), description="posterior mean estimates, cubic observation"),
        Experiment("table6", table6, dict(sigma_star=0.01, s=1e-4, dt=0.01, n_steps=100, particles=50, start_factor=10.0, C=4.0,
                                          iterations=13, segment_length=0, update="log", trials=20, band=[0.9, 1.5]),
                   fast=dict(trials=5), repeats_key="trials", description="Robbins-Monro noise identification trace"),
        Experiment("figure_data", figure_data, dict(grid_points=601, s=0.1, b_fig3=1.0, sigma_fig3=0.1, sigma=0.1, dt=0.01,
                                                    s_fig2=0.025, n_steps=100, particles=50),
                   repeats_key=None, description="potential, F and its substitute, one reconstruction"),
    ]
}


def coerce(value, default):
    """Convert an override to the type of the default value."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"not an integer: {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        items = value if isinstance(value, (list, tuple)) else [v for v in str(value).replace(";", ",").split(",") if v.strip()]
        proto = default[0] if default else 0.0
        return [coerce(v, proto) for v in items]
    return str(value)


def resolve_params(name, overrides=None, fast=False, particles=None, repeats=None):
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; known: {', '.join(EXPERIMENTS)}")
    exp = EXPERIMENTS[name]
    p = dict(exp.defaults)
    if fast:
        p.update(exp.fast)
    for k, v in (overrides or {}).items():
        if k not in p:
            raise KeyError(f"{name} has no parameter {k!r}; known: {', '.join(sorted(p))}")
        p[k] = coerce(v, p[k])
    if particles is not None:
        if exp.particles_key is None:
            raise KeyError(f"{name} takes no particle count")
        if exp.particles_key == "m_values":
            if particles not in p["m_values"]:
                p["m_values"] = sorted(set(p["m_values"]) | {particles}, reverse=True)
        else:
            p[exp.particles_key] = particles
    if repeats is not None:
        if exp.repeats_key is None:
            raise KeyError(f"{name} takes no repeat count")
        p[exp.repeats_key] = repeats
    return p


def _git_describe():
    try:
        return subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=10, cwd=Path(__file__).parent
        ).stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def run_experiment(name, params, seed, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    summary = EXPERIMENTS[name].run(params, seed, out_dir)
    manifest = {
        "experiment": name,
        "seed": seed,
        "params": params,
        "version": __version__,
        "git": _git_describe(),
        "wall_time_s": round(time.time() - t0, 3),
        "workers": _workers(),
    }
    with open(out_dir / f"{name}_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return summary
