"""Noise-level identification by Robbins-Monro iteration on a filter statistic.

For a trial diffusion level ``sigma`` the filter is run over a fixed data set
without resampling, and ``T`` measures the lag-1 autocorrelation of the
increments of its posterior-mean path.  Too large a ``sigma`` makes the
estimate chase the observation noise (negatively correlated increments); too
small a ``sigma`` makes it lag behind the data (positively correlated
increments).  The iteration drives ``T`` to zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .filter_engine import Ensemble, FilterConfig, Proposal, filter_step, run_filter
from .sde_model import ObservationModel, SdeModel

UPDATES = ("log", "relative", "literal")


class DegenerateIncrements(ValueError):
    pass


class Divergence(RuntimeError):
    pass


@dataclass
class RmConfig:
    """Settings for one identification run.

    ``update`` selects the step:

    - ``"log"``: ``sigma <- sigma * exp(alpha_n T)``
    - ``"relative"``: ``sigma <- sigma * (1 + alpha_n T)``
    - ``"literal"``: ``sigma <- sigma - alpha_n T`` in absolute units

    All are followed by the projection ``sigma <- max(sigma, floor * sigma_prev)``.
    """

    sigma_init: float
    C: float = 4.0
    alpha1: float = 1.0
    max_iterations: int = 15
    segment_length: int = 0  # 0: no segmentation
    n_particles: int = 50
    n_steps: int = 100
    seed: int = 0
    proposal: str = "implicit_auto"
    update: str = "log"
    floor: float = 1e-3
    rel_tol: float = 1e-3
    patience: int = 3

    def __post_init__(self):
        if not self.sigma_init > 0:
            raise ValueError("sigma_init must be positive")
        if self.update not in UPDATES:
            raise ValueError(f"update must be one of {UPDATES}")
        if self.segment_length and self.segment_length < 3:
            raise ValueError("segments need at least 3 steps")

    def alpha(self, n: int) -> float:
        return self.alpha1 / n


@dataclass
class RmTrace:
    sigmas: list = field(default_factory=list)  # sigma_1, sigma_2, ...
    T_values: list = field(default_factory=list)  # T(sigma_n), one per completed filter run
    converged: bool = False

    @property
    def final(self) -> float:
        return self.sigmas[-1]

    def to_csv(self, path, sigma_star: float = 1.0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "sigma_over_sigma_star", "T"])
            for n, s in enumerate(self.sigmas):
                t = self.T_values[n] if n < len(self.T_values) else float("nan")
                w.writerow([n, repr(s / sigma_star), repr(float(t))])


def _t_sums(increments):
    d = np.asarray(increments, dtype=float).reshape(-1)
    return float(np.sum(d[1:] * d[:-1])), float(np.sum(d[1:] ** 2)), float(np.sum(d[:-1] ** 2))


def _t_from_sums(num, s_now, s_prev, C):
    if s_now == 0 or s_prev == 0:
        raise DegenerateIncrements("increments vanish; T is undefined")
    return C * num / math.sqrt(s_now * s_prev)


def statistic_T(increments, C: float = 4.0) -> float:
    """``C`` times the normalized lag-1 autocorrelation of the increments."""
    d = np.asarray(increments, dtype=float).reshape(-1)
    if d.size < 3:
        raise ValueError("need at least 3 increments")
    return _t_from_sums(*_t_sums(d), C)


def _model_for(template, sigma):
    if callable(template) and not isinstance(template, SdeModel):
        return template(sigma)
    return template.with_diffusion_scale(sigma)


def _next_sigma(cfg: RmConfig, sigma: float, T: float, n: int) -> float:
    a = cfg.alpha(n)
    if cfg.update == "log":
        # clamp so a huge step reports Divergence instead of OverflowError
        new = sigma * math.exp(min(a * T, 700.0))
    elif cfg.update == "relative":
        new = sigma * (1.0 + a * T)
    else:
        new = sigma - a * T
    return max(new, cfg.floor * sigma)


def _run_T(template, obs, data, cfg: RmConfig, sigma: float, n: int, x0) -> float:
    """``T`` for one filter run at ``sigma``; the run seed is keyed by ``n``."""
    model = _model_for(template, sigma)
    fcfg = FilterConfig(cfg.n_particles, cfg.proposal, resample_every=0, backward_lag=0, seed=_run_seed(cfg, n))
    if cfg.segment_length:
        return _segmented_T(model, obs, data, cfg, fcfg, x0)
    out = run_filter(model, obs, data, fcfg, x0, n_steps=cfg.n_steps)
    return statistic_T(np.diff(out.means, axis=0)[:, 0], cfg.C)


def _run_seed(cfg, n):
    return int(np.random.SeedSequence([cfg.seed, n]).generate_state(1)[0])


def _segmented_T(model, obs, data, cfg: RmConfig, fcfg: FilterConfig, x0) -> float:
    stride = obs.obs_stride
    N, L = cfg.n_steps, cfg.segment_length
    resampling = FilterConfig(fcfg.n_particles, fcfg.proposal, resample_every=1, backward_lag=0, seed=fcfg.seed)
    start = Ensemble.start(x0, fcfg.n_particles)
    num = s_now = s_prev = 0.0
    data = np.atleast_2d(data)

    def b_at(step):
        return data[step // stride - 1] if step % stride == 0 else None

    while start.step < N:
        stop = min(start.step + L, N)
        ens, means = start, [start.mean()[0]]
        while ens.step < stop:
            ens = filter_step(ens, b_at(ens.step + 1), model, obs, fcfg)
            means.append(ens.stats["mean"][0])
        a, b, c = _t_sums(np.diff(means))
        num, s_now, s_prev = num + a, s_now + b, s_prev + c
        if stop < N:
            # same noise keys, now resampling every step
            ens = start
            while ens.step < stop:
                ens = filter_step(ens, b_at(ens.step + 1), model, obs, resampling)
            start = ens
        else:
            start = ens
    return _t_from_sums(num, s_now, s_prev, cfg.C)


def identify(model_template, obs: ObservationModel, data, cfg: RmConfig, x0=0.0) -> RmTrace:
    """Robbins-Monro search for the diffusion level that makes ``E[T] = 0``.

    ``model_template`` is a constant-diffusion :class:`SdeModel` (its level is
    replaced) or a callable ``sigma -> SdeModel``.  The data stay fixed over
    the iterations; each filter run uses fresh, keyed randomness.
    """
    trace = RmTrace([float(cfg.sigma_init)])
    sigma = float(cfg.sigma_init)
    lo, hi = 1e-6 * cfg.sigma_init, 1e3 * cfg.sigma_init
    quiet = 0
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    for n in range(1, cfg.max_iterations + 1):
        T = _run_T(model_template, obs, data, cfg, sigma, n, x0)
        new = _next_sigma(cfg, sigma, T, n)
        trace.T_values.append(T)
        trace.sigmas.append(new)
        if not lo <= new <= hi:
            raise Divergence(f"sigma left [{lo:.3g}, {hi:.3g}] at iteration {n}: {new:.3g}")
        quiet = quiet + 1 if abs(new - sigma) / sigma < cfg.rel_tol else 0
        sigma = new
        if quiet >= cfg.patience:
            trace.converged = True
            break
    return trace


def segmented_identify(model_template, obs: ObservationModel, data, cfg: RmConfig, x0=0.0) -> RmTrace:
    """:func:`identify` with ``T`` pooled over segments of ``cfg.segment_length`` steps."""
    if not cfg.segment_length:
        raise ValueError("segment_length must be set")
    return identify(model_template, obs, data, cfg, x0)


def expected_T(model_template, obs, data_sets, cfg: RmConfig, sigma: float, x0=0.0):
    """Mean and standard error of ``T(sigma)`` over data sets (one run each)."""
    vals = np.array([_run_T(model_template, obs, d, cfg, sigma, k + 1, np.atleast_1d(x0)) for k, d in enumerate(data_sets)])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))
