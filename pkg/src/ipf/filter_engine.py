"""Sequential filtering with implicit proposals and the standard SIR baseline.

Randomness is addressed by key: the reference draws for step ``n`` come from
``stream(seed, NOISE_KEY, n)`` as an ``(M, m)`` block whose row ``i`` belongs
to particle ``i``, and resampling uniforms from ``stream(seed, RESAMPLE_KEY, n)``.
Splitting the particles over worker threads therefore cannot change the output.
"""

from __future__ import annotations

import csv
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import implicit_sampler as isam
from .sde_model import ObservationModel, SdeModel, euler_step, observation_logdensity, stream

NOISE_KEY = 1
RESAMPLE_KEY = 2
BACKWARD_KEY = 3


def _lse(a):
    return float(np.logaddexp.reduce(np.asarray(a, dtype=float).reshape(-1)))


class Proposal(str, Enum):
    IMPLICIT_A = "implicit_a"
    IMPLICIT_B = "implicit_b"
    IMPLICIT_AUTO = "implicit_auto"
    STANDARD_SIR = "sir"

    @property
    def solver_mode(self) -> str:
        return {"implicit_a": "A", "implicit_b": "B", "implicit_auto": "auto"}[self.value]


class WeightCollapse(RuntimeWarning):
    """All normalized weight sits on one particle."""


@dataclass
class FilterConfig:
    n_particles: int = 100
    proposal: Proposal | str = Proposal.IMPLICIT_AUTO
    resample_every: int = 1  # 0 = never
    backward_lag: int = 2
    seed: int = 0
    workers: int | None = None  # None: IPF_THREADS or 1
    joint_gaps: bool = True  # sample the states between sparse observations jointly

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.resample_every < 0 or self.backward_lag < 0:
            raise ValueError("resample_every and backward_lag must be >= 0")
        self.proposal = Proposal(self.proposal)

    @property
    def n_workers(self) -> int:
        if self.workers is not None:
            return max(1, int(self.workers))
        return max(1, int(os.environ.get("IPF_THREADS", "1")))


@dataclass
class Ensemble:
    positions: np.ndarray  # (M, m)
    log_weights: np.ndarray  # (M,), normalized so that logsumexp = 0
    step: int = 0
    history: list = field(default_factory=list)  # past positions, oldest first, aligned with particles
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if self.log_weights.shape[0] != self.positions.shape[0]:
            raise ValueError("one log weight per particle")

    @classmethod
    def start(cls, x0, n_particles: int) -> "Ensemble":
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim == 2:
            if x0.shape[0] != n_particles:
                raise ValueError("initial positions must have one row per particle")
            pos = x0.copy()
        else:
            pos = np.tile(np.atleast_1d(x0), (n_particles, 1))
        ens = cls(pos, np.full(n_particles, -np.log(n_particles)))
        ens.stats = _stats(ens)
        return ens

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def weights(self):
        return np.exp(self.log_weights - _lse(self.log_weights))

    def mean(self):
        return self.weights @ self.positions

    def var(self):
        w = self.weights
        d = self.positions - w @ self.positions
        return w @ (d * d)

    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w * w))

    def entropy(self) -> float:
        w = self.weights
        nz = w[w > 0]
        return float(-np.sum(nz * np.log(nz)))


def _stats(ens):
    w = ens.weights
    mean = w @ ens.positions
    d = ens.positions - mean
    nz = w[w > 0]
    return {"mean": mean, "var": w @ (d * d), "ess": float(1.0 / np.sum(w * w)), "entropy": float(-np.sum(nz * np.log(nz)))}


def _normalize(logw):
    logw = np.asarray(logw, dtype=float)
    if not np.any(np.isfinite(logw)):
        raise FloatingPointError("all particle weights are zero")
    return logw - _lse(logw)


@dataclass
class FilterOutput:
    times: np.ndarray
    means: np.ndarray  # (n_steps + 1, m)
    variances: np.ndarray
    ess: np.ndarray
    entropy: np.ndarray
    final: Ensemble
    truth: np.ndarray | None = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            m = self.means.shape[1]
            head = ["step", "t"]
            head += [f"truth{k}" for k in range(m)] if self.truth is not None else []
            head += [f"estimate{k}" for k in range(m)] + [f"variance{k}" for k in range(m)] + ["ess", "entropy"]
            w.writerow(head)
            for n in range(self.means.shape[0]):
                row = [n, repr(float(self.times[n]))]
                if self.truth is not None:
                    row += [repr(float(v)) for v in self.truth[n]]
                row += [repr(float(v)) for v in self.means[n]] + [repr(float(v)) for v in self.variances[n]]
                row += [repr(float(self.ess[n])), repr(float(self.entropy[n]))]
                w.writerow(row)


# ---------------------------------------------------------------------------
# steps


def _solve_batched(obj, xi, mode, workers):
    n = xi.shape[0]
    if workers <= 1 or n < 2 * workers:
        return isam.sample(obj, xi, mode)
    chunks = [c for c in np.array_split(np.arange(n), workers) if c.size]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: isam.sample(obj.take(c), xi[c], mode), chunks))
    return isam.ImplicitSolution(
        np.concatenate([p.position for p in parts]),
        np.concatenate([np.ravel(p.phi) for p in parts]),
        np.concatenate([np.ravel(p.log_jacobian) for p in parts]),
        np.concatenate([np.ravel(p.residual) for p in parts]),
        np.concatenate([np.ravel(p.iterations) for p in parts]),
        "/".join(sorted({m for p in parts for m in p.method.split("/")})),
    )


def _map_particles(fn, n, workers):
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def _advance(ens, new_pos, log_inc, cfg, steps=1):
    history = (ens.history + [ens.positions])[-cfg.backward_lag :] if cfg.backward_lag else []
    out = Ensemble(new_pos, _normalize(ens.log_weights + log_inc), ens.step + steps, history)
    out.stats = _stats(out)
    if cfg.resample_every and out.step % cfg.resample_every == 0:
        out = resample(out, stream(cfg.seed, RESAMPLE_KEY, out.step))
    return out


def filter_step(ens: Ensemble, b_next, model: SdeModel, obs: ObservationModel, cfg: FilterConfig, rng=None) -> Ensemble:
    """Advance one step with the implicit proposal (or SIR if configured).

    ``b_next=None`` means no observation at the new time; the proposal then
    samples the transition density alone.  Weight statistics are recorded in
    ``stats`` before any scheduled resampling.
    """
    if cfg.proposal is Proposal.STANDARD_SIR:
        return standard_sir_step(ens, b_next, model, obs, rng, cfg)
    rng = rng if rng is not None else stream(cfg.seed, NOISE_KEY, ens.step + 1)
    xi = rng.standard_normal((ens.size, model.dim))
    obj = isam.build_objective(model, obs, ens.positions, b_next, ens.step * model.dt)
    sol = _solve_batched(obj, xi, cfg.proposal.solver_mode, cfg.n_workers)
    out = _advance(ens, np.asarray(sol.position), sol.log_weight, cfg)
    out.stats["method"] = sol.method
    return out


def standard_sir_step(ens: Ensemble, b_next, model: SdeModel, obs: ObservationModel, rng=None, cfg: FilterConfig | None = None) -> Ensemble:
    """Propagate with the dynamics and weight by the observation likelihood."""
    cfg = cfg or FilterConfig(ens.size, Proposal.STANDARD_SIR, resample_every=0)
    rng = rng if rng is not None else stream(cfg.seed, NOISE_KEY, ens.step + 1)
    noise = rng.standard_normal((ens.size, model.dim))
    x = euler_step(model, ens.positions, ens.step * model.dt, noise)
    log_inc = 0.0 if b_next is None else observation_logdensity(obs, x, b_next)
    out = _advance(ens, x, log_inc, cfg)
    w_max = float(np.max(np.exp(ens.log_weights + log_inc - _lse(ens.log_weights + log_inc))))
    if ens.size > 1 and w_max > 1.0 - 1e-9:
        warnings.warn(f"weight collapse at step {out.step}: max weight {w_max:.12f}", WeightCollapse, stacklevel=2)
    return out


def resample(ens: Ensemble, rng) -> Ensemble:
    """Multinomial resampling by inverting the cumulative weights.

    Offspring of particle ``i`` are the uniforms ``theta`` with
    ``S_{i-1} / A < theta <= S_i / A`` where ``S`` are partial weight sums and
    ``A`` their total.
    """
    w = ens.weights
    cum = np.cumsum(w)
    theta = rng.random(ens.size)
    idx = np.minimum(np.searchsorted(cum / cum[-1], theta, side="left"), ens.size - 1)
    out = Ensemble(
        ens.positions[idx],
        np.full(ens.size, -np.log(ens.size)),
        ens.step,
        [h[idx] for h in ens.history],
        dict(ens.stats),
    )
    out.stats["resampled"] = True
    return out


def backward_resample(ens: Ensemble, model: SdeModel, obs: ObservationModel | None, b_mid, cfg: FilterConfig, particles=None, rng=None, proposal: str = "auto"):
    """Re-draw ``X^n`` given ``X^{n-1}``, ``X^{n+1}`` and the observation at ``n``.

    ``ens.positions`` are ``X^{n+1}`` and the last two history entries are
    ``X^{n-1}``, ``X^n``.  Returns the updated ensemble and the log weight
    adjustment ``-phi + log J`` for each re-drawn particle.
    """
    if len(ens.history) < 2:
        raise ValueError("backward sampling needs two past ensembles in the history")
    idx = np.arange(ens.size) if particles is None else np.atleast_1d(particles)
    rng = rng if rng is not None else stream(cfg.seed, BACKWARD_KEY, ens.step)
    xi = rng.standard_normal((ens.size, model.dim))[idx]
    x_before = ens.history[-2][idx]
    x_after = ens.positions[idx]
    t_mid = (ens.step - 1) * model.dt
    obj = isam.backward_objective(model, obs, x_before, x_after, b_mid, t_mid)
    if obj.separable:
        sol = _solve_batched(obj, xi, proposal, cfg.n_workers)
        new_mid, log_adj = np.asarray(sol.position), sol.log_weight
    else:
        sols = _map_particles(
            lambda j: isam.sample(
                isam.backward_objective(model, obs, x_before[j], x_after[j], b_mid, t_mid), xi[j : j + 1], proposal
            ),
            idx.size,
            cfg.n_workers,
        )
        new_mid = np.concatenate([s.position for s in sols])
        log_adj = np.concatenate([np.ravel(s.log_weight) for s in sols])
    history = [h.copy() for h in ens.history]
    history[-1][idx] = new_mid
    return replace(ens, history=history), log_adj


def sparse_gap_step(ens: Ensemble, b_next, gap: int, model: SdeModel, obs: ObservationModel, cfg: FilterConfig, rng=None) -> Ensemble:
    """Advance ``gap`` steps to the next observation, sampling the path jointly.

    The reference draw is ``(gap * m)``-dimensional per particle; the
    intermediate states are pushed onto the history.
    """
    if gap < 1:
        raise ValueError("gap must be >= 1")
    if gap == 1:
        return filter_step(ens, b_next, model, obs, cfg, rng)
    m = model.dim
    rng = rng if rng is not None else stream(cfg.seed, NOISE_KEY, ens.step + gap)
    xi = rng.standard_normal((ens.size, gap * m))
    t0 = ens.step * model.dt
    mode = cfg.proposal.solver_mode if cfg.proposal is not Proposal.STANDARD_SIR else "auto"

    # particles with the same starting point share one objective
    starts, owner = np.unique(ens.positions, axis=0, return_inverse=True)
    owner = np.ravel(owner)
    groups = [np.flatnonzero(owner == g) for g in range(starts.shape[0])]

    def one(g):
        obj = isam.path_objective(model, obs, starts[g], b_next, gap, t0)
        return isam.sample(obj, xi[groups[g]], mode)

    sols = _map_particles(one, len(groups), cfg.n_workers)
    path = np.empty((ens.size, gap * m))
    log_inc = np.empty(ens.size)
    for idx, sol in zip(groups, sols):
        path[idx] = np.reshape(sol.position, (idx.size, gap * m))
        log_inc[idx] = np.ravel(sol.log_weight)
    path = path.reshape(ens.size, gap, m)
    post = _normalize(ens.log_weights + log_inc)
    intermediate = [_stats(Ensemble(path[:, j, :], post, ens.step + j + 1)) for j in range(gap - 1)]
    inter = Ensemble(path[:, -2, :], ens.log_weights, ens.step + gap - 1, ens.history + [ens.positions] + [path[:, j, :] for j in range(gap - 2)])
    out = _advance(inter, path[:, -1, :], log_inc, cfg)
    out.stats["method"] = "/".join(sorted({s.method for s in sols}))
    out.stats["intermediate"] = intermediate
    return out


# ---------------------------------------------------------------------------
# driver


def run_filter(
    model: SdeModel,
    obs: ObservationModel,
    observations,
    cfg: FilterConfig,
    x0,
    n_steps: int | None = None,
    truth=None,
    csv_path=None,
) -> FilterOutput:
    """Filter a full observation record.

    ``observations[j]`` observes step ``(j + 1) * obs.obs_stride``.  ``x0`` is
    the known initial state (or an ``(M, m)`` initial ensemble).
    """
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    stride = obs.obs_stride
    if n_steps is None:
        n_steps = observations.shape[0] * stride
    ens = Ensemble.start(x0, cfg.n_particles)
    rows = [ens.stats]
    joint = cfg.joint_gaps and stride > 1 and cfg.proposal is not Proposal.STANDARD_SIR
    while ens.step < n_steps:
        n_next = ens.step + 1
        if joint and ens.step % stride == 0 and ens.step + stride <= n_steps:
            b = observations[(ens.step + stride) // stride - 1]
            ens = sparse_gap_step(ens, b, stride, model, obs, cfg)
            rows.extend(ens.stats["intermediate"])
            rows.append(ens.stats)
            continue
        b = observations[n_next // stride - 1] if n_next % stride == 0 else None
        ens = filter_step(ens, b, model, obs, cfg)
        rows.append(ens.stats)
    times = model.dt * np.arange(len(rows))
    out = FilterOutput(
        times,
        np.array([r["mean"] for r in rows]),
        np.array([r["var"] for r in rows]),
        np.array([r["ess"] for r in rows]),
        np.array([r["entropy"] for r in rows]),
        ens,
        None if truth is None else np.asarray(truth, dtype=float),
    )
    if csv_path is not None:
        out.to_csv(csv_path)
    return out
