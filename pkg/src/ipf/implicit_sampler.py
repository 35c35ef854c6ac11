"""Implicit sampling: place a particle by solving ``F(X) - phi = |xi|^2 / 2``.

``F`` is minus the log of the (unnormalized) density a particle has to sample.
Given a standard-normal reference draw ``xi`` the solvers here return a
position ``X``, the additive factor ``phi`` and the Jacobian ``J`` of the map
``xi -> X``; the particle then carries the importance weight ``exp(-phi) J``.

Objectives built from Gaussian factors with elementwise functions are
*separable* (a sum of one-dimensional pieces, one per component) and
*batched*: their parameters carry a leading batch axis that broadcasts against
the positions, so one objective object describes a whole ensemble of
per-particle functions.  Every solver below works elementwise over that batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import optimize

from .sde_model import LOG_2PI, ObservationModel, SdeModel, observation_logdensity, transition_logdensity

Array = np.ndarray

RESIDUAL_TOL = 1e-10
RESIDUAL_TOL_MD = 1e-8
GRAD_TOL = 1e-8
_EPS = np.finfo(float).eps


class NonConvergence(RuntimeError):
    """Iteration did not reach the residual tolerance.

    ``mask`` marks the batch elements that failed, when known.
    """

    def __init__(self, msg, mask=None):
        super().__init__(msg)
        self.mask = mask


class NotUShaped(ValueError):
    def __init__(self, msg, mask=None):
        super().__init__(msg)
        self.mask = mask


class MinimizationFailure(RuntimeError):
    pass


class SingularJacobian(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True)
class GaussianTerm:
    """Factor ``exp(-sum_k (fun(X)_k - target_k)^2 / (2 var_k))``.

    ``fun`` acts elementwise; ``None`` is the identity.
    """

    target: Array
    var: Array
    fun: Callable[[Array], Array] | None = None
    dfun: Callable[[Array], Array] | None = None
    d2fun: Callable[[Array], Array] | None = None

    @property
    def linear(self) -> bool:
        return self.fun is None

    def parts(self, X):
        if self.fun is None:
            return X, np.ones_like(X), np.zeros_like(X)
        return self.fun(X), self.dfun(X), self.d2fun(X)

    def take(self, idx):
        return replace(self, target=_take(self.target, idx), var=_take(self.var, idx))

    def component(self, k):
        return replace(self, target=self.target[..., k : k + 1], var=self.var[..., k : k + 1])


def _take(a, idx):
    a = np.asarray(a)
    return a[idx] if a.ndim >= 2 else a


@dataclass(frozen=True)
class SampleObjective:
    """The per-particle function ``F``.

    Separable objectives are given by ``terms`` (plus an ``X``-independent
    ``const``); generic ones by ``eval_fn`` / ``grad_fn`` on ``(..., dim)``
    arrays.  ``context`` carries minimization starts (``"starts"``), a length
    scale (``"scale"``) and whatever the builder wants to record.
    """

    dim: int
    terms: tuple[GaussianTerm, ...] = ()
    const: Array | float = 0.0
    eval_fn: Callable[[Array], Array] | None = None
    grad_fn: Callable[[Array], Array] | None = None
    context: dict = field(default_factory=dict)

    @property
    def separable(self) -> bool:
        return self.eval_fn is None

    @property
    def linear(self) -> bool:
        return self.separable and all(t.linear for t in self.terms)

    @property
    def batch_shape(self) -> tuple:
        if not self.separable:
            return ()
        shapes = [np.shape(t.target)[:-1] for t in self.terms] + [np.shape(self.const)]
        return np.broadcast_shapes(*shapes)

    def component_values(self, X):
        X = np.asarray(X, dtype=float)
        out = 0.0
        for t in self.terms:
            u, _, _ = t.parts(X)
            out = out + (u - t.target) ** 2 / (2.0 * t.var)
        return out

    def component_grad(self, X):
        X = np.asarray(X, dtype=float)
        out = 0.0
        for t in self.terms:
            u, du, _ = t.parts(X)
            out = out + (u - t.target) * du / t.var
        return out

    def component_hess(self, X):
        X = np.asarray(X, dtype=float)
        out = 0.0
        for t in self.terms:
            u, du, d2u = t.parts(X)
            out = out + (du * du + (u - t.target) * d2u) / t.var
        return out

    def eval(self, X):
        X = np.asarray(X, dtype=float)
        if self.eval_fn is not None:
            return self.eval_fn(X)
        return np.sum(self.component_values(X), axis=-1) + self.const

    def grad(self, X):
        X = np.asarray(X, dtype=float)
        if self.grad_fn is not None:
            return self.grad_fn(X)
        if self.eval_fn is not None:
            return fd_grad(self.eval_fn, X)
        return self.component_grad(X) * np.ones_like(X)

    def component(self, k: int) -> "SampleObjective":
        """One-dimensional piece ``k`` of a separable objective (no constant)."""
        if not self.separable:
            raise ValueError("only separable objectives split into components")
        ctx = {}
        if "starts" in self.context:
            ctx["starts"] = [np.asarray(s)[..., k : k + 1] for s in self.context["starts"]]
        if "scale" in self.context:
            ctx["scale"] = np.asarray(self.context["scale"])[..., k : k + 1]
        return SampleObjective(1, tuple(t.component(k) for t in self.terms), 0.0, context=ctx)

    def take(self, idx) -> "SampleObjective":
        """Restrict a batched objective to the batch elements ``idx``."""
        ctx = dict(self.context)
        for key in ("starts",):
            if key in ctx:
                ctx[key] = [_take(s, idx) for s in ctx[key]]
        if "scale" in ctx:
            ctx["scale"] = _take(ctx["scale"], idx)
        const = np.asarray(self.const)
        return replace(
            self,
            terms=tuple(t.take(idx) for t in self.terms),
            const=const[idx] if const.ndim else const,
            context=ctx,
        )


def fd_grad(fun, X, eps=1e-6):
    X = np.asarray(X, dtype=float)
    g = np.empty_like(X)
    for k in range(X.shape[-1]):
        e = np.zeros(X.shape[-1])
        h = eps * (1.0 + np.abs(X[..., k]))
        e[k] = 1.0
        g[..., k] = (fun(X + (h[..., None] * e)) - fun(X - (h[..., None] * e))) / (2 * h)
    return g


def _obs_term(obs: ObservationModel, b):
    b = np.asarray(b, dtype=float)
    if obs.linear:
        return GaussianTerm(b, obs.noise_var)
    return GaussianTerm(b, obs.noise_var, obs.h, obs.h_deriv, obs.h_deriv2)


def _starts(mean, obs, b):
    starts = [mean]
    if obs is not None and b is not None and obs.h_inverse is not None:
        starts.append(np.broadcast_to(obs.h_inverse(np.asarray(b, dtype=float)), np.shape(mean)))
    return starts


def build_objective(model: SdeModel, obs: ObservationModel, x_prev, b_next, t: float) -> SampleObjective:
    """``F(X) = -log P(X | x_prev) - log P(b_next | X)`` for one step.

    ``x_prev`` may be ``(m,)`` or a batch ``(M, m)``; the result is batched the
    same way.  All normalizing constants are kept, because they differ between
    particles whenever the diffusion depends on the state.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    mean = model.step_mean(x_prev, t)
    var = model.step_variance(x_prev, t)
    if np.any(var <= 0):
        raise ValueError("transition variance must be positive")
    const = 0.5 * np.sum(np.log(var) + LOG_2PI, axis=-1)
    ctx = {"starts": _starts(mean, obs, b_next), "scale": np.sqrt(var), "x_prev": x_prev, "prior_mean": mean}
    if b_next is None:
        return SampleObjective(model.dim, (GaussianTerm(mean, var),), const, context=ctx)
    const = const + 0.5 * np.sum(np.log(obs.noise_var) + LOG_2PI)
    if obs.diagonal and obs.obs_dim == model.dim:
        return SampleObjective(model.dim, (GaussianTerm(mean, var), _obs_term(obs, b_next)), const, context=ctx)

    def f(X):
        return -transition_logdensity(model, x_prev, X, t) - observation_logdensity(obs, X, b_next)

    grad = None
    if obs.h_jac is not None:

        def grad(X):
            r = (obs.h(X) - b_next) / obs.noise_var
            return (X - mean) / var + np.einsum("...k,...km->...m", r, obs.h_jac(X))

    return SampleObjective(model.dim, (), 0.0, f, grad, context=ctx)


def static_objective(obs: ObservationModel, b, sigma: float, prior_mean=0.0) -> SampleObjective:
    """``F(x) = (x - prior_mean)^2 / (2 sigma) + (h(x) - b)^2 / (2 s)``.

    The one-step problem in which every particle starts at the same point;
    no constants are added.
    """
    m = obs.obs_dim
    mean = np.broadcast_to(np.asarray(prior_mean, dtype=float), (m,)).copy()
    var = np.full(m, float(sigma))
    b = np.broadcast_to(np.asarray(b, dtype=float), (m,)).copy()
    ctx = {"starts": _starts(mean, obs, b), "scale": np.sqrt(var), "prior_mean": mean}
    return SampleObjective(m, (GaussianTerm(mean, var), _obs_term(obs, b)), 0.0, context=ctx)


def backward_objective(model: SdeModel, obs: ObservationModel | None, x_before, x_after, b_mid, t_mid: float):
    """Three-factor ``F`` for re-drawing ``X^n`` between fixed neighbours.

    ``-log [P(X | x_before) P(b_mid | X) P(x_after | X)]``; ``b_mid=None``
    drops the observation factor.
    """
    x_before = np.asarray(x_before, dtype=float)
    x_after = np.asarray(x_after, dtype=float)
    t_prev = t_mid - model.dt
    mean = model.step_mean(x_before, t_prev)
    var = model.step_variance(x_before, t_prev)
    const = 0.5 * np.sum(np.log(var) + LOG_2PI, axis=-1)
    starts = [mean, x_after]
    have_obs = obs is not None and b_mid is not None
    if have_obs:
        const = const + 0.5 * np.sum(np.log(obs.noise_var) + LOG_2PI)
        starts += _starts(mean, obs, b_mid)[1:]
    ctx = {"starts": starts, "scale": np.sqrt(var)}
    diag_ok = not have_obs or (obs.diagonal and obs.obs_dim == model.dim)
    if model.additive_noise and model.elementwise_drift and model.drift_deriv is not None and diag_ok:
        v_fwd = model.step_variance(x_after, t_mid)
        const = const + 0.5 * np.sum(np.log(v_fwd) + LOG_2PI, axis=-1)
        dt = model.dt
        fwd = GaussianTerm(
            x_after,
            v_fwd,
            lambda X: X + model.drift(X, t_mid) * dt,
            lambda X: 1.0 + model.drift_deriv(X, t_mid) * dt,
            lambda X: model.drift_deriv2(X, t_mid) * dt
            if model.drift_deriv2 is not None
            else np.zeros(np.shape(X)),
        )
        terms = (GaussianTerm(mean, var), fwd) + ((_obs_term(obs, b_mid),) if have_obs else ())
        return SampleObjective(model.dim, terms, const, context=ctx)

    def f(X):
        out = -transition_logdensity(model, x_before, X, t_prev) - transition_logdensity(model, X, x_after, t_mid)
        if have_obs:
            out = out - observation_logdensity(obs, X, b_mid)
        return out

    return SampleObjective(model.dim, (), 0.0, f, None, context=ctx)


def path_objective(model: SdeModel, obs: ObservationModel, x_start, b_end, gap: int, t0: float) -> SampleObjective:
    """Joint ``F`` over ``gap`` consecutive states ending at an observation.

    The variable is the flattened ``(gap * m)`` vector of states
    ``X^{n+1}, ..., X^{n+gap}``.
    """
    m = model.dim
    x_start = np.asarray(x_start, dtype=float)
    dt = model.dt

    def unstack(Y):
        return np.asarray(Y, dtype=float).reshape(np.shape(Y)[:-1] + (gap, m))

    def f(Y):
        X = unstack(Y)
        prev = np.broadcast_to(x_start, X[..., 0, :].shape)
        out = 0.0
        for j in range(gap):
            out = out - transition_logdensity(model, prev, X[..., j, :], t0 + j * dt)
            prev = X[..., j, :]
        return out - observation_logdensity(obs, X[..., -1, :], b_end)

    grad = None
    if model.additive_noise and obs.diagonal and obs.h_deriv is not None:
        jac_ok = model.elementwise_drift and model.drift_deriv is not None

        def grad(Y):
            X = unstack(Y)
            G = np.zeros_like(X)
            prev = np.broadcast_to(x_start, X[..., 0, :].shape)
            for j in range(gap):
                tj = t0 + j * dt
                v = model.step_variance(prev, tj)
                r = (X[..., j, :] - model.step_mean(prev, tj)) / v
                G[..., j, :] += r
                if j > 0:
                    if jac_ok:
                        G[..., j - 1, :] -= r * (1.0 + model.drift_deriv(prev, tj) * dt)
                    else:
                        G[..., j - 1, :] -= _drift_vjp(model, prev, tj, r)
                prev = X[..., j, :]
            xe = X[..., -1, :]
            G[..., -1, :] += (obs.h(xe) - b_end) * obs.h_deriv(xe) / obs.noise_var
            return G.reshape(np.shape(Y))

    mean = x_start
    starts = [np.tile(mean, gap)]
    if obs.h_inverse is not None:
        end = obs.h_inverse(np.asarray(b_end, dtype=float))
        starts.append(np.concatenate([mean + (end - mean) * (j + 1) / gap for j in range(gap)]))
    scale = np.tile(np.sqrt(model.step_variance(x_start, t0)), gap)
    ctx = {"starts": starts, "scale": scale, "gap": gap}
    return SampleObjective(gap * m, (), 0.0, f, grad, context=ctx)


def _drift_vjp(model, x, t, r, eps=1e-7):
    # r^T (I + dt Df(x)) by finite differences of the drift
    out = np.array(r, dtype=float)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = eps
        col = (model.drift(x + e, t) - model.drift(x - e, t)) / (2 * eps)
        out[..., k] += model.dt * np.sum(r * col, axis=-1)
    return out


# ---------------------------------------------------------------------------
# results


@dataclass
class ImplicitSolution:
    """Solved particle(s).  Fields broadcast over a batch of reference draws."""

    position: Array
    phi: Array
    log_jacobian: Array
    residual: Array
    iterations: Array
    method: str = ""

    @property
    def log_weight(self):
        return -np.asarray(self.phi) + np.asarray(self.log_jacobian)


@dataclass(frozen=True)
class QuadraticForm:
    """``F(X) = offset + (X - center)^T matrix (X - center) / 2``."""

    center: Array
    matrix: Array
    offset: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        a = np.atleast_1d(np.asarray(self.center, dtype=float))
        if A.shape != (a.size, a.size):
            raise ValueError("matrix and center dimensions differ")
        if np.max(np.abs(A - A.T)) > 1e-12 * max(1.0, np.max(np.abs(A))):
            raise ValueError("matrix is not symmetric")
        np.linalg.cholesky(A)  # raises LinAlgError unless positive definite
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "center", a)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def mean_eigenvalue(self) -> float:
        return float(np.trace(self.matrix)) / self.dim

    def eval(self, X):
        y = np.asarray(X, dtype=float) - self.center
        return self.offset + 0.5 * np.einsum("...i,ij,...j->...", y, self.matrix, y)


@dataclass(frozen=True)
class UShapedSubstitute:
    """U-shaped replacement ``F0`` of a one-dimensional (batched) ``F``.

    ``F0`` equals ``F`` except on the chord intervals between ``z`` and the
    anchors, where it is the straight line from ``(z, F(z))`` to
    ``(anchor, level)``.  An anchor equal to ``z`` means no chord on that side.
    """

    original: SampleObjective
    min_location: Array
    min_value: Array
    left_anchor: Array
    left_level: Array
    right_anchor: Array
    right_level: Array

    def _chords(self, x):
        z, fz = self.min_location, self.min_value
        la, ll, ra, rl = self.left_anchor, self.left_level, self.right_anchor, self.right_level
        with np.errstate(divide="ignore", invalid="ignore"):
            ls = np.where(la < z, (ll - fz) / (z - la), 0.0)
            rs = np.where(ra > z, (rl - fz) / (ra - z), 0.0)
        in_left = (x < z) & (x > la)
        in_right = (x > z) & (x < ra)
        return in_left, in_right, ls, rs

    def f0_eval(self, x):
        x = np.asarray(x, dtype=float)
        fx = self.original.component_values(x[..., None])[..., 0]
        in_left, in_right, ls, rs = self._chords(x)
        z, fz = self.min_location, self.min_value
        return np.where(in_left, fz + ls * (z - x), np.where(in_right, fz + rs * (x - z), fx))

    def f0_grad(self, x):
        x = np.asarray(x, dtype=float)
        gx = self.original.component_grad(x[..., None])[..., 0]
        in_left, in_right, ls, rs = self._chords(x)
        return np.where(in_left, -ls, np.where(in_right, rs, gx))

    @property
    def is_identity(self):
        return bool(np.all(self.left_anchor == self.min_location) and np.all(self.right_anchor == self.min_location))


# ---------------------------------------------------------------------------
# one-dimensional helpers (batched along the last axis)


def _f1(obj1):
    return lambda x: obj1.component_values(np.asarray(x, dtype=float)[..., None])[..., 0]


def _df1(obj1):
    return lambda x: obj1.component_grad(np.asarray(x, dtype=float)[..., None])[..., 0]


def _d2f1(obj1):
    return lambda x: obj1.component_hess(np.asarray(x, dtype=float)[..., None])[..., 0]


def _window(obj1, halfwidth=None):
    starts = [np.asarray(s, dtype=float)[..., 0] for s in obj1.context.get("starts", [np.zeros(1)])]
    bshape = np.broadcast_shapes(obj1.batch_shape, *[s.shape for s in starts])
    starts = [np.broadcast_to(s, bshape) for s in starts]
    lo = np.minimum.reduce(starts)
    hi = np.maximum.reduce(starts)
    if halfwidth is None:
        scale = np.broadcast_to(np.asarray(obj1.context.get("scale", np.ones(1)), dtype=float)[..., 0], bshape)
        halfwidth = 10.0 * scale + 0.25 * (hi - lo)
    return lo - halfwidth, hi + halfwidth


def _minimize_1d(obj1, n_grid=2001, tol=GRAD_TOL, max_expand=8, halfwidth=None):
    f, df, d2f = _f1(obj1), _df1(obj1), _d2f1(obj1)
    lo, hi = _window(obj1, halfwidth)
    lo, hi = np.array(lo, dtype=float, ndmin=1), np.array(hi, dtype=float, ndmin=1)
    u = np.linspace(0.0, 1.0, n_grid)[:, None]
    for _ in range(max_expand + 1):
        x = lo + (hi - lo) * u
        i = np.argmin(f(x), axis=0)
        edge = (i == 0) | (i == n_grid - 1)
        if not np.any(edge):
            break
        w = hi - lo
        lo = np.where(edge, lo - w, lo)
        hi = np.where(edge, hi + w, hi)
    else:
        raise MinimizationFailure("no bracket for the minimum inside the scan range")
    cols = np.arange(x.shape[1])
    a, c = x[i - 1, cols], x[i + 1, cols]
    # golden-section search on [a, c]
    g = (math.sqrt(5.0) - 1.0) / 2.0
    p, q = c - g * (c - a), a + g * (c - a)
    fp, fq = f(p), f(q)
    for _ in range(60):
        left = fp < fq
        c = np.where(left, q, c)
        a = np.where(left, a, p)
        p_new = np.where(left, c - g * (c - a), q)
        q_new = np.where(left, p, a + g * (c - a))
        fp_new = np.where(left, f(c - g * (c - a)), fq)
        fq_new = np.where(left, fp, f(a + g * (c - a)))
        p, q, fp, fq = p_new, q_new, fp_new, fq_new
    z = 0.5 * (a + c)
    a, c = x[i - 1, cols], x[i + 1, cols]
    # Newton polish inside the grid bracket
    for _ in range(50):
        gz, hz = df(z), d2f(z)
        step = np.where(hz > 0, gz / np.where(hz > 0, hz, 1.0), 0.0)
        z_new = np.clip(z - step, a, c)
        done = np.abs(gz) < tol
        z = np.where(done, z, z_new)
        if np.all(done):
            break
    gz, hz = df(z), d2f(z)
    slack = 64 * _EPS * np.abs(hz) * (1.0 + np.abs(z))
    if np.any(np.abs(gz) > np.maximum(tol, slack)):
        raise MinimizationFailure(f"gradient at minimum is {np.max(np.abs(gz)):.3g}")
    return z, f(z)


def find_minimum(obj: SampleObjective, n_grid: int = 2001, tol: float = GRAD_TOL, halfwidth=None):
    """Absolute minimum ``(z, F(z))`` of ``F``.

    Separable objectives are minimized component by component: a grid scan
    around the starting points in ``context`` picks the lowest basin, then
    golden-section search and a Newton polish locate ``z``.  Generic
    objectives use BFGS from each start followed by Newton polishing.
    """
    if obj.separable:
        zs = []
        for k in range(obj.dim):
            zk, _ = _minimize_1d(obj.component(k), n_grid, tol, halfwidth=halfwidth)
            zs.append(zk)
        bshape = obj.batch_shape
        z = np.stack(zs, axis=-1).reshape(bshape + (obj.dim,))
        return z, obj.eval(z)
    return _minimize_generic(obj, tol)


def _minimize_generic(obj, tol=GRAD_TOL):
    starts = [np.asarray(s, dtype=float) for s in obj.context.get("starts", [np.zeros(obj.dim)])]
    best = None
    for s in starts:
        res = optimize.minimize(obj.eval, s, jac=obj.grad, method="BFGS", options={"gtol": tol * 1e-2, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
    z = np.array(best.x, dtype=float)
    for _ in range(20):
        g = obj.grad(z)
        if np.max(np.abs(g)) < tol:
            break
        H = fd_hessian(obj.grad, z)
        z = z - np.linalg.solve(H, g)
    g = obj.grad(z)
    H = fd_hessian(obj.grad, z)
    slack = 64 * _EPS * np.max(np.abs(H)) * (1.0 + np.max(np.abs(z)))
    if np.max(np.abs(g)) > max(tol, slack):
        raise MinimizationFailure(f"gradient at minimum is {np.max(np.abs(g)):.3g}")
    return z, float(obj.eval(z))


def fd_hessian(grad, z, eps=1e-5):
    z = np.asarray(z, dtype=float)
    n = z.size
    H = np.empty((n, n))
    for k in range(n):
        h = eps * (1.0 + abs(z[k]))
        e = np.zeros(n)
        e[k] = h
        H[:, k] = (grad(z + e) - grad(z - e)) / (2 * h)
    return 0.5 * (H + H.T)


def check_u_shaped(obj1: SampleObjective, z, halfwidth: float = 5.0, n: int = 10_000):
    """Grid test that a 1-D (batched) ``F`` is strictly monotone on each side of ``z``.

    Returns a boolean array over the batch.
    """
    f = _f1(obj1)
    z = np.asarray(z, dtype=float)
    u = np.linspace(0.0, halfwidth, n + 1)[:, None] if z.ndim else np.linspace(0.0, halfwidth, n + 1)
    ok = True
    for side in (-1.0, 1.0):
        vals = f(z + side * u)
        ok = ok & np.all(np.diff(vals, axis=0) > 0, axis=0)
    return np.asarray(ok)


def build_u_substitute(
    obj1: SampleObjective, z=None, min_value=None, halfwidth: float = 5.0, n: int = 10_000, lift: float = 0.1
) -> UShapedSubstitute:
    """U-shaped ``F0`` for a (batched) one-dimensional ``F``.

    On a side of ``z`` where ``F`` is not monotone, the anchor is the first
    point beyond the secondary structure at which ``F`` reaches the highest
    value of that structure plus ``lift`` times its height above ``F(z)``;
    ``F0`` is the chord from the anchor down to ``(z, F(z))``.
    """
    if obj1.dim != 1:
        raise ValueError("U-shaped substitutes are one-dimensional")
    f = _f1(obj1)
    if z is None:
        z, min_value = _minimize_1d(obj1)
    z = np.array(z, dtype=float, ndmin=1).reshape(-1)
    fz = np.array(f(z) if min_value is None else min_value, dtype=float, ndmin=1).reshape(-1)
    bshape = np.broadcast_shapes(obj1.batch_shape, z.shape)
    z = np.broadcast_to(z, bshape).astype(float)
    fz = np.broadcast_to(fz, bshape).astype(float)
    anchors = {s: z.copy() for s in (-1, 1)}
    levels = {s: fz.copy() for s in (-1, 1)}
    ok = check_u_shaped(obj1, z, halfwidth, n)
    for j in np.flatnonzero(~np.broadcast_to(ok, bshape).reshape(-1)):
        sub = obj1.take(j) if len(obj1.batch_shape) else obj1
        fj = _f1(sub)
        for side in (-1, 1):
            a, lvl = _side_anchor(fj, z.reshape(-1)[j], fz.reshape(-1)[j], side, halfwidth, n, lift)
            anchors[side].reshape(-1)[j] = a
            levels[side].reshape(-1)[j] = lvl
    return UShapedSubstitute(obj1, z, fz, anchors[-1], levels[-1], anchors[1], levels[1])


def _side_anchor(f, z, fz, side, halfwidth, n, lift):
    for _ in range(6):
        u = np.linspace(0.0, halfwidth, n + 1)
        x = z + side * u
        vals = np.ravel(f(x))
        bad = np.flatnonzero(np.diff(vals) <= 0)
        if bad.size == 0:
            return z, fz
        p = bad.max() + 1
        top = vals[: p + 1].max()
        level = top + lift * (top - fz)
        beyond = np.flatnonzero(vals[p:] >= level)
        if beyond.size:
            j = p + beyond[0]
            lo, hi = sorted((x[j - 1], x[j]))
            anchor = optimize.brentq(lambda y: float(np.ravel(f(np.array([y])))[0]) - level, lo, hi, xtol=1e-14, rtol=4 * _EPS)
            return anchor, float(np.ravel(f(np.array([anchor])))[0])
        halfwidth *= 2.0
    raise NotUShaped("could not find an anchor for the U-shaped substitute")


# ---------------------------------------------------------------------------
# solvers


def _monotone_root(phi, dphi, target, u0, tol, max_iter):
    """Solve ``phi(u) = target`` for ``u >= 0`` with ``phi(0) = 0`` increasing.

    Bracketed Newton iteration that falls back to bisection whenever a step
    leaves the bracket.  Returns ``(u, iterations, residual)``.
    """
    target = np.asarray(target, dtype=float)
    shape = target.shape
    u0 = np.broadcast_to(np.asarray(u0, dtype=float), shape)
    lo = np.zeros(shape)
    hi = np.where(u0 > 0, u0, 1.0)
    zero = target <= 0
    # expand the bracket until phi(hi) >= target
    prev = np.zeros(shape)
    for _ in range(400):
        with np.errstate(over="ignore"):
            val = phi(hi)
        short = (val < target) & ~zero
        if np.any(short & (val <= prev)):
            raise NotUShaped("function stops increasing away from its minimum", mask=short & (val <= prev))
        if not np.any(short):
            break
        lo = np.where(short, hi, lo)
        prev = np.where(short, val, prev)
        hi = np.where(short, 2.0 * hi, hi)
    else:
        raise NonConvergence("could not bracket the root")
    u = np.clip(u0, lo, hi)
    iters = np.zeros(shape, dtype=int)
    done = zero.copy()
    u = np.where(zero, 0.0, u)
    for _ in range(max_iter):
        g = phi(u) - target
        dg = dphi(u)
        lo = np.where(g < 0, u, lo)
        hi = np.where(g > 0, u, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = u - g / dg
        bad = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi) | (dg <= 0)
        u_new = np.where(bad, 0.5 * (lo + hi), newton)
        small = np.abs(u_new - u) <= 4 * _EPS * np.maximum(np.abs(u), 1e-300)
        finished = (np.abs(g) <= tol) & small | (g == 0) | (hi - lo <= 4 * _EPS * np.maximum(hi, 1e-300))
        u = np.where(done | finished, u, u_new)
        iters = iters + ~(done | finished)
        done = done | finished
        if np.all(done):
            break
    res = np.abs(phi(u) - target)
    if np.any(res > tol):
        raise NonConvergence(f"residual {np.max(res):.3g} above tolerance after {max_iter} iterations", mask=res > tol)
    return u, iters, res


def _solve_b_1d(f, df, z, fz, xi, curv, tol, max_iter, x0=None):
    xi = np.asarray(xi, dtype=float)
    z = np.asarray(z, dtype=float)
    side = np.where(xi >= 0, 1.0, -1.0)
    r = np.abs(xi)
    u0 = r / np.sqrt(curv)
    if x0 is not None:
        d = side * (np.asarray(x0, dtype=float) - z)
        u0 = np.where(d > 0, d, u0)

    def phi(u):
        return f(z + side * u) - fz

    def dphi(u):
        return side * df(z + side * u)

    u, iters, res = _monotone_root(phi, dphi, 0.5 * r * r, u0, tol, max_iter)
    X = z + side * u
    slope = df(X)
    with np.errstate(divide="ignore", invalid="ignore"):
        J = np.where(r > 0, r / np.abs(slope), 1.0 / np.sqrt(curv))
    if np.any((r > 0) & (slope == 0)):
        raise SingularJacobian("zero slope away from the minimum")
    return X, np.log(J), res, iters


def _curvature_1d(d2f, df, z, scale=None):
    c = np.asarray(d2f(z), dtype=float)
    bad = ~(c > 0)
    if np.any(bad):
        # chord minima can have a kink at z; use a one-sided difference from the right
        h = 1e-6 * (1.0 + np.abs(z)) if scale is None else 1e-4 * scale
        c = np.where(bad, np.abs(df(z + h) - df(z)) / h, c)
    return np.maximum(c, 1e-300)


def solve_algorithm_b(
    target, xi, tol: float = RESIDUAL_TOL, max_iter: int = 100, z=None, check_shape: bool = True, x0=None
) -> ImplicitSolution:
    """Solve with ``phi = min F`` on the branch matching the sign of ``xi``.

    ``target`` is a :class:`SampleObjective` or a :class:`UShapedSubstitute`.
    Separable objectives are solved component by component with
    ``xi[..., k]`` driving component ``k``; generic objectives along the ray
    ``z + lambda xi / |xi|``.  For a substitute the equation solved is
    ``F0(X) - min F0 = xi^2 / 2`` and the reported factor is
    ``phi = min F0 + F(X) - F0(X)``, so ``F(X) - phi = xi^2 / 2`` holds for
    the original ``F``.
    """
    if isinstance(target, UShapedSubstitute):
        sub = target
        obj1 = sub.original
        xi1 = np.asarray(xi, dtype=float)
        xi1 = xi1[..., 0] if xi1.ndim and xi1.shape[-1] == 1 and np.ndim(sub.min_location) < xi1.ndim else xi1
        df0 = sub.f0_grad
        curv = _curvature_1d(_d2f1(obj1), df0, sub.min_location)
        curv = np.where(sub.left_anchor < sub.min_location, curv, _curvature_1d(_d2f1(obj1), _df1(obj1), sub.min_location))
        if x0 is not None:
            x0 = np.reshape(x0, np.shape(xi1))
        X, logj, _, iters = _solve_b_1d(sub.f0_eval, df0, sub.min_location, sub.min_value, xi1, curv, tol, max_iter, x0)
        F = _f1(obj1)(X)
        phi = sub.min_value + F - sub.f0_eval(X)
        res = np.abs(F - phi - 0.5 * xi1**2)
        return ImplicitSolution(X[..., None], phi, logj, res, iters, "B+F0")
    obj = target
    xi = np.asarray(xi, dtype=float)
    if not obj.separable:
        return _solve_radial(obj, xi, tol if obj.dim == 1 else max(tol, RESIDUAL_TOL_MD), max_iter, z)
    if z is None:
        z, _ = find_minimum(obj)
    z = np.asarray(z, dtype=float)
    Xs, logj, iters = [], 0.0, 0
    for k in range(obj.dim):
        o1 = obj.component(k)
        f, df = _f1(o1), _df1(o1)
        zk = z[..., k]
        if check_shape:
            bad = ~check_u_shaped(o1, zk)
            if np.any(bad):
                raise NotUShaped("objective is not U-shaped; build a substitute", mask=bad)
        curv = _curvature_1d(_d2f1(o1), df, zk)
        x0k = None if x0 is None else np.asarray(x0)[..., k]
        Xk, lj, _, it = _solve_b_1d(f, df, zk, f(zk), xi[..., k], curv, tol, max_iter, x0k)
        Xs.append(Xk)
        logj = logj + lj
        iters = np.maximum(iters, it)
    X = np.stack(Xs, axis=-1)
    fz = obj.eval(z)
    res = np.abs(obj.eval(X) - fz - 0.5 * np.sum(xi * xi, axis=-1))
    return ImplicitSolution(X, fz + 0.0 * res, logj, res, iters, "B")


def _solve_radial(obj, xi, tol, max_iter, z=None):
    xi = np.atleast_2d(xi)
    if z is None:
        z, fz = _minimize_generic(obj)
    else:
        fz = float(obj.eval(z))
    z = np.asarray(z, dtype=float)
    m = obj.dim
    r = np.linalg.norm(xi, axis=-1)
    eta = np.where(r[:, None] > 0, xi / np.where(r > 0, r, 1.0)[:, None], np.eye(m)[0])
    H = fd_hessian(obj.grad, z)
    curv = np.maximum(np.einsum("ni,ij,nj->n", eta, H, eta), 1e-300)

    def phi(u):
        return obj.eval(z + u[:, None] * eta) - fz

    def dphi(u):
        return np.sum(obj.grad(z + u[:, None] * eta) * eta, axis=-1)

    lam, iters, res = _monotone_root(phi, dphi, 0.5 * r * r, r / np.sqrt(curv), tol, max_iter)
    X = z + lam[:, None] * eta
    slope = dphi(lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        logj = np.where(
            r > 0,
            (m - 1) * np.log(np.where(r > 0, lam / np.where(r > 0, r, 1.0), 1.0)) + np.log(r / slope),
            -0.5 * m * np.log(curv),
        )
    return ImplicitSolution(X, np.full(r.shape, fz), logj, res, iters, "B-radial")


def _a_start(obj, xi_shape, x0):
    if x0 is None or (isinstance(x0, str) and x0 == "prior_mean"):
        start = obj.terms[0].target
    elif isinstance(x0, str) and x0 == "zero":
        start = 0.0
    else:
        start = x0
    return np.broadcast_to(np.asarray(start, dtype=float), xi_shape).copy()


def _linearize(obj, X):
    prec, lin = 0.0, 0.0
    pieces = []
    for t in obj.terms:
        u, D, _ = t.parts(X)
        c = t.target - u + D * X
        prec = prec + D * D / t.var
        lin = lin + D * c / t.var
        pieces.append((D, c, t.var))
    abar = lin / prec
    phi_c = 0.0
    for D, c, v in pieces:
        phi_c = phi_c + (D * abar - c) ** 2 / (2.0 * v)
    return abar, prec, phi_c


def _a_map_slope(obj, X):
    """Derivative of the Algorithm-A map ``X -> xi = F'(X) / sqrt(P(X))``."""
    g = obj.component_grad(X)
    h = obj.component_hess(X)
    P, dP = 0.0, 0.0
    for t in obj.terms:
        u, D, D2 = t.parts(X)
        P = P + D * D / t.var
        dP = dP + 2.0 * D * D2 / t.var
    return h / np.sqrt(P) - g * dP / (2.0 * P**1.5)


def solve_algorithm_a(obj: SampleObjective, xi, tol: float = RESIDUAL_TOL, max_iter: int = 200, x0=None) -> ImplicitSolution:
    """Iterated linearization ("pseudo-Gaussian") solve.

    Each iterate linearizes every factor about ``X^j``, completes the square
    to ``(X - a)^2 / (2 v) + phi(X^j)`` and moves to ``a + sqrt(v) xi``.  At
    the fixed point ``F(X) - phi = |xi|^2 / 2`` with ``phi`` the limit of the
    ``phi(X^j)``.  Linear factors make the first iterate exact.

    ``x0`` is ``"prior_mean"`` (default), ``"zero"`` or an array.
    """
    if not obj.separable:
        raise ValueError("Algorithm A needs a separable objective")
    xi = np.asarray(xi, dtype=float)
    shape = np.broadcast_shapes(xi.shape, obj.batch_shape + (obj.dim,))
    xi = np.broadcast_to(xi, shape)
    X = _a_start(obj, shape, x0)
    iters = np.zeros(shape[:-1], dtype=int)
    done = np.zeros(shape[:-1], dtype=bool)
    phi_c = np.zeros(shape)
    for j in range(max_iter + 1):
        abar, prec, pc = _linearize(obj, X)
        phi_c = np.where(done[..., None], phi_c, pc)
        if j >= 1:
            mismatch = np.abs((X - abar) * np.sqrt(prec) - xi)
            conv = np.all(mismatch <= tol / (1.0 + np.abs(xi)), axis=-1)
            newly = conv & ~done
            iters = np.where(newly, j, iters)
            done = done | conv
            if np.all(done) or j == max_iter:
                break
        X = np.where(done[..., None], X, abar + xi / np.sqrt(prec))
    if not obj.linear and not np.all(done):
        # where the map is nearly flat the iteration crawls; solve the same
        # equation xi = F'(X) / sqrt(P(X)) by bracketing instead
        slow = ~done
        X[slow] = _solve_a_map(obj.take(np.flatnonzero(slow)) if obj.batch_shape else obj, X[slow], xi[slow], tol)
        done = np.ones_like(done)
        iters = np.where(slow, max_iter, iters)
    if not obj.linear:
        # the iteration contracts only linearly; finish with Newton steps on
        # the same fixed-point equation
        for _ in range(3):
            abar, prec, _ = _linearize(obj, X)
            slope = _a_map_slope(obj, X)
            step = ((X - abar) * np.sqrt(prec) - xi) / slope
            X = np.where(np.isfinite(step) & (slope > 0), X - step, X)
        phi_c = _linearize(obj, X)[2]
    phi = np.sum(phi_c, axis=-1) + obj.const
    res = np.abs(obj.eval(X) - phi - 0.5 * np.sum(xi * xi, axis=-1))
    failed = ~done | (res > tol * max(1, obj.dim))
    if np.any(failed):
        raise NonConvergence("Algorithm A did not converge", mask=failed)
    slope = _a_map_slope(obj, X)
    if np.any(slope <= 0):
        raise NonConvergence("Algorithm A map is not monotone here", mask=np.any(slope <= 0, axis=-1))
    logj = -np.sum(np.log(slope), axis=-1)
    return ImplicitSolution(X, phi, logj, res, iters, "A")


def _a_map_value(obj, X):
    P = 0.0
    for t in obj.terms:
        _, D, _ = t.parts(X)
        P = P + D * D / t.var
    return obj.component_grad(X) / np.sqrt(P)


def _solve_a_map(obj, X, xi, tol, max_iter=200):
    """Bracketed Newton solve of ``F'(X) / sqrt(P(X)) = xi``, elementwise."""
    X = np.array(X, dtype=float)

    def g(Y):
        return _a_map_value(obj, Y) - xi

    gx = g(X)
    lo, hi = X.copy(), X.copy()
    step = np.maximum(1e-3, 1e-3 * np.abs(X))
    lo_ok, hi_ok = gx <= 0, gx >= 0
    for _ in range(200):
        if np.all(lo_ok & hi_ok):
            break
        lo = np.where(lo_ok, lo, lo - step)
        hi = np.where(hi_ok, hi, hi + step)
        lo_ok, hi_ok = lo_ok | (g(lo) <= 0), hi_ok | (g(hi) >= 0)
        step = 2.0 * step
    else:
        raise NonConvergence("could not bracket the Algorithm A map")
    for _ in range(max_iter):
        gx = g(X)
        lo = np.where(gx < 0, X, lo)
        hi = np.where(gx > 0, X, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = X - gx / _a_map_slope(obj, X)
        bad = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
        X_new = np.where(bad, 0.5 * (lo + hi), newton)
        if np.all((np.abs(gx) <= 0.1 * tol / (1.0 + np.abs(xi))) | (X_new == X)):
            break
        X = X_new
    return X


def algorithm_a_applicable(obj: SampleObjective, n_grid: int = 2001, min_slope_ratio: float = 0.1):
    """Whether Algorithm A is a good choice, per batch element.

    Requires the map ``X -> xi`` to be increasing on the scan window and never
    flatter than ``min_slope_ratio`` times its slope at the prior mean; nearly
    flat stretches make the Jacobian, and hence the weights, very uneven.
    """
    if obj.linear:
        return np.ones(obj.batch_shape, dtype=bool)
    ok = np.ones(obj.batch_shape, dtype=bool)
    for k in range(obj.dim):
        o1 = obj.component(k)
        lo, hi = _window(o1)
        x = lo + (hi - lo) * np.linspace(0.0, 1.0, n_grid).reshape((-1,) + (1,) * np.ndim(lo))
        slope = _a_map_slope(o1, x[..., None])[..., 0]
        ref = _a_map_slope(o1, np.asarray(o1.terms[0].target, dtype=float))[..., 0]
        ok = ok & (np.min(slope, axis=0) > np.maximum(min_slope_ratio * ref, 0.0))
    return ok


def solve_random_direction(q: QuadraticForm, xi) -> ImplicitSolution:
    """Random-direction solve of ``(X - a)^T A (X - a) / 2 = |xi|^2 / 2``.

    Uses ``X = a + xi / sqrt(Lambda)`` with ``Lambda = trace(A) / m`` (a linear
    map with Jacobian ``Lambda^{-m/2}``) and moves the mismatch
    ``lambda^2 (eta^T A eta - Lambda) / 2`` into ``phi``.  ``xi = 0`` gives
    ``X = a`` and ``phi = offset``.
    """
    xi = np.asarray(xi, dtype=float)
    lam = q.mean_eigenvalue
    y = xi / math.sqrt(lam)
    X = q.center + y
    quad = 0.5 * np.einsum("...i,ij,...j->...", y, q.matrix, y)
    half_sq = 0.5 * np.sum(xi * xi, axis=-1)
    phi = q.offset + quad - half_sq
    res = np.abs(q.eval(X) - phi - half_sq)
    logj = np.full(np.shape(phi), -0.5 * q.dim * math.log(lam))
    return ImplicitSolution(X, phi, logj, res, np.ones(np.shape(phi), dtype=int), "random-direction")


def solve_quadratic_exact(q: QuadraticForm, xi) -> ImplicitSolution:
    """Completed-square solve ``X = a + L^{-T} xi`` with ``A = L L^T``.

    ``phi`` is the offset and the Jacobian ``det(A)^{-1/2}`` is the same for
    every draw.
    """
    xi = np.asarray(xi, dtype=float)
    L = np.linalg.cholesky(q.matrix)
    y = np.linalg.solve(L.T, np.moveaxis(xi, -1, 0).reshape(q.dim, -1))
    X = q.center + np.moveaxis(y.reshape((q.dim,) + xi.shape[:-1]), 0, -1)
    half_sq = 0.5 * np.sum(xi * xi, axis=-1)
    phi = np.full(np.shape(half_sq), q.offset)
    res = np.abs(q.eval(X) - phi - half_sq)
    logj = np.full(np.shape(phi), -np.sum(np.log(np.diag(L))))
    return ImplicitSolution(X, phi, logj, res, np.ones(np.shape(phi), dtype=int), "A")


def quadratic_form_of(obj: SampleObjective, z=None, n_check: int = 8, rtol: float = 1e-7, seed: int = 0):
    """Exact quadratic representation of a generic ``F``, or ``None``."""
    if z is None:
        z, _ = _minimize_generic(obj)
    z = np.asarray(z, dtype=float)
    A = fd_hessian(obj.grad, z)
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    z = z - np.linalg.solve(A, obj.grad(z))
    fz = float(obj.eval(z))
    q = QuadraticForm(z, A, fz)
    rng = np.random.default_rng(seed)
    scale = np.asarray(obj.context.get("scale", np.ones(obj.dim)), dtype=float)
    Y = z + 3.0 * scale * rng.standard_normal((n_check, obj.dim))
    exact, approx = obj.eval(Y) - fz, q.eval(Y) - fz
    if np.max(np.abs(exact - approx)) > rtol * max(1.0, np.max(np.abs(exact))):
        return None
    return q


def implicit_jacobian(obj1: SampleObjective, xi, X, z=None, phi_slope=0.0):
    """``J = |xi| / |F'(X) - phi'(X)|`` from differentiating ``F(X) - phi = xi^2/2``.

    For ``xi = 0`` the limit ``1 / sqrt(F''(z))`` is returned.
    """
    xi = np.asarray(xi, dtype=float)
    X = np.asarray(X, dtype=float)
    slope = obj1.component_grad(X[..., None])[..., 0] - phi_slope if X.ndim == xi.ndim else obj1.component_grad(X)[..., 0] - phi_slope
    r = np.abs(xi)
    if np.any((r > 0) & (slope == 0)):
        raise SingularJacobian("F'(X) = 0 away from the minimum")
    zz = X if z is None else np.asarray(z, dtype=float)
    curv = obj1.component_hess(np.reshape(zz, np.shape(zz) + ((1,) if np.ndim(zz) == xi.ndim else ())))
    curv = np.reshape(curv, np.shape(r)) if np.size(curv) == np.size(r) else curv
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, r / np.abs(slope), 1.0 / np.sqrt(curv))


def jacobian_numeric(solver, obj, xi, X=None, h_fd: float = 1e-5):
    """``|det dX/dxi|`` by central differences, re-solving warm-started from ``X``."""
    xi = np.asarray(xi, dtype=float)
    m = xi.shape[-1]
    cols = []
    for k in range(m):
        e = np.zeros(m)
        e[k] = h_fd
        xp = solver(obj, xi + e, x0=X).position
        xm = solver(obj, xi - e, x0=X).position
        cols.append((xp - xm) / (2 * h_fd))
    D = np.stack(cols, axis=-1)
    return np.abs(np.linalg.det(D))


# ---------------------------------------------------------------------------
# the solver chain


PROPOSALS = ("A", "B", "auto", "random_direction")


def sample(obj: SampleObjective, xi, proposal: str = "auto", tol: float = RESIDUAL_TOL, max_iter: int = 200) -> ImplicitSolution:
    """Solve the implicit equation for every batch element / reference draw.

    ``proposal="auto"`` tries Algorithm A where its map is monotone, falls
    back to Algorithm B, and builds a U-shaped substitute where ``F`` is not
    U-shaped.  Generic objectives that are exactly quadratic use the
    completed-square solve (``"random_direction"`` selects the random-direction
    ansatz instead); other generic objectives the radial version of B.
    """
    xi = np.asarray(xi, dtype=float)
    if proposal not in PROPOSALS:
        raise ValueError(f"unknown proposal {proposal!r}")
    if not obj.separable:
        tol_md = max(tol, RESIDUAL_TOL_MD)
        if proposal == "B":
            return _solve_radial(obj, xi, tol_md, max_iter)
        z, _ = _minimize_generic(obj)
        q = quadratic_form_of(obj, z)
        if q is None:
            if proposal in ("A", "random_direction"):
                raise NonConvergence(f"{proposal} needs an exactly quadratic objective")
            return _solve_radial(obj, xi, tol_md, max_iter, z)
        if proposal == "random_direction":
            return solve_random_direction(q, xi)
        return solve_quadratic_exact(q, xi)
    if proposal == "random_direction":
        raise ValueError("the random-direction solve needs a QuadraticForm or a generic objective")
    if proposal == "A":
        return solve_algorithm_a(obj, xi, tol, max_iter)
    if proposal == "B":
        return solve_algorithm_b(obj, xi, tol, max_iter)
    if obj.linear:
        return solve_algorithm_a(obj, xi, tol, max_iter)
    shape = np.broadcast_shapes(xi.shape, obj.batch_shape + (obj.dim,))
    xi = np.broadcast_to(xi, shape)
    parts = [_chain_1d(obj.component(k), xi[..., k], tol, max_iter) for k in range(obj.dim)]
    X = np.stack([p[0] for p in parts], axis=-1)
    phi = sum(p[1] for p in parts) + obj.const
    logj = sum(p[2] for p in parts)
    iters = np.max(np.stack([p[3] for p in parts]), axis=0)
    methods = sorted({m for p in parts for m in p[4]})
    res = np.abs(obj.eval(X) - phi - 0.5 * np.sum(xi * xi, axis=-1))
    return ImplicitSolution(X, phi, logj, res, iters, "/".join(methods))


def _distinct(o1):
    """Distinct batch elements of a batched 1-D objective and the map back.

    Particles that share a parent after resampling have identical objectives;
    the per-objective work (method choice, minimum, substitute) is done once.
    """
    n = o1.batch_shape[0]
    cols = []
    for t in o1.terms:
        cols.append(np.broadcast_to(np.asarray(t.target, dtype=float).reshape(-1, 1) if np.ndim(t.target) >= 2 else np.ravel(t.target)[:1], (n, 1)))
        cols.append(np.broadcast_to(np.asarray(t.var, dtype=float).reshape(-1, 1) if np.ndim(t.var) >= 2 else np.ravel(t.var)[:1], (n, 1)))
    _, first, inv = np.unique(np.hstack(cols), axis=0, return_index=True, return_inverse=True)
    return first, np.ravel(inv)


def _chain_1d(o1, xi1, tol, max_iter):
    """Auto chain for one component; ``xi1`` has the batch shape of the result."""
    shape = xi1.shape
    X = np.empty(shape)
    phi = np.empty(shape)
    logj = np.empty(shape)
    iters = np.zeros(shape, dtype=int)
    methods = set()
    n = int(np.prod(shape)) if shape else 1
    xi_flat = xi1.reshape(-1)
    if len(o1.batch_shape) > 0 and o1.batch_shape[0] > 1:
        first, inv = _distinct(o1)
        rep = o1.take(first)
        pick = o1.take
    else:
        first, inv = np.zeros(1, dtype=int), np.zeros(n, dtype=int)
        rep = o1

        def pick(idx):
            return o1

    # one decision per distinct objective, expanded to the elements
    use_a = np.broadcast_to(algorithm_a_applicable(rep), first.shape)[inv]
    idx = np.flatnonzero(use_a)
    if idx.size:
        try:
            sol = solve_algorithm_a(pick(idx), xi_flat[idx][:, None], tol, max_iter)
        except NonConvergence as exc:
            ok = ~np.broadcast_to(exc.mask, (idx.size,)) if exc.mask is not None else np.zeros(idx.size, dtype=bool)
            use_a[idx[~ok]] = False
            idx = idx[ok]
            sol = solve_algorithm_a(pick(idx), xi_flat[idx][:, None], tol, max_iter) if idx.size else None
        if sol is not None:
            _put(X, phi, logj, iters, idx, sol)
            methods.add("A")
    rest = np.flatnonzero(~use_a)
    if rest.size:
        kinds = np.unique(inv[rest])
        sub_u = rep.take(kinds) if rep is not o1 else rep
        z_u, fz_u = _minimize_1d(sub_u)
        z_u = np.broadcast_to(z_u, kinds.shape)
        fz_u = np.broadcast_to(fz_u, kinds.shape)
        u_ok = np.broadcast_to(check_u_shaped(sub_u, z_u if rep is not o1 else z_u[:1]), kinds.shape)
        slot = np.searchsorted(kinds, inv[rest])
        ushape = u_ok[slot]
        if np.any(ushape):
            sel = rest[ushape]
            sol = solve_algorithm_b(pick(sel), xi_flat[sel][:, None], tol, max(max_iter, 100), z=z_u[slot[ushape]][:, None], check_shape=False)
            _put(X, phi, logj, iters, sel, sol)
            methods.add("B")
        if np.any(~ushape):
            bad = np.flatnonzero(~u_ok)
            su = build_u_substitute(sub_u.take(bad) if rep is not o1 else sub_u, z_u[bad], fz_u[bad])
            sel = rest[~ushape]
            where = np.searchsorted(bad, slot[~ushape])
            full = UShapedSubstitute(
                pick(sel),
                *(np.asarray(a).reshape(-1)[where] for a in (su.min_location, su.min_value, su.left_anchor, su.left_level, su.right_anchor, su.right_level)),
            )
            sol = solve_algorithm_b(full, xi_flat[sel], tol, max(max_iter, 100))
            _put(X, phi, logj, iters, sel, sol)
            methods.add("B+F0")
    return X, phi, logj, iters, methods


def _put(X, phi, logj, iters, idx, sol):
    X.reshape(-1)[idx] = np.reshape(sol.position, (-1,))
    phi.reshape(-1)[idx] = np.reshape(sol.phi, (-1,))
    logj.reshape(-1)[idx] = np.reshape(sol.log_jacobian, (-1,))
    iters.reshape(-1)[idx] = np.reshape(sol.iterations, (-1,))


def write_solution_csv(path, xi, sol: ImplicitSolution):
    """Dump ``(xi, X, phi, log J)`` rows for debugging."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float).reshape(np.shape(sol.phi) + (-1,)))
    X = np.atleast_2d(np.asarray(sol.position).reshape(xi.shape[0], -1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"xi{k}" for k in range(xi.shape[1])] + [f"X{k}" for k in range(X.shape[1])] + ["phi", "log_J"])
        for row_xi, row_x, p, lj in zip(xi, X, np.ravel(sol.phi), np.ravel(sol.log_jacobian)):
            w.writerow([*map(repr, map(float, row_xi)), *map(repr, map(float, row_x)), repr(float(p)), repr(float(lj))])
