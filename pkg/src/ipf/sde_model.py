"""Itô SDE models, their Euler discretization, and the observation process.

A model is ``dx = f(x, t) dt + g(x, t) dw`` with diagonal ``g``; observations
are ``b = h(x) + G W`` with diagonal noise covariance.  Everything here works on
arrays whose last axis is the state (or observation) dimension, so a whole
ensemble can be pushed through one call.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

Array = np.ndarray

LOG_2PI = math.log(2.0 * math.pi)


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Streams are addressed by key rather than drawn sequentially, so a particle
    or step gets the same numbers no matter how the work is scheduled.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class SdeModel:
    """Euler-discretized diffusion with diagonal noise.

    ``drift(x, t)`` and ``diffusion(x, t)`` take ``(..., m)`` arrays and return
    ``(..., m)`` arrays; ``diffusion`` returns the diagonal of ``g``.

    With ``diffusion_is_variance_rate`` the diagonal is read as a variance per
    unit time, so one step has variance ``g * dt`` instead of ``g**2 * dt``.

    ``elementwise_drift`` declares that component ``k`` of the drift only
    depends on ``x_k``; ``drift_deriv`` / ``drift_deriv2`` are then the
    elementwise first and second derivatives.  ``additive_noise`` declares
    that ``g`` does not depend on the state.
    """

    dim: int
    drift: Callable[[Array, float], Array]
    diffusion: Callable[[Array, float], Array]
    dt: float
    diffusion_is_variance_rate: bool = False
    elementwise_drift: bool = False
    drift_deriv: Callable[[Array, float], Array] | None = None
    drift_deriv2: Callable[[Array, float], Array] | None = None
    additive_noise: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dim}")
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")

    def step_mean(self, x: Array, t: float) -> Array:
        x = np.asarray(x, dtype=float)
        return x + self.drift(x, t) * self.dt

    def step_variance(self, x: Array, t: float) -> Array:
        x = np.asarray(x, dtype=float)
        g = np.broadcast_to(np.asarray(self.diffusion(x, t), dtype=float), x.shape)
        return g * self.dt if self.diffusion_is_variance_rate else g**2 * self.dt

    def with_diffusion_scale(self, value: float) -> "SdeModel":
        """Copy of a constant-diffusion model with the diagonal set to ``value``."""
        v = float(value)
        return replace(self, diffusion=lambda x, t: np.full(np.shape(x), v))


@dataclass(frozen=True)
class ObservationModel:
    """Observation ``b = h(x) + noise`` with diagonal noise variances.

    When ``diagonal`` is set, ``h`` acts elementwise (``k == m``) and
    ``h_deriv`` / ``h_deriv2`` give its elementwise derivatives.  Otherwise
    ``h_jac`` may supply the ``(..., k, m)`` Jacobian.  ``h_inverse`` is an
    optional elementwise preimage used to seed minimizations.
    """

    h: Callable[[Array], Array]
    noise_var: Array
    obs_stride: int = 1
    diagonal: bool = True
    linear: bool = False
    h_deriv: Callable[[Array], Array] | None = None
    h_deriv2: Callable[[Array], Array] | None = None
    h_jac: Callable[[Array], Array] | None = None
    h_inverse: Callable[[Array], Array] | None = None
    name: str = "custom"

    def __post_init__(self):
        nv = np.atleast_1d(np.asarray(self.noise_var, dtype=float))
        object.__setattr__(self, "noise_var", nv)
        if np.any(nv <= 0):
            raise ValueError("observation noise variances must be positive")
        if self.obs_stride < 1:
            raise ValueError("obs_stride must be >= 1")

    @property
    def obs_dim(self) -> int:
        return int(self.noise_var.shape[0])


@dataclass
class Trajectory:
    states: Array  # (n_steps + 1, m)
    times: Array  # (n_steps + 1,)

    def __post_init__(self):
        dt = np.diff(self.times)
        if dt.size and (np.any(dt <= 0) or not np.allclose(dt, dt[0])):
            raise ValueError("trajectory times must be strictly increasing and uniform")


def euler_step(model: SdeModel, x: Array, t: float, noise: Array) -> Array:
    """One Euler-Maruyama step driven by standard-normal ``noise``."""
    x = np.asarray(x, dtype=float)
    return model.step_mean(x, t) + np.sqrt(model.step_variance(x, t)) * np.asarray(noise, dtype=float)


def transition_logdensity(model: SdeModel, x_prev: Array, x_next: Array, t: float) -> Array:
    """Log density of ``x_next`` after one Euler step from ``x_prev``."""
    x_prev = np.asarray(x_prev, dtype=float)
    var = model.step_variance(x_prev, t)
    if np.any(var <= 0):
        raise ValueError("transition variance must be positive")
    r = np.asarray(x_next, dtype=float) - model.step_mean(x_prev, t)
    return -0.5 * np.sum(r * r / var + np.log(var) + LOG_2PI, axis=-1)


def observation_logdensity(obs: ObservationModel, x: Array, b: Array) -> Array:
    hx = np.asarray(obs.h(np.asarray(x, dtype=float)), dtype=float)
    b = np.asarray(b, dtype=float)
    k = obs.obs_dim
    if hx.shape[-1] != k or (b.ndim and b.shape[-1] != k):
        raise ValueError(f"observation dimension mismatch: h gives {hx.shape[-1]}, b has {b.shape}, expected {k}")
    r = hx - b
    return -0.5 * np.sum(r * r / obs.noise_var + np.log(obs.noise_var) + LOG_2PI, axis=-1)


def generate_synthetic(
    model: SdeModel, obs: ObservationModel, x0: Array, n_steps: int, rng_seed: int
) -> tuple[Trajectory, Array]:
    """Run one reference path and observe it every ``obs_stride`` steps.

    Returns the trajectory (``n_steps + 1`` states, starting with ``x0``) and an
    ``(n_obs, k)`` array whose row ``j`` observes step ``(j + 1) * obs_stride``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = stream(rng_seed, 0)
    m = model.dim
    states = np.empty((n_steps + 1, m))
    states[0] = np.broadcast_to(np.asarray(x0, dtype=float), (m,))
    noise = rng.standard_normal((n_steps, m))
    for n in range(n_steps):
        states[n + 1] = euler_step(model, states[n], n * model.dt, noise[n])
    obs_steps = np.arange(obs.obs_stride, n_steps + 1, obs.obs_stride)
    obs_noise = rng.standard_normal((obs_steps.size, obs.obs_dim))
    observations = obs.h(states[obs_steps]) + np.sqrt(obs.noise_var) * obs_noise
    times = model.dt * np.arange(n_steps + 1)
    return Trajectory(states, times), observations


# ---------------------------------------------------------------------------
# registries


def double_well(sigma: float = 0.1, dt: float = 0.01, literal: bool = False, variance_rate: bool = True) -> SdeModel:
    """Particle in ``V(x) = 2.5 (x^2 - 0.5)^2``.

    The force is ``-V'(x) = -10 x (x^2 - 0.5)``; ``literal=True`` uses
    ``-10 x (x^2 - 1)`` instead.
    """
    c = 1.0 if literal else 0.5
    return SdeModel(
        dim=1,
        drift=lambda x, t: -10.0 * x * (x * x - c),
        diffusion=lambda x, t: np.full(np.shape(x), sigma),
        dt=dt,
        diffusion_is_variance_rate=variance_rate,
        elementwise_drift=True,
        drift_deriv=lambda x, t: -10.0 * (3.0 * x * x - c),
        drift_deriv2=lambda x, t: -60.0 * x,
        additive_noise=True,
        name="double_well_literal" if literal else "double_well",
    )


def potential(x: Array) -> Array:
    return 2.5 * (np.asarray(x) ** 2 - 0.5) ** 2


def zero_drift(dim: int = 1, sigma: float = 1.0, dt: float = 0.01, variance_rate: bool = True) -> SdeModel:
    return SdeModel(
        dim=dim,
        drift=lambda x, t: np.zeros(np.shape(x)),
        diffusion=lambda x, t: np.full(np.shape(x), sigma),
        dt=dt,
        diffusion_is_variance_rate=variance_rate,
        elementwise_drift=True,
        drift_deriv=lambda x, t: np.zeros(np.shape(x)),
        drift_deriv2=lambda x, t: np.zeros(np.shape(x)),
        additive_noise=True,
        name="zero",
    )


def polynomial_drift(coeffs, dim: int = 1, sigma: float = 1.0, dt: float = 0.01, variance_rate: bool = True) -> SdeModel:
    """Elementwise drift ``sum_k coeffs[k] x**k``."""
    p = np.polynomial.Polynomial(np.asarray(coeffs, dtype=float))
    dp, d2p = p.deriv(1), p.deriv(2)
    return SdeModel(
        dim=dim,
        drift=lambda x, t: p(np.asarray(x, dtype=float)),
        diffusion=lambda x, t: np.full(np.shape(x), sigma),
        dt=dt,
        diffusion_is_variance_rate=variance_rate,
        elementwise_drift=True,
        drift_deriv=lambda x, t: dp(np.asarray(x, dtype=float)),
        drift_deriv2=lambda x, t: d2p(np.asarray(x, dtype=float)),
        additive_noise=True,
        name="custom_polynomial",
    )


def linear_obs(s: float, dim: int = 1, stride: int = 1) -> ObservationModel:
    return ObservationModel(
        h=lambda x: np.asarray(x, dtype=float),
        noise_var=np.full(dim, float(s)),
        obs_stride=stride,
        linear=True,
        h_deriv=lambda x: np.ones(np.shape(x)),
        h_deriv2=lambda x: np.zeros(np.shape(x)),
        h_inverse=lambda b: np.asarray(b, dtype=float),
        name="linear",
    )


def _cube(x):
    x = np.asarray(x, dtype=float)
    return x * x * x


def cubic_obs(s: float, dim: int = 1, stride: int = 1) -> ObservationModel:
    return ObservationModel(
        h=_cube,
        noise_var=np.full(dim, float(s)),
        obs_stride=stride,
        h_deriv=lambda x: 3.0 * np.asarray(x, dtype=float) ** 2,
        h_deriv2=lambda x: 6.0 * np.asarray(x, dtype=float),
        h_inverse=lambda b: np.cbrt(np.asarray(b, dtype=float)),
        name="cubic",
    )


DRIFTS = ("double_well", "zero", "custom_polynomial")
OBSERVATIONS = {"linear": linear_obs, "cubic": cubic_obs}


@dataclass
class ModelConfig:
    drift: str = "double_well"
    sigma: float = 0.1
    s: float = 0.025
    dt: float = 0.01
    m: int = 1
    obs: str = "linear"
    obs_stride: int = 1
    literal_drift: bool = False
    diffusion_is_variance_rate: bool = True
    drift_coeffs: list[float] = field(default_factory=lambda: [0.0])

    def build(self) -> tuple[SdeModel, ObservationModel]:
        if self.drift == "double_well":
            if self.m != 1:
                raise ValueError("double_well is one-dimensional")
            model = double_well(self.sigma, self.dt, self.literal_drift, self.diffusion_is_variance_rate)
        elif self.drift == "zero":
            model = zero_drift(self.m, self.sigma, self.dt, self.diffusion_is_variance_rate)
        elif self.drift == "custom_polynomial":
            model = polynomial_drift(self.drift_coeffs, self.m, self.sigma, self.dt, self.diffusion_is_variance_rate)
        else:
            raise ValueError(f"unknown drift {self.drift!r}; choose from {DRIFTS}")
        if self.obs not in OBSERVATIONS:
            raise ValueError(f"unknown observation function {self.obs!r}; choose from {sorted(OBSERVATIONS)}")
        return model, OBSERVATIONS[self.obs](self.s, self.m, self.obs_stride)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind == "list":
        if isinstance(value, (list, tuple)):
            return [float(v) for v in value]
        return [float(v) for v in str(value).split(",") if v.strip()]
    return kind(value)


_MODEL_KEYS = {
    "drift": str,
    "sigma": float,
    "s": float,
    "dt": float,
    "m": int,
    "obs": str,
    "obs_stride": int,
    "literal_drift": bool,
    "diffusion_is_variance_rate": bool,
    "drift_coeffs": "list",
}


def load_model_config(source) -> ModelConfig:
    """Model config from a dict, a ``.json`` file, or a ``key=value`` file."""
    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        text = path.read_text()
        raw = json.loads(text) if path.suffix == ".json" else parse_key_values(text)
    unknown = set(raw) - set(_MODEL_KEYS)
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    return ModelConfig(**{k: _coerce(v, _MODEL_KEYS[k]) for k, v in raw.items()})
