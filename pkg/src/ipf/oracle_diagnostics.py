"""Quadrature reference posteriors and the Radon-Nikodym histogram.

A one-dimensional density ``exp(-F)`` is tabulated on a uniform grid,
normalized with the trapezoidal rule in log space, and queried for moments,
CDF values and quantiles.  The histogram bins proposal samples into intervals
of equal posterior probability; a flat histogram means the proposal already
is the posterior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .implicit_sampler import SampleObjective


class TailMass(ValueError):
    """The grid cuts off a non-negligible part of the density."""


def _as_logdensity(F):
    if isinstance(F, SampleObjective):
        if F.dim != 1:
            raise ValueError("quadrature oracles are one-dimensional")
        return lambda x: -np.asarray(F.eval(np.asarray(x, dtype=float)[:, None]), dtype=float).reshape(-1)
    return lambda x: -np.asarray(F(np.asarray(x, dtype=float)), dtype=float).reshape(-1)


@dataclass(frozen=True)
class QuadraturePosterior:
    grid: np.ndarray
    log_density: np.ndarray  # normalized: trapezoid of exp() is 1
    cdf_table: np.ndarray

    @property
    def lo(self) -> float:
        return float(self.grid[0])

    @property
    def hi(self) -> float:
        return float(self.grid[-1])

    @property
    def n_points(self) -> int:
        return self.grid.size

    def _weights(self):
        dx = self.grid[1] - self.grid[0]
        w = np.full(self.grid.size, dx)
        w[0] = w[-1] = 0.5 * dx
        return w * np.exp(self.log_density)

    def mean(self) -> float:
        return float(np.sum(self._weights() * self.grid))

    def var(self) -> float:
        mu = self.mean()
        return float(np.sum(self._weights() * (self.grid - mu) ** 2))

    def expect(self, fn) -> float:
        return float(np.sum(self._weights() * fn(self.grid)))

    def cdf(self, x):
        return np.interp(x, self.grid, self.cdf_table, left=0.0, right=1.0)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        # cdf_table is non-decreasing; drop flat stretches so interp is well defined
        keep = np.concatenate([[True], np.diff(self.cdf_table) > 0])
        return np.interp(p, self.cdf_table[keep], self.grid[keep])


def _tabulate(logp, lo, hi, n_points):
    x = np.linspace(lo, hi, n_points)
    lp = logp(x)
    if not np.all(np.isfinite(lp) | (lp == -np.inf)):
        raise ValueError("log density is not finite on the grid")
    dx = x[1] - x[0]
    lw = lp + np.log(dx)
    lw[0] -= np.log(2.0)
    lw[-1] -= np.log(2.0)
    log_z = logsumexp(lw)
    lp_n = lp - log_z
    dens = np.exp(lp_n)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * dx)])
    return x, lp_n, cdf


def _pilot_range(logp, lo, hi, n=20001, cut=np.log(1e-16)):
    # widen until both ends are negligible, then shrink to the significant part
    for _ in range(40):
        x = np.linspace(lo, hi, n)
        lp = logp(x)
        top = np.max(lp)
        width = hi - lo
        grow_lo, grow_hi = lp[0] - top > cut, lp[-1] - top > cut
        if not (grow_lo or grow_hi):
            break
        lo = lo - width if grow_lo else lo
        hi = hi + width if grow_hi else hi
    else:
        raise TailMass("density does not decay inside the pilot range")
    sig = np.flatnonzero(lp - top > cut)
    dx = x[1] - x[0]
    x_lo, x_hi = x[max(sig[0] - 1, 0)], x[min(sig[-1] + 1, n - 1)]
    if sig.size < 50:
        # too narrow for the pilot grid: zoom in
        return _pilot_range(logp, x_lo - 2 * dx, x_hi + 2 * dx, n, cut)
    _, lp_n, _ = _tabulate(logp, x_lo, x_hi, n)
    xs = np.linspace(x_lo, x_hi, n)
    w = np.exp(lp_n) * (xs[1] - xs[0])
    mu = np.sum(w * xs)
    sd = np.sqrt(max(np.sum(w * (xs - mu) ** 2), 1e-300))
    return min(x_lo, mu - 10 * sd), max(x_hi, mu + 10 * sd)


def build_quadrature(F, lo: float | None = None, hi: float | None = None, n_points: int = 100_001, tail_tol: float = 1e-12) -> QuadraturePosterior:
    """Tabulate and normalize ``exp(-F)`` on ``[lo, hi]``.

    ``F`` is a one-dimensional :class:`SampleObjective` or a vectorized
    callable.  Without explicit limits a pilot pass finds the significant
    range and the grid spans it plus ``mean +- 10 sd``.
    """
    logp = _as_logdensity(F)
    if lo is None or hi is None:
        start_lo, start_hi = -10.0, 10.0
        if isinstance(F, SampleObjective) and "starts" in F.context:
            s = np.concatenate([np.ravel(v) for v in F.context["starts"]])
            sc = float(np.max(np.ravel(F.context.get("scale", np.ones(1)))))
            start_lo, start_hi = s.min() - 10 * sc, s.max() + 10 * sc
        p_lo, p_hi = _pilot_range(logp, start_lo, start_hi)
        lo = p_lo if lo is None else lo
        hi = p_hi if hi is None else hi
    if not hi > lo or n_points < 3:
        raise ValueError("need hi > lo and at least 3 grid points")
    x, lp, cdf = _tabulate(logp, lo, hi, n_points)
    edge = max(lp[0], lp[-1]) - np.max(lp)
    if edge > np.log(tail_tol):
        raise TailMass(f"boundary density is {np.exp(edge):.3g} of the maximum")
    return QuadraturePosterior(x, lp, cdf)


def equal_probability_partition(q: QuadraturePosterior, K: int) -> np.ndarray:
    """Points ``Y_1 < ... < Y_{K-1}`` with ``CDF(Y_k) = k / K``."""
    if K < 2:
        raise ValueError("K must be >= 2")
    return q.quantile(np.arange(1, K) / K)


@dataclass
class RnHistogram:
    partition: np.ndarray  # Y_1..Y_{K-1}; Y_K = +inf
    masses: np.ndarray  # unnormalized bin weights
    n_samples: int

    @property
    def K(self) -> int:
        return self.partition.size + 1

    @property
    def frequencies(self) -> np.ndarray:
        total = self.masses.sum()
        return self.masses / total if total > 0 else np.full(self.K, np.nan)

    def merge(self, other: "RnHistogram") -> "RnHistogram":
        if not np.array_equal(self.partition, other.partition):
            raise ValueError("histograms use different partitions")
        return RnHistogram(self.partition, self.masses + other.masses, self.n_samples + other.n_samples)

    def chi2(self) -> float:
        """Pearson statistic against the flat histogram, using ``n_samples`` counts."""
        e = 1.0 / self.K
        return float(self.n_samples * np.sum((self.frequencies - e) ** 2 / e))

    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.frequencies - 1.0 / self.K)))


def rn_histogram(positions, weights=None, q: QuadraturePosterior | None = None, K: int = 10, partition=None) -> RnHistogram:
    """Bin samples into the posterior equal-probability intervals ``(Y_{k-1}, Y_k]``.

    ``weights=None`` bins the raw positions (the proposal's own frequencies).
    """
    if partition is None:
        if q is None:
            raise ValueError("need a quadrature posterior or an explicit partition")
        partition = equal_probability_partition(q, K)
    partition = np.asarray(partition, dtype=float)
    x = np.asarray(positions, dtype=float).reshape(-1)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape != x.shape:
        raise ValueError("one weight per sample")
    k = np.searchsorted(partition, x, side="left")
    masses = np.bincount(k, weights=w, minlength=partition.size + 1).astype(float)
    return RnHistogram(partition, masses, x.size)


def write_histogram_csv(path, partition, freq_standard, freq_implicit, extra: dict | None = None):
    """Histogram table with columns ``k, Y_k, freq_standard, freq_implicit`` plus ``extra``."""
    partition = np.asarray(partition, dtype=float)
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "Y_k", "freq_standard", "freq_implicit", *extra])
        ys = list(partition) + [np.inf]
        for k, (y, fs, fi) in enumerate(zip(ys, freq_standard, freq_implicit), start=1):
            more = [repr(float(col[k - 1])) for col in extra.values()]
            w.writerow([k, repr(float(y)), repr(float(fs)), repr(float(fi)), *more])
