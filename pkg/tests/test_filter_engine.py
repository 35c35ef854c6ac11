import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ipf import implicit_sampler as isam
from ipf.filter_engine import (
    Ensemble,
    FilterConfig,
    Proposal,
    WeightCollapse,
    backward_resample,
    filter_step,
    resample,
    run_filter,
    sparse_gap_step,
    standard_sir_step,
)
from ipf.sde_model import SdeModel, cubic_obs, double_well, generate_synthetic, linear_obs, zero_drift


class ZeroNoise:
    def standard_normal(self, shape):
        return np.zeros(shape)


def weighted_ks(X, w, x_grid, cdf):
    order = np.argsort(X)
    c_hi = np.cumsum(w[order])
    ref = np.interp(X[order], x_grid, cdf)
    return max(np.max(np.abs(c_hi - ref)), np.max(np.abs(c_hi - w[order] - ref)))


def grid_cdf(F, lo=-3, hi=3, n=400_001):
    x = np.linspace(lo, hi, n)
    f = F(x)
    p = np.exp(-(f - f.min()))
    c = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))])
    return x, c / c[-1]


def weighted_mean_se(x, w):
    m = float(np.sum(w * x))
    return m, math.sqrt(float(np.sum(w * w * (x - m) ** 2)))


# ---------------------------------------------------------------------------
# one step


def test_single_particle_kalman_update_at_zero_noise():
    model, obs = double_well(0.1, 0.01), linear_obs(0.025)
    x_prev, b = 0.4, 0.9
    ens = Ensemble.start(np.array([x_prev]), 1)
    out = filter_step(ens, np.array([b]), model, obs, FilterConfig(1, resample_every=0), rng=ZeroNoise())
    prior = x_prev + 0.01 * (-10 * x_prev * (x_prev**2 - 0.5))
    v = 0.1 * 0.01
    assert out.mean()[0] == pytest.approx((prior / v + b / 0.025) / (1 / v + 1 / 0.025), abs=1e-13)


def test_linear_gaussian_equal_weights_after_step():
    model, obs = zero_drift(1, 0.1, 0.01), linear_obs(0.025)
    ens = Ensemble.start(np.array([0.2]), 500)
    out = filter_step(ens, np.array([0.5]), model, obs, FilterConfig(500, resample_every=0, seed=3))
    assert np.ptp(out.log_weights) < 1e-10
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_weights_normalized_and_positive():
    model, obs = double_well(), cubic_obs(0.1)
    ens = Ensemble.start(np.linspace(-1, 1, 300)[:, None], 300)
    out = filter_step(ens, np.array([0.4]), model, obs, FilterConfig(300, resample_every=0, seed=1))
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(out.weights > 0)


@pytest.mark.parametrize("obs,b", [(linear_obs(0.1), 1.0), (cubic_obs(0.1), 1.0), (cubic_obs(0.1), 0.5)])
def test_one_step_matches_quadrature_posterior(obs, b):
    model = zero_drift(1, 0.1, 1.0)
    M = 10_000
    out = filter_step(Ensemble.start(np.zeros(1), M), np.array([b]), model, obs, FilterConfig(M, resample_every=0, seed=2))
    x, cdf = grid_cdf(lambda u: u * u / 0.2 + (obs.h(u) - b) ** 2 / 0.2)
    assert weighted_ks(out.positions[:, 0], out.weights, x, cdf) < 0.02


def test_sir_and_implicit_agree_for_many_particles():
    model, obs = zero_drift(1, 0.1, 1.0), cubic_obs(0.1)
    M = 10_000
    ests = []
    for proposal in ("sir", "implicit_auto"):
        out = filter_step(Ensemble.start(np.zeros(1), M), np.array([0.5]), model, obs, FilterConfig(M, proposal, resample_every=0, seed=4))
        ests.append(weighted_mean_se(out.positions[:, 0], out.weights))
    (m1, s1), (m2, s2) = ests
    assert abs(m1 - m2) < 3 * math.hypot(s1, s2)


# ---------------------------------------------------------------------------
# the standard filter


def test_sir_uninformative_observation_keeps_equal_weights():
    model, obs = zero_drift(1, 0.1, 0.01), linear_obs(1e12)
    out = standard_sir_step(Ensemble.start(np.zeros(1), 100), np.array([3.0]), model, obs)
    assert np.ptp(out.log_weights) < 1e-9


def test_sir_weight_collapse_warns():
    model, obs = zero_drift(1, 0.1, 0.01), linear_obs(1e-8)
    with pytest.warns(WeightCollapse):
        standard_sir_step(Ensemble.start(np.zeros(1), 50), np.array([3.0]), model, obs)


def test_sir_unbiased_against_kalman():
    # prior N(0, 0.1), observation noise 0.1: exact posterior mean b / 2
    model, obs = zero_drift(1, 0.1, 1.0), linear_obs(0.1)
    b = 0.5
    ests = []
    for r in range(200):
        cfg = FilterConfig(1000, "sir", resample_every=0, seed=100 + r)
        out = standard_sir_step(Ensemble.start(np.zeros(1), 1000), np.array([b]), model, obs, cfg=cfg)
        ests.append(out.mean()[0])
    ests = np.array(ests)
    assert abs(ests.mean() - b / 2) < 3 * ests.std(ddof=1) / math.sqrt(ests.size)


def test_sir_needs_no_observation():
    model, obs = zero_drift(1, 0.1, 0.01), linear_obs(0.1)
    out = standard_sir_step(Ensemble.start(np.zeros(1), 10), None, model, obs)
    assert np.ptp(out.log_weights) == 0


# ---------------------------------------------------------------------------
# resampling


def test_resample_single_particle():
    ens = Ensemble(np.array([[1.5]]), np.zeros(1))
    out = resample(ens, np.random.default_rng(0))
    assert out.positions[0, 0] == 1.5


def test_resample_degenerate_weights():
    lw = np.full(6, -np.inf)
    lw[0] = 0.0
    ens = Ensemble(np.arange(6.0)[:, None], lw)
    out = resample(ens, np.random.default_rng(1))
    assert np.all(out.positions[:, 0] == 0.0)
    assert np.ptp(out.log_weights) == 0


def test_resample_offspring_counts_are_multinomial():
    w = np.array([0.05, 0.1, 0.15, 0.3, 0.4])
    ens = Ensemble(np.arange(5.0)[:, None], np.log(w))
    rng = np.random.default_rng(2)
    counts = np.zeros(5)
    trials = 100_000
    for _ in range(trials // 100):
        # 100 independent resamplings per batch keeps the loop short
        for _ in range(100):
            counts += np.bincount(resample(ens, rng).positions[:, 0].astype(int), minlength=5)
    expected = trials * 5 * w
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_resample_preserves_weighted_mean_in_expectation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 1))
    lw = rng.normal(size=40)
    ens = Ensemble(x, lw - np.logaddexp.reduce(lw))
    target = ens.mean()[0]
    means = np.array([resample(ens, rng).positions[:, 0].mean() for _ in range(1000)])
    assert abs(means.mean() - target) < 4 * means.std(ddof=1) / math.sqrt(means.size)


def test_resample_reindexes_history():
    ens = Ensemble(np.arange(4.0)[:, None], np.log([0.0001, 0.0001, 0.9997, 0.0001]), 2, [np.arange(4.0)[:, None] * 10])
    out = resample(ens, np.random.default_rng(0))
    assert np.array_equal(out.history[0], out.positions * 10)


# ---------------------------------------------------------------------------
# backward sampling


def _bridge_ensemble(x_before, x_mid, x_after, M):
    return Ensemble(np.full((M, 1), x_after), np.full(M, -math.log(M)), 2, [np.full((M, 1), x_before), np.full((M, 1), x_mid)])


def test_backward_bridge_matches_quadrature():
    model = double_well(0.5, 0.05)
    x_before, x_after = 0.6, -0.2
    M = 100_000
    ens = _bridge_ensemble(x_before, 0.0, x_after, M)
    out, log_adj = backward_resample(ens, model, None, None, FilterConfig(M, seed=5))
    X = out.history[-1][:, 0]
    w = np.exp(log_adj - log_adj.max())
    w /= w.sum()
    m, se = weighted_mean_se(X, w)
    # quadrature of P(X | x_before) P(x_after | X)
    u = np.linspace(-3, 3, 200_001)
    v = 0.5 * 0.05
    mu = x_before + 0.05 * (-10 * x_before * (x_before**2 - 0.5))
    lp = -((u - mu) ** 2) / (2 * v) - (x_after - (u + 0.05 * (-10 * u * (u * u - 0.5)))) ** 2 / (2 * v)
    p = np.exp(lp - lp.max())
    exact = float(np.sum(p * u) / np.sum(p))
    assert abs(m - exact) < 3 * se


def test_backward_zero_noise_hits_minimum():
    model, obs = double_well(0.1, 0.01), linear_obs(0.025)
    ens = _bridge_ensemble(0.5, 0.0, 0.55, 3)
    out, _ = backward_resample(ens, model, obs, np.array([0.7]), FilterConfig(3), rng=ZeroNoise())
    obj = isam.backward_objective(model, obs, np.array([0.5]), np.array([0.55]), np.array([0.7]), 0.01)
    z, _ = isam.find_minimum(obj)
    assert np.allclose(out.history[-1][:, 0], z[0], atol=1e-12)


def test_backward_symmetric_bracket():
    model, obs = zero_drift(1, 0.1, 0.01), linear_obs(0.025)
    ens = _bridge_ensemble(0.3, 0.0, 0.3, 2)
    out, _ = backward_resample(ens, model, obs, np.array([0.3]), FilterConfig(2), rng=ZeroNoise())
    assert np.allclose(out.history[-1], 0.3, atol=1e-14)


def test_backward_generic_path_agrees_with_separable():
    sep = double_well(0.3, 0.02)
    generic = SdeModel(1, sep.drift, sep.diffusion, sep.dt, diffusion_is_variance_rate=True)
    ens = _bridge_ensemble(0.4, 0.0, 0.2, 30)
    a, la = backward_resample(ens, sep, None, None, FilterConfig(30, seed=6), proposal="B")
    b, lb = backward_resample(ens, generic, None, None, FilterConfig(30, seed=6), proposal="B")
    assert np.allclose(a.history[-1], b.history[-1], atol=1e-6)
    assert np.allclose(la - la[0], lb - lb[0], atol=1e-5)


def test_backward_needs_history():
    with pytest.raises(ValueError):
        backward_resample(Ensemble.start(np.zeros(1), 3), zero_drift(), None, None, FilterConfig(3))


# ---------------------------------------------------------------------------
# sparse observations


def test_gap_one_is_filter_step():
    model, obs = double_well(), cubic_obs(0.1)
    cfg = FilterConfig(50, seed=9)
    ens = Ensemble.start(np.array([0.3]), 50)
    a = sparse_gap_step(ens, np.array([0.2]), 1, model, obs, cfg)
    b = filter_step(ens, np.array([0.2]), model, obs, cfg)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.log_weights, b.log_weights)


def test_gap_two_matches_kalman():
    # X1 ~ N(0, v), X2 ~ N(X1, v), b ~ N(X2, s)
    v, s, b = 0.1, 0.1, 0.6
    model, obs = zero_drift(1, v, 1.0), linear_obs(s, stride=2)
    M = 10_000
    out = sparse_gap_step(Ensemble.start(np.zeros(1), M), np.array([b]), 2, model, obs, FilterConfig(M, resample_every=0, seed=10))
    w = out.weights
    m2, se2 = weighted_mean_se(out.positions[:, 0], w)
    m1, se1 = weighted_mean_se(out.history[-1][:, 0], w)
    assert abs(m2 - b * 2 * v / (2 * v + s)) < 3 * se2
    assert abs(m1 - b * v / (2 * v + s)) < 3 * se1
    assert np.ptp(out.log_weights) < 1e-8  # exact quadratic solve: equal weights
    assert out.step == 2 and len(out.stats["intermediate"]) == 1


def test_joint_phi_at_zero_noise_is_min():
    model, obs = double_well(0.1, 0.01), cubic_obs(0.1, stride=2)
    obj = isam.path_objective(model, obs, np.array([0.4]), np.array([0.3]), 2, 0.0)
    sol = isam.sample(obj, np.zeros((1, 2)))
    z, fz = isam.find_minimum(obj)
    assert float(np.ravel(sol.phi)[0]) == pytest.approx(fz, abs=1e-9)
    assert np.allclose(sol.position[0], z, atol=1e-6)


def test_run_filter_with_stride():
    model, obs = double_well(0.1, 0.01), linear_obs(0.025, stride=3)
    traj, data = generate_synthetic(model, obs, np.zeros(1), 12, 4)
    out = run_filter(model, obs, data, FilterConfig(40, seed=1), np.zeros(1), truth=traj.states)
    assert out.means.shape == (13, 1)
    assert np.all(np.isfinite(out.means)) and np.all(out.ess >= 1)
    sep = run_filter(model, obs, data, FilterConfig(40, seed=1, joint_gaps=False), np.zeros(1))
    assert np.all(np.isfinite(sep.means))


# ---------------------------------------------------------------------------
# driver


def test_serial_and_parallel_runs_are_identical():
    model, obs = double_well(0.1, 0.01), cubic_obs(0.05)
    _, data = generate_synthetic(model, obs, np.zeros(1), 15, 2)
    a = run_filter(model, obs, data, FilterConfig(64, seed=3, workers=1), np.zeros(1))
    b = run_filter(model, obs, data, FilterConfig(64, seed=3, workers=4), np.zeros(1))
    assert np.array_equal(a.means, b.means) and np.array_equal(a.final.positions, b.final.positions)


def test_weight_carry_over_and_resampling_agree():
    model, obs = double_well(0.1, 0.01), linear_obs(0.025)
    _, data = generate_synthetic(model, obs, np.zeros(1), 20, 7)
    est = {0: [], 1: []}
    for every in est:
        for r in range(100):
            out = run_filter(model, obs, data, FilterConfig(50, resample_every=every, seed=1000 * every + r), np.zeros(1))
            est[every].append(out.means[-1, 0])
    a, b = np.array(est[0]), np.array(est[1])
    se = math.hypot(a.std(ddof=1), b.std(ddof=1)) / 10
    assert abs(a.mean() - b.mean()) < 3 * se


def test_filter_csv(tmp_path):
    model, obs = double_well(), linear_obs(0.025)
    traj, data = generate_synthetic(model, obs, np.zeros(1), 5, 0)
    path = tmp_path / "run.csv"
    run_filter(model, obs, data, FilterConfig(10), np.zeros(1), truth=traj.states, csv_path=path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "t", "truth0", "estimate0", "variance0", "ess", "entropy"]
    assert len(rows) == 7


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(0)
    with pytest.raises(ValueError):
        FilterConfig(10, "bogus")
    assert FilterConfig(10, "implicit_b").proposal is Proposal.IMPLICIT_B


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("IPF_THREADS", "3")
    assert FilterConfig().n_workers == 3
    assert FilterConfig(workers=2).n_workers == 2


@settings(max_examples=20, deadline=None)
@given(M=st.integers(1, 40), seed=st.integers(0, 1000))
def test_ensemble_statistics(M, seed):
    rng = np.random.default_rng(seed)
    lw = rng.normal(size=M) * 3
    ens = Ensemble(rng.normal(size=(M, 1)), lw)
    assert ens.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert 1.0 - 1e-9 <= ens.ess() <= M + 1e-9
    assert 0.0 <= ens.entropy() <= math.log(M) + 1e-12
    assert ens.var()[0] >= 0
