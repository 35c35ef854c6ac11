import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipf import implicit_sampler as isam
from ipf.sde_model import (
    ObservationModel,
    cubic_obs,
    double_well,
    linear_obs,
    observation_logdensity,
    transition_logdensity,
    zero_drift,
)

SIG = S = 0.1


def cubic(b, sigma=SIG, s=S):
    return isam.static_objective(cubic_obs(s), b, sigma)


def F_cubic(x, b, sigma=SIG, s=S):
    return x * x / (2 * sigma) + (x**3 - b) ** 2 / (2 * s)


def bisect(g, lo, hi, tol=1e-15):
    glo = g(lo)
    assert glo * g(hi) <= 0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if (gm > 0) == (glo > 0):
            lo, glo = mid, gm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def grid_cdf(F, lo, hi, n=400_001):
    x = np.linspace(lo, hi, n)
    f = F(x)
    p = np.exp(-(f - f.min()))
    c = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))])
    return x, c / c[-1]


def weighted_ks(X, logw, x_grid, cdf):
    order = np.argsort(X)
    x = X[order]
    w = np.exp(logw[order] - logw.max())
    w /= w.sum()
    ecdf_hi = np.cumsum(w)
    ecdf_lo = ecdf_hi - w
    ref = np.interp(x, x_grid, cdf)
    return max(np.max(np.abs(ecdf_hi - ref)), np.max(np.abs(ecdf_lo - ref)))


# ---------------------------------------------------------------------------
# objectives


def test_objective_matches_log_densities_and_fd_gradient():
    model, obs = double_well(0.1, 0.01), linear_obs(0.025)
    rng = np.random.default_rng(0)
    x_prev = rng.normal(0, 0.7, (100, 1))
    b = np.array([0.4])
    obj = isam.build_objective(model, obs, x_prev, b, 0.0)
    X = x_prev + rng.normal(0, 0.2, (100, 1))
    direct = -transition_logdensity(model, x_prev, X, 0.0) - observation_logdensity(obs, X, b)
    assert np.allclose(obj.eval(X), direct, rtol=1e-13)
    eps = 1e-5
    fd = (obj.eval(X + eps) - obj.eval(X - eps)) / (2 * eps)
    assert np.allclose(obj.grad(X)[:, 0], fd, rtol=1e-6, atol=1e-6)


def test_table_one_objective_form():
    sigma, dt, s = 0.1, 0.01, 0.025
    model = zero_drift(1, sigma, dt)
    obj = isam.build_objective(model, linear_obs(s), np.array([0.3]), np.array([0.5]), 0.0)
    X = np.linspace(-1, 1, 7)[:, None]
    shape = (X[:, 0] - 0.3) ** 2 / (2 * sigma * dt) + (X[:, 0] - 0.5) ** 2 / (2 * s)
    d = obj.eval(X) - shape
    assert np.allclose(d, d[0], atol=1e-10)


def test_static_objective_form():
    obj = cubic(1.0)
    x = np.linspace(-2, 2, 9)
    assert np.allclose(obj.eval(x[:, None]), F_cubic(x, 1.0))


def test_objective_is_coercive():
    obj = cubic(2.5)
    big = np.array([[-50.0], [50.0], [-1e3], [1e3]])
    assert np.all(obj.eval(big) > obj.eval(np.array([[1.3]])) + 1e3)


def test_generic_objective_for_nondiagonal_observation():
    obs = ObservationModel(
        h=lambda x: (x[..., 0] + x[..., 1] ** 2)[..., None],
        noise_var=np.array([0.1]),
        diagonal=False,
        h_jac=lambda x: np.stack([np.ones(x.shape[:-1]), 2 * x[..., 1]], axis=-1)[..., None, :],
    )
    obj = isam.build_objective(zero_drift(2, 1.0, 0.1), obs, np.zeros(2), np.array([0.5]), 0.0)
    assert not obj.separable
    X = np.random.default_rng(1).normal(size=(20, 2))
    assert np.allclose(obj.grad(X), isam.fd_grad(obj.eval, X), atol=1e-5)


# ---------------------------------------------------------------------------
# Algorithm A


def linear_case(x_prev=0.3, b=0.8, sd=0.1 * 0.01, s=0.025):
    model = zero_drift(1, 0.1, 0.01)
    return isam.build_objective(model, linear_obs(s), np.array([x_prev]), np.array([b]), 0.0), sd, s


def test_algorithm_a_linear_at_zero_xi():
    x_prev, b = 0.3, 0.8
    obj, sd, s = linear_case(x_prev, b)
    sol = isam.solve_algorithm_a(obj, np.zeros(1))
    x_star = (x_prev / sd + b / s) / (1 / sd + 1 / s)
    assert sol.position[0] == pytest.approx(x_star, abs=1e-14)
    # phi without the Gaussian normalizing constants kept in the objective
    assert sol.phi - obj.const == pytest.approx(0.5 * (x_prev - b) ** 2 / (sd + s), rel=1e-12)
    assert sol.iterations == 1


@given(xi=st.floats(-5, 5))
def test_algorithm_a_linear_one_iteration(xi):
    obj, _, _ = linear_case()
    sol = isam.solve_algorithm_a(obj, np.array([xi]))
    assert sol.iterations == 1
    assert sol.residual <= 1e-10


def test_algorithm_a_cubic_against_bisection_of_its_map():
    b = 0.5
    obj = cubic(b)

    def a_map(x, xi):
        dF = x / SIG + 3 * x * x * (x**3 - b) / S
        P = 1 / SIG + (3 * x * x) ** 2 / S
        return dF / math.sqrt(P) - xi

    xis = np.array([-2.0, -1.0, -0.3, 0.0, 0.3, 0.55, 1.0, 2.0])
    sol = isam.solve_algorithm_a(obj, xis[:, None])
    assert np.all(sol.residual < 1e-10)
    for xi, x in zip(xis, sol.position[:, 0]):
        ref = bisect(lambda u: a_map(u, xi), -3.0, 3.0)
        assert x == pytest.approx(ref, abs=1e-8)


def test_algorithm_a_applicability():
    # the A map x -> F'(x) / sqrt(P(x)) turns back for |b| above about 0.8
    x = np.linspace(-3, 3, 6001)
    for b in (0.0, 0.3, 0.5, 1.0, 2.5):
        dF = x / SIG + 3 * x * x * (x**3 - b) / S
        P = 1 / SIG + (3 * x * x) ** 2 / S
        monotone = bool(np.all(np.diff(dF / np.sqrt(P)) > 0))
        ok = bool(isam.algorithm_a_applicable(cubic(b))[()])
        assert monotone == (b < 0.8)
        if not monotone:
            assert not ok
    assert isam.algorithm_a_applicable(cubic(0.3))[()]
    assert not isam.algorithm_a_applicable(cubic(0.5))[()]  # increasing but nearly flat


def test_a_and_b_agree_on_linear_problems():
    obj, _, _ = linear_case()
    xi = np.linspace(-3, 3, 25)[:, None]
    a = isam.solve_algorithm_a(obj, xi)
    b = isam.solve_algorithm_b(obj, xi)
    assert np.allclose(a.position, b.position, atol=1e-8)
    assert np.allclose(a.log_weight, b.log_weight, atol=1e-8)


def test_a_differs_from_b_on_nonlinear_problems():
    obj = cubic(0.5)
    xi = np.array([[1.5]])
    assert abs(isam.solve_algorithm_a(obj, xi).position[0, 0] - isam.solve_algorithm_b(obj, xi).position[0, 0]) > 1e-4


# ---------------------------------------------------------------------------
# minimum, U-shape, substitute


def test_minimum_of_square():
    obj = isam.SampleObjective(1, (isam.GaussianTerm(np.zeros(1), np.full(1, 0.5)),))
    z, fz = isam.find_minimum(obj)
    assert abs(z[0]) < 1e-12 and abs(fz) < 1e-20


def test_minimum_cubic_against_grid_scan():
    x = np.linspace(-3, 3, 600_001)
    i = np.argmin(F_cubic(x, 1.0))
    fine = np.linspace(x[i - 1], x[i + 1], 20_001)
    ref = fine[np.argmin(F_cubic(fine, 1.0))]
    z, fz = isam.find_minimum(cubic(1.0))
    assert z[0] == pytest.approx(ref, abs=1e-6)
    assert abs(cubic(1.0).grad(z)[0]) < 1e-8


def test_minimum_linear_closed_form():
    obj, sd, s = linear_case(0.3, 0.8)
    z, _ = isam.find_minimum(obj)
    assert z[0] == pytest.approx((0.3 / sd + 0.8 / s) / (1 / sd + 1 / s), abs=1e-12)


def test_minimum_is_the_absolute_one():
    # two basins of similar depth; the lower one must win
    obj = cubic(1.0)
    z, fz = isam.find_minimum(obj)
    x = np.linspace(-3, 3, 100_001)
    assert fz <= F_cubic(x, 1.0).min() + 1e-12


def test_u_shape_detection():
    for b, expect in [(0.0, True), (0.5, True), (1.0, False), (2.5, False), (-1.0, False)]:
        o1 = cubic(b).component(0)
        z, _ = isam.find_minimum(cubic(b))
        assert bool(isam.check_u_shaped(o1, z[0])) is expect


def test_substitute_is_identity_for_u_shaped():
    sub = isam.build_u_substitute(cubic(0.5).component(0))
    assert sub.is_identity
    x = np.linspace(-3, 3, 101)
    assert np.allclose(sub.f0_eval(x), F_cubic(x, 0.5))


def test_substitute_contract_cubic():
    obj = cubic(1.0)
    sub = isam.build_u_substitute(obj.component(0))
    x = np.linspace(-3, 3, 60_001)
    f0 = sub.f0_eval(x)
    f = F_cubic(x, 1.0)
    z = sub.min_location.item()
    left, right = f0[x < z], f0[x > z]
    assert np.all(np.diff(left) < 0) and np.all(np.diff(right) > 0)
    assert f0.min() == pytest.approx(f.min(), abs=1e-9)
    assert np.all(f0 <= f.max() + 1e-12)
    # F0 agrees with F away from the chord
    outside = (x < sub.left_anchor) | (x > sub.right_anchor)
    assert np.allclose(f0[outside], f[outside])


# ---------------------------------------------------------------------------
# Algorithm B


def test_algorithm_b_zero_xi():
    obj = cubic(0.5)
    z, fz = isam.find_minimum(obj)
    sol = isam.solve_algorithm_b(obj, np.zeros(1))
    assert sol.position[0] == pytest.approx(z[0], abs=1e-12)
    assert sol.phi == pytest.approx(fz)
    assert sol.residual < 1e-14


@settings(max_examples=40, deadline=None)
@given(b=st.floats(-3, 3), xi=st.floats(-4, 4).filter(lambda v: abs(v) > 1e-6))
def test_algorithm_b_branch_contract(b, xi):
    obj = cubic(b)
    z, _ = isam.find_minimum(obj)
    sol = isam.sample(obj, np.array([xi]), "auto")
    assert sol.residual <= 1e-10
    if "A" not in sol.method:
        assert np.sign(sol.position[0] - z[0]) == np.sign(xi)


def test_algorithm_b_against_bisection_of_min_equation():
    b = 0.5
    obj = cubic(b)
    z, fz = isam.find_minimum(obj)
    xis = np.array([-2.0, -1.0, 1.0, 2.0])
    sol = isam.solve_algorithm_b(obj, xis[:, None])
    for xi, x in zip(xis, sol.position[:, 0]):
        lo, hi = (z[0], 3.0) if xi > 0 else (-3.0, z[0])
        ref = bisect(lambda u: F_cubic(u, b) - fz - 0.5 * xi * xi, lo, hi)
        assert x == pytest.approx(ref, abs=1e-8)


def test_algorithm_b_refuses_non_u_shaped():
    with pytest.raises(isam.NotUShaped):
        isam.solve_algorithm_b(cubic(1.0), np.array([[1.0]]))


def test_substitute_solve_against_bisection():
    obj = cubic(1.0)
    sub = isam.build_u_substitute(obj.component(0))
    z, f0min = sub.min_location.item(), sub.min_value.item()
    xis = np.array([-2.0, -1.0, 1.0, 2.0])
    sol = isam.solve_algorithm_b(sub, xis)
    for xi, x in zip(xis, np.ravel(sol.position)):
        lo, hi = (z, 3.0) if xi > 0 else (-3.0, z)
        ref = bisect(lambda u: sub.f0_eval(np.array(u)).item() - f0min - 0.5 * xi * xi, lo, hi)
        assert x == pytest.approx(ref, abs=1e-8)
    assert np.all(sol.residual <= 1e-10)


def test_substitute_phi_sign():
    # the compensating factor must be min F0 + F - F0; the opposite sign biases the estimate
    obj = cubic(1.0)
    sub = isam.build_u_substitute(obj.component(0))
    xi = np.random.default_rng(3).standard_normal(100_000)
    sol = isam.solve_algorithm_b(sub, xi)
    X = np.ravel(sol.position)
    x_grid, cdf = grid_cdf(lambda x: F_cubic(x, 1.0), -3, 3)
    exact = np.interp(0.5, cdf, x_grid)  # any functional works; use the median
    exact_mean = float(np.sum(np.diff(cdf) * 0.5 * (x_grid[1:] + x_grid[:-1])))

    def wmean(lw):
        w = np.exp(lw - lw.max())
        w /= w.sum()
        m = np.sum(w * X)
        se = math.sqrt(np.sum(w * w * (X - m) ** 2))
        return m, se

    m_ok, se_ok = wmean(sol.log_weight)
    printed_phi = 2 * sub.min_value.item() - sol.phi
    m_bad, se_bad = wmean(-printed_phi + sol.log_jacobian)
    assert abs(m_ok - exact_mean) < 3 * se_ok
    assert abs(m_bad - exact_mean) > 5 * se_bad
    assert exact < 1.0


# ---------------------------------------------------------------------------
# random direction and exact quadratic solves


def test_random_direction_identity():
    q = isam.QuadraticForm(np.array([1.0, -2.0]), np.eye(2), 0.7)
    xi = np.array([[0.3, -1.2], [2.0, 0.5]])
    sol = isam.solve_random_direction(q, xi)
    assert np.allclose(sol.position, q.center + xi)
    assert np.allclose(sol.phi, 0.7) and np.allclose(sol.log_jacobian, 0.0)


def test_random_direction_scalar_is_exact():
    q = isam.QuadraticForm(np.array([0.4]), np.array([[9.0]]))
    sol = isam.solve_random_direction(q, np.array([[1.5]]))
    assert sol.position[0, 0] == pytest.approx(0.4 + 1.5 / 3.0)
    assert sol.phi[0] == pytest.approx(0.0, abs=1e-15)


def test_random_direction_zero_xi():
    q = isam.QuadraticForm(np.zeros(3), np.diag([1.0, 2.0, 3.0]), 1.5)
    sol = isam.solve_random_direction(q, np.zeros((1, 3)))
    assert np.allclose(sol.position, 0.0) and sol.phi[0] == 1.5


def test_random_direction_weighted_mean_matches_gaussian_oracle():
    rng = np.random.default_rng(4)
    B = rng.normal(size=(4, 4))
    A = B @ B.T + 4 * np.eye(4)
    a = rng.normal(size=4)
    q = isam.QuadraticForm(a, A, 0.0)
    n = 100_000
    sol = isam.solve_random_direction(q, rng.standard_normal((n, 4)))
    assert np.max(sol.residual) < 1e-10
    w = np.exp(sol.log_weight - sol.log_weight.max())
    w /= w.sum()
    mean = w @ sol.position
    se = np.sqrt((w * w) @ (sol.position - mean) ** 2)
    assert np.all(np.abs(mean - a) < 3 * se)
    direct = rng.multivariate_normal(a, np.linalg.inv(A), n)
    se_d = direct.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(mean - direct.mean(axis=0)) < 3 * np.sqrt(se**2 + se_d**2))


def test_quadratic_form_validation():
    with pytest.raises(ValueError):
        isam.QuadraticForm(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(np.linalg.LinAlgError):
        isam.QuadraticForm(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_exact_quadratic_solve_covariance():
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    q = isam.QuadraticForm(np.array([0.5, -0.5]), A, 2.0)
    xi = np.random.default_rng(5).standard_normal((200_000, 2))
    sol = isam.solve_quadratic_exact(q, xi)
    assert np.max(sol.residual) < 1e-12
    assert np.ptp(sol.log_jacobian) == 0
    assert np.allclose(np.cov(sol.position.T), np.linalg.inv(A), atol=3e-3)


# ---------------------------------------------------------------------------
# Jacobians


def test_jacobian_identity_map():
    obj = isam.SampleObjective(1, (isam.GaussianTerm(np.zeros(1), np.ones(1)),))
    xi = np.linspace(-3, 3, 13)[:, None]
    for mode in ("A", "B"):
        sol = isam.sample(obj, xi, mode)
        assert np.allclose(sol.position, xi, atol=1e-12)
        assert np.allclose(sol.log_jacobian, 0.0, atol=1e-12)


def test_linear_gaussian_jacobian_constant_across_particles():
    model, obs = zero_drift(1, 0.1, 0.01), linear_obs(0.025)
    x_prev = np.linspace(-1, 1, 50)[:, None]
    obj = isam.build_objective(model, obs, x_prev, np.array([0.2]), 0.0)
    sol = isam.sample(obj, np.random.default_rng(0).standard_normal((50, 1)))
    assert np.ptp(sol.log_jacobian) < 1e-12


@pytest.mark.parametrize(
    "b,mode",
    [(0.3, "A"), (0.3, "B"), (0.5, "A"), (0.5, "B"), (-0.5, "B")],
)
def test_jacobian_analytic_vs_finite_difference(b, mode):
    obj = cubic(b)
    solver = isam.solve_algorithm_a if mode == "A" else isam.solve_algorithm_b
    for xi in (-1.7, -0.4, 0.6, 1.9):
        x = np.array([xi])
        sol = solver(obj, x)
        J_fd = isam.jacobian_numeric(lambda o, v, x0: solver(o, v, x0=x0), obj, x, sol.position)
        assert math.exp(np.ravel(sol.log_jacobian)[0]) == pytest.approx(np.ravel(J_fd)[0], rel=1e-5)


def test_jacobian_implicit_differentiation_and_substitute():
    obj = cubic(1.0)
    o1 = obj.component(0)
    sub = isam.build_u_substitute(o1)
    for xi in (-1.5, -0.5, 0.7, 1.8):
        sol = isam.solve_algorithm_b(sub, np.array([xi]))
        J_fd = isam.jacobian_numeric(lambda o, v, x0: isam.solve_algorithm_b(sub, v, x0=x0), sub, np.array([xi]), sol.position)
        assert math.exp(np.ravel(sol.log_jacobian)[0]) == pytest.approx(np.ravel(J_fd)[0], rel=1e-5)
    # plain B: J = |xi| / |F'(X)|, and 1/sqrt(F''(z)) at xi = 0
    obj = cubic(0.5)
    z, _ = isam.find_minimum(obj)
    for xi in (-1.0, 0.0, 1.0):
        sol = isam.solve_algorithm_b(obj, np.array([xi]))
        J = isam.implicit_jacobian(obj.component(0), np.array(xi), sol.position, z)
        assert math.log(np.ravel(J)[0]) == pytest.approx(np.ravel(sol.log_jacobian)[0], rel=1e-6, abs=1e-9)


def test_singular_jacobian():
    obj = isam.SampleObjective(1, (isam.GaussianTerm(np.zeros(1), np.ones(1)),))
    with pytest.raises(isam.SingularJacobian):
        isam.implicit_jacobian(obj, np.array(1.0), np.zeros(1))


# ---------------------------------------------------------------------------
# whole-chain properties


CASES = {
    "linear": (isam.static_objective(linear_obs(S), 1.0, SIG), lambda x: x * x / (2 * SIG) + (x - 1.0) ** 2 / (2 * S)),
    "cubic_u": (cubic(0.5), lambda x: F_cubic(x, 0.5)),
    "cubic_substitute": (cubic(1.0), lambda x: F_cubic(x, 1.0)),
    "cubic_far": (cubic(2.5), lambda x: F_cubic(x, 2.5)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_map_is_increasing(name):
    obj, _ = CASES[name]
    xi = np.arange(-400, 401)[:, None] / 100.0
    for mode in ("B", "auto") if name in ("linear", "cubic_u") else ("auto",):
        X = isam.sample(obj, xi, mode).position[:, 0]
        assert np.all(np.diff(X) > 0), mode


@pytest.mark.parametrize("name", ["linear", "cubic_substitute"])
def test_weighted_samples_match_quadrature(name):
    obj, F = CASES[name]
    xi = np.random.default_rng(7).standard_normal((100_000, 1))
    sol = isam.sample(obj, xi)
    assert np.max(sol.residual) <= 1e-10
    x, cdf = grid_cdf(F, -3, 3)
    assert weighted_ks(sol.position[:, 0], sol.log_weight, x, cdf) < 0.01


def test_linear_gaussian_equal_weights():
    model, obs = zero_drift(1, 0.1, 0.01), linear_obs(0.025)
    x_prev = np.full((200, 1), 0.4)
    obj = isam.build_objective(model, obs, x_prev, np.array([0.1]), 0.0)
    sol = isam.sample(obj, np.random.default_rng(2).standard_normal((200, 1)))
    w = np.exp(sol.log_weight)
    assert np.max(np.abs(w / w[0] - 1)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_residual_contract_cubic(b, seed):
    xi = np.random.default_rng(seed).standard_normal((64, 1)) * 2
    sol = isam.sample(cubic(b), xi)
    assert np.all(sol.residual <= 1e-10)
    assert np.all(np.isfinite(sol.log_jacobian))


def test_batched_objectives_share_decisions():
    # duplicates and distinct parents in one batch give the same answer as one at a time
    model, obs = zero_drift(1, 0.1, 1.0), cubic_obs(0.1)
    parents = np.array([[0.0], [0.0], [0.3], [0.0], [-0.2], [0.3]])
    xi = np.random.default_rng(8).standard_normal((6, 1))
    obj = isam.build_objective(model, obs, parents, np.array([1.0]), 0.0)
    together = isam.sample(obj, xi)
    for i in range(6):
        alone = isam.sample(isam.build_objective(model, obs, parents[i], np.array([1.0]), 0.0), xi[i : i + 1])
        assert together.position[i, 0] == pytest.approx(alone.position[0, 0], abs=1e-12)
        assert together.log_weight[i] == pytest.approx(float(np.ravel(alone.log_weight)[0]), abs=1e-9)


def curved_obs(c, s):
    # scalar observation of x1 + c x2^2
    return ObservationModel(
        h=lambda x: (x[..., 0] + c * x[..., 1] ** 2)[..., None],
        noise_var=np.array([s]),
        diagonal=False,
        h_jac=lambda x: np.stack([np.ones(x.shape[:-1]), 2 * c * x[..., 1]], axis=-1)[..., None, :],
    )


def test_generic_objective_radial_solve():
    obs = curved_obs(0.5, 0.2)
    model = zero_drift(2, 0.3, 1.0)
    obj = isam.build_objective(model, obs, np.zeros(2), np.array([0.3]), 0.0)
    xi = np.random.default_rng(9).standard_normal((20_000, 2))
    sol = isam.sample(obj, xi)
    assert sol.method == "B-radial"
    assert np.max(sol.residual) <= 1e-8
    g = np.linspace(-3, 3, 1201)
    G = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)
    lp = -obj.eval(G)
    p = np.exp(lp - lp.max())
    p /= p.sum()
    exact = np.array([np.sum(p * G[..., 0]), np.sum(p * G[..., 1])])
    w = np.exp(sol.log_weight - sol.log_weight.max())
    w /= w.sum()
    m = w @ sol.position
    se = np.sqrt(w @ (sol.position - m) ** 2 / (1 / np.sum(w * w)))
    assert np.all(np.abs(m - exact) < 4 * se)


def test_radial_solve_needs_star_shaped_levels():
    obj = isam.build_objective(zero_drift(2, 0.3, 1.0), curved_obs(1.0, 0.05), np.zeros(2), np.array([0.8]), 0.0)
    with pytest.raises(isam.NotUShaped):
        isam.sample(obj, np.random.default_rng(9).standard_normal((20_000, 2)))


def test_quadratic_generic_objective_uses_exact_solve():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    obj = isam.SampleObjective(2, eval_fn=lambda X: 0.5 * np.einsum("...i,ij,...j->...", X - 1.0, A, X - 1.0) + 3.0)
    sol = isam.sample(obj, np.array([[0.0, 0.0], [1.0, -1.0]]))
    assert sol.method == "A"
    assert np.allclose(sol.position[0], 1.0, atol=1e-6)
    assert np.allclose(sol.phi, 3.0, atol=1e-8)
    rd = isam.sample(obj, np.array([[1.0, -1.0]]), "random_direction")
    assert rd.method == "random-direction"


def test_unknown_proposal():
    with pytest.raises(ValueError):
        isam.sample(cubic(0.5), np.zeros((1, 1)), "C")


def test_solution_csv(tmp_path):
    xi = np.array([[-1.0], [0.0], [1.0]])
    sol = isam.sample(cubic(0.5), xi)
    path = tmp_path / "sol.csv"
    isam.write_solution_csv(path, xi, sol)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["xi0", "X0", "phi", "log_J"]
    assert len(rows) == 4 and float(rows[2][1]) == pytest.approx(sol.position[1, 0])
