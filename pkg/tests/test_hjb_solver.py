import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from halfspace_hjb.model import validate_model
from halfspace_hjb.semigroup import BoundedFunction, MCConfig, apply_P, gradient_constant
from halfspace_hjb.streams import mean_and_stderr, path_blocks
from halfspace_hjb.hjb_solver import (
    GridSpec,
    SemilinearProblem,
    SolverConfig,
    a_priori_bound,
    beta_constants,
    mild_residual,
    picard_step,
    reverse_time,
    search_beta,
    solve_mild,
    _operator,
)

TANH1 = BoundedFunction(lambda x: np.tanh(x[..., 0]), 1.0, (), 1.0, "tanh")
GRID1 = SolverConfig(grid=GridSpec(41, 8.0, 1, 1.0, 8))


def smooth2():
    return BoundedFunction(lambda x: np.tanh(x[..., 0]) * (1 + 0.5 * np.cos(x[..., 1])) / 1.5, 1.0)


def brownian_free_term(t, x1):
    # P_t tanh for standard Brownian motion killed at 0, by direct quadrature
    sd = math.sqrt(t)

    def G(xi):
        return (math.exp(-((x1 - xi) ** 2) / (2 * t)) - math.exp(-((x1 + xi) ** 2) / (2 * t))) / math.sqrt(2 * math.pi * t)

    return integrate.quad(lambda xi: G(xi) * math.tanh(xi), max(0.0, x1 - 12 * sd), x1 + 12 * sd, epsabs=1e-13)[0]


def occupation(t, x1):
    # int_0^t P(survive t - s from x1) ds
    return integrate.quad(lambda s: special.erf(x1 / math.sqrt(2 * (t - s))), 0.0, t, epsabs=1e-13, limit=200)[0]


# --- contraction constants ----------------------------------------------------


def test_constants_at_zero_beta(ou2):
    C1, C2, _ = beta_constants(ou2, 1.0, 0.0)
    assert C1 == pytest.approx(2.0, rel=1e-8)
    # sup_t t^{1/2} int_0^t (t-s)^{-1/2} s^{-1/2} ds = B(1/2, 1/2) = pi
    assert C2 == pytest.approx(math.pi, rel=1e-6)


def test_constants_vanish_with_beta(ou2):
    lo = beta_constants(ou2, 1.0, 1.0)
    hi = beta_constants(ou2, 1.0, 100.0)
    assert hi[0] < lo[0] and hi[1] < lo[1]


def test_beta_search_certifies_half(ou2):
    beta, C1, C2, factor = search_beta(ou2, 0.5)
    assert factor <= 0.5
    assert beta_constants(ou2, 0.5, beta / 2)[2] > 0.5


def test_gradient_constant_closed_form(ou2):
    # t^{1/2} sqrt(2/pi) max_k e^{a_k t}/sqrt(q_k(t)) is maximal as t -> 0
    assert gradient_constant(ou2) == pytest.approx(math.sqrt(2 / math.pi), rel=1e-9)


# --- Picard map on exact cases ---------------------------------------------------


def test_zero_nonlinearity_single_step(bm1):
    prob = SemilinearProblem(bm1, lambda t, x, y, z: np.zeros(len(y)), 1e-12, 1e-12, TANH1)
    sol, rep = solve_mild(prob, GRID1)
    assert rep.iterations == 1 and rep.deltas[0] == 0.0
    x = sol.axes[0]
    for j in (2, 5, 8):
        t = sol.time_nodes[j]
        ref = [brownian_free_term(t, v) for v in x[1:30:5]]
        np.testing.assert_allclose(sol.values[j, 1:30:5], ref, atol=1e-7)
    again = picard_step(prob, sol, GRID1)
    np.testing.assert_array_equal(again.values, sol.values)


def test_constant_nonlinearity_matches_quadrature(bm1):
    c = 0.7
    prob = SemilinearProblem(bm1, lambda t, x, y, z: np.full(len(y), c), 1e-12, c, TANH1)
    sol, rep = solve_mild(prob, GRID1)
    assert rep.converged
    x = sol.axes[0]
    worst = 0.0
    for j in range(1, sol.time_nodes.size):
        t = float(sol.time_nodes[j])
        for i in range(1, 30, 3):
            ref = brownian_free_term(t, x[i]) + c * occupation(t, x[i])
            worst = max(worst, abs(sol.values[j, i] - ref))
    assert worst < 1e-6


def test_dirichlet_invariant(ou2):
    prob = SemilinearProblem(
        ou2, lambda t, x, y, z: -0.5 * y + 0.1 * np.sin(np.linalg.norm(z, axis=-1)), 0.5, 0.5, smooth2()
    )
    cfg = SolverConfig(grid=GridSpec(21, 6.0, 11, 3.0, 6))
    op = _operator(prob, cfg)
    cur = op.initial("zero")
    for _ in range(3):
        cur = op.step(cur)
        assert np.all(cur.values[:, 0] == 0.0)


@pytest.fixture(scope="module")
def semilinear_case(ou2):
    prob = SemilinearProblem(
        ou2, lambda t, x, y, z: -0.5 * y + 0.1 * np.sin(np.linalg.norm(z, axis=-1)), 0.5, 0.5, smooth2()
    )
    cfg = SolverConfig(grid=GridSpec(21, 6.0, 11, 3.0, 6))
    return prob, cfg


def test_uniqueness_from_two_starts(semilinear_case):
    prob, cfg = semilinear_case
    a, ra = solve_mild(prob, cfg, initial="free")
    b, rb = solve_mild(prob, cfg, initial="zero")
    assert ra.converged and rb.converged
    assert np.max(np.abs(a.values - b.values)) <= 2 * cfg.tol


def test_geometric_convergence(semilinear_case):
    prob, cfg = semilinear_case
    _, rep = solve_mild(prob, cfg, initial="zero")
    d = rep.deltas
    for k in range(len(d)):
        assert d[k] <= rep.factor**k * d[0] * 1.1
    assert rep.observed_ratio <= 0.55


def test_a_priori_bound(semilinear_case):
    prob, cfg = semilinear_case
    sol, _ = solve_mild(prob, cfg)
    sup_u, bound = a_priori_bound(prob, sol)
    assert sup_u <= bound


def test_gradient_consistent_with_values(semilinear_case):
    prob, cfg = semilinear_case
    sol, _ = solve_mild(prob, cfg)
    x1, x2 = sol.axes
    j = sol.time_nodes.size - 1
    u = sol.values[j]
    h1, h2 = x1[1] - x1[0], x2[1] - x2[0]
    fd1 = (u[2:, 1:-1] - u[:-2, 1:-1]) / (2 * h1)
    fd2 = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * h2)
    D = sol.gradients[j]
    inner = x1[1:-1] < 3.0
    assert np.max(np.abs(fd1 - D[1:-1, 1:-1, 0])[inner]) < 0.5 * h1
    assert np.max(np.abs(fd2 - D[1:-1, 1:-1, 1])[inner]) < 0.5 * h2


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_picard_map_contracts_random_pairs(semilinear_case, seed):
    prob, cfg = semilinear_case
    op = _operator(prob, cfg)
    beta, _, _, factor = search_beta(prob.model, prob.L)
    r = np.random.default_rng(seed)
    base = op.initial("free")
    pair = []
    for _ in range(2):
        v = base.values + 0.3 * r.standard_normal(base.values.shape)
        g = base.gradients + 0.3 * r.standard_normal(base.gradients.shape)
        v[:, 0] = 0.0
        pair.append(op.wrap(v, g))
    a, b = op.step(pair[0]), op.step(pair[1])
    lhs = op.beta_norm(a.values - b.values, a.gradients - b.gradients, beta)
    rhs = op.beta_norm(pair[0].values - pair[1].values, pair[0].gradients - pair[1].gradients, beta)
    assert lhs <= factor * rhs * (1 + 1e-9)


# --- Feynman-Kac cross-check for linear discount ------------------------------------


def test_linear_discount_matches_feynman_kac(bm1):
    L = 0.8
    phi = BoundedFunction(lambda x: 0.5 + 0.5 * np.tanh(x[..., 0]), 1.0, (), 1.0)
    prob = SemilinearProblem(bm1, lambda t, x, y, z: -L * y, L, L, phi)
    sol, rep = solve_mild(prob, SolverConfig(grid=GridSpec(81, 8.0, 1, 1.0, 16)))
    assert rep.converged
    assert np.all(sol.values[:, 1:] > 0) and np.max(sol.values) <= 1.0
    # killed Brownian paths weighted by exp(-L t): with no killing before t the
    # weight is deterministic, so the estimate is exp(-L t) P_t phi
    t = 1.0
    for x1 in (0.4, 1.0, 2.5):
        samples = np.empty(200_000)
        for sl, gen in path_blocks(77, samples.size):
            n = sl.stop - sl.start
            W = np.cumsum(gen.standard_normal((n, 64)) * math.sqrt(t / 64), axis=1) + x1
            alive = np.all(W > 0, axis=1)
            samples[sl] = alive * math.exp(-L * t) * (0.5 + 0.5 * np.tanh(W[:, -1]))
        est, se = mean_and_stderr(samples)
        exact = math.exp(-L * t) * apply_P(bm1, t, phi, np.array([x1]))
        v = sol.interpolate(t, np.array([[x1]]))[0][0]
        assert abs(v - exact) < 1e-3
        # discrete monitoring overestimates survival by O(sqrt(dt)); allow that bias
        assert est - 3 * se - 0.03 <= v <= est + 3 * se


# --- time reversal -------------------------------------------------------------------


def test_reverse_time_involution(ou2):
    F = lambda t, x, y, z: t * y
    prob = SemilinearProblem(ou2, F, 1.0, 1.0, smooth2(), "terminal")
    rev = reverse_time(prob)
    assert rev.orientation == "initial"
    assert rev.phi is prob.phi
    assert reverse_time(rev) is prob
    x = np.ones((3, 2))
    y = np.arange(3.0)
    z = np.zeros((3, 2))
    np.testing.assert_allclose(rev.F(0.25, x, y, z), F(0.75, x, y, z))


def test_reverse_time_autonomous(ou2):
    F = lambda t, x, y, z: -2.0 * y
    rev = reverse_time(SemilinearProblem(ou2, F, 2.0, 2.0, smooth2(), "terminal"))
    y = np.linspace(-1, 1, 5)
    np.testing.assert_array_equal(rev.F(0.1, np.ones((5, 2)), y, np.zeros((5, 2))), F(0.9, None, y, None))


def test_problem_validation(ou2):
    with pytest.raises(ValueError):
        SemilinearProblem(ou2, lambda *a: 0, 0.0, 1.0, smooth2())
    with pytest.raises(ValueError):
        SemilinearProblem(ou2, lambda *a: 0, 1.0, 1.0, smooth2(), "sideways")


def test_spot_check(ou2):
    prob = SemilinearProblem(ou2, lambda t, x, y, z: -0.5 * y + 0.1 * np.sin(np.linalg.norm(z, axis=-1)), 0.5, 0.5, smooth2())
    assert prob.spot_check() == {"lipschitz": True, "growth": True}
    bad = SemilinearProblem(ou2, lambda t, x, y, z: -3.0 * y, 0.5, 0.5, smooth2())
    assert not bad.spot_check()["lipschitz"]


# --- mild residual ----------------------------------------------------------------------


def test_residual_boundary_is_interpolated_value(bm1):
    prob = SemilinearProblem(bm1, lambda t, x, y, z: np.zeros(len(y)), 1e-12, 1e-12, TANH1)
    sol, _ = solve_mild(prob, GRID1)
    assert mild_residual(prob, sol, [(0.5, [0.0])]) == 0.0


def test_residual_small_for_zero_nonlinearity(bm1):
    prob = SemilinearProblem(bm1, lambda t, x, y, z: np.zeros(len(y)), 1e-12, 1e-12, TANH1)
    sol, _ = solve_mild(prob, SolverConfig(grid=GridSpec(161, 8.0, 1, 1.0, 32)))
    assert mild_residual(prob, sol, [(1.0, [0.37]), (0.3, [1.13])]) <= 1e-3
