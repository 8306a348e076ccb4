import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from halfspace_hjb.control import (
    ControlProblem,
    ControlSet,
    Policy,
    constant_policy,
    control_hjb,
    hamiltonian_cv,
    hamiltonian_min,
    simulate_controlled,
    synthesize_feedback,
    verify,
)
from halfspace_hjb.errors import DomainError, InadmissibleControlError
from halfspace_hjb.hjb_solver import GridSpec, SolverConfig, solve_mild
from halfspace_hjb.model import validate_model
from halfspace_hjb.semigroup import BoundedFunction, KernelParams, MCConfig, survival_probability
from halfspace_hjb.streams import mean_and_stderr

BM = validate_model({"dim": 1, "a": [0.0], "lam": [1.0], "horizon": 1.0})
TANH = BoundedFunction(lambda x: 1.5 * np.tanh(x[..., 0]), 1.5, (), 1.5)
ZERO = BoundedFunction(lambda x: np.zeros(np.asarray(x).shape[:-1]), 0.0, (), 0.0)
ONE = BoundedFunction(lambda x: np.ones(np.asarray(x).shape[:-1]), 1.0, (), 1.0)


def lq(M=1.0, phi=TANH, model=BM):
    return ControlProblem(
        model,
        ControlSet.box([0.0], [M]),
        lambda t, x, u: -np.atleast_2d(u),
        lambda t, x, u: 0.5 * np.sum(np.atleast_2d(u) ** 2, axis=1),
        phi,
        0.0,
        M,
        0.5 * M * M,
        "lq",
    )


def passive(ell, phi, model=BM):
    # drift and cost independent of the control
    return ControlProblem(
        model,
        ControlSet.finite([[0.0], [1.0]]),
        lambda t, x, u: np.zeros((np.atleast_2d(x).shape[0], model.dim)),
        ell,
        phi,
        0.0,
        0.0,
        1.0,
    )


@pytest.fixture(scope="module")
def lq_solution():
    prob = lq()
    sol, rep = solve_mild(control_hjb(prob), SolverConfig(grid=GridSpec(81, 8.0, 1, 1.0, 16)))
    assert rep.converged
    return prob, sol


# --- Hamiltonians -----------------------------------------------------------------


def test_current_value_reference():
    assert hamiltonian_cv(lq(), 0.0, [1.0], [1.0], [0.5]) == pytest.approx(-0.375, abs=1e-15)


def test_current_value_reductions():
    p = passive(lambda t, x, u: 2.0 + np.atleast_2d(u)[:, 0], ONE)
    assert hamiltonian_cv(p, 0.3, [1.0], [4.0], [1.0]) == pytest.approx(3.0)
    assert hamiltonian_cv(lq(), 0.3, [1.0], [0.0], [0.4]) == pytest.approx(0.08)


def test_current_value_rejects_inadmissible():
    with pytest.raises(InadmissibleControlError):
        hamiltonian_cv(lq(), 0.0, [1.0], [1.0], [1.5])


@settings(max_examples=60, deadline=None)
@given(p=st.floats(-3.0, 3.0), M=st.floats(0.1, 2.0))
def test_box_argmin_is_clamp(p, M):
    val, arg = hamiltonian_min(lq(M), 0.0, [1.0], [p])
    c = min(max(p, 0.0), M)
    assert arg[0] == pytest.approx(c, abs=1e-7)
    assert val == pytest.approx(-p * c + 0.5 * c * c, abs=1e-12)


def test_finite_tie_break_lowest_index():
    p = passive(lambda t, x, u: np.ones(np.atleast_2d(u).shape[0]), ONE)
    _, arg = hamiltonian_min(p, 0.0, np.ones((5, 1)), np.ones((5, 1)))
    np.testing.assert_array_equal(arg, np.zeros((5, 1)))


def test_degenerate_box():
    prob = lq(0.0)
    val, arg = hamiltonian_min(prob, 0.0, [1.0], [0.7])
    assert val == 0.0 and arg[0] == 0.0


@settings(max_examples=60, deadline=None)
@given(p1=st.floats(-5.0, 5.0), p2=st.floats(-5.0, 5.0))
def test_lipschitz_and_growth_in_p(p1, p2):
    prob = lq()
    F1, _ = hamiltonian_min(prob, 0.0, [1.0], [p1])
    F2, _ = hamiltonian_min(prob, 0.0, [1.0], [p2])
    assert abs(F1 - F2) <= prob.b_bound * abs(p1 - p2) + 1e-12
    assert abs(F1) <= prob.b_bound * abs(p1) + prob.ell_bound + 1e-12


@settings(max_examples=60, deadline=None)
@given(p=st.floats(-5.0, 5.0), u=st.floats(0.0, 1.0), x=st.floats(0.0, 5.0))
def test_gap_nonnegative(p, u, x):
    prob = lq()
    F, _ = hamiltonian_min(prob, 0.0, [x], [p])
    assert hamiltonian_cv(prob, 0.0, [x], [p], [u]) - F >= -1e-14


def test_multidimensional_box():
    m2 = validate_model({"dim": 2, "a": [0.0, -1.0], "lam": [1.0, 1.0], "horizon": 1.0})
    prob = ControlProblem(
        m2,
        ControlSet.box([0.0, -1.0], [1.0, 1.0]),
        lambda t, x, u: -np.atleast_2d(u),
        lambda t, x, u: 0.5 * np.sum(np.atleast_2d(u) ** 2, axis=1),
        TANH,
        0.0,
        math.sqrt(2),
        1.0,
    )
    P = np.array([[0.3, -0.4], [2.0, 2.0], [-1.0, 0.5]])
    _, arg = hamiltonian_min(prob, 0.0, np.ones((3, 2)), P)
    expected = np.clip(P, [0.0, -1.0], [1.0, 1.0])
    np.testing.assert_allclose(arg, expected, atol=1e-7)


# --- policies ----------------------------------------------------------------------


def test_constant_policy_admissibility():
    prob = lq()
    np.testing.assert_array_equal(constant_policy(prob, [0.5])(0.0, np.ones((3, 1))), 0.5)
    with pytest.raises(InadmissibleControlError):
        constant_policy(prob, [2.0])


def test_feedback_is_clamped_gradient(lq_solution):
    prob, sol = lq_solution
    pol = synthesize_feedback(prob, sol)
    x = sol.axes[0][1:].reshape(-1, 1)
    for t in (0.0, 0.4, 0.9):
        _, Dv = sol.evaluate(t, x)
        np.testing.assert_allclose(pol(t, x)[:, 0], np.clip(Dv[:, 0], 0.0, 1.0), atol=1e-7)
        Fmin, _ = hamiltonian_min(prob, t, x, Dv)
        Fcv = hamiltonian_cv(prob, t, x, Dv, pol(t, x))
        assert np.max(np.abs(Fcv - Fmin)) <= 1e-12


def test_feedback_stays_in_U(lq_solution, rng):
    prob, sol = lq_solution
    pol = synthesize_feedback(prob, sol)
    X = rng.uniform(-1.0, 12.0, (10_000, 1))
    u = pol(rng.uniform(0, 1), X)
    assert np.all(prob.U.contains(u))
    assert pol.stats["outside_grid"] > 0


# --- simulation ------------------------------------------------------------------------


def test_boundary_start():
    b = simulate_controlled(lq(), 0.2, [0.0], constant_policy(lq(), [0.0]), MCConfig(500, 10, 3))
    assert np.all(b.exit_times == 0.2) and np.all(b.costs == 0.0)


def test_start_outside_domain():
    with pytest.raises(DomainError):
        simulate_controlled(lq(), 0.0, [-0.1], constant_policy(lq(), [0.0]), MCConfig(10, 2, 3))


def test_survival_fraction_matches_closed_form():
    prob = passive(lambda t, x, u: np.zeros(np.atleast_2d(x).shape[0]), ONE)
    b = simulate_controlled(prob, 0.0, [1.0], constant_policy(prob, [0.0]), MCConfig(100_000, 32, 8))
    J, se = mean_and_stderr(b.costs)
    assert J == b.survival_fraction
    p = survival_probability(KernelParams(1.0, 0.0, 1.0), 1.0)
    assert abs(b.survival_fraction - p) <= 3 * math.sqrt(p * (1 - p) / 1e5)


def test_expected_lifetime():
    prob = passive(lambda t, x, u: np.ones(np.atleast_2d(x).shape[0]), ZERO)
    b = simulate_controlled(prob, 0.0, [0.8], constant_policy(prob, [0.0]), MCConfig(100_000, 64, 9))
    J, se = mean_and_stderr(b.costs)
    exact = integrate.quad(lambda s: special.erf(0.8 / math.sqrt(2 * s)), 0, 1, epsabs=1e-12)[0]
    assert abs(J - exact) <= 3 * se


def test_constant_drift_mean_path():
    # far from the boundary the killing is negligible: E int_0^T X ds = x0 T - u0 T^2 / 2
    prob = ControlProblem(
        BM, ControlSet.box([0.0], [1.0]), lambda t, x, u: -np.atleast_2d(u), lambda t, x, u: np.atleast_2d(x)[:, 0],
        ZERO, 0.0, 1.0, 20.0,
    )
    b = simulate_controlled(prob, 0.0, [10.0], constant_policy(prob, [0.6]), MCConfig(100_000, 50, 4))
    J, se = mean_and_stderr(b.costs)
    assert b.survival_fraction == 1.0
    assert abs(J - (10.0 - 0.3)) <= 3 * se
    mean_end = np.mean(b.final_states[:, 0])
    assert abs(mean_end - 9.4) <= 3 * np.std(b.final_states[:, 0]) / math.sqrt(1e5)


def test_step_refinement_bias_below_one_se():
    prob = lq()
    pol = constant_policy(prob, [0.5])
    J1, se1 = mean_and_stderr(simulate_controlled(prob, 0.0, [0.6], pol, MCConfig(100_000, 50, 21)).costs)
    J2, se2 = mean_and_stderr(simulate_controlled(prob, 0.0, [0.6], pol, MCConfig(100_000, 100, 21)).costs)
    assert abs(J1 - J2) < max(se1, se2)


def test_simulation_deterministic():
    prob = lq()
    pol = constant_policy(prob, [0.3])
    a = simulate_controlled(prob, 0.0, [0.7], pol, MCConfig(3000, 20, 77))
    b = simulate_controlled(prob, 0.0, [0.7], pol, MCConfig(3000, 20, 77))
    np.testing.assert_array_equal(a.costs, b.costs)
    np.testing.assert_array_equal(a.exit_times, b.exit_times)


@settings(max_examples=10, deadline=None)
@given(x=st.floats(0.05, 2.0), dx=st.floats(0.0, 1.0), seed=st.integers(0, 2**63))
def test_exit_monotone_in_start(x, dx, seed):
    prob = lq()
    pol = constant_policy(prob, [0.4])
    cfg = MCConfig(500, 16, seed, bridge_correction=False)
    lo = simulate_controlled(prob, 0.0, [x], pol, cfg).exit_times
    hi = simulate_controlled(prob, 0.0, [x + dx], pol, cfg).exit_times
    assert np.all(hi >= lo)


# --- verification ------------------------------------------------------------------


def test_boundary_point_verifies_trivially(lq_solution):
    prob, sol = lq_solution
    rep = verify(prob, sol, [constant_policy(prob, [1.0])], [(0.0, [0.0])], MCConfig(200, 10, 1))
    row = rep.rows[0]
    assert row.v == 0.0 and row.J == 0.0 and rep.passed


def test_bad_policy_gap_explains_excess_cost(lq_solution):
    prob, sol = lq_solution
    cfg = MCConfig(40_000, 50, 12)
    rep = verify(prob, sol, [constant_policy(prob, [1.0])], [(0.0, [1.0])], cfg, grid_tol=2e-3)
    row = rep.rows[0]
    assert row.J - row.v > 10 * row.std_error
    assert row.lower_bound_ok and row.identity_ok


def test_feedback_verifies(lq_solution):
    prob, sol = lq_solution
    pol = synthesize_feedback(prob, sol)
    rep = verify(prob, sol, [pol], [(0.0, [1.0]), (0.5, [0.4])], MCConfig(40_000, 50, 13), grid_tol=2e-3)
    assert rep.passed, rep.rows
