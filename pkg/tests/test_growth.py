import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfspace_hjb.control import hamiltonian_min
from halfspace_hjb.errors import PositivityError
from halfspace_hjb.growth import (
    GrowthSpec,
    build_growth_model,
    cost_depends_on_control,
    equivalence_conditions,
    fourier_modes,
    galerkin_matrix,
    run_growth_scenario,
)
from halfspace_hjb.hjb_solver import GridSpec, SolverConfig

N_XI = 16
XI = 2 * np.pi * np.arange(N_XI) / N_XI


def capital_only(s, k, c):
    return 0.5 * (1 + np.tanh(k)) + 0.0 * c


def saturating(s, k, c):
    return (1 - np.exp(-c)) * (1 + 0.2 * np.tanh(k) ** 2) / 1.2


def spec(A=0.5, n_modes=5, M=1.0, U0=capital_only, n_xi=N_XI):
    A = np.full(n_xi, A) if np.isscalar(A) else np.asarray(A)
    return GrowthSpec(A, n_modes, M, 1.0, U0, 1.0)


def test_fourier_modes_orthonormal():
    E = fourier_modes(XI, 7)
    np.testing.assert_allclose(E.T @ E * (2 * np.pi / N_XI), np.eye(7), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.0, 3.0), n=st.sampled_from([1, 3, 5, 7]))
def test_constant_productivity_spectrum(a, n):
    _, _, basis = build_growth_model(spec(a, n))
    ks = [0] + [j for j in range(1, (n - 1) // 2 + 1) for _ in (0, 1)]
    ref = np.array([a - k * k for k in ks])
    err = np.abs(basis.eigenvalues - ref)
    assert np.all(err <= 1e-10 * np.maximum(np.abs(ref), 1e-300) + 1e-15)


def test_constant_productivity_principal_mode():
    model, _, basis = build_growth_model(spec(0.5))
    assert model.alpha == pytest.approx(0.5, abs=1e-14)
    np.testing.assert_allclose(basis.y_bar, 1 / np.sqrt(2 * np.pi), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(amp=st.floats(-1.5, 1.5), mean=st.floats(2.0, 4.0))
def test_galerkin_symmetric_and_rotation_orthonormal(amp, mean):
    A = mean + amp * np.cos(XI) + 0.3 * amp * np.sin(2 * XI)
    G, _, _ = galerkin_matrix(A, 5)
    assert np.max(np.abs(G - G.T)) <= 1e-14
    _, _, basis = build_growth_model(spec(A))
    R = basis.rotation
    assert np.max(np.abs(R.T @ R - np.eye(5))) <= 1e-12


def test_small_perturbation():
    eps = 1e-3
    model, _, basis = build_growth_model(spec(0.5 + eps * np.cos(XI)))
    assert abs(model.alpha - 0.5) <= 10 * eps**2
    ybar = basis.y_bar
    assert np.max(np.abs(ybar - 1 / np.sqrt(2 * np.pi))) <= 10 * eps


def test_sign_changing_principal_mode():
    # a cos(2 xi) productivity lifts the cos(xi) mode above the constant mode
    with pytest.raises(PositivityError):
        build_growth_model(spec(50 * (1 + np.cos(2 * XI)), 3))


def test_equal_noise_scales():
    model, _, _ = build_growth_model(spec())
    np.testing.assert_array_equal(model.lam, 1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        spec(n_modes=4)
    with pytest.raises(ValueError):
        spec(M=-1.0)
    with pytest.raises(ValueError):
        spec(-0.1)
    with pytest.raises(ValueError):
        spec(n_modes=9, n_xi=8)


def test_coords_round_trip():
    _, _, basis = build_growth_model(spec(0.5 + 0.2 * np.cos(XI)))
    c = np.array([0.7, -0.1, 0.2, 0.05, 0.3])
    np.testing.assert_allclose(basis.coords(basis.field(c)), c, atol=1e-13)


def test_equivalence_conditions():
    assert equivalence_conditions(spec(U0=saturating)) == {
        "nonnegative": True,
        "zero_without_consumption": True,
        "bounded": True,
    }
    assert not equivalence_conditions(spec(U0=capital_only))["zero_without_consumption"]


def test_cost_dependence():
    assert cost_depends_on_control(build_growth_model(spec(U0=saturating))[1])
    assert not cost_depends_on_control(build_growth_model(spec(U0=capital_only))[1])


def test_no_consumption_allowed():
    _, problem, _ = build_growth_model(spec(M=0.0))
    val, arg = hamiltonian_min(problem, 0.0, np.ones(5), np.ones(5))
    np.testing.assert_array_equal(arg, 0.0)


@settings(max_examples=30, deadline=None)
@given(p=st.lists(st.floats(-3, 3).filter(lambda v: abs(v) > 1e-6), min_size=3, max_size=3))
def test_bang_bang_minimizer(p):
    _, problem, _ = build_growth_model(spec(n_modes=3, M=2.0))
    _, arg = hamiltonian_min(problem, 0.0, np.array([1.0, 0.0, 0.0]), np.array(p))
    np.testing.assert_array_equal(arg, np.where(np.array(p) > 0, 2.0, 0.0))


def test_scenario_without_simulation():
    sp = spec(n_modes=3, M=1.0)
    profiles = [0.6 + 0.3 * np.cos(XI), -0.2 + 0.1 * np.sin(XI)]
    cfg = SolverConfig(grid=GridSpec(13, 12.0, 5, 4.0, 4))
    rep = run_growth_scenario(sp, cfg, None, profiles)
    assert rep.verification.rows == []
    assert rep.argmin_check["passed"] and rep.argmin_check["checked"] > 0
    assert rep.boundary_values == [0.0, 0.0]
    # the second profile starts outside the half-space, so its value is zero
    assert rep.values[1] == 0.0
    assert rep.values[0] < 0.0
    assert rep.consumption.shape == (2, N_XI) and np.all(rep.consumption >= 0)
