"""Spatial capital accumulation on the circle as an exit-time control problem.

Capital ``k(s, xi)`` on ``[0, 2 pi)`` follows
``dk = (k'' + A(xi) k - c) ds + noise`` and the planner earns
``int U0(s, k(xi), c(xi)) dxi`` until ``<k, y_bar>`` hits zero, ``y_bar`` being
the positive principal eigenfunction of ``k -> k'' + A k``. The operator is
truncated to a real Fourier basis and rotated into its eigenbasis, so the
half-space becomes ``x1 > 0`` and the noise is diagonal in the same basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .control import (
    ControlProblem,
    ControlSet,
    VerificationReport,
    constant_policy,
    control_hjb,
    hamiltonian_min,
    synthesize_feedback,
    verify,
)
from .errors import PositivityError
from .hjb_solver import GridFunction, SolverConfig, solve_mild
from .model import Model, validate_model
from .semigroup import BoundedFunction, MCConfig


@dataclass(frozen=True)
class GrowthSpec:
    """Data of the growth example.

    ``A_samples`` are values of the productivity ``A >= 0`` on the uniform
    grid ``xi_j = 2 pi j / N``. ``U0(s, k, c)`` is vectorized over arrays of
    equal shape and bounded by ``U0_bound``.
    """

    A_samples: np.ndarray
    n_modes: int
    M: float
    Q_scale: float | Sequence[float]
    U0: Callable
    U0_bound: float
    horizon: float = 1.0
    name: str = "growth"

    def __post_init__(self):
        A = np.asarray(self.A_samples, dtype=float)
        if A.ndim != 1 or A.size < 2 * self.n_modes + 1:
            raise ValueError("need at least 2 n_modes + 1 productivity samples")
        if np.any(A < 0):
            raise ValueError("productivity samples must be nonnegative")
        if self.n_modes < 1 or self.n_modes % 2 == 0:
            raise ValueError("n_modes must be an odd positive integer")
        if self.M < 0:
            raise ValueError("control bound must be nonnegative")
        if np.any(np.asarray(self.Q_scale, dtype=float) <= 0):
            raise ValueError("noise scales must be positive")

    @property
    def xi(self) -> np.ndarray:
        N = np.asarray(self.A_samples).size
        return 2.0 * np.pi * np.arange(N) / N


@dataclass
class GrowthBasis:
    """Maps between eigen-coordinates and fields on the ``xi`` grid."""

    xi: np.ndarray
    fourier: np.ndarray  # (N, m) orthonormal Fourier modes sampled on xi
    galerkin: np.ndarray  # (m, m) matrix of the truncated operator
    eigenvalues: np.ndarray  # descending
    rotation: np.ndarray  # (m, m) columns = eigenvectors in Fourier coordinates
    modes: np.ndarray  # (N, m) eigenfunctions sampled on xi

    @property
    def dxi(self) -> float:
        return 2.0 * np.pi / self.xi.size

    @property
    def y_bar(self) -> np.ndarray:
        return self.modes[:, 0]

    def field(self, coords) -> np.ndarray:
        """Reconstruct ``k(xi)`` from eigen-coordinates (rows)."""
        return np.asarray(coords, dtype=float) @ self.modes.T

    def coords(self, samples) -> np.ndarray:
        """L2 projection of sampled fields onto the retained eigenfunctions."""
        return np.asarray(samples, dtype=float) @ self.modes * self.dxi


def fourier_modes(xi: np.ndarray, n_modes: int) -> np.ndarray:
    """``1/sqrt(2 pi)``, then ``cos(j xi)/sqrt(pi)``, ``sin(j xi)/sqrt(pi)``."""
    cols = [np.full(xi.size, 1.0 / np.sqrt(2.0 * np.pi))]
    for j in range(1, (n_modes - 1) // 2 + 1):
        cols.append(np.cos(j * xi) / np.sqrt(np.pi))
        cols.append(np.sin(j * xi) / np.sqrt(np.pi))
    return np.stack(cols, axis=1)


def _wavenumbers(n_modes: int) -> np.ndarray:
    return np.array([0] + [j for j in range(1, (n_modes - 1) // 2 + 1) for _ in (0, 1)], dtype=float)


def galerkin_matrix(A_samples, n_modes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matrix of ``k'' + A k`` in the real Fourier basis; also returns ``(xi, E)``.

    The second derivative is diagonal with entries ``-j^2``; the
    multiplication part is integrated by the trapezoid rule, which is exact
    for trigonometric integrands of degree below the sample count.
    """
    A = np.asarray(A_samples, dtype=float)
    xi = 2.0 * np.pi * np.arange(A.size) / A.size
    E = fourier_modes(xi, n_modes)
    dxi = 2.0 * np.pi / A.size
    G = (E * A[:, None]).T @ E * dxi
    G = 0.5 * (G + G.T)
    G -= np.diag(_wavenumbers(n_modes) ** 2)
    return G, xi, E


def _growth_ell(basis: GrowthBasis, U0: Callable):
    modes, dxi = basis.modes, basis.dxi

    def ell(t, x, u):
        k = np.atleast_2d(x) @ modes.T
        c = np.maximum(np.atleast_2d(u) @ modes.T, 0.0)
        g = np.asarray(U0(t, k, c), dtype=float)
        return -dxi * g.sum(axis=1)

    return ell


def _minus_u(t, x, u):
    return -np.atleast_2d(u)


def build_growth_model(spec: GrowthSpec) -> tuple[Model, ControlProblem, GrowthBasis]:
    """Truncate, diagonalize and wrap the growth example.

    Coordinates are ordered by decreasing eigenvalue so coordinate 1 is the
    principal eigenfunction, normalized to be positive on the grid. The
    running cost is minus the spatial integral of ``U0`` (the framework
    minimizes cost, the planner maximizes gain), the control is the vector of
    eigen-coordinates of consumption in ``[0, M]^m`` and consumption on the
    grid is clipped at zero.
    """
    m = spec.n_modes
    G, xi, E = galerkin_matrix(spec.A_samples, m)
    evals, evecs = np.linalg.eigh(G)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    modes = E @ evecs
    top = modes[:, 0]
    if np.all(top < 0):
        evecs[:, 0] *= -1
        modes[:, 0] *= -1
    elif not np.all(modes[:, 0] > 0):
        raise PositivityError()
    basis = GrowthBasis(xi, E, G, evals, evecs, modes)

    lam = np.broadcast_to(np.asarray(spec.Q_scale, dtype=float), (m,)).copy()
    model = validate_model({"dim": m, "a": evals, "lam": lam, "horizon": spec.horizon})
    U = ControlSet.box(np.zeros(m), np.full(m, float(spec.M)))
    zero = BoundedFunction(lambda p: np.zeros(np.asarray(p).shape[:-1]), 0.0, (), 0.0, "zero")
    problem = ControlProblem(
        model,
        U,
        _minus_u,
        _growth_ell(basis, spec.U0),
        zero,
        L_b=0.0,
        b_bound=float(spec.M) * np.sqrt(m),
        ell_bound=2.0 * np.pi * float(spec.U0_bound),
        name=spec.name,
    )
    return model, problem, basis


def equivalence_conditions(spec: GrowthSpec, n_samples: int = 2000, seed: int = 0) -> dict:
    """Sample ``U0 >= 0`` and ``U0(s, k, 0) = 0``.

    These make the exit-time and state-constrained problems coincide; only
    samples can be checked for a user-supplied ``U0``.
    """
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, spec.horizon, (n_samples, 1))
    k = rng.normal(0.0, 3.0, (n_samples, 1))
    c = rng.uniform(0.0, max(spec.M, 1.0) * 2.0, (n_samples, 1))
    vals = np.asarray(spec.U0(s, k, c), dtype=float)
    at0 = np.asarray(spec.U0(s, k, np.zeros_like(c)), dtype=float)
    return {
        "nonnegative": bool(np.all(vals >= 0)),
        "zero_without_consumption": bool(np.all(at0 == 0)),
        "bounded": bool(np.all(np.abs(vals) <= spec.U0_bound)),
    }


def cost_depends_on_control(problem: ControlProblem, n_samples: int = 256, seed: int = 0) -> bool:
    """Whether sampled running costs change with the control."""
    rng = np.random.default_rng(seed)
    n = problem.model.dim
    x = rng.normal(0.0, 1.0, (n_samples, n))
    u1 = problem.sample_controls(n_samples, rng)
    u2 = problem.sample_controls(n_samples, rng)
    t = 0.5 * problem.model.horizon
    return not np.array_equal(problem.ell(t, x, u1), problem.ell(t, x, u2))


def linear_argmin_check(problem: ControlProblem, solution: GridFunction, min_gap: float = 1e-12) -> dict:
    """Compare the computed minimizer with the bang-bang closed form.

    With ``b = -u`` and a control-free running cost, ``<p, -u>`` over
    ``[lo, hi]`` is minimized by ``hi`` where ``p > 0`` and ``lo`` where
    ``p < 0``. Every interior grid node at every stored time is checked;
    components with ``|p| <= min_gap`` are ties and skipped.
    """
    U = problem.U
    pts = solution.node_points()
    interior = pts[:, 0] > 0
    pts = pts[interior]
    checked = mismatched = 0
    worst = 0.0
    T = problem.model.horizon
    for j in range(1, solution.time_nodes.size):
        t_solver = float(solution.time_nodes[j])
        t = T - t_solver if solution.time_reversed else t_solver
        P = solution.gradients[j].reshape(-1, problem.model.dim)[interior]
        _, arg = hamiltonian_min(problem, t, pts, P)
        closed = np.where(P > 0, U.hi, U.lo)
        decided = np.abs(P) > min_gap
        diff = np.abs(arg - closed)[decided]
        checked += int(decided.sum())
        mismatched += int(np.sum(diff > 0))
        if diff.size:
            worst = max(worst, float(diff.max()))
    return {"checked": checked, "mismatched": mismatched, "max_deviation": worst, "passed": mismatched == 0}


@dataclass
class GrowthReport:
    model: Model
    basis: GrowthBasis
    solution: GridFunction
    convergence: object
    values: list[float]
    consumption: np.ndarray  # (n_profiles, N) feedback consumption at the initial time
    verification: VerificationReport
    boundary_values: list[float]
    conditions: dict
    argmin_check: dict | None
    grid_tol: float
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        ok = self.verification.passed and all(v == 0.0 for v in self.boundary_values)
        if self.argmin_check is not None:
            ok = ok and self.argmin_check["passed"]
        return ok


def run_growth_scenario(
    spec: GrowthSpec,
    solver_cfg: SolverConfig,
    mc_cfg: MCConfig | None,
    profiles: Sequence[np.ndarray],
    t0: float = 0.0,
    grid_tol: float | None = None,
) -> GrowthReport:
    """Build, solve, synthesize the feedback and verify it by simulation.

    ``profiles`` are initial capital fields sampled on ``spec.xi``; they are
    projected onto the retained modes. When ``grid_tol`` is omitted it is the
    largest change of the value at the profiles between the solver grid and
    its 2x coarsening. ``mc_cfg=None`` skips the simulation.
    """
    model, problem, basis = build_growth_model(spec)
    hjb = control_hjb(problem)
    sol, rep = solve_mild(hjb, solver_cfg)
    pts = np.array([basis.coords(p) for p in profiles])
    vals = sol.evaluate(t0, pts)[0]
    vals = np.where(pts[:, 0] > 0, vals, 0.0)
    if grid_tol is None:
        coarse_cfg = SolverConfig(**{**solver_cfg.__dict__, "grid": solver_cfg.grid.coarsened()})
        coarse, _ = solve_mild(hjb, coarse_cfg)
        cv = np.where(pts[:, 0] > 0, coarse.evaluate(t0, pts)[0], 0.0)
        grid_tol = float(np.max(np.abs(vals - cv)))

    feedback = synthesize_feedback(problem, sol)
    policies = [feedback]
    if spec.M > 0:
        policies.append(constant_policy(problem, np.zeros(model.dim), "c=0"))
    inside = [(t0, p) for p in pts if p[0] > 0]
    ver = verify(problem, sol, policies, inside, mc_cfg, grid_tol) if mc_cfg is not None else VerificationReport([])

    u_star = feedback(t0, pts)
    consumption = np.maximum(basis.field(u_star), 0.0)
    # a profile on the boundary hyperplane has value zero
    edge = pts.copy()
    edge[:, 0] = 0.0
    boundary_values = [float(sol.evaluate(t0, e[None, :])[0][0]) for e in edge]
    argmin = None if cost_depends_on_control(problem) else linear_argmin_check(problem, sol)
    return GrowthReport(
        model,
        basis,
        sol,
        rep,
        [float(v) for v in vals],
        consumption,
        ver,
        boundary_values,
        equivalence_conditions(spec),
        argmin,
        grid_tol,
    )
