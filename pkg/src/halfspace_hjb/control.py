"""Exit-time optimal control on the half-space.

Minimizes ``J = E[ int_t^{T ^ tau} l(s, X, u) ds + 1{T < tau} phi(X_T) ]``
for ``dX = (A X + b(s, X, u)) ds + sqrt(Q) dW`` killed on leaving ``x1 > 0``.
The value function solves a terminal-value HJB with nonlinearity
``F(t, x, p) = inf_u <p, b(t, x, u)> + l(t, x, u)``; :func:`control_hjb`
builds that problem for the solver, which handles it by time reversal.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, InadmissibleControlError
from .hjb_solver import GridFunction, SemilinearProblem
from .model import Model, variance_profile
from .semigroup import BoundedFunction, MCConfig, _bridge_kill_prob
from .streams import mean_and_stderr, path_blocks

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
ARGMIN_TOL = 1e-8
# Rough number of lattice points used to seed the box search.
LATTICE_BUDGET = 125


@dataclass(frozen=True)
class ControlSet:
    """A finite list of control points or a box ``[lo, hi]``."""

    points: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    @classmethod
    def finite(cls, points) -> "ControlSet":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("control set is empty")
        return cls(points=pts)

    @classmethod
    def box(cls, lo, hi) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("box needs lo <= hi componentwise")
        return cls(lo=lo, hi=hi)

    @property
    def is_finite(self) -> bool:
        return self.points is not None

    @property
    def dim(self) -> int:
        return self.points.shape[1] if self.is_finite else self.lo.size

    @property
    def default(self) -> np.ndarray:
        return self.points[0].copy() if self.is_finite else self.lo.copy()

    def contains(self, u, tol: float = 1e-12) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if self.is_finite:
            d = np.abs(u[:, None, :] - self.points[None, :, :]).max(axis=-1)
            return d.min(axis=1) <= tol
        return np.all((u >= self.lo - tol) & (u <= self.hi + tol), axis=1)


@dataclass(frozen=True)
class ControlProblem:
    """Drift ``b(t, x, u)``, running cost ``ell(t, x, u)``, terminal cost ``phi``.

    ``b`` and ``ell`` are vectorized over rows: ``x`` is ``(N, n)``, ``u`` is
    ``(N, m)``; ``b`` returns ``(N, n)`` and ``ell`` returns ``(N,)``.
    """

    model: Model
    U: ControlSet
    b: Callable
    ell: Callable
    phi: BoundedFunction
    L_b: float
    b_bound: float
    ell_bound: float
    name: str = ""

    def spot_check(self, n_samples: int = 512, seed: int = 0) -> dict:
        """Check the declared bounds and the Lipschitz constant of b."""
        rng = np.random.default_rng(seed)
        n = self.model.dim
        t = float(rng.uniform(0, self.model.horizon))
        x1 = rng.uniform(-3, 3, (n_samples, n))
        x1[:, 0] = np.abs(x1[:, 0])
        x2 = x1 + rng.normal(0, 0.5, x1.shape)
        x2[:, 0] = np.abs(x2[:, 0])
        u = self.sample_controls(n_samples, rng)
        b1, b2 = self.b(t, x1, u), self.b(t, x2, u)
        lip = np.linalg.norm(b1 - b2, axis=1) <= self.L_b * np.linalg.norm(x1 - x2, axis=1) * (1 + 1e-9) + 1e-12
        return {
            "b_bound": bool(np.all(np.linalg.norm(b1, axis=1) <= self.b_bound * (1 + 1e-9))),
            "ell_bound": bool(np.all(np.abs(self.ell(t, x1, u)) <= self.ell_bound * (1 + 1e-9))),
            "lipschitz": bool(np.all(lip)),
        }

    def sample_controls(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.U.is_finite:
            return self.U.points[rng.integers(0, self.U.points.shape[0], n)]
        return rng.uniform(self.U.lo, self.U.hi, (n, self.U.dim))


def _rows(x, width: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1
    return arr.reshape(-1, width), single


def _fcv(problem: ControlProblem, t, x, p, u) -> np.ndarray:
    return np.einsum("ij,ij->i", p, problem.b(t, x, u)) + problem.ell(t, x, u)


def hamiltonian_cv(problem: ControlProblem, t: float, x, p, u):
    """Current-value Hamiltonian ``<p, b(t,x,u)> + ell(t,x,u)``."""
    n, m = problem.model.dim, problem.U.dim
    X, single = _rows(x, n)
    P, _ = _rows(p, n)
    Uc, _ = _rows(u, m)
    if not np.all(problem.U.contains(Uc)):
        raise InadmissibleControlError()
    N = max(X.shape[0], P.shape[0], Uc.shape[0])
    X, P, Uc = (np.broadcast_to(a, (N, a.shape[1])) for a in (X, P, Uc))
    out = _fcv(problem, float(t), X, P, Uc)
    return float(out[0]) if single else out


def _box_lattice(U: ControlSet) -> np.ndarray:
    m = U.dim
    per = int(min(11, max(3, round(LATTICE_BUDGET ** (1.0 / m)))))
    axes = [np.linspace(l, h, per) if h > l else np.array([l]) for l, h in zip(U.lo, U.hi)]
    return np.array(list(itertools.product(*axes)))


def _golden_box(problem, t, X, P, U: ControlSet):
    lattice = _box_lattice(U)
    N = X.shape[0]
    vals = np.stack([_fcv(problem, t, X, P, np.broadcast_to(c, (N, U.dim))) for c in lattice], axis=1)
    best = np.argmin(vals, axis=1)
    u = lattice[best].copy()
    fbest = vals[np.arange(N), best]
    spacing = np.where(U.hi > U.lo, (U.hi - U.lo) / max(1, int(round(len(lattice) ** (1 / U.dim))) - 1), 0.0)
    n_sweeps = 1 if U.dim == 1 else 3
    for sweep in range(n_sweeps):
        for k in range(U.dim):
            width = spacing[k] / 2**sweep
            if width == 0:
                continue
            a = np.maximum(U.lo[k], u[:, k] - width)
            b = np.minimum(U.hi[k], u[:, k] + width)

            def f_at(z, k=k):
                cand = u.copy()
                cand[:, k] = z
                return _fcv(problem, t, X, P, cand)

            c = b - _GOLDEN * (b - a)
            d = a + _GOLDEN * (b - a)
            fc, fd = f_at(c), f_at(d)
            n_iter = int(math.ceil(math.log(max(2 * width, ARGMIN_TOL) / ARGMIN_TOL) / math.log(1 / _GOLDEN)))
            for _ in range(n_iter):
                left = fc < fd
                b = np.where(left, d, b)
                a = np.where(left, a, c)
                new_c = b - _GOLDEN * (b - a)
                new_d = a + _GOLDEN * (b - a)
                c_next = np.where(left, new_c, d)
                d_next = np.where(left, c, new_d)
                f_new = f_at(np.where(left, new_c, new_d))
                fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
                c, d = c_next, d_next
            z = 0.5 * (a + b)
            for cand in (z, np.maximum(U.lo[k], u[:, k] - width), np.minimum(U.hi[k], u[:, k] + width)):
                fz = f_at(cand)
                better = fz < fbest
                u[better, k] = cand[better]
                fbest = np.where(better, fz, fbest)
    return fbest, u


def hamiltonian_min(problem: ControlProblem, t: float, x, p):
    """Infimum over U of the current-value Hamiltonian and a minimizer.

    Finite sets are scanned exhaustively (lowest index wins ties). Boxes start
    from the best point of a coarse lattice and refine each coordinate by
    golden-section search to ``1e-8``; a refinement is kept only if it
    strictly improves the value.
    """
    n = problem.model.dim
    X, single = _rows(x, n)
    P, _ = _rows(p, n)
    N = max(X.shape[0], P.shape[0])
    X = np.broadcast_to(X, (N, n))
    P = np.broadcast_to(P, (N, n))
    t = float(t)
    U = problem.U
    if U.is_finite:
        vals = np.stack([_fcv(problem, t, X, P, np.broadcast_to(c, (N, U.dim))) for c in U.points], axis=1)
        idx = np.argmin(vals, axis=1)
        val, arg = vals[np.arange(N), idx], U.points[idx]
    elif np.all(U.hi == U.lo):
        arg = np.broadcast_to(U.lo, (N, U.dim)).copy()
        val = _fcv(problem, t, X, P, arg)
    else:
        val, arg = _golden_box(problem, t, X, P, U)
    if single:
        return float(val[0]), arg[0]
    return val, arg


def control_hjb(problem: ControlProblem) -> SemilinearProblem:
    """Terminal-value HJB problem whose mild solution is the value function."""

    def F(t, x, y, z):
        return hamiltonian_min(problem, t, x, z)[0]

    L = max(problem.b_bound, 1e-12)
    Lp = max(problem.b_bound, problem.ell_bound, 1e-12)
    return SemilinearProblem(problem.model, F, L, Lp, problem.phi, "terminal", name=problem.name)


@dataclass
class Policy:
    """A control rule ``map(t, X) -> (N, m)`` array of controls in U."""

    kind: str
    map: Callable
    name: str = ""
    stats: dict = field(default_factory=dict)

    def __call__(self, t, X):
        return self.map(t, X)


def constant_policy(problem: ControlProblem, u0, name: str | None = None) -> Policy:
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    if not problem.U.contains(u0)[0]:
        raise InadmissibleControlError()

    def rule(t, X):
        return np.broadcast_to(u0, (np.atleast_2d(X).shape[0], u0.size)).copy()

    return Policy("constant", rule, name or f"u={','.join(f'{v:g}' for v in u0)}")


def synthesize_feedback(problem: ControlProblem, solution: GridFunction) -> Policy:
    """Feedback ``(t, x) -> argmin_u F_CV(t, x, Dv(t, x), u)``.

    ``solution`` is the solver output for :func:`control_hjb`, so its clock is
    reversed; :meth:`GridFunction.evaluate` maps back. Boundary points get
    ``U.default``. Queries outside the grid are extrapolated flat and counted
    in ``policy.stats["outside_grid"]``.
    """
    default = problem.U.default
    stats = {"outside_grid": 0, "queries": 0, "solution": solution}

    def rule(t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.broadcast_to(default, (X.shape[0], default.size)).copy()
        inside = X[:, 0] > 0
        stats["queries"] += int(X.shape[0])
        stats["outside_grid"] += int(np.sum(solution.outside_grid(X)))
        if np.any(inside):
            _, Dv = solution.evaluate(t, X[inside])
            out[inside] = hamiltonian_min(problem, t, X[inside], Dv)[1]
        return out

    return Policy("feedback", rule, "feedback", stats)


@dataclass
class SimulationBatch:
    n_paths: int
    n_steps: int
    seed: int
    t0: float
    x0: np.ndarray
    policy: str
    exit_times: np.ndarray
    costs: np.ndarray
    running: np.ndarray
    terminal: np.ndarray
    gap: np.ndarray | None
    final_states: np.ndarray
    paths: np.ndarray | None = None

    @property
    def survived(self) -> np.ndarray:
        return np.isinf(self.exit_times)

    @property
    def survival_fraction(self) -> float:
        return float(np.mean(self.survived))


def _ou_half(model: Model, dt: float):
    return np.exp(model.a * dt / 2), np.sqrt(variance_profile(model, dt / 2))


def simulate_controlled(
    problem: ControlProblem,
    t0: float,
    x0,
    policy: Policy,
    cfg: MCConfig,
    value: GridFunction | None = None,
    store_paths: bool = False,
) -> SimulationBatch:
    """Simulate the controlled, killed diffusion from ``(t0, x0)``.

    Each step applies an exact OU half step, an Euler step of ``b`` with the
    control frozen at the step start, and another exact OU half step. Exit in
    coordinate 1 is detected at the step ends and, with bridge correction,
    inside the step. Running cost uses the trapezoid rule with the control
    held over the step; a path that exits inside a step is charged the
    left-point rate for half a step. With ``value`` given, the integral of
    ``F_CV(s, X, Dv, u) - F(s, X, Dv)`` is accumulated the same way.
    """
    model = problem.model
    n = model.dim
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0[0] < 0:
        raise DomainError()
    T = model.horizon
    t0 = float(t0)
    N = cfg.n_paths
    exit_times = np.full(N, np.inf)
    running = np.zeros(N)
    terminal = np.zeros(N)
    gap = np.zeros(N) if value is not None else None
    final = np.tile(x0, (N, 1))
    paths = np.zeros((N, cfg.n_steps + 1, n)) if store_paths else None
    if x0[0] == 0.0 or t0 >= T:
        if x0[0] == 0.0:
            exit_times[:] = t0
        elif x0[0] > 0:
            terminal[:] = problem.phi(final)
        if paths is not None:
            paths[:] = x0
        costs = running + terminal
        return SimulationBatch(N, cfg.n_steps, cfg.seed, t0, x0, policy.name, exit_times, costs, running, terminal, gap, final, paths)

    dt = (T - t0) / cfg.n_steps
    decay, sd = _ou_half(model, dt)
    q1_full = float(variance_profile(model, dt)[0])

    reuse_argmin = value is not None and policy.kind == "feedback" and policy.stats.get("solution") is value

    def minimize(s, X):
        if value is None:
            return None, None, None
        _, Dv = value.evaluate(s, X)
        Fmin, arg = hamiltonian_min(problem, s, X, Dv)
        return Dv, Fmin, arg

    def gap_rate(s, X, u, Dv, Fmin):
        return None if value is None else _fcv(problem, s, X, Dv, u) - Fmin

    for sl, rng in path_blocks(cfg.seed, N):
        B = sl.stop - sl.start
        X = np.tile(x0, (B, 1))
        alive = np.ones(B, dtype=bool)
        ex = np.full(B, np.inf)
        run = np.zeros(B)
        gp = np.zeros(B)
        if paths is not None:
            paths[sl, 0] = X
        # Dv, min value and minimizer at the current states of live paths
        cache = minimize(t0, X)
        for k in range(cfg.n_steps):
            s = t0 + k * dt
            Z1 = rng.standard_normal((B, n))
            Z2 = rng.standard_normal((B, n))
            Uu = rng.random(B)
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            Xa = X[idx]
            Dv0, F0, arg0 = cache
            if reuse_argmin:
                u = arg0
            else:
                u = np.asarray(policy(s, Xa), dtype=float).reshape(idx.size, -1)
            r0 = problem.ell(s, Xa, u)
            g0 = gap_rate(s, Xa, u, Dv0, F0)
            Xh = Xa * decay + sd * Z1[idx]
            Xb = Xh + problem.b(s, Xa, u) * dt
            Xn = Xb * decay + sd * Z2[idx]
            killed = Xn[:, 0] <= 0
            if cfg.bridge_correction:
                p = _bridge_kill_prob(Xa[:, 0], np.maximum(Xn[:, 0], 0.0), model.alpha, dt, q1_full)
                killed |= Uu[idx] < p
            stay = ~killed
            s1 = s + dt
            run_inc = np.where(killed, 0.5 * dt * r0, 0.0)
            gap_inc = np.where(killed, 0.5 * dt * g0, 0.0) if g0 is not None else None
            cache = (None, None, None)
            if np.any(stay):
                Xs, us = Xn[stay], u[stay]
                r1 = problem.ell(s1, Xs, us)
                run_inc[stay] = 0.5 * dt * (r0[stay] + r1)
                cache = minimize(s1, Xs)
                if g0 is not None:
                    gap_inc[stay] = 0.5 * dt * (g0[stay] + gap_rate(s1, Xs, us, cache[0], cache[1]))
            run[idx] += run_inc
            if g0 is not None:
                gp[idx] += gap_inc
            ex[idx[killed]] = s + 0.5 * dt
            X[idx] = Xn
            alive[idx[killed]] = False
            if paths is not None:
                paths[sl, k + 1] = X
        term = np.zeros(B)
        if np.any(alive):
            term[alive] = problem.phi(X[alive])
        exit_times[sl] = ex
        running[sl] = run
        terminal[sl] = term
        final[sl] = X
        if gap is not None:
            gap[sl] = gp
    costs = running + terminal
    return SimulationBatch(N, cfg.n_steps, cfg.seed, t0, x0, policy.name, exit_times, costs, running, terminal, gap, final, paths)


def estimate_cost(problem: ControlProblem, t0: float, x0, policy: Policy, cfg: MCConfig) -> tuple[float, float]:
    """Monte Carlo cost of ``policy`` from ``(t0, x0)`` with standard error."""
    batch = simulate_controlled(problem, t0, x0, policy, cfg)
    return mean_and_stderr(batch.costs)


@dataclass
class VerificationRow:
    point: int
    t: float
    x: tuple[float, ...]
    policy: str
    v: float
    J: float
    std_error: float
    identity_residual: float
    identity_std_error: float
    grid_tol: float
    lower_bound_ok: bool
    optimality_ok: bool | None
    identity_ok: bool

    @property
    def passed(self) -> bool:
        return self.lower_bound_ok and self.identity_ok and self.optimality_ok is not False


@dataclass
class VerificationReport:
    rows: list[VerificationRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def summary(self) -> dict:
        return {
            "lower_bound": all(r.lower_bound_ok for r in self.rows),
            "optimality": all(r.optimality_ok for r in self.rows if r.optimality_ok is not None),
            "identity": all(r.identity_ok for r in self.rows),
        }


def verify(
    problem: ControlProblem,
    solution: GridFunction,
    policies: Sequence[Policy],
    test_points: Sequence[tuple[float, Sequence[float]]],
    cfg: MCConfig,
    grid_tol: float | Sequence[float] = 0.0,
) -> VerificationReport:
    """Statistical verification of the value function against policies.

    For each test point and policy: (a) ``v <= J + 3 se``; (b) for feedback
    policies ``|J - v| <= 3 se + grid_tol``; (c) the identity
    ``J - v - E int (F_CV - F) ds = 0`` within ``3 se + grid_tol``, where se
    is the standard error of the per-path difference.
    """
    tols = np.broadcast_to(np.asarray(grid_tol, dtype=float), (len(test_points),))
    rows = []
    for i, (t, x) in enumerate(test_points):
        x = np.asarray(x, dtype=float).reshape(-1)
        v = float(solution.evaluate(t, x[None, :])[0][0]) if x[0] > 0 else 0.0
        for pol in policies:
            batch = simulate_controlled(problem, t, x, pol, cfg, value=solution)
            J, se = mean_and_stderr(batch.costs)
            D, se_d = mean_and_stderr(batch.costs - batch.gap)
            resid = D - v
            tol = float(tols[i])
            opt = None
            if pol.kind == "feedback":
                opt = bool(abs(J - v) <= 3 * se + tol)
            rows.append(
                VerificationRow(
                    i,
                    float(t),
                    tuple(float(c) for c in x),
                    pol.name,
                    v,
                    J,
                    se,
                    resid,
                    se_d,
                    tol,
                    bool(v <= J + 3 * se),
                    opt,
                    bool(abs(resid) <= 3 * se_d + tol),
                )
            )
    return VerificationReport(rows)
