"""Mild solutions of semilinear HJB equations on the half-space.

The solver iterates the map ``(u, v) -> (U1, U2)``::

    U1(t) = P_t phi + int_0^t P_{t-s} F(s, ., u(s), v(s)) ds
    U2(t) = D P_t phi + int_0^t D P_{t-s} F(s, ., u(s), v(s)) ds

on a tensor grid over ``[0, x1_max] x [-x'_max, x'_max]^(n-1)`` and a graded
time mesh ``t_j = T (j/m)**(1/(1-delta))``. The free term is sampled with the
pointwise quadrature of :mod:`semigroup`. Inside the time convolution the
nonlinearity is represented by its multilinear interpolant, and the semigroup
acts on that interpolant exactly: for a piecewise-linear function the kernel
integrals are closed-form in terms of the normal CDF and density, so each
``P_tau`` becomes a Kronecker product of small per-coordinate matrices.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate
from scipy.special import ndtr

from .errors import ContractionWarning, GradingError, GridTooSmallWarning, ModelError, NoContractionError
from .model import Model, variance_profile
from .semigroup import BoundedFunction, QuadratureSpec, _factorized, apply_P, grad_P, gradient_constant

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SemilinearProblem:
    """One HJB instance ``u_t = Lu + F(t, x, u, Du)`` with Dirichlet data.

    ``F(t, x, y, z)`` is vectorized: ``x`` has shape ``(N, n)``, ``y`` shape
    ``(N,)`` and ``z`` shape ``(N, n)``. ``orientation="terminal"`` means
    ``phi`` is the datum at ``t = T`` and the equation runs backwards.
    """

    model: Model
    F: Callable
    L: float
    Lprime: float
    phi: BoundedFunction
    orientation: str = "initial"
    name: str = ""
    _source: "SemilinearProblem | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.orientation not in ("initial", "terminal"):
            raise ValueError("orientation must be 'initial' or 'terminal'")
        if not (self.L > 0 and self.Lprime > 0):
            raise ValueError("L and Lprime must be positive")

    def spot_check(self, n_samples: int = 256, seed: int = 0) -> dict:
        """Check the Lipschitz and growth declarations on random tuples."""
        rng = np.random.default_rng(seed)
        n = self.model.dim
        t = rng.uniform(0, self.model.horizon, n_samples)
        x = rng.uniform(-3, 3, (n_samples, n))
        x[:, 0] = np.abs(x[:, 0])
        y1, y2 = rng.normal(0, 2, (2, n_samples))
        z1, z2 = rng.normal(0, 2, (2, n_samples, n))
        lip_ok = growth_ok = True
        for i in range(n_samples):
            ti = float(t[i])
            xi = x[i : i + 1]
            f1 = float(self.F(ti, xi, y1[i : i + 1], z1[i : i + 1])[0])
            f2 = float(self.F(ti, xi, y2[i : i + 1], z2[i : i + 1])[0])
            dist = abs(y1[i] - y2[i]) + np.linalg.norm(z1[i] - z2[i])
            lip_ok &= abs(f1 - f2) <= self.L * dist * (1 + 1e-9) + 1e-12
            growth_ok &= abs(f1) <= self.Lprime * (1 + abs(y1[i]) + np.linalg.norm(z1[i])) * (1 + 1e-9)
        return {"lipschitz": bool(lip_ok), "growth": bool(growth_ok)}


def reverse_time(problem: SemilinearProblem) -> SemilinearProblem:
    """Relabel time ``t -> T - t``; applying it twice returns the original."""
    if problem._source is not None:
        return problem._source
    T = problem.model.horizon
    F = problem.F

    def F_rev(t, x, y, z):
        return F(T - t, x, y, z)

    flipped = "initial" if problem.orientation == "terminal" else "terminal"
    return replace(problem, F=F_rev, orientation=flipped, _source=problem)


@dataclass(frozen=True)
class GridSpec:
    n_x1: int = 41
    x1_max: float = 5.0
    n_xprime: int = 21
    xprime_max: float = 4.0
    n_time: int = 16

    def axes(self, dim: int) -> list[np.ndarray]:
        axes = [np.linspace(0.0, self.x1_max, self.n_x1)]
        axes += [np.linspace(-self.xprime_max, self.xprime_max, self.n_xprime) for _ in range(dim - 1)]
        return axes

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(
            (self.n_x1 - 1) * factor + 1,
            self.x1_max,
            (self.n_xprime - 1) * factor + 1,
            self.xprime_max,
            self.n_time * factor,
        )

    def coarsened(self, factor: int = 2) -> "GridSpec":
        return GridSpec(
            (self.n_x1 - 1) // factor + 1,
            self.x1_max,
            (self.n_xprime - 1) // factor + 1,
            self.xprime_max,
            max(2, self.n_time // factor),
        )


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings. ``beta=None`` runs the doubling search."""

    beta: float | None = None
    tol: float = 1e-5
    max_iters: int = 25
    mesh_grading: float | None = None
    quad: QuadratureSpec = QuadratureSpec()
    grid: GridSpec = GridSpec()
    n_gauss: int = 4
    n_sub_last: int = 4


def time_mesh(horizon: float, m: int, grading: float) -> np.ndarray:
    j = np.arange(m + 1, dtype=float)
    t = horizon * (j / m) ** grading
    t[-1] = horizon
    return t


def _multilinear_weights(axes: Sequence[np.ndarray], pts: np.ndarray):
    """Corner indices and weights for multilinear interpolation, clamped."""
    idx, frac = [], []
    for k, ax in enumerate(axes):
        x = np.clip(pts[:, k], ax[0], ax[-1])
        i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, ax.size - 2)
        w = (x - ax[i]) / (ax[i + 1] - ax[i])
        idx.append(i)
        frac.append(w)
    return idx, frac


def multilinear(axes: Sequence[np.ndarray], data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Interpolate ``data`` (shape ``grid + extra``) at ``pts`` (N, n)."""
    idx, frac = _multilinear_weights(axes, pts)
    n = len(axes)
    out = 0.0
    for corner in itertools.product((0, 1), repeat=n):
        w = np.ones(pts.shape[0])
        ind = []
        for k, c in enumerate(corner):
            w = w * (frac[k] if c else 1.0 - frac[k])
            ind.append(idx[k] + c)
        vals = data[tuple(ind)]
        out = out + (w.reshape(w.shape + (1,) * (vals.ndim - 1)) * vals)
    return out


@dataclass
class GridFunction:
    """Sampled ``(u, Du)`` on a graded time mesh and a tensor space grid.

    ``gradients[0]`` is a copy of ``gradients[1]``: the gradient may be
    unbounded as ``t -> 0`` and is never used at ``t = 0`` itself. When
    ``time_reversed`` is set, the stored clock is ``T - t`` of the original
    terminal-value problem.
    """

    time_nodes: np.ndarray
    axes: list[np.ndarray]
    values: np.ndarray
    gradients: np.ndarray
    horizon: float
    time_reversed: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.size for ax in self.axes)

    def node_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        mask[0] = False
        return mask

    def _time_weights(self, t: float):
        tn = self.time_nodes
        t = float(np.clip(t, tn[0], tn[-1]))
        j = int(np.clip(np.searchsorted(tn, t, side="right") - 1, 0, tn.size - 2))
        th = (t - tn[j]) / (tn[j + 1] - tn[j])
        return j, th

    def interpolate(self, t: float, pts) -> tuple[np.ndarray, np.ndarray]:
        """Values and gradients at solver time ``t``; flat outside the grid."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        j, th = self._time_weights(t)
        u = (1 - th) * multilinear(self.axes, self.values[j], pts) + th * multilinear(self.axes, self.values[j + 1], pts)
        if j == 0:
            Du = multilinear(self.axes, self.gradients[1], pts)
        else:
            Du = (1 - th) * multilinear(self.axes, self.gradients[j], pts) + th * multilinear(
                self.axes, self.gradients[j + 1], pts
            )
        u = np.where(pts[:, 0] <= 0.0, 0.0, u)
        return u, Du

    def evaluate(self, t: float, pts) -> tuple[np.ndarray, np.ndarray]:
        """Values and gradients in the original problem's clock."""
        s = self.horizon - float(t) if self.time_reversed else float(t)
        return self.interpolate(s, pts)

    def outside_grid(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        out = np.zeros(pts.shape[0], dtype=bool)
        for k, ax in enumerate(self.axes):
            out |= (pts[:, k] < ax[0]) | (pts[:, k] > ax[-1])
        return out


@dataclass
class ConvergenceReport:
    beta: float
    C1: float
    C2: float
    factor: float
    C_grad: float
    deltas: list[float] = field(default_factory=list)
    sup_deltas: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    converged: bool = False
    far_field_mass: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.deltas)

    @property
    def observed_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0


# ---------------------------------------------------------------------------
# contraction constants


def _alg_quad(fun, a: float, b: float, wvar: tuple[float, float]) -> tuple[float, float]:
    val, err = integrate.quad(fun, a, b, weight="alg", wvar=wvar, limit=200, epsabs=1e-15, epsrel=1e-10)
    return float(val), float(err)


def _lag_integral(t: float, p: float, q: float, beta: float) -> float:
    """``int_0^t r**-p (t-r)**-q exp(-beta r) dr`` with endpoint weights.

    The exponential concentrates near ``r = 0`` for large ``beta t``, so the
    range is split at ``min(t/2, 10/beta)``; the two end pieces carry only
    the singular weight of their own endpoint and any stretch in between is
    smooth.
    """
    c = t / 2 if beta <= 0 else min(t / 2, 10.0 / beta)
    left, e1 = _alg_quad(lambda r: (t - r) ** -q * math.exp(-beta * r), 0.0, c, (-p, 0.0))
    total, err = left, e1
    if c < t / 2:
        # smooth middle stretch, kept away from both singular endpoints
        mid = 0.5 * (c + t)
        val, e = integrate.quad(
            lambda r: r**-p * (t - r) ** -q * math.exp(-beta * r), c, mid, limit=200, epsabs=1e-15, epsrel=1e-10
        )
        total, err = total + val, err + e
        c = mid
    right, e2 = _alg_quad(lambda r: r**-p * math.exp(-beta * r), c, t, (0.0, -q))
    total, err = total + right, err + e2
    if not np.isfinite(total) or err > 1e-7 * abs(total) + 1e-13:
        raise GradingError()
    return total


def _constant_times(horizon: float, n: int = 200) -> np.ndarray:
    return np.unique(np.concatenate([np.linspace(horizon / n, horizon, n), horizon * 2.0 ** -np.arange(1, 20.0)]))


def beta_constants(model: Model, L: float, beta: float, C_grad: float | None = None) -> tuple[float, float, float]:
    """Contraction constants ``C1(beta)``, ``C2(beta)`` and the certified factor.

    With ``r = t - s`` the four integrals are ``int r**-p (t-r)**-q
    exp(-beta r) dr`` for suitable ``p, q``; they are integrated with
    algebraic endpoint weights (QUADPACK QAWS). ``C_grad`` defaults to the
    semigroup's measured gradient constant.
    """
    d = model.delta
    beta = float(beta)
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if C_grad is None:
        C_grad = gradient_constant(model)
    C1 = C2 = 0.0
    for t in _constant_times(model.horizon):
        t = float(t)
        lin = t if beta == 0 else -math.expm1(-beta * t) / beta
        i1 = _lag_integral(t, 0.0, d, beta)
        i2 = t**d * _lag_integral(t, d, 0.0, beta)
        i3 = t**d * _lag_integral(t, d, d, beta)
        C1 = max(C1, lin, i1)
        C2 = max(C2, i2, i3)
    factor = L * C1 + L * C_grad * C2
    return C1, C2, factor


def search_beta(model: Model, L: float, C_grad: float | None = None, max_doublings: int = 40):
    """Doubling search from beta = 1 until the certified factor is <= 1/2."""
    if C_grad is None:
        C_grad = gradient_constant(model)
    beta = 1.0
    for _ in range(max_doublings):
        C1, C2, factor = beta_constants(model, L, beta, C_grad)
        if factor <= 0.5:
            return beta, C1, C2, factor
        beta *= 2.0
    raise NoContractionError()


# ---------------------------------------------------------------------------
# exact action of the semigroup on piecewise-linear interpolants


def _phi(z):
    return _INV_SQRT2PI * np.exp(-0.5 * z * z)


def _mass(al, be):
    """Phi(be) - Phi(al) computed on the accurate side of the median."""
    pos = al > 0
    return np.where(pos, ndtr(-al) - ndtr(-be), ndtr(be) - ndtr(al))


def pl_gauss_matrices(mu: np.ndarray, sigma: float, nodes: np.ndarray, half_line: bool):
    """Integrals of the hat basis against ``N(mu_i, sigma^2)``.

    Returns ``V[i, j] = int hat_j dN(mu_i)`` and ``D = dV/dmu``. Outside the
    nodes the end hats are extended flat; with ``half_line`` the integration
    starts at ``nodes[0]`` (which must be 0).
    """
    mu = np.asarray(mu, dtype=float)[:, None]
    a = nodes[None, :-1]
    b = nodes[None, 1:]
    h = b - a
    al = (a - mu) / sigma
    be = (b - mu) / sigma
    dP = _mass(al, be)
    pa, pb = _phi(al), _phi(be)
    dphi = pb - pa
    VL = (b - mu) / h * dP + sigma * dphi / h
    VR = (mu - a) / h * dP - sigma * dphi / h
    DL = pa / sigma - dP / h
    DR = -pb / sigma + dP / h
    M, K = mu.shape[0], nodes.size
    V = np.zeros((M, K))
    D = np.zeros((M, K))
    V[:, :-1] += VL
    V[:, 1:] += VR
    D[:, :-1] += DL
    D[:, 1:] += DR
    au = (nodes[-1] - mu[:, 0]) / sigma
    V[:, -1] += ndtr(-au)
    D[:, -1] += _phi(au) / sigma
    if not half_line:
        bl = (nodes[0] - mu[:, 0]) / sigma
        V[:, 0] += ndtr(bl)
        D[:, 0] -= _phi(bl) / sigma
    return V, D


def semigroup_matrices(model: Model, tau: float, axes: Sequence[np.ndarray]):
    """Per-coordinate value and derivative matrices of ``P_tau`` on hat bases.

    ``P_tau`` applied to the multilinear interpolant of nodal data ``w`` is
    ``(V_1 x ... x V_n) w`` at the nodes; replacing ``V_k`` by ``D_k`` gives
    the k-th gradient component.
    """
    q = variance_profile(model, tau)
    e = np.exp(model.a * tau)
    Vs, Ds = [], []
    s1 = math.sqrt(q[0])
    m = axes[0] * e[0]
    Vp, Dp = pl_gauss_matrices(m, s1, axes[0], True)
    Vm, Dm = pl_gauss_matrices(-m, s1, axes[0], True)
    Vs.append(Vp - Vm)
    Ds.append(e[0] * (Dp + Dm))
    Vs[0][0, :] = 0.0
    for k in range(1, model.dim):
        V, D = pl_gauss_matrices(axes[k] * e[k], math.sqrt(q[k]), axes[k], False)
        Vs.append(V)
        Ds.append(e[k] * D)
    return Vs, Ds


def _kron_apply(mat_lists: Sequence[np.ndarray], stack: np.ndarray) -> np.ndarray:
    """Apply ``mat_lists[k][q]`` along spatial axis k of ``stack[q]``."""
    out = stack
    for k, mats in enumerate(mat_lists):
        moved = np.moveaxis(out, k + 1, -1)
        shp = moved.shape
        flat = moved.reshape(shp[0], -1, shp[-1])
        res = np.matmul(flat, np.swapaxes(mats, -1, -2))
        out = np.moveaxis(res.reshape(shp), -1, k + 1)
    return out


@dataclass
class _ConvolutionRule:
    """Quadrature entries for ``int_0^{t_j} K(t_j - s) psi(s) ds``."""

    tau: np.ndarray
    weight: np.ndarray
    left: np.ndarray
    theta: np.ndarray


def _convolution_rules(tn: np.ndarray, n_gauss: int, n_sub: int) -> list[_ConvolutionRule | None]:
    """Per output node, Gauss-Legendre in ``w = sqrt(t_j - s)``.

    The substitution absorbs the ``(t-s)**(-1/2)`` behaviour of the gradient
    kernel; the last interval is additionally split geometrically toward
    ``s = t_j``. The nonlinearity is linear in time between nodes and held
    at its ``t_1`` value on ``[0, t_1]``.
    """
    z, w = leggauss(n_gauss)
    rules: list[_ConvolutionRule | None] = [None]
    for j in range(1, tn.size):
        tj = tn[j]
        taus, wts, lefts, ths = [], [], [], []
        for i in range(j):
            w_lo = math.sqrt(max(tj - tn[i + 1], 0.0))
            w_hi = math.sqrt(tj - tn[i])
            if i == j - 1:
                cuts = [0.0] + [w_hi * 2.0 ** (-p) for p in range(n_sub, 0, -1)] + [w_hi]
            else:
                cuts = [w_lo, w_hi]
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                half = 0.5 * (hi - lo)
                ww = 0.5 * (hi + lo) + half * z
                s = tj - ww * ww
                taus.append(ww * ww)
                wts.append(2.0 * ww * half * w)
                lefts.append(np.full(n_gauss, i))
                th = (s - tn[i]) / (tn[i + 1] - tn[i])
                ths.append(np.ones(n_gauss) if i == 0 else np.clip(th, 0.0, 1.0))
        rules.append(
            _ConvolutionRule(np.concatenate(taus), np.concatenate(wts), np.concatenate(lefts), np.concatenate(ths))
        )
    return rules


class PicardOperator:
    """Discrete version of the fixed-point map on a fixed grid.

    Construction samples the free term ``P_t phi`` and precomputes the
    semigroup matrices for every quadrature lag; :meth:`step` is then cheap.
    """

    def __init__(self, problem: SemilinearProblem, cfg: SolverConfig):
        if problem.orientation == "terminal":
            problem = reverse_time(problem)
        self.problem = problem
        self.cfg = cfg
        model = problem.model
        self.model = model
        grading = cfg.mesh_grading if cfg.mesh_grading is not None else 1.0 / (1.0 - model.delta)
        self.tn = time_mesh(model.horizon, cfg.grid.n_time, grading)
        self.axes = cfg.grid.axes(model.dim)
        self.shape = tuple(ax.size for ax in self.axes)
        self.nodes = np.stack([g.ravel() for g in np.meshgrid(*self.axes, indexing="ij")], axis=-1)
        self.rules = _convolution_rules(self.tn, cfg.n_gauss, cfg.n_sub_last)
        self._mats = {}
        for rule in self.rules[1:]:
            for tau in rule.tau:
                if tau not in self._mats:
                    self._mats[tau] = semigroup_matrices(model, float(tau), self.axes)
        self.free_values, self.free_gradients = self._free_term()
        self.far_field_mass = self._far_field_mass()

    def _free_term(self):
        model, phi = self.model, self.problem.phi
        m = self.tn.size
        vals = np.zeros((m,) + self.shape)
        grads = np.zeros((m,) + self.shape + (model.dim,))
        x0 = self.nodes
        v0 = np.asarray(phi(x0), dtype=float)
        v0[x0[:, 0] == 0.0] = 0.0
        vals[0] = v0.reshape(self.shape)
        if phi.bound == 0.0:
            # declared identically zero: the free term vanishes
            return vals, grads
        quad = self.cfg.quad
        for j in range(1, m):
            t = float(self.tn[j])
            vals[j] = apply_P(model, t, phi, x0, quad).reshape(self.shape)
            grads[j] = grad_P(model, t, phi, x0, quad, boundary="limit").reshape(self.shape + (model.dim,))
        grads[0] = grads[1]
        return vals, grads

    def _far_field_mass(self) -> float:
        """Largest kernel mass beyond x1_max seen from the inner half of the grid."""
        model = self.model
        x1 = self.axes[0]
        inner = x1[x1 <= 0.5 * x1[-1]]
        worst = 0.0
        for t in self.tn[1:]:
            g = variance_profile(model, float(t))[0]
            z = (x1[-1] - inner * math.exp(model.alpha * t)) / math.sqrt(g)
            worst = max(worst, float(np.max(ndtr(-z))))
        return worst

    def nonlinearity(self, values: np.ndarray, gradients: np.ndarray) -> np.ndarray:
        F = self.problem.F
        n = self.model.dim
        psi = np.empty_like(values)
        for j in range(self.tn.size):
            y = values[j].reshape(-1)
            z = gradients[j].reshape(-1, n)
            psi[j] = np.asarray(F(float(self.tn[j]), self.nodes, y, z), dtype=float).reshape(self.shape)
        return psi

    def convolve(self, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.model.dim
        m = self.tn.size
        I = np.zeros((m,) + self.shape)
        DI = np.zeros((m,) + self.shape + (n,))
        for j in range(1, m):
            rule = self.rules[j]
            left = rule.left
            th = rule.theta
            bshape = (-1,) + (1,) * n
            stack = (1 - th).reshape(bshape) * psi[left] + th.reshape(bshape) * psi[left + 1]
            stack = stack * rule.weight.reshape(bshape)
            mats = [self._mats[tau] for tau in rule.tau]
            Vs = [np.stack([mm[0][k] for mm in mats]) for k in range(n)]
            Ds = [np.stack([mm[1][k] for mm in mats]) for k in range(n)]
            I[j] = _kron_apply(Vs, stack).sum(axis=0)
            for k in range(n):
                lists = list(Vs)
                lists[k] = Ds[k]
                DI[j, ..., k] = _kron_apply(lists, stack).sum(axis=0)
        return I, DI

    def step(self, current: GridFunction) -> GridFunction:
        psi = self.nonlinearity(current.values, current.gradients)
        I, DI = self.convolve(psi)
        vals = self.free_values + I
        grads = self.free_gradients + DI
        vals[:, 0, ...] = 0.0
        grads[0] = grads[1]
        return self.wrap(vals, grads)

    def wrap(self, vals, grads) -> GridFunction:
        return GridFunction(self.tn, self.axes, vals, grads, self.model.horizon, self.problem._source is not None)

    def initial(self, kind: str = "free") -> GridFunction:
        if kind == "zero":
            return self.wrap(np.zeros_like(self.free_values), np.zeros_like(self.free_gradients))
        return self.wrap(self.free_values.copy(), self.free_gradients.copy())

    def beta_norm(self, du: np.ndarray, dDu: np.ndarray, beta: float) -> float:
        """Weighted sup-norm: value part plus t**delta-weighted gradient part."""
        tn = self.tn
        w = np.exp(-beta * tn)
        val = np.max(np.abs(du).reshape(tn.size, -1), axis=1)
        gnorm = np.sqrt(np.sum(dDu[:, 1:] ** 2, axis=-1)).reshape(tn.size, -1)  # interior x1 > 0
        gmax = np.max(gnorm, axis=1) if gnorm.size else np.zeros(tn.size)
        gpart = w[1:] * tn[1:] ** self.model.delta * gmax[1:]
        return float(np.max(w * val) + np.max(gpart))


_OPERATOR_CACHE: dict = {}


def _operator(problem: SemilinearProblem, cfg: SolverConfig) -> PicardOperator:
    key = (id(problem), cfg)
    hit = _OPERATOR_CACHE.get(key)
    if hit is not None and hit[0] is problem:
        return hit[1]
    op = PicardOperator(problem, cfg)
    _OPERATOR_CACHE.clear()
    _OPERATOR_CACHE[key] = (problem, op)
    return op


def picard_step(problem: SemilinearProblem, current: GridFunction, cfg: SolverConfig) -> GridFunction:
    """One application of the fixed-point map on the solver grid."""
    return _operator(problem, cfg).step(current)


def solve_mild(
    problem: SemilinearProblem, cfg: SolverConfig, initial: str = "free", C_grad: float | None = None
) -> tuple[GridFunction, ConvergenceReport]:
    """Picard iteration to the mild solution.

    Starts from ``P_t phi`` (``initial="free"``) or zero and stops when the
    difference of successive iterates drops below ``cfg.tol`` both in the
    beta-weighted norm and in the same norm with ``beta = 0``.
    """
    op = _operator(problem, cfg)
    model = op.model
    if C_grad is None:
        C_grad = gradient_constant(model)
    if cfg.beta is None:
        beta, C1, C2, factor = search_beta(model, op.problem.L, C_grad)
    else:
        beta = float(cfg.beta)
        C1, C2, factor = beta_constants(model, op.problem.L, beta, C_grad)
    report = ConvergenceReport(beta, C1, C2, factor, C_grad, far_field_mass=op.far_field_mass)
    if op.far_field_mass > 1e-3:
        warnings.warn(f"grid too small: far-field mass {op.far_field_mass:.2e}", GridTooSmallWarning, stacklevel=2)
    cur = op.initial(initial)
    for _ in range(cfg.max_iters):
        nxt = op.step(cur)
        dv = nxt.values - cur.values
        dg = nxt.gradients - cur.gradients
        d = op.beta_norm(dv, dg, beta)
        report.deltas.append(d)
        report.sup_deltas.append(float(np.max(np.abs(dv))))
        if len(report.deltas) > 1 and report.deltas[-2] > 1e3 * np.finfo(float).eps:
            report.ratios.append(d / report.deltas[-2])
        cur = nxt
        # e^{-beta t} hides late times once beta is large, so the unweighted
        # difference must settle as well before stopping
        if d <= cfg.tol and op.beta_norm(dv, dg, 0.0) <= cfg.tol:
            report.converged = True
            break
    ratio = report.observed_ratio
    if 0.5 < ratio < 1.0:
        warnings.warn(f"observed contraction ratio {ratio:.3f} exceeds 1/2", ContractionWarning, stacklevel=2)
    if not report.converged and ratio >= 1.0:
        raise NoContractionError()
    return cur, report


def _residual_rule(t: float, tn: np.ndarray, n_gauss: int, n_sub: int):
    """Quadrature in ``w = sqrt(t - s)`` over the mesh intervals below t."""
    z, w = leggauss(n_gauss)
    cuts_s = list(tn[tn < t]) + [t]
    s_all, w_all = [], []
    for k in range(len(cuts_s) - 1):
        w_lo = math.sqrt(t - cuts_s[k + 1])
        w_hi = math.sqrt(t - cuts_s[k])
        if k == len(cuts_s) - 2:
            cuts = [0.0] + [w_hi * 2.0 ** (-p) for p in range(n_sub, 0, -1)] + [w_hi]
        else:
            cuts = [w_lo, w_hi]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            half = 0.5 * (hi - lo)
            ww = 0.5 * (hi + lo) + half * z
            s_all.append(t - ww * ww)
            w_all.append(2.0 * ww * half * w)
    return np.concatenate(s_all), np.concatenate(w_all)


def mild_residual(
    problem: SemilinearProblem,
    solution: GridFunction,
    test_points: Sequence[tuple[float, Sequence[float]]],
    quad: QuadratureSpec | None = None,
    n_gauss: int = 6,
    n_sub: int = 6,
) -> float:
    """Max discrepancy of the mild identity at ``(t, x)`` test points.

    Times are in the solver clock. The right-hand side is recomputed with the
    pointwise semigroup quadrature, using the interpolated ``u`` and ``Du``
    inside ``F``; it is compared with the interpolated solution value.
    """
    if problem.orientation == "terminal":
        problem = reverse_time(problem)
    model = problem.model
    quad = quad or QuadratureSpec(max(12, 16), 96, 8.0)
    worst = 0.0
    for t, x in test_points:
        t = float(t)
        x = np.asarray(x, dtype=float).reshape(1, -1)
        u_here, _ = solution.interpolate(t, x)
        if x[0, 0] == 0.0:
            worst = max(worst, abs(float(u_here[0])))
            continue
        if t == 0.0:
            rhs = float(problem.phi(x)[0])
        else:
            rhs = apply_P(model, t, problem.phi, x, quad)[0]
            s_nodes, s_w = _residual_rule(t, solution.time_nodes, n_gauss, n_sub)
            acc = []
            for s, ws in zip(s_nodes, s_w):
                s = float(s)

                def integrand(y, s=s):
                    flat = y.reshape(-1, model.dim)
                    u, Du = solution.interpolate(s, flat)
                    return np.asarray(problem.F(s, flat, u, Du), dtype=float).reshape(y.shape[:-1])

                f = BoundedFunction(integrand, float("nan"))
                acc.append(ws * apply_P(model, t - s, f, x, quad)[0])
            rhs += math.fsum(acc)
        worst = max(worst, abs(rhs - float(u_here[0])))
    return worst


def a_priori_bound(problem: SemilinearProblem, solution: GridFunction) -> tuple[float, float]:
    """Return ``(sup|u|, bound)`` for the linear-growth estimate.

    Since ``P_t`` is a contraction, ``|u(t)| <= sup|phi| + L' int_0^t (1 +
    sup|u(s)| + sup|Du(s)|) ds``; the integral is taken over the whole
    horizon with the trapezoid rule on the solved fields.
    """
    tn = solution.time_nodes
    su = np.max(np.abs(solution.values).reshape(tn.size, -1), axis=1)
    sg = np.max(np.sqrt(np.sum(solution.gradients**2, axis=-1)).reshape(tn.size, -1), axis=1)
    integrand = 1.0 + su + sg
    integral = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(tn)))
    return float(su.max()), problem.phi.bound + problem.Lprime * integral


__all__ = [
    "ConvergenceReport",
    "GridFunction",
    "GridSpec",
    "PicardOperator",
    "SemilinearProblem",
    "SolverConfig",
    "a_priori_bound",
    "beta_constants",
    "mild_residual",
    "multilinear",
    "picard_step",
    "pl_gauss_matrices",
    "reverse_time",
    "search_beta",
    "semigroup_matrices",
    "solve_mild",
    "time_mesh",
]
