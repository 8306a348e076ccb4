"""Odd symmetric mollification and K-convergence diagnostics.

The smooth approximants are built as
``psi(x) = int E[phi chi_{1/h}](z) eta_k(Pi x - z) dz`` where ``E`` is the odd
extension across ``x1 = 0``, ``chi_{1/h}`` cuts off near the boundary, ``Pi``
keeps the first ``n_proj`` coordinates and ``eta_k`` is a tensor product of
one-dimensional bump kernels supported on ``|z| < 1/k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .semigroup import BoundedFunction

# Gauss-Legendre nodes per mollified coordinate. Even, so no node sits at 0
# and the rule splits into exact +/- pairs.
N_MOLLIFIER_NODES = 16


@dataclass(frozen=True)
class MollifierSpec:
    """Cutoff index ``h``, projection dimension ``n_proj``, radius index ``k``."""

    h: int
    n_proj: int
    k: int

    def __post_init__(self):
        for name in ("h", "n_proj", "k"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer")

    @classmethod
    def diagonal(cls, n: int, dim: int) -> "MollifierSpec":
        """The schedule ``h = k = n`` with the projection capped at ``dim``."""
        return cls(h=n, n_proj=min(n, dim), k=n)


def _bump(z):
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def bump_normalizer() -> float:
    """``1 / int_{-1}^{1} exp(-1/(1-z^2)) dz``."""
    val, _ = integrate.quad(lambda z: float(_bump(z)), -1.0, 1.0, epsabs=1e-15, epsrel=1e-13)
    return 1.0 / val


def bump_kernel(z, k: int = 1):
    """Normalized one-dimensional bump kernel of radius ``1/k``."""
    return k * bump_normalizer() * _bump(k * np.asarray(z, dtype=float))


def kernel_derivative_constant() -> float:
    """``int |eta_1'(z)| dz``; for a symmetric unimodal kernel it is ``2 eta_1(0)``."""
    return 2.0 * bump_normalizer() * np.exp(-1.0)


@lru_cache(maxsize=None)
def _half_rule(n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive nodes and weights of the bump-weighted rule on ``(-1, 1)``.

    The full rule is ``(+z, w), (-z, w)``; weights sum to 1 over both halves.
    """
    z, w = np.polynomial.legendre.leggauss(n_nodes)
    z = z[z > 0]
    w = w[-z.size :] * _bump(z)
    w = w / (2.0 * w.sum())
    order = np.argsort(z)
    return z[order], w[order]


def cutoff(x1, eps: float):
    """Quintic smoothstep: 0 for ``x1 <= eps``, 1 for ``x1 >= 2 eps``."""
    s = np.clip((np.asarray(x1, dtype=float) - eps) / eps, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def _odd_cut(phi: BoundedFunction, eps: float, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    def f(y):
        y1 = y[..., 0]
        sgn = np.sign(y1)
        refl = y.copy()
        refl[..., 0] = np.abs(y1)
        vals = np.zeros(y.shape[:-1])
        live = sgn != 0
        if np.any(live):
            r = refl[live]
            vals[live] = sgn[live] * np.asarray(phi(r), dtype=float) * cutoff(r[:, 0], eps)
        return vals

    return f


def mollify_odd(
    phi: BoundedFunction, spec: MollifierSpec, dim: int | None = None, n_nodes: int = N_MOLLIFIER_NODES
) -> BoundedFunction:
    """Smooth odd approximant of ``phi`` that vanishes on ``x1 = 0``.

    The convolution is evaluated with a tensor rule whose nodes come in exact
    sign pairs in every mollified coordinate; the pair in coordinate 1 is
    summed first, which makes the boundary value an exact zero and the
    result exactly odd in ``x1``. Weights are nonnegative and sum to 1, so
    the declared bound of ``phi`` carries over.

    ``n_nodes`` (even) is the per-coordinate rule size. A discrete rule turns
    a jump of ``phi`` into a staircase, so derivative estimates need either
    many nodes or difference steps spanning several of them.
    """
    if n_nodes % 2 or n_nodes < 2:
        raise ValueError("n_nodes must be a positive even integer")
    n_proj = spec.n_proj
    zpos, wpos = _half_rule(int(n_nodes))
    r = 1.0 / spec.k
    eps = 1.0 / spec.h
    # transverse offsets: full symmetric rule in coordinates 2..n_proj
    zfull = np.concatenate([-zpos[::-1], zpos]) * r
    wfull = np.concatenate([wpos[::-1], wpos])
    if n_proj > 1:
        grids = np.meshgrid(*([zfull] * (n_proj - 1)), indexing="ij")
        offs = np.stack([g.ravel() for g in grids], axis=1)
        wt = np.prod(np.meshgrid(*([wfull] * (n_proj - 1)), indexing="ij"), axis=0).ravel()
    else:
        offs = np.zeros((1, 0))
        wt = np.ones(1)
    z1 = zpos * r
    bound = float(phi.bound)

    def fn(x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1] if dim is None else dim
        if n_proj > n:
            raise ValueError("projection dimension exceeds the state dimension")
        flat = x.reshape(-1, x.shape[-1])
        base = np.zeros((flat.shape[0], n))
        base[:, :n_proj] = flat[:, :n_proj]
        g = _odd_cut(phi, eps, n)
        pts_p = np.repeat(base[:, None, :], offs.shape[0], axis=1)
        pts_p[:, :, 1:n_proj] -= offs[None]
        pair = np.zeros(pts_p.shape[:2])
        for zz, ww in zip(z1, wpos):
            a = pts_p.copy()
            b = pts_p.copy()
            a[..., 0] -= zz
            b[..., 0] += zz
            pair += ww * (g(a) + g(b))
        out = pair @ wt
        # the exact value is a convex combination, so only rounding can push it past the bound
        out = np.clip(out, -bound, bound)
        return out.reshape(x.shape[:-1])

    return BoundedFunction(fn, bound, (), None, f"mollified[{spec.h},{spec.n_proj},{spec.k}]({phi.name})")


@dataclass
class KConvergenceReport:
    sup_norms: list[float]
    bound: float
    deviations: list[list[float]]
    tol: float
    bounded: bool = field(init=False)
    decreasing: bool = field(init=False)
    below_tol: bool = field(init=False)

    def __post_init__(self):
        self.bounded = all(s <= self.bound for s in self.sup_norms)
        dev = np.asarray(self.deviations, dtype=float)
        self.decreasing = bool(np.all(np.diff(dev, axis=0) <= 1e-14)) if dev.shape[0] > 1 else True
        self.below_tol = bool(np.all(dev[-1] <= self.tol)) if dev.size else True

    @property
    def passed(self) -> bool:
        return self.bounded and self.decreasing and self.below_tol


def kconv_diagnostic(
    sequence: Sequence[Callable],
    limit: Callable,
    compacts: Sequence[np.ndarray],
    bound: float,
    tol: float = 1e-2,
) -> KConvergenceReport:
    """Check uniform boundedness and uniform convergence on compacts.

    ``compacts`` are point lattices of shape ``(N, n)``. Deviations are
    ``max |f_n - f|`` per compact; the sequence passes when all sup norms on
    the lattices stay within ``bound``, deviations never increase along the
    sequence and the last ones are at most ``tol``.
    """
    pts = [np.asarray(c, dtype=float) for c in compacts]
    ref = [np.asarray(limit(c), dtype=float) for c in pts]
    sups, devs = [], []
    for f in sequence:
        vals = [np.asarray(f(c), dtype=float) for c in pts]
        sups.append(float(max(np.max(np.abs(v)) for v in vals)))
        devs.append([float(np.max(np.abs(v - r))) for v, r in zip(vals, ref)])
    return KConvergenceReport(sups, float(bound), devs, float(tol))
