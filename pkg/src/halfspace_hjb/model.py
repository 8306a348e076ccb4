"""Diagonal truncation of the Ornstein-Uhlenbeck data and hypothesis checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ModelError

DELTA_GRID = tuple(round(0.05 * j, 2) for j in range(1, 20))

# Number of dyadic halvings used to probe the t -> 0 behaviour of the
# gradient-bound profile, and how many of the last ones must be flat.
_N_DYADIC = 60
_TAIL = 10
_FLAT_TOL = 1e-6


def _frozen(v) -> np.ndarray:
    arr = np.array(v, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Model:
    """Simultaneously diagonal pair (A, Q) on a finite truncation.

    Coordinate 1 is the direction of the principal eigenvector, so the
    half-space is ``x1 > 0``. ``hyp_constant`` is the measured supremum of
    ``t**delta * max_k sqrt(exp(2 a_k t) / q_k(t))`` over ``(0, T]``.
    """

    dim: int
    a: np.ndarray
    lam: np.ndarray
    delta: float
    horizon: float
    hyp_constant: float = float("nan")
    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def alpha(self) -> float:
        return float(self.a[0])

    @property
    def lam1(self) -> float:
        return float(self.lam[0])

    def to_dict(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "a": [float(v) for v in self.a],
            "lam": [float(v) for v in self.lam],
            "delta": self.delta,
            "horizon": self.horizon,
        }


@dataclass(frozen=True)
class HalfSpacePoint:
    """A point (x1, x') of the closed half-space."""

    x1: float
    xprime: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.x1 >= 0:
            raise ModelError("point outside the closed half-space")

    @property
    def on_boundary(self) -> bool:
        return self.x1 == 0.0

    def as_array(self) -> np.ndarray:
        return np.array((self.x1, *self.xprime), dtype=float)


def _q(a: np.ndarray, lam: np.ndarray, t) -> np.ndarray:
    """q_k(t) broadcast over trailing time axis; the a=0 limit is lam*t.

    Written as ``lam t expm1(z)/z`` with ``z = 2 a t``; for tiny ``|z|`` the
    quotient is replaced by its series so subnormal rates stay finite.
    """
    a = np.asarray(a, dtype=float)[..., None]
    lam = np.asarray(lam, dtype=float)[..., None]
    t = np.asarray(t, dtype=float)
    z = 2.0 * a * t
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    ratio = np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)
    return lam * t * ratio


def variance_profile(model: Model, t: float) -> np.ndarray:
    """Return the per-coordinate variances q_k(t) of the OU transition.

    Entry 0 is g(t), the variance along the normal direction.
    """
    t = float(t)
    if not t > 0:
        raise ModelError("nonpositive time")
    return _q(model.a, model.lam, t)[:, 0]


def _bound_profile(a, lam, times, delta) -> np.ndarray:
    q = _q(a, lam, times)
    ratio = np.exp(2.0 * np.asarray(a)[:, None] * times[None, :]) / q
    return times**delta * np.sqrt(ratio.max(axis=0))


def _probe_times(horizon: float) -> tuple[np.ndarray, np.ndarray]:
    dyadic = horizon * 2.0 ** -np.arange(_N_DYADIC + 1, dtype=float)
    linear = np.linspace(horizon / 400, horizon, 400)
    return dyadic, linear


def hypothesis_bound(a, lam, horizon: float, delta: float) -> tuple[bool, float]:
    """Check finiteness of the gradient-bound profile for one exponent.

    The profile is sampled on dyadic times down to ``T 2**-60``; it is judged
    bounded when the last ``_TAIL`` dyadic samples no longer grow.
    Returns ``(bounded, sup_value)``.
    """
    dyadic, linear = _probe_times(horizon)
    hd = _bound_profile(a, lam, dyadic, delta)
    hl = _bound_profile(a, lam, linear, delta)
    if not (np.all(np.isfinite(hd)) and np.all(np.isfinite(hl))):
        return False, float("inf")
    tail = hd[-_TAIL - 1 :]
    bounded = bool(tail[-1] <= tail[0] * (1.0 + _FLAT_TOL))
    return bounded, float(max(hd.max(), hl.max()))


def validate_model(raw: Mapping[str, Any]) -> Model:
    """Build a :class:`Model` from a plain mapping and check its hypotheses.

    Required keys are ``dim``, ``a``, ``lam`` and ``horizon``; ``delta`` is
    optional and otherwise chosen as the smallest value on
    ``{0.05, ..., 0.95}`` for which the bound holds.
    """
    try:
        dim = int(raw["dim"])
        a = _frozen(raw["a"])
        lam = _frozen(raw["lam"])
        horizon = float(raw["horizon"])
    except KeyError as exc:
        raise ModelError(f"missing model field {exc.args[0]!r}") from None
    if dim < 1:
        raise ModelError("empty truncation")
    if a.size != dim or lam.size != dim:
        raise ModelError("a and lam must have length dim")
    if not np.all(np.isfinite(a)):
        raise ModelError("a must be finite")
    if np.any(~(lam > 0)):
        raise ModelError("degenerate noise")
    if not horizon > 0:
        raise ModelError("horizon must be positive")

    notes = (
        "A and Q simultaneously diagonal: commutation holds by construction",
        "trace-class, generation and gamma conditions automatic in finite dimension",
    )
    requested = raw.get("delta")
    if requested is not None:
        delta = float(requested)
        if not 0.0 < delta < 1.0:
            raise ModelError("hypothesis 2.2 violated")
        ok, const = hypothesis_bound(a, lam, horizon, delta)
        if not ok:
            raise ModelError("hypothesis 2.2 violated")
        return Model(dim, a, lam, delta, horizon, const, notes)

    for delta in DELTA_GRID:
        ok, const = hypothesis_bound(a, lam, horizon, delta)
        if ok:
            return Model(dim, a, lam, float(delta), horizon, const, notes)
    raise ModelError("hypothesis 2.2 violated")
