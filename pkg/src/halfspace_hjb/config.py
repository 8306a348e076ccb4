"""YAML run configurations and the named function families they refer to.

A configuration is a mapping with a mandatory ``seed`` and the sections each
subcommand needs (``model``, ``phi``, ``nonlinearity``, ``solver``, ``mc``,
``control``, ``test_points``, ``kernel_check``, ``mollify``, ``growth``).
Functions are never written as code in a config; they are chosen by ``kind``
from the registries below and parameterized by plain numbers.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import yaml

from .control import ControlProblem, ControlSet
from .growth import GrowthSpec
from .hjb_solver import GridSpec, SemilinearProblem, SolverConfig
from .model import Model, validate_model
from .semigroup import BoundedFunction, MCConfig, QuadratureSpec

TIERS = ("smoke", "desk", "full")


class ConfigError(ValueError):
    """Malformed or incomplete configuration."""


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    sha256: str
    seed: int
    tier: str
    output_dir: Path

    def section(self, name: str) -> dict:
        if name not in self.raw or self.raw[name] is None:
            raise ConfigError(f"missing section {name!r}")
        sec = self.raw[name]
        if not isinstance(sec, (dict, list)):
            raise ConfigError(f"section {name!r} must be a mapping or list")
        return sec

    def get(self, name: str, default=None):
        return self.raw.get(name, default)


def load_config(path, tier: str | None = None, seed: int | None = None, output: str | None = None) -> RunConfig:
    """Read and hash a YAML file; command-line overrides win over the file."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        raw = yaml.safe_load(data)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse failure: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    seed_val = seed if seed is not None else raw.get("seed")
    if seed_val is None:
        raise ConfigError("missing seed")
    try:
        seed_val = int(seed_val)
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer") from None
    if not 0 <= seed_val < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    tier_val = tier or raw.get("tier", "desk")
    if tier_val not in TIERS:
        raise ConfigError(f"unknown tier {tier_val!r}")
    out = Path(output or raw.get("output_dir", "out"))
    return RunConfig(raw, hashlib.sha256(data).hexdigest(), seed_val, tier_val, out)


def _num(sec: Mapping, key: str, default=None) -> float:
    if key not in sec:
        if default is None:
            raise ConfigError(f"missing field {key!r}")
        return float(default)
    try:
        return float(sec[key])
    except (TypeError, ValueError):
        raise ConfigError(f"field {key!r} must be a number") from None


def _kind(sec: Mapping, registry: Mapping, what: str) -> Callable:
    if not isinstance(sec, Mapping) or "kind" not in sec:
        raise ConfigError(f"{what} needs a 'kind'")
    try:
        return registry[sec["kind"]]
    except KeyError:
        raise ConfigError(f"unknown {what} kind {sec['kind']!r}; choose from {sorted(registry)}") from None


# ---------------------------------------------------------------------------
# terminal / initial data on the half-space


def _phi_constant(sec, dim):
    c = _num(sec, "value")
    return BoundedFunction(lambda x: np.full(np.asarray(x).shape[:-1], c), abs(c), (), c, f"const({c:g})")


def _phi_indicator(sec, dim):
    thr = _num(sec, "threshold", 1.0)
    return BoundedFunction(
        lambda x: (np.asarray(x)[..., 0] > thr).astype(float), 1.0, (thr,), 1.0, f"1{{x1>{thr:g}}}"
    )


def _phi_tanh(sec, dim):
    scale = _num(sec, "scale", 1.0)
    width = _num(sec, "width", 1.0)
    return BoundedFunction(
        lambda x: scale * np.tanh(np.asarray(x)[..., 0] / width), abs(scale), (), scale, f"{scale:g}tanh(x1/{width:g})"
    )


def _phi_tanh_cos(sec, dim):
    amp = _num(sec, "amplitude", 0.5)

    def f(x):
        x = np.asarray(x, dtype=float)
        tr = np.cos(x[..., 1]) if x.shape[-1] > 1 else 1.0
        return np.tanh(x[..., 0]) * (1.0 + amp * tr) / (1.0 + abs(amp))

    return BoundedFunction(f, 1.0, (), None, "tanh(x1)(1+a cos x2)/(1+a)")


def _phi_bump(sec, dim):
    c = np.asarray(sec.get("center", [1.0] + [0.0] * (dim - 1)), dtype=float)
    w = _num(sec, "width", 0.5)
    if c.size != dim:
        raise ConfigError("bump center must have length dim")
    return BoundedFunction(
        lambda x: np.exp(-np.sum((np.asarray(x) - c) ** 2, axis=-1) / (2 * w * w)), 1.0, (), 0.0, "bump"
    )


def _phi_sign(sec, dim):
    k = int(sec.get("coord", 1))
    if not 0 <= k < dim:
        raise ConfigError("sign coordinate out of range")
    return BoundedFunction(lambda x: np.sign(np.asarray(x)[..., k]), 1.0, (), None, f"sign(x{k + 1})")


PHI_KINDS = {
    "constant": _phi_constant,
    "indicator": _phi_indicator,
    "tanh": _phi_tanh,
    "tanh_cos": _phi_tanh_cos,
    "bump": _phi_bump,
    "sign": _phi_sign,
}


def build_phi(sec: Mapping, dim: int) -> BoundedFunction:
    return _kind(sec, PHI_KINDS, "phi")(sec, dim)


# ---------------------------------------------------------------------------
# nonlinearities F(t, x, y, z) with their declared constants (L, L')

_TINY = 1e-12


def _F_zero(sec):
    return (lambda t, x, y, z: np.zeros(np.shape(y))), _TINY, _TINY


def _F_constant(sec):
    c = _num(sec, "value")
    return (lambda t, x, y, z: np.full(np.shape(y), c)), _TINY, max(abs(c), _TINY)


def _F_linear(sec):
    L = _num(sec, "L")
    return (lambda t, x, y, z: -L * np.asarray(y)), L, L


def _F_linear_sine(sec):
    L = _num(sec, "L")
    c = _num(sec, "c", 0.1)

    def F(t, x, y, z):
        return -L * np.asarray(y) + c * np.sin(np.linalg.norm(z, axis=-1))

    return F, max(L, c), max(L, c)


F_KINDS = {"zero": _F_zero, "constant": _F_constant, "linear": _F_linear, "linear_sine": _F_linear_sine}


def build_model(cfg: RunConfig) -> Model:
    return validate_model(cfg.section("model"))


def build_semilinear(cfg: RunConfig, model: Model) -> SemilinearProblem:
    phi = build_phi(cfg.section("phi"), model.dim)
    sec = cfg.section("nonlinearity")
    F, L, Lp = _kind(sec, F_KINDS, "nonlinearity")(sec)
    orientation = sec.get("orientation", "initial")
    try:
        return SemilinearProblem(model, F, L, Lp, phi, orientation, name=str(sec["kind"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# numerical settings with tier scaling


def _grid(sec: Mapping) -> GridSpec:
    base = GridSpec()
    try:
        return replace(base, **{k: type(getattr(base, k))(v) for k, v in sec.items()})
    except TypeError as exc:
        raise ConfigError(f"bad grid field: {exc}") from None


def build_solver(cfg: RunConfig) -> SolverConfig:
    sec = dict(cfg.get("solver") or {})
    grid = _grid(sec.pop("grid", {}) or {})
    if cfg.tier == "smoke":
        grid = grid.coarsened()
    elif cfg.tier == "full":
        grid = grid.refined()
    quad = QuadratureSpec(**(sec.pop("quad", {}) or {}))
    try:
        return SolverConfig(grid=grid, quad=quad, **sec)
    except TypeError as exc:
        raise ConfigError(f"bad solver field: {exc}") from None


_PATH_SCALE = {"smoke": 0.1, "desk": 1.0, "full": 4.0}


def build_mc(cfg: RunConfig, sub_seed: int = 0) -> MCConfig:
    sec = cfg.get("mc") or {}
    n_paths = int(sec.get("n_paths", 100_000))
    n_paths = max(1000, int(round(n_paths * _PATH_SCALE[cfg.tier])))
    seed = (cfg.seed + sub_seed) % 2**64
    return MCConfig(n_paths, int(sec.get("n_steps", 64)), seed, bool(sec.get("bridge_correction", True)))


# ---------------------------------------------------------------------------
# control problems


def _control_set(sec: Mapping) -> ControlSet:
    if "box" in sec:
        return ControlSet.box(sec["box"]["lo"], sec["box"]["hi"])
    if "finite" in sec:
        return ControlSet.finite(sec["finite"])
    raise ConfigError("control set needs 'box' or 'finite'")


def build_control(cfg: RunConfig, model: Model) -> ControlProblem:
    sec = cfg.section("control")
    U = _control_set(sec.get("U", {}))
    drift = sec.get("drift", {"kind": "minus_u"})
    if drift.get("kind") != "minus_u":
        raise ConfigError("only drift kind 'minus_u' is available")
    if U.dim != model.dim:
        raise ConfigError("drift -u needs control dimension equal to dim")
    cost = sec.get("cost", {"kind": "quadratic"})
    if cost.get("kind") != "quadratic":
        raise ConfigError("only cost kind 'quadratic' is available")
    w = _num(cost, "weight", 0.5)
    phi = build_phi(sec.get("phi", cfg.get("phi")), model.dim)
    pts = U.points if U.is_finite else np.stack([U.lo, U.hi])
    umax = float(np.max(np.linalg.norm(pts, axis=1))) if U.is_finite else float(np.linalg.norm(np.maximum(abs(U.lo), abs(U.hi))))

    def b(t, x, u):
        return -np.atleast_2d(u)

    def ell(t, x, u):
        return w * np.sum(np.atleast_2d(u) ** 2, axis=1)

    return ControlProblem(model, U, b, ell, phi, 0.0, umax, abs(w) * umax**2, name=str(sec.get("name", "control")))


def build_test_points(cfg: RunConfig, dim: int) -> list[tuple[float, np.ndarray]]:
    pts = []
    for p in cfg.section("test_points"):
        x = np.asarray(p["x"], dtype=float)
        if x.size != dim:
            raise ConfigError("test point has the wrong dimension")
        pts.append((float(p["t"]), x))
    return pts


# ---------------------------------------------------------------------------
# growth example


def _A_samples(sec: Mapping, n_xi: int) -> np.ndarray:
    xi = 2 * np.pi * np.arange(n_xi) / n_xi
    kind = sec.get("kind", "constant")
    if kind == "constant":
        return np.full(n_xi, _num(sec, "value"))
    if kind == "cosine":
        return _num(sec, "mean") + _num(sec, "amplitude") * np.cos(xi)
    raise ConfigError(f"unknown productivity kind {kind!r}")


def _U0(sec: Mapping) -> tuple[Callable, float]:
    kind = sec.get("kind")
    if kind == "saturating":
        # 1 - exp(-c), scaled by a mild capital dependence
        g = _num(sec, "capital_weight", 0.2)
        return (lambda s, k, c: (1 - np.exp(-c)) * (1 + g * np.tanh(k) ** 2) / (1 + g)), 1.0
    if kind == "capital_only":
        return (lambda s, k, c: 0.5 * (1 + np.tanh(k)) + 0.0 * c), 1.0
    raise ConfigError(f"unknown U0 kind {kind!r}")


def build_growth(cfg: RunConfig) -> tuple[GrowthSpec, list[np.ndarray]]:
    sec = cfg.section("growth")
    n_xi = int(sec.get("n_xi", 64))
    U0, bound = _U0(sec.get("U0", {}))
    spec = GrowthSpec(
        _A_samples(sec.get("A", {}), n_xi),
        int(sec.get("n_modes", 3)),
        _num(sec, "M"),
        sec.get("Q_scale", 1.0),
        U0,
        bound,
        _num(sec, "horizon", 1.0),
    )
    xi = spec.xi
    profiles = []
    for p in sec.get("profiles", [{"mean": 1.0}]):
        profiles.append(_num(p, "mean", 0.0) + _num(p, "cos", 0.0) * np.cos(xi) + _num(p, "sin", 0.0) * np.sin(xi))
    return spec, profiles


def closed_form_spectrum(A_value: float, n_modes: int) -> np.ndarray:
    """``{a - j^2}`` with multiplicities, in decreasing order."""
    ks = [0] + [j for j in range(1, (n_modes - 1) // 2 + 1) for _ in (0, 1)]
    return np.array([A_value - k * k for k in ks], dtype=float)


def fmt(v) -> str:
    """Deterministic CSV text for numbers and flags."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return str(v)
