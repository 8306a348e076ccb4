"""Killed Ornstein-Uhlenbeck semigroups on a half-space, mild HJB solutions
by Picard iteration, and an exit-time control verification layer."""

from .model import HalfSpacePoint, Model, validate_model, variance_profile

__all__ = ["HalfSpacePoint", "Model", "validate_model", "variance_profile"]
__version__ = "0.1.0"
