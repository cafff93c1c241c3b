"""Discrete position-embedding scaling: the per-dimension basis multiplier
family (constant, geometric, fixed base retuning), index scaling, and the
progressive log-basis chain connecting discrete scale factors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rotary import FrequencyBasis


@dataclass(frozen=True)
class LogBasis:
    """Natural log of a frequency basis; the state evolved by the basis ODE."""

    z: np.ndarray

    def __post_init__(self):
        z = np.ascontiguousarray(np.asarray(self.z, dtype=np.float64))
        if z.ndim != 1:
            raise ValueError(f"log basis must be a vector, got shape {z.shape}")
        z.flags.writeable = False
        object.__setattr__(self, "z", z)


def log_basis(basis: FrequencyBasis) -> LogBasis:
    return LogBasis(np.log(basis.theta))


def basis_from_log(z: LogBasis, head_dim: int, base: float = 10000.0) -> FrequencyBasis:
    return FrequencyBasis(np.exp(z.z), head_dim, base)


def _check_factor(t: float) -> float:
    t = float(t)
    if t < 1.0:
        raise ValueError(f"scale factor must be >= 1, got {t}")
    return t


def alpha_pi(t: float, head_dim: int) -> np.ndarray:
    """Constant 1/t multiplier: index scaling expressed on the basis."""
    t = _check_factor(t)
    return np.full(head_dim // 2, 1.0 / t, dtype=np.float64)


def alpha_yarn(t: float, head_dim: int) -> np.ndarray:
    """Geometric multiplier t**(-2i/(d-2)), spanning 1 down to 1/t."""
    t = _check_factor(t)
    if head_dim < 4:
        raise ValueError(f"geometric profile needs head_dim >= 4, got {head_dim}")
    i = np.arange(head_dim // 2, dtype=np.float64)
    return t ** (-2.0 * i / (head_dim - 2))


def alpha_codellama(head_dim: int) -> np.ndarray:
    """Fixed multiplier 100**(-2i/d), i.e. retuning the base 10000 to 1e6.
    Carries no dependence on the scale factor."""
    if head_dim % 2 != 0 or head_dim < 2:
        raise ValueError(f"head_dim must be even and >= 2, got {head_dim}")
    i = np.arange(head_dim // 2, dtype=np.float64)
    return 100.0 ** (-2.0 * i / head_dim)


def scale_basis(basis: FrequencyBasis, alpha: np.ndarray) -> FrequencyBasis:
    """Elementwise theta_t = alpha * theta."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != basis.theta.shape:
        raise ValueError(f"alpha shape {alpha.shape} != theta shape {basis.theta.shape}")
    if not np.all(alpha > 0):
        raise ValueError("alpha entries must be positive")
    return FrequencyBasis(basis.theta * alpha, basis.head_dim, basis.base)


def scale_positions(positions, t: float) -> np.ndarray:
    """Index scaling m -> m/t."""
    t = _check_factor(t)
    return np.asarray(positions, dtype=np.float64) / t


def chain_step(z_prev: LogBasis, alpha_prev: np.ndarray, alpha_next: np.ndarray) -> LogBasis:
    """One step of the progressive chain: z_next = z_prev + log(a_next/a_prev)."""
    alpha_prev = np.asarray(alpha_prev, dtype=np.float64)
    alpha_next = np.asarray(alpha_next, dtype=np.float64)
    if alpha_prev.shape != z_prev.z.shape or alpha_next.shape != z_prev.z.shape:
        raise ValueError("alpha shapes must match the log basis")
    if not (np.all(alpha_prev > 0) and np.all(alpha_next > 0)):
        raise ValueError("alpha entries must be positive")
    return LogBasis(z_prev.z + np.log(alpha_next / alpha_prev))


PROFILE_METHODS = ("identity", "pi", "yarn", "codellama")


@dataclass(frozen=True)
class AlphaProfile:
    """A named basis-multiplier profile evaluated at scale factor t."""

    method: str
    head_dim: int

    def __post_init__(self):
        if self.method not in PROFILE_METHODS:
            raise ValueError(f"unknown profile {self.method!r}; pick from {PROFILE_METHODS}")

    @property
    def t_dependent(self) -> bool:
        return self.method in ("pi", "yarn")

    def __call__(self, t: float) -> np.ndarray:
        if self.method == "pi":
            return alpha_pi(t, self.head_dim)
        if self.method == "yarn":
            return alpha_yarn(t, self.head_dim)
        if self.method == "codellama":
            _check_factor(t)
            return alpha_codellama(self.head_dim)
        _check_factor(t)
        return np.ones(self.head_dim // 2, dtype=np.float64)
