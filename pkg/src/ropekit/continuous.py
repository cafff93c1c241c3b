"""Continuous basis scaling: learnable dynamics over the log frequency
basis, a differentiable fixed-step RK4 solver, training-time factor and
position sampling, and the inference-time basis cache."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rotary import FrequencyBasis
from .scaling import LogBasis, _check_factor


class XiForm(enum.Enum):
    """Which closed form to use for the fixed drift term.

    LOG_DERIVATIVE is d/dt of the log of the geometric profile,
    -2i/((d-2) t), consistent with dynamics over z = log theta.
    PAPER_PRINTED is -2i/((d-2) t^(2i/(d-2)+1)), which is d/dt of the
    profile itself; kept selectable since both readings are defensible.
    """

    LOG_DERIVATIVE = "log_derivative"
    PAPER_PRINTED = "paper_printed"


def xi(t: float, head_dim: int, form: XiForm = XiForm.LOG_DERIVATIVE) -> np.ndarray:
    """Fixed (non-learned) drift of the log basis at scale factor t."""
    t = _check_factor(t)
    if head_dim < 4:
        raise ValueError(f"drift needs head_dim >= 4, got {head_dim}")
    i = np.arange(head_dim // 2, dtype=np.float64)
    if form is XiForm.LOG_DERIVATIVE:
        return -2.0 * i / ((head_dim - 2) * t)
    return -2.0 * i / ((head_dim - 2) * t ** (2.0 * i / (head_dim - 2) + 1.0))


class OdeNet:
    """Up-and-down projection parameterizing the learned part of the basis
    dynamics.

    w_up maps d/2 -> lambda*d and w_down maps lambda*d -> d/2 (row-vector
    convention). w_down starts at zero so a fresh net reproduces the
    geometric profile's constant dynamics exactly.
    """

    def __init__(self, head_dim: int, lambda_amp: int = 1, dtype=np.float64, rng=None):
        if head_dim % 2 != 0 or head_dim < 4:
            raise ValueError(f"head_dim must be even and >= 4, got {head_dim}")
        if lambda_amp < 1:
            raise ValueError(f"lambda_amp must be a positive integer, got {lambda_amp}")
        self.head_dim = head_dim
        self.lambda_amp = int(lambda_amp)
        half = head_dim // 2
        width = self.lambda_amp * head_dim
        if rng is None:
            rng = np.random.default_rng(0)
        bound = 1.0 / math.sqrt(half)
        w_up = rng.uniform(-bound, bound, size=(half, width))
        self.w_up = Tensor(w_up.astype(dtype), requires_grad=True)
        self.w_down = Tensor(np.zeros((width, half), dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"ode.w_up": self.w_up, "ode.w_down": self.w_down}

    @classmethod
    def from_params(cls, head_dim: int, w_up, w_down) -> "OdeNet":
        w_up = w_up.data if isinstance(w_up, Tensor) else np.asarray(w_up)
        w_down = w_down.data if isinstance(w_down, Tensor) else np.asarray(w_down)
        lambda_amp = w_up.shape[1] // head_dim
        net = cls(head_dim, lambda_amp, dtype=w_up.dtype)
        if net.w_up.shape != w_up.shape or net.w_down.shape != w_down.shape:
            raise ValueError("parameter shapes inconsistent with head_dim")
        net.w_up = Tensor(w_up, requires_grad=True)
        net.w_down = Tensor(w_down, requires_grad=True)
        return net


def _as_state(z, dtype=None) -> Tensor:
    if isinstance(z, Tensor):
        return z
    if isinstance(z, LogBasis):
        return ad.constant(z.z if dtype is None else z.z.astype(dtype))
    return ad.constant(np.asarray(z, dtype=dtype))


def dynamics(z, t: float, net: OdeNet, form: XiForm = XiForm.LOG_DERIVATIVE) -> Tensor:
    """dz/dt = w_down . silu(w_up . z) + xi_t, differentiable in z and the
    net parameters."""
    zt = _as_state(z, dtype=net.w_up.dtype)
    half = net.head_dim // 2
    if zt.shape != (half,):
        raise ValueError(f"state shape {zt.shape} does not match head_dim {net.head_dim}")
    hidden = ad.silu(ad.matmul(ad.reshape(zt, (1, half)), net.w_up))
    learned = ad.reshape(ad.matmul(hidden, net.w_down), (half,))
    drift = ad.constant(xi(t, net.head_dim, form).astype(zt.dtype))
    return ad.add(learned, drift)


def solve(
    z1,
    t_target: float,
    net: OdeNet,
    form: XiForm = XiForm.LOG_DERIVATIVE,
    steps_per_unit: int = 8,
) -> Tensor:
    """Integrate the log basis from factor 1 to t_target with fixed-step RK4.

    Uses max(8, ceil(steps_per_unit*(t_target-1))) steps; gradients flow by
    backpropagation through the unrolled steps. t_target == 1 returns the
    initial state unchanged.
    """
    t_target = _check_factor(t_target)
    if steps_per_unit < 1:
        raise ValueError(f"steps_per_unit must be >= 1, got {steps_per_unit}")
    z = _as_state(z1, dtype=net.w_up.dtype)
    if t_target == 1.0:
        return z
    n = max(8, math.ceil(steps_per_unit * (t_target - 1.0)))
    h = (t_target - 1.0) / n
    for k in range(n):
        t0 = 1.0 + k * h
        k1 = dynamics(z, t0, net, form)
        k2 = dynamics(ad.add(z, ad.scale(k1, h / 2.0)), t0 + h / 2.0, net, form)
        k3 = dynamics(ad.add(z, ad.scale(k2, h / 2.0)), t0 + h / 2.0, net, form)
        k4 = dynamics(ad.add(z, ad.scale(k3, h)), t0 + h, net, form)
        incr = ad.add(ad.add(k1, ad.scale(ad.add(k2, k3), 2.0)), k4)
        z = ad.add(z, ad.scale(incr, h / 6.0))
    return z


def solve_basis(
    basis: FrequencyBasis,
    t_target: float,
    net: OdeNet,
    form: XiForm = XiForm.LOG_DERIVATIVE,
    steps_per_unit: int = 8,
) -> FrequencyBasis:
    """Solved frequency basis exp(z(t)) as a plain (non-graph) basis."""
    with ad.no_grad():
        z = solve(np.log(basis.theta), t_target, net, form, steps_per_unit)
        theta = np.exp(z.data.astype(np.float64))
    return FrequencyBasis(theta, basis.head_dim, basis.base)


def sample_train_factor(t_train: float, rng: np.random.Generator) -> float:
    """Draw t' uniformly from the continuous interval [1, t_train]."""
    t_train = _check_factor(t_train)
    return float(rng.uniform(1.0, t_train))


class PlanMode(enum.Enum):
    NATURAL = "natural"
    UNIFORM_SCALED = "uniform"
    RANDOM_SAMPLED = "random"


@dataclass(frozen=True)
class PositionPlan:
    """Position indices assigned to one training batch."""

    positions: np.ndarray
    mode: PlanMode
    t_prime: float
    rng_seed: int | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if pos.ndim != 1 or pos.size == 0:
            raise ValueError("positions must be a non-empty vector")
        if not np.all(np.diff(pos) > 0):
            raise ValueError("positions must be strictly increasing")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)


def position_plan(
    train_len: int,
    t_prime: float,
    native_len: int,
    mode: PlanMode,
    rng: np.random.Generator | None = None,
    rng_seed: int | None = None,
) -> PositionPlan:
    """Assign train_len positions spanning up to t_prime * native_len.

    NATURAL: 1..train_len. UNIFORM_SCALED: j*s for s = t'*native_len/train_len.
    RANDOM_SAMPLED: train_len distinct integers drawn without replacement
    from [1, floor(t'*native_len)], ascending.
    """
    t_prime = _check_factor(t_prime)
    limit = math.floor(t_prime * native_len)
    if train_len > limit:
        raise ValueError(
            f"cannot place {train_len} positions in [1, {limit}] (t'={t_prime}, native={native_len})"
        )
    if mode is PlanMode.NATURAL:
        pos = np.arange(1, train_len + 1, dtype=np.float64)
    elif mode is PlanMode.UNIFORM_SCALED:
        s = t_prime * native_len / train_len
        pos = np.arange(1, train_len + 1, dtype=np.float64) * s
    elif mode is PlanMode.RANDOM_SAMPLED:
        if rng is None:
            if rng_seed is None:
                raise ValueError("random sampling needs an rng or rng_seed")
            rng = np.random.default_rng(rng_seed)
        draw = rng.choice(limit, size=train_len, replace=False)
        pos = np.sort(draw).astype(np.float64) + 1.0
    else:
        raise ValueError(f"unknown plan mode {mode}")
    return PositionPlan(pos, mode, t_prime, rng_seed)


@dataclass(frozen=True)
class BasisCache:
    """Immutable map from discrete scale factors to solved bases."""

    native_len: int
    factors: tuple[float, ...]
    bases: tuple[FrequencyBasis, ...]

    def __post_init__(self):
        if len(self.factors) != len(self.bases) or not self.factors:
            raise ValueError("cache needs one basis per factor")
        if self.factors[0] < 1.0:
            raise ValueError("first cached factor must be >= 1")
        if any(b <= a for a, b in zip(self.factors, self.factors[1:])):
            raise ValueError("cached factors must be strictly increasing")
        if self.native_len < 1:
            raise ValueError("native_len must be positive")


def build_cache(
    net: OdeNet,
    form: XiForm,
    t_ks,
    base_basis: FrequencyBasis,
    native_len: int,
    steps_per_unit: int = 8,
) -> BasisCache:
    """Solve the dynamics once per requested factor and freeze the results."""
    t_ks = [float(t) for t in t_ks]
    if any(b <= a for a, b in zip(t_ks, t_ks[1:])):
        raise ValueError("cache factors must be sorted strictly ascending")
    bases = tuple(solve_basis(base_basis, t, net, form, steps_per_unit) for t in t_ks)
    return BasisCache(native_len, tuple(t_ks), bases)


def lookup(
    cache: BasisCache,
    seq_len: int,
    solver: Callable[[float], FrequencyBasis] | None = None,
) -> tuple[float, FrequencyBasis]:
    """Basis for the smallest cached factor whose supported length covers
    seq_len; beyond the cache, solve on demand at t = seq_len/native_len.

    Returns (factor, basis). The cache itself is never mutated; use a
    CacheSession to keep on-demand extensions around.
    """
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    for t, basis in zip(cache.factors, cache.bases):
        if t * cache.native_len >= seq_len:
            return t, basis
    t = seq_len / cache.native_len
    if solver is None:
        raise ValueError(
            f"length {seq_len} exceeds every cached factor and no solver was provided"
        )
    return t, solver(t)


class CacheSession:
    """Lookup frontend holding session-local on-demand extensions."""

    def __init__(self, cache: BasisCache, solver: Callable[[float], FrequencyBasis] | None = None):
        self.cache = cache
        self._solver = solver
        self._extra: dict[float, FrequencyBasis] = {}

    def lookup(self, seq_len: int) -> tuple[float, FrequencyBasis]:
        if seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {seq_len}")
        for t, basis in zip(self.cache.factors, self.cache.bases):
            if t * self.cache.native_len >= seq_len:
                return t, basis
        t = seq_len / self.cache.native_len
        if t not in self._extra:
            if self._solver is None:
                raise ValueError(
                    f"length {seq_len} exceeds every cached factor and no solver was provided"
                )
            self._extra[t] = self._solver(t)
        return t, self._extra[t]


def cache_to_json(cache: BasisCache) -> dict:
    return {
        "native_len": cache.native_len,
        "head_dim": cache.bases[0].head_dim,
        "base": cache.bases[0].base,
        "entries": [
            {"t": t, "theta": basis.theta.tolist()}
            for t, basis in zip(cache.factors, cache.bases)
        ],
    }


def cache_from_json(doc: dict) -> BasisCache:
    head_dim = int(doc["head_dim"])
    base = float(doc["base"])
    factors = tuple(float(e["t"]) for e in doc["entries"])
    bases = tuple(
        FrequencyBasis(np.asarray(e["theta"], dtype=np.float64), head_dim, base)
        for e in doc["entries"]
    )
    return BasisCache(int(doc["native_len"]), factors, bases)
