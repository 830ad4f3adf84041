"""
Noise schedules, routing coefficients and loss reweighting.

All quantities are indexed by integer diffusion steps 0..T with alpha[0] = 1.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np

from app.errors import ConfigError, SingularScheduleError

logger = logging.getLogger(__name__)

TOLERANCE = 1e-12


@dataclass(frozen=True)
class AlphaSchedule:
    T: int
    alpha: np.ndarray
    family: Optional[str] = None

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64).copy()
        if self.T < 1:
            raise ConfigError(f"T must be a positive integer, got {self.T}")
        if alpha.shape != (self.T + 1,):
            raise ConfigError(f"alpha must have T+1={self.T + 1} entries, got {alpha.shape[0]}")
        if alpha[0] != 1.0:
            raise ConfigError(f"alpha[0] must be exactly 1, got {alpha[0]!r}")
        if np.any(alpha < 0.0) or np.any(alpha > 1.0):
            raise ConfigError("alpha entries must lie in [0, 1]")
        if np.any(np.diff(alpha) >= 0.0):
            raise ConfigError("alpha must be strictly decreasing")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    def __getitem__(self, t: int) -> float:
        return float(self.alpha[t])

    def to_config(self) -> Dict[str, Any]:
        if self.family is not None:
            return {"T": self.T, "family": self.family}
        return {"T": self.T, "alpha": [float(a) for a in self.alpha]}

    @classmethod
    def from_config(cls, spec: Dict[str, Any]) -> "AlphaSchedule":
        T = int(spec["T"])
        if spec.get("alpha") is not None:
            return cls(T=T, alpha=np.asarray(spec["alpha"], dtype=np.float64))
        family = spec.get("family", "linear")
        if family == "linear":
            return make_linear_alpha(T)
        if family == "cosine":
            return make_cosine_alpha(T)
        raise ConfigError(f"Unknown schedule family: {family}")


def make_linear_alpha(T: int) -> AlphaSchedule:
    if T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    alpha = np.array([1.0 - t / T for t in range(T + 1)], dtype=np.float64)
    return AlphaSchedule(T=T, alpha=alpha, family="linear")


def make_cosine_alpha(T: int) -> AlphaSchedule:
    if T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    alpha = np.array([math.cos(0.5 * math.pi * t / T) ** 2 for t in range(T + 1)], dtype=np.float64)
    alpha[0] = 1.0
    alpha[T] = 0.0
    return AlphaSchedule(T=T, alpha=alpha, family="cosine")


def make_step_sequence(T: int, n_steps: int) -> list:
    """Evenly spaced, strictly decreasing integer steps from T down to 0."""
    if n_steps < 1:
        raise ConfigError(f"number of sampling steps must be >= 1, got {n_steps}")
    n_steps = min(n_steps, T)
    # integer arithmetic keeps the sequence exact
    return [(T * (n_steps - i)) // n_steps for i in range(n_steps + 1)]


def _check_pair(sched: AlphaSchedule, s: int, t: int):
    if not (0 <= s < t <= sched.T):
        raise ConfigError(f"need 0 <= s < t <= T, got s={s}, t={t}, T={sched.T}")


def beta(sched: AlphaSchedule, t: int) -> float:
    if not (1 <= t <= sched.T):
        raise ConfigError(f"step t={t} outside [1, {sched.T}]")
    prev = sched[t - 1]
    if prev == 0.0:
        raise SingularScheduleError(f"alpha[{t - 1}] = 0, beta_{t} undefined")
    return sched[t] / prev


@dataclass(frozen=True)
class RoutingCoefficients:
    """lambda1 may be a scalar or a per-position array (it depends on q_noise(x_t))."""
    lambda1: Union[float, np.ndarray]
    lambda2: float

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(value < 0.0) or np.any(value > 1.0):
                raise ConfigError(f"{name} must lie in [0, 1]")


def lambda2(sched: AlphaSchedule, s: int, t: int) -> float:
    _check_pair(sched, s, t)
    alpha_t = sched[t]
    if alpha_t == 1.0:
        raise SingularScheduleError(f"alpha[{t}] = 1, lambda2 undefined")
    return (sched[s] - alpha_t) / (1.0 - alpha_t)


def lambda1(sched: AlphaSchedule, s: int, t: int, noise_mass_at_xt: Union[float, np.ndarray]):
    _check_pair(sched, s, t)
    alpha_s, alpha_t = sched[s], sched[t]
    if alpha_s == 0.0:
        raise SingularScheduleError(f"alpha[{s}] = 0, lambda1 undefined")
    mass = np.asarray(noise_mass_at_xt, dtype=np.float64)
    if np.any(mass < 0.0) or np.any(mass > 1.0):
        raise ConfigError("noise mass must lie in [0, 1]")
    denom = alpha_t + (1.0 - alpha_t) * mass
    if np.any(denom <= 0.0):
        raise SingularScheduleError(f"lambda1 denominator vanishes at s={s}, t={t}")
    value = 1.0 - (1.0 - alpha_t / alpha_s) * (1.0 - alpha_s) * mass / denom
    value = np.clip(value, 0.0, 1.0)
    return float(value) if value.ndim == 0 else value


class ReweightingScheme(str, Enum):
    ORIGINAL = "original"
    LINEAR = "linear"
    CONSTANT = "constant"


def reweight(scheme: Union[ReweightingScheme, str], sched: AlphaSchedule, t: int) -> float:
    scheme = ReweightingScheme(scheme)
    if not (1 <= t <= sched.T):
        raise ConfigError(f"step t={t} outside [1, {sched.T}]")
    if scheme is ReweightingScheme.ORIGINAL:
        return lambda2(sched, t - 1, t)
    if scheme is ReweightingScheme.LINEAR:
        return 1.0 - (t - 1) / sched.T
    return 1.0


def as_step_sequence(steps: Sequence[int], T: int) -> list:
    """Validate a user-supplied reverse step sequence."""
    steps = [int(s) for s in steps]
    if len(steps) < 2 or steps[0] != T or steps[-1] != 0:
        raise ConfigError(f"step sequence must start at T={T} and end at 0, got {steps}")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ConfigError(f"step sequence must be strictly decreasing, got {steps}")
    return steps
