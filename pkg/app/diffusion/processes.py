"""
Exact distributions of the interpolation diffusion

    q(x_t | x_{t-1}) = beta_t * x_{t-1} + (1 - beta_t) * q_noise

Tokens are integer ids; a Categorical is a float64 numpy vector of length K.
`backward_bayes` enumerates Bayes' rule directly and serves as the oracle for
the branching form in `backward_branch`.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
from scipy.special import rel_entr

from app.diffusion.schedules import AlphaSchedule, lambda1, lambda2
from app.errors import ConfigError, ContractError, ImpossibleEventError, SingularScheduleError

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9


def onehot(index: int, K: int) -> np.ndarray:
    out = np.zeros(K, dtype=np.float64)
    out[index] = 1.0
    return out


def validate_categorical(probs, K: Optional[int] = None) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or (K is not None and probs.shape[0] != K):
        raise ContractError(f"expected a length-{K} probability vector, got shape {probs.shape}")
    if np.any(probs < 0.0) or abs(probs.sum() - 1.0) > SUM_TOLERANCE:
        raise ContractError("probabilities must be nonnegative and sum to 1")
    return probs


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(rel_entr(np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)).sum())


@dataclass(frozen=True)
class NoiseDistribution:
    kind: str
    K: int
    mask_id: Optional[int] = None
    probs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"vocabulary size must be >= 2, got {self.K}")
        if self.kind == "uniform":
            probs = np.full(self.K, 1.0 / self.K)
        elif self.kind == "absorbing":
            if self.mask_id is None or not (0 <= self.mask_id < self.K):
                raise ConfigError(f"absorbing noise needs a mask id in [0, {self.K})")
            probs = onehot(self.mask_id, self.K)
        elif self.kind == "custom":
            try:
                probs = validate_categorical(self.probs, self.K).copy()
            except ContractError as e:
                raise ConfigError(f"invalid custom noise: {e}")
        else:
            raise ConfigError(f"Unknown noise kind: {self.kind}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, K: int) -> "NoiseDistribution":
        return cls(kind="uniform", K=K)

    @classmethod
    def absorbing(cls, K: int, mask_id: Optional[int] = None) -> "NoiseDistribution":
        return cls(kind="absorbing", K=K, mask_id=K - 1 if mask_id is None else mask_id)

    @classmethod
    def custom(cls, probs) -> "NoiseDistribution":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(kind="custom", K=int(probs.shape[0]), probs=probs)

    def to_config(self) -> Dict[str, Any]:
        if self.kind == "absorbing":
            return {"kind": "absorbing", "K": self.K, "mask_id": self.mask_id}
        if self.kind == "custom":
            return {"kind": "custom", "K": self.K, "probs": [float(p) for p in self.probs]}
        return {"kind": "uniform", "K": self.K}

    @classmethod
    def from_config(cls, spec: Dict[str, Any]) -> "NoiseDistribution":
        kind = spec.get("kind")
        if kind == "custom":
            return cls.custom(spec["probs"])
        if kind == "absorbing":
            return cls.absorbing(int(spec["K"]), spec.get("mask_id"))
        return cls(kind=kind, K=int(spec["K"]))


def _check_token(token: int, K: int):
    if not (0 <= int(token) < K):
        raise ContractError(f"token id {token} outside [0, {K})")


def q_xt_given_x0(x0: int, t: int, sched: AlphaSchedule, noise: NoiseDistribution) -> np.ndarray:
    _check_token(x0, noise.K)
    if not (0 <= t <= sched.T):
        raise ConfigError(f"step t={t} outside [0, {sched.T}]")
    alpha_t = sched[t]
    return alpha_t * onehot(x0, noise.K) + (1.0 - alpha_t) * noise.probs


def _keep_ratio(sched: AlphaSchedule, s: int, t: int) -> float:
    if not (0 <= s < t <= sched.T):
        raise ConfigError(f"need 0 <= s < t <= T, got s={s}, t={t}")
    if sched[s] == 0.0:
        raise SingularScheduleError(f"alpha[{s}] = 0")
    return sched[t] / sched[s]


def q_xt_given_xs(x_s: int, s: int, t: int, sched: AlphaSchedule, noise: NoiseDistribution) -> np.ndarray:
    _check_token(x_s, noise.K)
    ratio = _keep_ratio(sched, s, t)
    return ratio * onehot(x_s, noise.K) + (1.0 - ratio) * noise.probs


def noise_given_xt(x_t: int, s: int, t: int, sched: AlphaSchedule, noise: NoiseDistribution) -> np.ndarray:
    """q_noise(x_t): the noise a token at x_t falls back to when it is not denoised."""
    _check_token(x_t, noise.K)
    ratio = _keep_ratio(sched, s, t)
    return ratio * onehot(x_t, noise.K) + (1.0 - ratio) * noise.probs


def corrupt(x0_seq, t: int, sched: AlphaSchedule, noise: NoiseDistribution,
            rng: np.random.Generator) -> np.ndarray:
    x0_seq = np.asarray(x0_seq, dtype=np.int64)
    if not (0 <= t <= sched.T):
        raise ConfigError(f"step t={t} outside [0, {sched.T}]")
    keep = rng.random(x0_seq.shape) < sched[t]
    drawn = rng.choice(noise.K, size=x0_seq.shape, p=noise.probs)
    return np.where(keep, x0_seq, drawn)


def _conditioning_mass(x_t: int, x0: int, t: int, sched: AlphaSchedule, noise: NoiseDistribution) -> float:
    return q_xt_given_x0(x0, t, sched, noise)[x_t]


def backward_bayes(x_t: int, x0: int, s: int, t: int, sched: AlphaSchedule,
                   noise: NoiseDistribution) -> np.ndarray:
    """q(x_s | x_t, x_0) by explicit enumeration of Bayes' rule over all K values of x_s."""
    _check_token(x_t, noise.K)
    if _conditioning_mass(x_t, x0, t, sched, noise) <= 0.0:
        raise ImpossibleEventError(f"q(x_t={x_t} | x_0={x0}) = 0 at t={t}")
    prior = q_xt_given_x0(x0, s, sched, noise)
    joint = np.zeros(noise.K, dtype=np.float64)
    for j in range(noise.K):
        joint[j] = q_xt_given_xs(j, s, t, sched, noise)[x_t] * prior[j]
    return joint / joint.sum()


def backward_branch(x_t: int, x0: int, s: int, t: int, sched: AlphaSchedule,
                    noise: NoiseDistribution) -> np.ndarray:
    """q(x_s | x_t, x_0) in the branching form: a mixture routed on whether x_t = x_0."""
    _check_token(x_t, noise.K)
    if _conditioning_mass(x_t, x0, t, sched, noise) <= 0.0:
        raise ImpossibleEventError(f"q(x_t={x_t} | x_0={x0}) = 0 at t={t}")
    if x_t == x0:
        lam = lambda1(sched, s, t, noise.probs[x_t])
        return lam * onehot(x_t, noise.K) + (1.0 - lam) * noise.probs
    lam = lambda2(sched, s, t)
    return lam * onehot(x0, noise.K) + (1.0 - lam) * noise_given_xt(x_t, s, t, sched, noise)


def sample_backward(x_t_seq, x0_seq, s: int, t: int, sched: AlphaSchedule,
                    noise: NoiseDistribution, rng: np.random.Generator) -> np.ndarray:
    """Draw x_s ~ q(x_s | x_t, x_0) position-wise through the two-step routed construction."""
    x_t_seq = np.asarray(x_t_seq, dtype=np.int64)
    x0_seq = np.asarray(x0_seq, dtype=np.int64)
    if x_t_seq.shape != x0_seq.shape:
        raise ContractError("x_t and x_0 sequences must have equal shapes")
    clean = x_t_seq == x0_seq
    mass = noise.probs[x_t_seq]
    if np.any(~clean & (mass <= 0.0)) or np.any(clean & (sched[t] + (1.0 - sched[t]) * mass <= 0.0)):
        raise ImpossibleEventError(f"sequence contains positions impossible under q(x_{t} | x_0)")
    ratio = _keep_ratio(sched, s, t)
    lam1 = np.asarray(lambda1(sched, s, t, np.where(clean, mass, 1.0)))
    lam2 = lambda2(sched, s, t)

    route = rng.random(x_t_seq.shape)
    keep = rng.random(x_t_seq.shape)
    drawn = rng.choice(noise.K, size=x_t_seq.shape, p=noise.probs)

    from_clean = np.where(route < lam1, x_t_seq, drawn)
    from_noisy = np.where(route < lam2, x0_seq, np.where(keep < ratio, x_t_seq, drawn))
    return np.where(clean, from_clean, from_noisy)


def vanilla_backward_absorbing(f, x_t: int, s: int, t: int, sched: AlphaSchedule, mask_id: int) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    K = f.shape[0]
    _check_token(x_t, K)
    if not (0 <= s < t <= sched.T):
        raise ConfigError(f"need 0 <= s < t <= T, got s={s}, t={t}")
    if x_t != mask_id:
        return onehot(x_t, K)
    alpha_s, alpha_t = sched[s], sched[t]
    if alpha_t == 1.0:
        raise SingularScheduleError(f"alpha[{t}] = 1")
    return (alpha_s - alpha_t) / (1.0 - alpha_t) * f + (1.0 - alpha_s) / (1.0 - alpha_t) * onehot(mask_id, K)


def vanilla_backward_multinomial(f, x_t: int, t: int, sched: AlphaSchedule, K: int,
                                 s: Optional[int] = None) -> np.ndarray:
    """Closed-form multinomial backward kernel; `s` generalizes the single step t-1 to a gap."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (K,):
        raise ContractError(f"f must have length {K}")
    _check_token(x_t, K)
    s = t - 1 if s is None else s
    step_keep = _keep_ratio(sched, s, t)
    alpha_s, alpha_t = sched[s], sched[t]
    x = onehot(x_t, K)
    numer = (alpha_t * x * f
             + step_keep * (1.0 - alpha_s) * x / K
             + (1.0 - step_keep) * alpha_s * f / K
             + (1.0 - step_keep) * (1.0 - alpha_s) / K ** 2)
    denom = alpha_t * f[x_t] + (1.0 - alpha_t) / K
    return numer / denom


def vanilla_backward_marginal(f, x_t: int, s: int, t: int, sched: AlphaSchedule,
                              noise: NoiseDistribution) -> np.ndarray:
    """p(x_s | x_t) proportional to sum over x0 of f[x0] * q(x_s, x_t | x0)."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (noise.K,):
        raise ContractError(f"f must have length {noise.K}")
    _check_token(x_t, noise.K)
    forward = np.array([q_xt_given_xs(j, s, t, sched, noise)[x_t] for j in range(noise.K)])
    unnorm = np.zeros(noise.K, dtype=np.float64)
    for x0 in np.flatnonzero(f):
        unnorm += f[x0] * forward * q_xt_given_x0(int(x0), s, sched, noise)
    total = unnorm.sum()
    if total <= 0.0:
        raise ImpossibleEventError(f"x_t={x_t} has zero probability under f at t={t}")
    return unnorm / total
