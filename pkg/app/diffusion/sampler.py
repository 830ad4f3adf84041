"""
Reparameterized sampling.

Each reverse iteration draws x0 candidates from the denoiser, decides per position
whether to route the token to its denoised or noisy branch, and maintains the
denoised flags b through the recursion b' = (b AND v1) OR v2.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from app.diffusion.processes import NoiseDistribution, vanilla_backward_absorbing, vanilla_backward_multinomial
from app.diffusion.schedules import AlphaSchedule, RoutingCoefficients, as_step_sequence, lambda1, lambda2
from app.errors import ConfigError, ContractError
from app.models.base import Denoiser, validate_output

logger = logging.getLogger(__name__)


class RoutingKind(str, Enum):
    STOCHASTIC = "stochastic"
    ADAPTIVE = "adaptive"


class KSchedule(str, Enum):
    COSINE = "cosine"
    LINEAR = "linear"


class DecodeMode(str, Enum):
    ARGMAX = "argmax"
    SAMPLE = "sample"


@dataclass(frozen=True)
class RoutingStrategy:
    kind: RoutingKind = RoutingKind.STOCHASTIC
    k_schedule: KSchedule = KSchedule.COSINE
    gumbel: bool = False
    conservative_v1: bool = False

    @classmethod
    def stochastic(cls) -> "RoutingStrategy":
        return cls(kind=RoutingKind.STOCHASTIC)

    @classmethod
    def adaptive(cls, k_schedule="cosine", gumbel=False, conservative_v1=False) -> "RoutingStrategy":
        return cls(kind=RoutingKind.ADAPTIVE, k_schedule=KSchedule(k_schedule),
                   gumbel=gumbel, conservative_v1=conservative_v1)


@dataclass(frozen=True)
class DiffusionState:
    tokens: np.ndarray
    denoised: np.ndarray
    t: int
    scores: np.ndarray
    # tokens of the previous iteration, read by the conservative v1 rule
    prev_tokens: Optional[np.ndarray] = None
    # diffusion length; when set, bounds t and forbids denoised flags at t = T
    T: Optional[int] = None

    def __post_init__(self):
        n = len(self.tokens)
        if len(self.denoised) != n or len(self.scores) != n:
            raise ContractError("tokens, denoised flags and scores must have equal lengths")
        if self.prev_tokens is not None and len(self.prev_tokens) != n:
            raise ContractError("previous tokens must match the sequence length")
        if self.t < 0:
            raise ContractError(f"state step must be >= 0, got {self.t}")
        if self.T is not None:
            if self.t > self.T:
                raise ContractError(f"state step {self.t} exceeds T={self.T}")
            if self.t == self.T and np.any(self.denoised):
                raise ContractError("no position can be denoised at t = T")

    @property
    def N(self) -> int:
        return len(self.tokens)

    @classmethod
    def initial(cls, N: int, T: int, noise: NoiseDistribution, rng: np.random.Generator) -> "DiffusionState":
        tokens = rng.choice(noise.K, size=N, p=noise.probs).astype(np.int64)
        return cls(tokens=tokens, denoised=np.zeros(N, dtype=bool), t=T, scores=np.zeros(N), T=T)


@dataclass(frozen=True)
class RoutingDecision:
    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        if len(self.v1) != len(self.v2):
            raise ContractError("v1 and v2 must have equal lengths")


class CoefficientProvider:
    """Routing coefficients and fallback-noise rows for a (schedule, noise) pair."""

    def __init__(self, sched: AlphaSchedule, noise: NoiseDistribution):
        self.sched = sched
        self.noise = noise

    @property
    def K(self) -> int:
        return self.noise.K

    def coefficients(self, s: int, t: int, tokens: np.ndarray,
                     denoised: Optional[np.ndarray] = None) -> RoutingCoefficients:
        mass = self.noise.probs[np.asarray(tokens, dtype=np.int64)]
        if denoised is not None:
            # lambda1 only matters where b = 1
            mass = np.where(denoised, mass, 1.0)
        return RoutingCoefficients(lambda1=lambda1(self.sched, s, t, mass),
                                   lambda2=lambda2(self.sched, s, t))

    def noise_rows(self, tokens: np.ndarray, s: int, t: int) -> np.ndarray:
        """Rows of q_noise(x_t) for every position, with keep ratio alpha_t / alpha_s."""
        ratio = self.sched[t] / self.sched[s]
        eye = np.eye(self.K)[np.asarray(tokens, dtype=np.int64)]
        return ratio * eye + (1.0 - ratio) * self.noise.probs[None, :]


def draw_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF; never lands on a zero-probability id."""
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(probs.shape[0])
    return np.argmax(cdf > u[:, None], axis=1).astype(np.int64)


def route_stochastic(state: DiffusionState, coeffs: RoutingCoefficients,
                     rng: np.random.Generator) -> RoutingDecision:
    v1 = rng.random(state.N) < np.broadcast_to(coeffs.lambda1, (state.N,))
    v2 = rng.random(state.N) < coeffs.lambda2
    return RoutingDecision(v1=v1, v2=v2)


def k_schedule(kind, t: int, T: int, N: int) -> int:
    kind = KSchedule(kind)
    if not (0 <= t <= T):
        raise ConfigError(f"step t={t} outside [0, {T}]")
    if kind is KSchedule.LINEAR:
        return ((T - t) * N) // T
    k = math.floor(math.cos(math.pi * t / (2 * T)) * N)
    return min(max(k, 0), N)


def route_adaptive(state: DiffusionState, new_scores, k: int, opts: RoutingStrategy,
                   rng: np.random.Generator) -> RoutingDecision:
    scores = np.asarray(new_scores, dtype=np.float64)
    if scores.shape != (state.N,):
        raise ContractError(f"expected {state.N} scores, got {scores.shape}")
    if not (0 <= k <= state.N):
        raise ContractError(f"k={k} outside [0, {state.N}]")
    key = scores
    if opts.gumbel:
        with np.errstate(divide="ignore"):
            key = np.log(scores) + rng.gumbel(size=state.N)
    # stable sort: equal keys keep ascending position order
    order = np.argsort(-key, kind="stable")
    selected = np.zeros(state.N, dtype=bool)
    selected[order[:k]] = True

    v1 = selected.copy()
    if opts.conservative_v1:
        prev_tokens = state.tokens if state.prev_tokens is None else state.prev_tokens
        v1 |= (scores > state.scores) | (state.tokens != prev_tokens)
    return RoutingDecision(v1=v1, v2=selected.copy())


def update_b(b, v: RoutingDecision) -> np.ndarray:
    b = np.asarray(b, dtype=bool)
    if b.shape != np.shape(v.v1):
        raise ContractError("denoised flags and routing decision must have equal lengths")
    return (b & v.v1) | v.v2


def apply_routing_defaults(b: np.ndarray, v: RoutingDecision) -> RoutingDecision:
    """v1 only acts on denoised tokens and v2 on noisy ones; the other defaults to 1 and 0."""
    return RoutingDecision(v1=np.where(b, v.v1, True), v2=np.where(b, False, v.v2))


def predict_tokens(f: np.ndarray, tau: float, mode, rng: np.random.Generator) -> np.ndarray:
    if tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    f = np.asarray(f, dtype=np.float64)
    if DecodeMode(mode) is DecodeMode.ARGMAX:
        return np.argmax(f, axis=1).astype(np.int64)
    with np.errstate(divide="ignore"):
        logits = np.log(f) / tau
    return draw_rows(softmax(logits, axis=1), rng)


def predict_x0(f, tau: float, mode, rng: np.random.Generator) -> int:
    return int(predict_tokens(np.asarray(f, dtype=np.float64)[None, :], tau, mode, rng)[0])


def transition_kernel(state: DiffusionState, x0_tilde: np.ndarray, v: RoutingDecision, s: int,
                      provider: CoefficientProvider) -> np.ndarray:
    """Next-token distribution of every position given the routing decision."""
    eye = np.eye(provider.K)
    current = eye[state.tokens]
    clean = np.where(v.v1[:, None], current, provider.noise.probs[None, :])
    noisy = np.where(v.v2[:, None], eye[np.asarray(x0_tilde, dtype=np.int64)],
                     provider.noise_rows(state.tokens, s, state.t))
    return np.where(state.denoised[:, None], clean, noisy)


def denoise_step(state: DiffusionState, denoiser: Denoiser, strategy: RoutingStrategy,
                 provider: CoefficientProvider, tau: float, mode, target_s: int,
                 rng: np.random.Generator, condition: Optional[np.ndarray] = None) -> DiffusionState:
    if not (0 <= target_s < state.t):
        raise ConfigError(f"target step {target_s} must lie in [0, {state.t})")
    f = validate_output(denoiser.predict(state.tokens, state.t, condition), state.N, provider.K)
    x0_tilde = predict_tokens(f, tau, mode, rng)
    new_scores = f.max(axis=1)

    if strategy.kind is RoutingKind.STOCHASTIC:
        coeffs = provider.coefficients(target_s, state.t, state.tokens, state.denoised)
        v = route_stochastic(state, coeffs, rng)
    else:
        k = k_schedule(strategy.k_schedule, target_s, provider.sched.T, state.N)
        v = route_adaptive(state, new_scores, k, strategy, rng)
    v = apply_routing_defaults(state.denoised, v)

    tokens = draw_rows(transition_kernel(state, x0_tilde, v, target_s, provider), rng)
    return DiffusionState(tokens=tokens, denoised=update_b(state.denoised, v), t=target_s,
                          scores=new_scores, prev_tokens=state.tokens, T=provider.sched.T)


def _annealed(tau: float, anneal_to: Optional[float], i: int, n: int) -> float:
    if anneal_to is None or n <= 1:
        return tau
    return tau + (anneal_to - tau) * i / (n - 1)


def run_sampler(denoiser: Denoiser, N: int, step_sequence: Sequence[int], strategy: RoutingStrategy,
                tau: float, mode, rng: np.random.Generator, provider: CoefficientProvider,
                condition: Optional[np.ndarray] = None, anneal_to: Optional[float] = None) -> DiffusionState:
    steps = as_step_sequence(step_sequence, provider.sched.T)
    state = DiffusionState.initial(N, provider.sched.T, provider.noise, rng)
    n_iter = len(steps) - 1
    for i, (t, s) in enumerate(zip(steps, steps[1:])):
        state = denoise_step(state, denoiser, strategy, provider, _annealed(tau, anneal_to, i, n_iter),
                             mode, s, rng, condition=condition)
        logger.debug(f"step {t} -> {s}: {int(state.denoised.sum())}/{N} denoised")
    return state


def sample(denoiser: Denoiser, N: int, step_sequence: Sequence[int], strategy: RoutingStrategy,
           tau: float, mode, condition: Optional[np.ndarray], rng: np.random.Generator,
           provider: CoefficientProvider, anneal_to: Optional[float] = None) -> np.ndarray:
    return run_sampler(denoiser, N, step_sequence, strategy, tau, mode, rng, provider,
                       condition=condition, anneal_to=anneal_to).tokens


def _tempered(f: np.ndarray, tau: float, mode) -> np.ndarray:
    if tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if DecodeMode(mode) is DecodeMode.ARGMAX:
        return np.eye(f.shape[1])[np.argmax(f, axis=1)]
    with np.errstate(divide="ignore"):
        return softmax(np.log(f) / tau, axis=1)


def sample_vanilla(denoiser: Denoiser, N: int, steps: Sequence[int], kind: str, tau: float, mode,
                   condition: Optional[np.ndarray], rng: np.random.Generator, sched: AlphaSchedule,
                   noise: NoiseDistribution) -> np.ndarray:
    """Ancestral sampling through the vanilla parameterized kernels (ablation baseline)."""
    if kind == "absorbing" and noise.kind != "absorbing":
        raise ConfigError("absorbing vanilla sampling needs absorbing noise")
    if kind == "multinomial" and noise.kind != "uniform":
        raise ConfigError("multinomial vanilla sampling needs uniform noise")
    if kind not in ("absorbing", "multinomial"):
        raise ConfigError(f"Unknown vanilla process: {kind}")
    steps = as_step_sequence(steps, sched.T)
    tokens = rng.choice(noise.K, size=N, p=noise.probs).astype(np.int64)
    for t, s in zip(steps, steps[1:]):
        f = _tempered(validate_output(denoiser.predict(tokens, t, condition), N, noise.K), tau, mode)
        if kind == "absorbing":
            rows = [vanilla_backward_absorbing(f[n], int(tokens[n]), s, t, sched, noise.mask_id) for n in range(N)]
        else:
            rows = [vanilla_backward_multinomial(f[n], int(tokens[n]), t, sched, noise.K, s=s) for n in range(N)]
        tokens = draw_rows(np.array(rows), rng)
    return tokens


def sequence_score(candidate: np.ndarray, denoiser: Denoiser, condition: Optional[np.ndarray], t: int = 1) -> float:
    candidate = np.asarray(candidate, dtype=np.int64)
    f = validate_output(denoiser.predict(candidate, t, condition), len(candidate), denoiser.K)
    with np.errstate(divide="ignore"):
        return float(np.mean(np.log(f[np.arange(len(candidate)), candidate])))


def rerank(candidates: List[np.ndarray], denoiser: Denoiser, condition: Optional[np.ndarray] = None) -> np.ndarray:
    if len(candidates) == 0:
        raise ConfigError("rerank needs at least one candidate")
    scores = [sequence_score(c, denoiser, condition) for c in candidates]
    # np.argmax returns the first maximum
    return np.asarray(candidates[int(np.argmax(scores))], dtype=np.int64)
