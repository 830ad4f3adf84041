"""
Synthetic data distributions and their exact-posterior denoiser.

The oracle computes p(x_0,n | x_t,1:N) under the data model and the corruption
channel q(x_t | x_0); it is the Bayes-optimal denoiser the trainable one is
compared against.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from app.diffusion.processes import NoiseDistribution
from app.diffusion.schedules import AlphaSchedule
from app.errors import ConfigError, ContractError, ImpossibleEventError

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-9


def _check_rows(name: str, rows: np.ndarray):
    if np.any(rows < 0.0) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > ROW_TOLERANCE):
        raise ConfigError(f"{name} rows must be probability vectors")


@dataclass(frozen=True)
class DataModel:
    """Either `factorized` (independent per-position marginals) or `markov` (first-order chain)."""
    kind: str
    K: int
    N: int
    marginals: Optional[np.ndarray] = field(default=None, repr=False)
    initial: Optional[np.ndarray] = field(default=None, repr=False)
    transition: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "factorized":
            marginals = np.asarray(self.marginals, dtype=np.float64)
            if marginals.shape != (self.N, self.K):
                raise ConfigError(f"marginals must have shape {(self.N, self.K)}, got {marginals.shape}")
            _check_rows("marginal", marginals)
            object.__setattr__(self, "marginals", marginals)
        elif self.kind == "markov":
            initial = np.asarray(self.initial, dtype=np.float64)
            transition = np.asarray(self.transition, dtype=np.float64)
            if initial.shape != (self.K,) or transition.shape != (self.K, self.K):
                raise ConfigError(f"markov model needs a length-{self.K} initial and a {self.K}x{self.K} transition")
            _check_rows("initial", initial)
            _check_rows("transition", transition)
            object.__setattr__(self, "initial", initial)
            object.__setattr__(self, "transition", transition)
        else:
            raise ConfigError(f"Unknown data model kind: {self.kind}")

    @classmethod
    def factorized(cls, marginals) -> "DataModel":
        marginals = np.asarray(marginals, dtype=np.float64)
        return cls(kind="factorized", K=marginals.shape[1], N=marginals.shape[0], marginals=marginals)

    @classmethod
    def markov(cls, initial, transition, N: int) -> "DataModel":
        initial = np.asarray(initial, dtype=np.float64)
        return cls(kind="markov", K=initial.shape[0], N=N, initial=initial, transition=transition)

    def position_marginals(self) -> np.ndarray:
        if self.kind == "factorized":
            return self.marginals
        out = np.zeros((self.N, self.K))
        out[0] = self.initial
        for n in range(1, self.N):
            out[n] = out[n - 1] @ self.transition
        return out

    def unigram(self) -> np.ndarray:
        return self.position_marginals().mean(axis=0)

    def bigram(self) -> np.ndarray:
        """Distribution of adjacent pairs (x_n, x_n+1), averaged over positions, as a K x K matrix."""
        if self.N < 2:
            raise ContractError("bigrams need sequences of length >= 2")
        marginals = self.position_marginals()
        if self.kind == "factorized":
            pairs = [np.outer(marginals[n], marginals[n + 1]) for n in range(self.N - 1)]
        else:
            pairs = [marginals[n][:, None] * self.transition for n in range(self.N - 1)]
        return np.mean(pairs, axis=0)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        rows = np.zeros((count, self.N), dtype=np.int64)
        if self.kind == "factorized":
            for n in range(self.N):
                rows[:, n] = rng.choice(self.K, size=count, p=self.marginals[n])
            return rows
        rows[:, 0] = rng.choice(self.K, size=count, p=self.initial)
        cdf = np.cumsum(self.transition, axis=1)
        cdf /= cdf[:, -1:]
        for n in range(1, self.N):
            u = rng.random(count)
            rows[:, n] = np.argmax(cdf[rows[:, n - 1]] > u[:, None], axis=1)
        return rows

    def to_config(self) -> Dict[str, Any]:
        if self.kind == "factorized":
            return {"kind": "factorized", "K": self.K, "N": self.N, "marginals": self.marginals.tolist()}
        return {"kind": "markov", "K": self.K, "N": self.N,
                "initial": self.initial.tolist(), "transition": self.transition.tolist()}

    @classmethod
    def from_config(cls, spec: Dict[str, Any]) -> "DataModel":
        try:
            if spec["kind"] == "factorized":
                return cls.factorized(spec["marginals"])
            if spec["kind"] == "markov":
                return cls.markov(spec["initial"], spec["transition"], int(spec["N"]))
        except KeyError as e:
            raise ConfigError(f"data model is missing field {e}")
        raise ConfigError(f"Unknown data model kind: {spec.get('kind')}")


def emission_likelihoods(tokens: np.ndarray, t: int, sched: AlphaSchedule, noise: NoiseDistribution) -> np.ndarray:
    """e[n, j] = q(x_t,n = tokens[n] | x_0,n = j)."""
    alpha_t = sched[t]
    tokens = np.asarray(tokens, dtype=np.int64)
    eye = np.eye(noise.K)[tokens]
    return alpha_t * eye + (1.0 - alpha_t) * noise.probs[tokens][:, None]


def _normalize(v: np.ndarray, what: str) -> np.ndarray:
    total = v.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0):
        raise ImpossibleEventError(f"observed tokens have zero probability under the data model ({what})")
    return v / total


def oracle_predict(model: DataModel, tokens, t: int, sched: AlphaSchedule, noise: NoiseDistribution) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if model.K != noise.K or tokens.shape != (model.N,):
        raise ContractError(f"data model has K={model.K}, N={model.N}; got K={noise.K}, N={tokens.shape}")
    if not (0 <= t <= sched.T):
        raise ConfigError(f"step t={t} outside [0, {sched.T}]")
    emissions = emission_likelihoods(tokens, t, sched, noise)
    if model.kind == "factorized":
        return _normalize(model.marginals * emissions, "factorized posterior")

    # forward-backward, rescaled at every position
    N, P = model.N, model.transition
    fwd = np.zeros((N, model.K))
    bwd = np.ones((N, model.K))
    fwd[0] = _normalize(model.initial * emissions[0], "forward pass")
    for n in range(1, N):
        fwd[n] = _normalize((fwd[n - 1] @ P) * emissions[n], "forward pass")
    for n in range(N - 2, -1, -1):
        bwd[n] = _normalize(P @ (emissions[n + 1] * bwd[n + 1]), "backward pass")
    return _normalize(fwd * bwd, "posterior")


class OracleDenoiser:
    """Exact-posterior denoiser for a known data model; ignores any condition."""

    def __init__(self, model: DataModel, sched: AlphaSchedule, noise: NoiseDistribution):
        if model.K != noise.K:
            raise ContractError(f"data model K={model.K} does not match noise K={noise.K}")
        self.model = model
        self.sched = sched
        self.noise = noise
        self.K = model.K

    def predict(self, tokens, t: int, condition=None) -> np.ndarray:
        return oracle_predict(self.model, tokens, t, self.sched, self.noise)
