"""
Trainable denoiser f(x_t; theta) with analytically coded gradients.

Per position n the features are

    [E[x_n] + P[n],  mean of E over the context of n,  sum_m A[n, m] * C[c_m],  time(t)]

followed by one tanh hidden layer and a softmax head. The condition tokens c are
mixed into every position through the learned matrix A, so tasks that need a
specific source position (e.g. reversal) are expressible. All parameters live in
one flat float64 array; the named tensors are views into it.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError
from scipy.special import softmax

from app.errors import ConfigError, ContractError
from config import config

logger = logging.getLogger(__name__)


class ContextKind(str, Enum):
    MEAN_POOL = "mean_pool"
    WINDOW = "window"


class DenoiserArch(BaseModel):
    K: int = Field(ge=2)
    N_max: int = Field(ge=1)
    embed_dim: int = Field(default=config.EMBED_DIM, ge=1)
    time_dim: int = Field(default=config.TIME_DIM, ge=0)
    hidden_dim: int = Field(default=config.HIDDEN_DIM, ge=1)
    context_kind: ContextKind = ContextKind(config.CONTEXT_KIND)
    window: int = Field(default=config.WINDOW, ge=0)
    init_scale: float = Field(default=config.INIT_SCALE, ge=0.0)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        D = self.embed_dim
        return {
            "token_embed": (self.K, D),
            "pos_embed": (self.N_max, D),
            "cond_embed": (self.K, D),
            "cond_mix": (self.N_max, self.N_max),
            "W1": (self.hidden_dim, 3 * D + self.time_dim),
            "b1": (self.hidden_dim,),
            "W2": (self.K, self.hidden_dim),
            "b2": (self.K,),
        }

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(shape) for shape in self.shapes().values()))


def timestep_encoding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step: sin/cos pairs at geometric frequencies."""
    if dim == 0:
        return np.zeros(0)
    half = (dim + 1) // 2
    freqs = 1.0 / 10000.0 ** (np.arange(half) / max(half, 1))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])[:dim]


def context_matrix(N: int, kind: ContextKind, window: int) -> np.ndarray:
    """Row-stochastic N x N averaging matrix; row n averages the context of position n."""
    if ContextKind(kind) is ContextKind.MEAN_POOL:
        return np.full((N, N), 1.0 / N)
    idx = np.arange(N)
    mask = (np.abs(idx[:, None] - idx[None, :]) <= window).astype(np.float64)
    return mask / mask.sum(axis=1, keepdims=True)


@dataclass
class ForwardCache:
    tokens: np.ndarray
    condition: Optional[np.ndarray]
    context: np.ndarray
    cond_features: np.ndarray
    inputs: np.ndarray
    hidden: np.ndarray
    probs: np.ndarray


class TrainableDenoiser:
    def __init__(self, arch: DenoiserArch, params: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None):
        self.arch = arch
        self.K = arch.K
        if params is None:
            params = self.init_params(arch, rng if rng is not None else np.random.default_rng(0))
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ContractError(f"expected {arch.n_params} parameters, got {params.shape}")
        self.params = params

    @staticmethod
    def init_params(arch: DenoiserArch, rng: np.random.Generator) -> np.ndarray:
        params = rng.uniform(-arch.init_scale, arch.init_scale, size=arch.n_params)
        TrainableDenoiser._views(arch, params)["b2"][:] = 0.0
        return params

    @staticmethod
    def _views(arch: DenoiserArch, flat: np.ndarray) -> Dict[str, np.ndarray]:
        views, offset = {}, 0
        for name, shape in arch.shapes().items():
            size = int(np.prod(shape))
            views[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return views

    @property
    def weights(self) -> Dict[str, np.ndarray]:
        return self._views(self.arch, self.params)

    def zero_output_head(self):
        w = self.weights
        w["W2"][:] = 0.0
        w["b2"][:] = 0.0

    def _check_inputs(self, tokens, condition):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or not (1 <= len(tokens) <= self.arch.N_max):
            raise ContractError(f"expected 1..{self.arch.N_max} tokens, got shape {tokens.shape}")
        if np.any(tokens < 0) or np.any(tokens >= self.K):
            raise ContractError(f"token ids must lie in [0, {self.K})")
        if condition is not None:
            condition = np.asarray(condition, dtype=np.int64)
            if condition.ndim != 1 or not (1 <= len(condition) <= self.arch.N_max):
                raise ContractError(f"expected 1..{self.arch.N_max} condition tokens")
            if np.any(condition < 0) or np.any(condition >= self.K):
                raise ContractError(f"condition ids must lie in [0, {self.K})")
        return tokens, condition

    def forward_with_cache(self, tokens, t: int, condition=None) -> ForwardCache:
        tokens, condition = self._check_inputs(tokens, condition)
        if t < 0:
            raise ContractError(f"step must be >= 0, got {t}")
        w = self.weights
        N, D = len(tokens), self.arch.embed_dim

        embedded = w["token_embed"][tokens]
        context = context_matrix(N, self.arch.context_kind, self.arch.window)
        if condition is None:
            cond_features = np.zeros((N, D))
        else:
            cond_features = w["cond_mix"][:N, :len(condition)] @ w["cond_embed"][condition]
        time = np.broadcast_to(timestep_encoding(t, self.arch.time_dim), (N, self.arch.time_dim))

        inputs = np.concatenate([embedded + w["pos_embed"][:N], context @ embedded, cond_features, time], axis=1)
        hidden = np.tanh(inputs @ w["W1"].T + w["b1"])
        probs = softmax(hidden @ w["W2"].T + w["b2"], axis=1)
        return ForwardCache(tokens=tokens, condition=condition, context=context, cond_features=cond_features,
                            inputs=inputs, hidden=hidden, probs=probs)

    def forward(self, tokens, t: int, condition=None) -> np.ndarray:
        return self.forward_with_cache(tokens, t, condition).probs

    def predict(self, tokens, t: int, condition=None) -> np.ndarray:
        return self.forward(tokens, t, condition)

    def backward_from_cache(self, cache: ForwardCache, grad_logits) -> np.ndarray:
        grad_logits = np.asarray(grad_logits, dtype=np.float64)
        N, D = len(cache.tokens), self.arch.embed_dim
        if grad_logits.shape != (N, self.K):
            raise ContractError(f"logit gradient must have shape {(N, self.K)}, got {grad_logits.shape}")
        w = self.weights
        grad = np.zeros_like(self.params)
        g = self._views(self.arch, grad)

        g["W2"][:] = grad_logits.T @ cache.hidden
        g["b2"][:] = grad_logits.sum(axis=0)
        pre = (grad_logits @ w["W2"]) * (1.0 - cache.hidden ** 2)
        g["W1"][:] = pre.T @ cache.inputs
        g["b1"][:] = pre.sum(axis=0)
        d_inputs = pre @ w["W1"]

        d_embed = d_inputs[:, :D]
        d_context = d_inputs[:, D:2 * D]
        d_cond = d_inputs[:, 2 * D:3 * D]
        g["pos_embed"][:N] += d_embed
        np.add.at(g["token_embed"], cache.tokens, d_embed + cache.context.T @ d_context)
        if cache.condition is not None:
            M = len(cache.condition)
            g["cond_mix"][:N, :M] += d_cond @ w["cond_embed"][cache.condition].T
            np.add.at(g["cond_embed"], cache.condition, w["cond_mix"][:N, :M].T @ d_cond)
        return grad

    def backward(self, tokens, t: int, condition, grad_logits) -> np.ndarray:
        return self.backward_from_cache(self.forward_with_cache(tokens, t, condition), grad_logits)

    def value_and_grad(self, tokens, t: int, condition,
                       loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]]) -> Tuple[float, np.ndarray]:
        """Run forward, let `loss_fn` map the output to (loss, logit gradient), and backpropagate."""
        cache = self.forward_with_cache(tokens, t, condition)
        loss, grad_logits = loss_fn(cache.probs)
        return loss, self.backward_from_cache(cache, grad_logits)

    def with_params(self, params: np.ndarray) -> "TrainableDenoiser":
        return TrainableDenoiser(self.arch, params=np.array(params, dtype=np.float64))

    @classmethod
    def from_arch_dict(cls, arch: dict, params, rng=None) -> "TrainableDenoiser":
        try:
            arch = DenoiserArch(**arch)
        except ValidationError as e:
            raise ConfigError(f"invalid denoiser architecture: {e}")
        return cls(arch, params=None if params is None else np.asarray(params, dtype=np.float64), rng=rng)
