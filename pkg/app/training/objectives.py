"""
Training objectives: the reweighted cross-entropy over noisy positions, batch
construction (plain and conditioned), and held-out evaluation quantities.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import xlogy

from app.data.synthetic_data import Corpus
from app.diffusion.processes import (
    NoiseDistribution, backward_branch, corrupt, kl_divergence, q_xt_given_x0, sample_backward,
    vanilla_backward_marginal,
)
from app.diffusion.schedules import AlphaSchedule, ReweightingScheme, reweight
from app.errors import ConfigError, ContractError, DivergenceError
from app.models.base import Denoiser, validate_output

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossReport:
    loss: float
    mask: np.ndarray
    t: int
    weight: float

    def __post_init__(self):
        if not self.loss >= 0.0:
            raise ContractError(f"loss must be nonnegative, got {self.loss}")


def smoothed_targets(x0_seq: np.ndarray, K: int, label_smoothing: float) -> np.ndarray:
    if not (0.0 <= label_smoothing < 1.0):
        raise ConfigError(f"label smoothing must lie in [0, 1), got {label_smoothing}")
    return (1.0 - label_smoothing) * np.eye(K)[x0_seq] + label_smoothing / K


def loss_simple(f_out, x0_seq, xt_seq, t: int, scheme, sched: AlphaSchedule,
                label_smoothing: float = 0.0) -> Tuple[LossReport, np.ndarray]:
    """lambda_{t-1} * sum over noisy positions of CE(x0, f), with its gradient w.r.t. the logits."""
    x0_seq = np.asarray(x0_seq, dtype=np.int64)
    xt_seq = np.asarray(xt_seq, dtype=np.int64)
    if x0_seq.shape != xt_seq.shape or x0_seq.ndim != 1:
        raise ContractError("x0 and x_t sequences must be 1-D with equal lengths")
    f_out = np.asarray(f_out, dtype=np.float64)
    if f_out.ndim != 2:
        raise ContractError(f"denoiser output must be N x K, got shape {f_out.shape}")
    K = f_out.shape[1]
    f_out = validate_output(f_out, len(x0_seq), K)

    weight = reweight(scheme, sched, t)
    mask = xt_seq == x0_seq
    noisy = (~mask).astype(np.float64)
    targets = smoothed_targets(x0_seq, K, label_smoothing)
    cross_entropy = -xlogy(targets, f_out).sum(axis=1)
    loss = weight * float(np.dot(noisy, cross_entropy))
    grad_logits = weight * noisy[:, None] * (f_out - targets)
    return LossReport(loss=loss, mask=mask, t=t, weight=weight), grad_logits


@dataclass(frozen=True)
class Batch:
    x0: np.ndarray
    xt: np.ndarray
    t: np.ndarray
    mask: np.ndarray
    conditions: Optional[List[Optional[np.ndarray]]] = None

    def __len__(self) -> int:
        return self.x0.shape[0]

    def condition(self, i: int) -> Optional[np.ndarray]:
        return None if self.conditions is None else self.conditions[i]


def _pick_rows(corpus: Corpus, batch_size: int, rng: np.random.Generator):
    if len(corpus) == 0:
        raise ConfigError("cannot draw a batch from an empty corpus")
    index = rng.integers(0, len(corpus), size=batch_size)
    conditions = None if corpus.sources is None else [corpus.sources[i] for i in index]
    return corpus.rows[index], conditions


def make_batch(corpus: Corpus, batch_size: int, sched: AlphaSchedule, noise: NoiseDistribution,
               rng: np.random.Generator) -> Batch:
    x0, conditions = _pick_rows(corpus, batch_size, rng)
    t = rng.integers(1, sched.T + 1, size=batch_size)
    xt = np.stack([corrupt(x0[i], int(t[i]), sched, noise, rng) for i in range(batch_size)])
    return Batch(x0=x0, xt=xt, t=t, mask=xt == x0, conditions=conditions)


def make_conditioned_batch(corpus: Corpus, batch_size: int, sched: AlphaSchedule, noise: NoiseDistribution,
                           rng: np.random.Generator) -> Tuple[Batch, Batch]:
    """Two coupled views per row: x_t ~ q(x_t | x0) and x_s ~ q(x_s | x_t, x0) with s <= t."""
    x0, conditions = _pick_rows(corpus, batch_size, rng)
    pair = rng.integers(1, sched.T + 1, size=(batch_size, 2))
    s, t = pair.min(axis=1), pair.max(axis=1)
    xt = np.stack([corrupt(x0[i], int(t[i]), sched, noise, rng) for i in range(batch_size)])
    xs = np.stack([
        sample_backward(xt[i], x0[i], int(s[i]), int(t[i]), sched, noise, rng) if s[i] < t[i]
        # equal steps drop the coupling
        else corrupt(x0[i], int(s[i]), sched, noise, rng)
        for i in range(batch_size)
    ])
    return (Batch(x0=x0, xt=xs, t=s, mask=xs == x0, conditions=conditions),
            Batch(x0=x0, xt=xt, t=t, mask=xt == x0, conditions=conditions))


def batch_loss(model, batch: Batch, scheme, sched: AlphaSchedule, label_smoothing: float):
    """Summed batch loss and gradient, normalized by the number of noisy positions (at least 1)."""
    total_loss, total_grad = 0.0, np.zeros_like(model.params)
    for i in range(len(batch)):
        def loss_fn(f, i=i):
            if not np.all(np.isfinite(f)):
                raise DivergenceError(f"denoiser output became non-finite at t={int(batch.t[i])}")
            report, grad_logits = loss_simple(f, batch.x0[i], batch.xt[i], int(batch.t[i]), scheme, sched,
                                              label_smoothing)
            return report.loss, grad_logits
        loss, grad = model.value_and_grad(batch.xt[i], int(batch.t[i]), batch.condition(i), loss_fn)
        total_loss += loss
        total_grad += grad
    norm = max(float((~batch.mask).sum()), 1.0)
    weight = float(np.mean([reweight(scheme, sched, int(t)) for t in batch.t]))
    return total_loss / norm, total_grad / norm, weight


def sequence_cross_entropy(f: np.ndarray, x0_seq: np.ndarray, mask: np.ndarray) -> Tuple[float, int]:
    """Summed CE of x0 under f over positions where mask is False, and their count."""
    noisy = ~mask
    with np.errstate(divide="ignore"):
        ce = -np.log(f[np.arange(len(x0_seq)), x0_seq])
    return float(ce[noisy].sum()), int(noisy.sum())


def heldout_cross_entropy(denoiser: Denoiser, corpus: Corpus, sched: AlphaSchedule, noise: NoiseDistribution,
                          rng: np.random.Generator, draws: Optional[int] = None) -> float:
    """Mean cross-entropy per noisy position over `draws` corrupted rows (rows taken in order, cycling)."""
    draws = len(corpus) if draws is None else draws
    total, count = 0.0, 0
    for d in range(draws):
        i = d % len(corpus)
        x0 = corpus.rows[i]
        t = int(rng.integers(1, sched.T + 1))
        xt = corrupt(x0, t, sched, noise, rng)
        f = validate_output(denoiser.predict(xt, t, corpus.condition(i)), len(x0), noise.K)
        ce, n = sequence_cross_entropy(f, x0, xt == x0)
        total += ce
        count += n
    return total / max(count, 1)


def negative_elbo(denoiser: Denoiser, x0_seq, sched: AlphaSchedule, noise: NoiseDistribution,
                  rng: np.random.Generator, condition: Optional[np.ndarray] = None) -> float:
    """
    One-sample estimate of -ELBO under the vanilla parameterization:

        KL(q(x_T | x0) || q_noise) + sum_{t=2..T} KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t)) - log p(x0 | x_1)
    """
    x0_seq = np.asarray(x0_seq, dtype=np.int64)
    N = len(x0_seq)
    total = sum(kl_divergence(q_xt_given_x0(int(x0), sched.T, sched, noise), noise.probs) for x0 in x0_seq)

    for t in range(2, sched.T + 1):
        xt = corrupt(x0_seq, t, sched, noise, rng)
        f = validate_output(denoiser.predict(xt, t, condition), N, noise.K)
        for n in range(N):
            q = backward_branch(int(xt[n]), int(x0_seq[n]), t - 1, t, sched, noise)
            p = vanilla_backward_marginal(f[n], int(xt[n]), t - 1, t, sched, noise)
            total += kl_divergence(q, p)

    x1 = corrupt(x0_seq, 1, sched, noise, rng)
    f = validate_output(denoiser.predict(x1, 1, condition), N, noise.K)
    for n in range(N):
        p = vanilla_backward_marginal(f[n], int(x1[n]), 0, 1, sched, noise)
        with np.errstate(divide="ignore"):
            total -= float(np.log(p[x0_seq[n]]))
    return float(total)
