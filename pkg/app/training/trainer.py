import logging
import math
from typing import Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field
from tqdm import tqdm

from app.data.synthetic_data import Corpus
from app.diffusion.processes import NoiseDistribution
from app.diffusion.schedules import AlphaSchedule, ReweightingScheme
from app.errors import ConfigError, ContractError, DivergenceError
from app.models.model_utils import TrainableDenoiser
from app.training.objectives import batch_loss, make_batch, make_conditioned_batch
from config import config

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    T: Optional[int] = Field(default=None, ge=1)
    scheme: ReweightingScheme = ReweightingScheme.LINEAR
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1)
    steps: int = Field(default=config.TRAIN_STEPS, ge=0)
    learning_rate: float = Field(default=config.LEARNING_RATE, ge=0.0)
    warmup_steps: int = Field(default=config.WARMUP_STEPS, ge=0)
    weight_decay: float = Field(default=config.WEIGHT_DECAY, ge=0.0)
    label_smoothing: float = Field(default=config.LABEL_SMOOTHING, ge=0.0, lt=1.0)
    ema_decay: float = Field(default=config.EMA_DECAY, ge=0.0, lt=1.0)
    ema_start: int = Field(default=config.EMA_START, ge=0)
    adam_betas: Tuple[float, float] = config.ADAM_BETAS
    adam_eps: float = Field(default=config.ADAM_EPS, gt=0.0)
    conditioned: bool = False
    log_every: int = Field(default=config.LOG_EVERY, ge=1)
    seed: int = 0


def inverse_sqrt_factor(warmup_steps: int):
    """Linear warmup to 1, then decay proportional to 1/sqrt(step)."""
    warmup = max(warmup_steps, 1)

    def factor(step: int) -> float:
        return min((step + 1) / warmup, math.sqrt(warmup / (step + 1)))
    return factor


def ema_update(ema_params: np.ndarray, params: np.ndarray, decay: float) -> np.ndarray:
    ema_params = np.asarray(ema_params, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if ema_params.shape != params.shape:
        raise ContractError(f"EMA and parameters differ in shape: {ema_params.shape} vs {params.shape}")
    return decay * ema_params + (1.0 - decay) * params


class Trainer:
    def __init__(self, model: TrainableDenoiser, corpus: Corpus, train_config: TrainConfig,
                 sched: AlphaSchedule, noise: NoiseDistribution):
        if train_config.T is not None and train_config.T != sched.T:
            raise ConfigError(f"train config T={train_config.T} does not match schedule T={sched.T}")
        if corpus.N > model.arch.N_max:
            raise ConfigError(f"corpus rows have length {corpus.N}, model supports at most {model.arch.N_max}")
        corpus.validate(noise.K, noise.mask_id)
        self.model = model
        self.corpus = corpus
        self.config = train_config
        self.sched = sched
        self.noise = noise
        self.rng = np.random.default_rng(train_config.seed)
        self.ema_params = model.params.copy()
        self.global_step = 0
        self.history = []

        # the tensor shares memory with model.params, so optimizer updates land in the numpy array
        self.param_tensor = torch.from_numpy(model.params).requires_grad_(True)
        self.optimizer = torch.optim.AdamW(
            [self.param_tensor],
            lr=train_config.learning_rate,
            betas=train_config.adam_betas,
            eps=train_config.adam_eps,
            weight_decay=train_config.weight_decay,
        )
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, inverse_sqrt_factor(train_config.warmup_steps))

    def compute_loss(self):
        cfg = self.config
        if cfg.conditioned:
            first, second = make_conditioned_batch(self.corpus, cfg.batch_size, self.sched, self.noise, self.rng)
            loss_s, grad_s, weight_s = batch_loss(self.model, first, cfg.scheme, self.sched, cfg.label_smoothing)
            loss_t, grad_t, weight_t = batch_loss(self.model, second, cfg.scheme, self.sched, cfg.label_smoothing)
            t_mean = float(np.mean(np.concatenate([first.t, second.t])))
            return 0.5 * (loss_s + loss_t), 0.5 * (grad_s + grad_t), 0.5 * (weight_s + weight_t), t_mean
        batch = make_batch(self.corpus, cfg.batch_size, self.sched, self.noise, self.rng)
        loss, grad, weight = batch_loss(self.model, batch, cfg.scheme, self.sched, cfg.label_smoothing)
        return loss, grad, weight, float(np.mean(batch.t))

    def train_step(self):
        loss, grad, weight, t_mean = self.compute_loss()
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss at step {self.global_step}: {loss}")

        self.optimizer.zero_grad()
        self.param_tensor.grad = torch.from_numpy(grad)
        self.optimizer.step()
        self.scheduler.step()
        if self.global_step < self.config.ema_start:
            self.ema_params = self.model.params.copy()
        else:
            self.ema_params = ema_update(self.ema_params, self.model.params, self.config.ema_decay)

        record = {"step": self.global_step, "loss": loss, "weight": weight, "t": t_mean}
        self.history.append(record)
        self.global_step += 1
        return record

    def train(self, show_progress: bool = True):
        """Run the configured number of steps; returns the loss curve records."""
        cfg = self.config
        logger.info(f"Training for {cfg.steps} steps (batch {cfg.batch_size}, scheme {cfg.scheme.value}, "
                    f"conditioned={cfg.conditioned})")
        for _ in tqdm(range(cfg.steps), desc="train", disable=not show_progress):
            record = self.train_step()
            if record["step"] % cfg.log_every == 0 or record["step"] == cfg.steps - 1:
                lr = self.scheduler.get_last_lr()[0]
                logger.info(f"step {record['step']}: loss={record['loss']:.4f} lr={lr:.2e}")
        return self.history

    def ema_model(self) -> TrainableDenoiser:
        return self.model.with_params(self.ema_params)


def train(model: TrainableDenoiser, corpus: Corpus, train_config: TrainConfig, sched: AlphaSchedule,
          noise: NoiseDistribution, show_progress: bool = False):
    """Train in place; returns (model, EMA model, loss curve records)."""
    trainer = Trainer(model, corpus, train_config, sched, noise)
    history = trainer.train(show_progress=show_progress)
    return trainer.model, trainer.ema_model(), history
