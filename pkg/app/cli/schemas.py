import logging
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from app.diffusion.processes import NoiseDistribution
from app.diffusion.sampler import DecodeMode, KSchedule, RoutingKind, RoutingStrategy
from app.diffusion.schedules import AlphaSchedule, make_step_sequence
from app.errors import ConfigError
from app.models.model_utils import ContextKind, DenoiserArch
from app.training.trainer import TrainConfig
from config import config

logger = logging.getLogger(__name__)


class ScheduleSpec(BaseModel):
    T: int = Field(default=config.NUM_TIMESTEPS, ge=1)
    family: Optional[Literal["linear", "cosine"]] = config.SCHEDULE_FAMILY
    alpha: Optional[List[float]] = None

    def build(self) -> AlphaSchedule:
        return AlphaSchedule.from_config(self.model_dump())


class NoiseSpec(BaseModel):
    kind: Literal["uniform", "absorbing", "custom"] = config.NOISE_KIND
    K: int = Field(ge=2)
    mask_id: Optional[int] = None
    probs: Optional[List[float]] = None

    def build(self) -> NoiseDistribution:
        return NoiseDistribution.from_config(self.model_dump())


class ModelSpec(BaseModel):
    """Architecture hyperparameters; K comes from the noise spec and N_max defaults to the corpus length."""
    N_max: Optional[int] = Field(default=None, ge=1)
    embed_dim: int = Field(default=config.EMBED_DIM, ge=1)
    time_dim: int = Field(default=config.TIME_DIM, ge=0)
    hidden_dim: int = Field(default=config.HIDDEN_DIM, ge=1)
    context_kind: ContextKind = ContextKind(config.CONTEXT_KIND)
    window: int = Field(default=config.WINDOW, ge=0)
    init_scale: float = Field(default=config.INIT_SCALE, ge=0.0)

    def build(self, K: int, N: int) -> DenoiserArch:
        fields = self.model_dump(exclude={"N_max"})
        return DenoiserArch(K=K, N_max=self.N_max or N, **fields)


class SamplingSpec(BaseModel):
    steps: Union[int, List[int]] = config.SAMPLING_STEPS
    strategy: RoutingKind = RoutingKind.STOCHASTIC
    k_schedule: KSchedule = KSchedule.COSINE
    gumbel: bool = False
    conservative_v1: bool = False
    tau: float = Field(default=config.TEMPERATURE, gt=0.0)
    anneal_to: Optional[float] = Field(default=None, gt=0.0)
    mode: DecodeMode = DecodeMode.ARGMAX
    candidates: int = Field(default=config.CANDIDATES, ge=1)
    count: int = Field(default=100, ge=1)
    length: Optional[int] = Field(default=None, ge=1)
    use_ema: bool = True
    vanilla: Optional[Literal["absorbing", "multinomial"]] = None

    def routing(self) -> RoutingStrategy:
        if self.strategy is RoutingKind.STOCHASTIC:
            return RoutingStrategy.stochastic()
        return RoutingStrategy.adaptive(self.k_schedule, self.gumbel, self.conservative_v1)

    def step_sequence(self, T: int) -> List[int]:
        if isinstance(self.steps, int):
            return make_step_sequence(T, self.steps)
        return list(self.steps)


class PathsSpec(BaseModel):
    corpus: Optional[str] = None
    heldout: Optional[str] = None
    data_model: Optional[str] = None
    source: Optional[str] = None
    output_dir: str = config.OUTPUT_DIR


class RunConfig(BaseModel):
    seed: int
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    noise: NoiseSpec
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampling: SamplingSpec = Field(default_factory=SamplingSpec)
    paths: PathsSpec = Field(default_factory=PathsSpec)

    @model_validator(mode="after")
    def _consistent(self):
        if self.train.T is not None and self.train.T != self.schedule.T:
            raise ValueError(f"train.T={self.train.T} does not match schedule.T={self.schedule.T}")
        if "seed" not in self.train.model_fields_set:
            self.train.seed = self.seed
        return self


def parse_run_config(document: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}")
