class DiffusionError(ValueError):
    """Base class for precondition violations in the diffusion engine."""


class SingularScheduleError(DiffusionError):
    """A schedule quantity would divide by zero (e.g. alpha_t = 1 or alpha_s = 0)."""


class ImpossibleEventError(DiffusionError):
    """The conditioning event has zero probability under the forward process."""


class ContractError(DiffusionError):
    """Inputs do not satisfy the shape or range contract of an operation."""


class ConfigError(DiffusionError):
    """A run configuration or input file is invalid."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
