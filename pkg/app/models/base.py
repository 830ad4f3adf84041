from typing import Optional, Protocol

import numpy as np

from app.errors import ContractError

# One row per position, each row a Categorical over K token ids.
DenoiserOutput = np.ndarray


class Denoiser(Protocol):
    K: int

    def predict(self, tokens: np.ndarray, t: int, condition: Optional[np.ndarray] = None) -> DenoiserOutput:
        ...


def validate_output(f, N: int, K: int, tolerance: float = 1e-9) -> DenoiserOutput:
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (N, K):
        raise ContractError(f"denoiser returned shape {f.shape}, expected {(N, K)}")
    if not np.all(np.isfinite(f)):
        raise ContractError("denoiser returned non-finite probabilities")
    if np.any(f < 0.0) or np.any(np.abs(f.sum(axis=1) - 1.0) > tolerance):
        raise ContractError("denoiser rows must be probability vectors")
    return f
