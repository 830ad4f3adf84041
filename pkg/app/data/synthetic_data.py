import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.errors import ConfigError, ContractError
from app.models.oracle import DataModel

logger = logging.getLogger(__name__)

CORPUS_KINDS = ("factorized", "markov", "reverse-pairs")

# Dirichlet concentration for the random synthetic distributions
CONCENTRATION = 0.5


@dataclass(frozen=True)
class Corpus:
    """Fixed-length token rows, optionally paired with source rows used as conditions."""
    rows: np.ndarray
    sources: Optional[np.ndarray] = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] == 0:
            raise ContractError(f"corpus must be a nonempty 2-D array of token ids, got shape {rows.shape}")
        object.__setattr__(self, "rows", rows)
        if self.sources is not None:
            sources = np.asarray(self.sources, dtype=np.int64)
            if sources.ndim != 2 or sources.shape[0] != rows.shape[0]:
                raise ContractError("source rows must align one-to-one with target rows")
            object.__setattr__(self, "sources", sources)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def N(self) -> int:
        return self.rows.shape[1]

    def condition(self, i: int) -> Optional[np.ndarray]:
        return None if self.sources is None else self.sources[i]

    def validate(self, K: int, mask_id: Optional[int] = None) -> "Corpus":
        for name, rows in (("rows", self.rows), ("sources", self.sources)):
            if rows is None:
                continue
            if np.any(rows < 0) or np.any(rows >= K):
                raise ConfigError(f"corpus {name} contain ids outside [0, {K})")
            if mask_id is not None and np.any(rows == mask_id):
                raise ConfigError(f"corpus {name} contain the mask id {mask_id}")
        return self


def _data_vocab(K: int) -> int:
    # the last id is reserved for the absorbing mask
    if K < 2:
        raise ConfigError(f"vocabulary size must be >= 2, got {K}")
    return K - 1


def random_factorized_model(K: int, N: int, rng: np.random.Generator) -> DataModel:
    V = _data_vocab(K)
    marginals = np.zeros((N, K))
    marginals[:, :V] = rng.dirichlet(np.full(V, CONCENTRATION), size=N)
    return DataModel.factorized(marginals)


def random_markov_model(K: int, N: int, rng: np.random.Generator) -> DataModel:
    V = _data_vocab(K)
    initial = np.zeros(K)
    initial[:V] = rng.dirichlet(np.full(V, CONCENTRATION))
    transition = np.zeros((K, K))
    transition[:, :V] = rng.dirichlet(np.full(V, CONCENTRATION), size=K)
    return DataModel.markov(initial, transition, N)


def reverse_pairs(K: int, N: int, count: int, rng: np.random.Generator) -> Corpus:
    if K < 3:
        raise ConfigError(f"reverse-pairs needs K >= 3, got {K}")
    sources = rng.integers(0, _data_vocab(K), size=(count, N))
    return Corpus(rows=sources[:, ::-1].copy(), sources=sources)


def generate_corpus(kind: str, K: int, N: int, count: int, seed: int) -> Tuple[Corpus, Optional[DataModel]]:
    """Build a synthetic corpus; factorized and markov corpora also return their data model."""
    if kind not in CORPUS_KINDS:
        raise ConfigError(f"Unknown corpus kind: {kind}")
    if N < 1 or count < 1:
        raise ConfigError(f"need N >= 1 and count >= 1, got N={N}, count={count}")
    rng = np.random.default_rng(seed)
    if kind == "reverse-pairs":
        corpus, model = reverse_pairs(K, N, count, rng), None
    else:
        model = random_factorized_model(K, N, rng) if kind == "factorized" else random_markov_model(K, N, rng)
        corpus = Corpus(rows=model.sample(count, rng))
    logger.info(f"Generated {kind} corpus: {count} rows, N={N}, K={K}")
    return corpus, model
