"""
Command handlers behind run.py. Each returns a {'status': ...} dictionary; errors
propagate as DiffusionError subclasses and are mapped to exit codes by the caller.
"""
import logging
import os
from typing import List, Optional, Sequence

import numpy as np
from sklearn.metrics import accuracy_score

from app.cli.schemas import RunConfig, SamplingSpec
from app.data import storage
from app.data.synthetic_data import Corpus, generate_corpus
from app.diffusion.processes import NoiseDistribution, total_variation
from app.diffusion.sampler import CoefficientProvider, rerank, sample, sample_vanilla
from app.diffusion.schedules import AlphaSchedule
from app.errors import ConfigError, ContractError
from app.models.model_utils import TrainableDenoiser
from app.models.oracle import DataModel
from app.training.objectives import heldout_cross_entropy, negative_elbo
from app.training.trainer import Trainer
from app.verify.checks import format_reports, report_schema, run_suite
from config import config

logger = logging.getLogger(__name__)


def _require_file(path: Optional[str], what: str) -> str:
    if path is None:
        raise ConfigError(f"no {what} path configured")
    if not (os.path.exists(path) or os.path.exists(path + ".tgt")):
        raise ConfigError(f"{what} not found: {path}")
    return path


def sidecar_path(corpus_path: str) -> str:
    return corpus_path + ".model.json"


def gen_corpus(kind: str, K: int, N: int, count: int, seed: int, out: str):
    corpus, model = generate_corpus(kind, K, N, count, seed)
    paths = storage.save_corpus(corpus, out)
    if model is not None:
        paths["data_model"] = storage.write_json(model.to_config(), sidecar_path(out))
    return {"status": "success", "rows": len(corpus), "paths": paths}


def train(run: RunConfig):
    corpus_path = _require_file(run.paths.corpus, "corpus")
    sched = run.schedule.build()
    noise = run.noise.build()
    corpus = storage.load_corpus(corpus_path)
    arch = run.model.build(noise.K, corpus.N)
    model = TrainableDenoiser(arch, rng=np.random.default_rng(run.seed))

    trainer = Trainer(model, corpus, run.train, sched, noise)
    history = trainer.train(show_progress=True)

    out_dir = run.paths.output_dir
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, config.CHECKPOINT_NAME)
    storage.save_checkpoint(checkpoint_path, arch.model_dump(mode="json"), model.params, trainer.ema_params,
                            sched.to_config(), noise.to_config())
    loss_path = storage.save_loss_curve(history, os.path.join(out_dir, config.LOSS_CURVE_NAME))
    config_path = storage.write_json(run.model_dump(mode="json"), os.path.join(out_dir, config.CONFIG_NAME))
    return {
        "status": "success",
        "steps": len(history),
        "final_loss": history[-1]["loss"] if history else None,
        "paths": {"checkpoint": checkpoint_path, "loss_curve": loss_path, "config": config_path},
    }


def load_denoiser(checkpoint: dict, use_ema: bool = True):
    """Rebuild (denoiser, schedule, noise) from a checkpoint document, preferring EMA parameters."""
    params = checkpoint["ema_params"] if use_ema and checkpoint["ema_params"] is not None else checkpoint["params"]
    model = TrainableDenoiser.from_arch_dict(checkpoint["arch"], params)
    sched = AlphaSchedule.from_config(checkpoint["schedule"])
    noise = NoiseDistribution.from_config(checkpoint["noise"])
    if noise.K != model.K:
        raise ConfigError(f"checkpoint noise K={noise.K} does not match model K={model.K}")
    return model, sched, noise


def generate(denoiser, sched: AlphaSchedule, noise: NoiseDistribution, spec: SamplingSpec, N: int,
             conditions: Sequence[Optional[np.ndarray]], rng: np.random.Generator) -> np.ndarray:
    steps = spec.step_sequence(sched.T)
    provider = CoefficientProvider(sched, noise)
    strategy = spec.routing()
    logger.info(f"Sampling {len(conditions)} sequences with steps {steps}")

    rows = []
    for condition in conditions:
        candidates = []
        for _ in range(spec.candidates):
            if spec.vanilla is not None:
                candidates.append(sample_vanilla(denoiser, N, steps, spec.vanilla, spec.tau, spec.mode,
                                                 condition, rng, sched, noise))
            else:
                candidates.append(sample(denoiser, N, steps, strategy, spec.tau, spec.mode, condition, rng,
                                         provider, anneal_to=spec.anneal_to))
        rows.append(candidates[0] if len(candidates) == 1 else rerank(candidates, denoiser, condition))
    return np.stack(rows)


def sample_command(checkpoint_path: str, spec: SamplingSpec, out: str, seed: int, source: Optional[str] = None):
    checkpoint = storage.load_checkpoint(checkpoint_path)
    denoiser, sched, noise = load_denoiser(checkpoint, spec.use_ema)
    N = spec.length or denoiser.arch.N_max
    if source is not None:
        # a paired prefix conditions on its .src side
        corpus = storage.load_corpus(_require_file(source, "source file"))
        conditions = list(corpus.rows if corpus.sources is None else corpus.sources)
    else:
        conditions = [None] * spec.count

    rows = generate(denoiser, sched, noise, spec, N, conditions, np.random.default_rng(seed))
    paths = storage.save_corpus(Corpus(rows=rows), out)
    return {"status": "success", "rows": len(rows), "paths": paths}


def verify_command(out: str, scope: Optional[List[str]] = None, draws: int = config.VERIFY_DRAWS, seed: int = 0,
                   write_schema: bool = False):
    reports = run_suite(scope, draws=draws, seed=seed)
    storage.write_json([r.model_dump() for r in reports], out)
    print(format_reports(reports))
    result = {"status": "success", "passed": all(r.passed for r in reports), "report": out,
              "failed": [r.name for r in reports if not r.passed]}
    if write_schema:
        result["schema"] = storage.write_json(report_schema(), os.path.splitext(out)[0] + ".schema.json")
    return result


def empirical_unigram(rows: np.ndarray, K: int) -> np.ndarray:
    counts = np.bincount(rows.ravel(), minlength=K).astype(np.float64)
    return counts / counts.sum()


def empirical_bigram(rows: np.ndarray, K: int) -> np.ndarray:
    pairs = rows[:, :-1] * K + rows[:, 1:]
    counts = np.bincount(pairs.ravel(), minlength=K * K).astype(np.float64)
    return (counts / counts.sum()).reshape(K, K)


def sequence_metrics(generated: np.ndarray, reference: np.ndarray) -> dict:
    if generated.shape != reference.shape:
        raise ContractError(f"generated rows {generated.shape} and reference rows {reference.shape} differ in shape")
    return {
        "token_accuracy": float(accuracy_score(reference.ravel(), generated.ravel())),
        "exact_match": float(np.mean(np.all(generated == reference, axis=1))),
    }


def distribution_metrics(generated: np.ndarray, model: DataModel) -> dict:
    if generated.shape[1] != model.N or generated.max() >= model.K:
        raise ContractError(f"generated rows do not fit the data model (K={model.K}, N={model.N})")
    metrics = {"unigram_tv": total_variation(empirical_unigram(generated, model.K), model.unigram())}
    if model.N >= 2:
        metrics["bigram_tv"] = total_variation(empirical_bigram(generated, model.K).ravel(), model.bigram().ravel())
    return metrics


def eval_command(generated: str, out: str, reference: Optional[str] = None, data_model: Optional[str] = None,
                 checkpoint: Optional[str] = None, heldout: Optional[str] = None, seed: int = 0,
                 draws: Optional[int] = None):
    rows = storage.load_corpus(_require_file(generated, "generated file")).rows
    metrics = {}
    if reference is not None:
        metrics.update(sequence_metrics(rows, storage.load_corpus(_require_file(reference, "reference")).rows))
    if data_model is not None:
        metrics.update(distribution_metrics(rows, DataModel.from_config(storage.read_json(data_model))))
    if checkpoint is not None and heldout is not None:
        denoiser, sched, noise = load_denoiser(storage.load_checkpoint(checkpoint))
        corpus = storage.load_corpus(_require_file(heldout, "held-out corpus"))
        rng = np.random.default_rng(seed)
        metrics["heldout_cross_entropy"] = heldout_cross_entropy(denoiser, corpus, sched, noise, rng, draws)
        metrics["negative_elbo"] = float(np.mean([
            negative_elbo(denoiser, corpus.rows[i], sched, noise, rng, corpus.condition(i))
            for i in range(len(corpus))
        ]))
    if not metrics:
        raise ConfigError("eval needs a reference file, a data model, or a checkpoint with held-out data")
    storage.write_json(metrics, out)
    return {"status": "success", "metrics": metrics, "path": out}
