import argparse
import json
import logging
import sys

from pydantic import ValidationError

from app.cli import commands
from app.cli.schemas import SamplingSpec, parse_run_config
from app.data import storage
from app.errors import DiffusionError, DivergenceError
from config import config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 2
EXIT_INVALID_CONFIG = 3
EXIT_DIVERGED = 4


def _steps(value):
    """An integer step count or a comma-separated explicit step list."""
    if "," in value:
        return [int(v) for v in value.split(",")]
    return int(value)


def build_parser():
    parser = argparse.ArgumentParser(description="Reparameterized discrete diffusion: corpora, training, sampling, verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="Generate a synthetic token corpus")
    gen.add_argument("--kind", choices=["factorized", "markov", "reverse-pairs"], required=True)
    gen.add_argument("--K", type=int, required=True, help="Vocabulary size; the last id is reserved for the mask")
    gen.add_argument("--N", type=int, required=True, help="Sequence length")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", type=str, required=True)

    train = sub.add_parser("train", help="Train a denoiser from a JSON run config")
    train.add_argument("--config", type=str, required=True)
    train.add_argument("--steps", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--output-dir", type=str)

    sample = sub.add_parser("sample", help="Generate sequences from a checkpoint")
    sample.add_argument("--checkpoint", type=str, required=True)
    sample.add_argument("--out", type=str, required=True)
    sample.add_argument("--config", type=str, help="Run config whose sampling section is used")
    sample.add_argument("--source", type=str, help="Condition rows (or a paired .src/.tgt prefix)")
    sample.add_argument("--steps", type=_steps)
    sample.add_argument("--strategy", choices=["stochastic", "adaptive"])
    sample.add_argument("--k-schedule", choices=["cosine", "linear"])
    sample.add_argument("--gumbel", action="store_true", default=None)
    sample.add_argument("--tau", type=float)
    sample.add_argument("--mode", choices=["argmax", "sample"])
    sample.add_argument("--candidates", type=int)
    sample.add_argument("--count", type=int)
    sample.add_argument("--vanilla", choices=["absorbing", "multinomial"])
    sample.add_argument("--seed", type=int, default=0)

    verify = sub.add_parser("verify", help="Run the verification suite")
    verify.add_argument("--out", type=str, default="verify_report.json")
    verify.add_argument("--scope", action="append", help="Check name; repeat to select several")
    verify.add_argument("--draws", type=int, default=config.VERIFY_DRAWS)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--schema", action="store_true", help="Also write the report's JSON schema")

    evaluate = sub.add_parser("eval", help="Score generated sequences")
    evaluate.add_argument("--generated", type=str, required=True)
    evaluate.add_argument("--out", type=str, required=True)
    evaluate.add_argument("--reference", type=str)
    evaluate.add_argument("--data-model", type=str)
    evaluate.add_argument("--checkpoint", type=str)
    evaluate.add_argument("--heldout", type=str)
    evaluate.add_argument("--draws", type=int)
    evaluate.add_argument("--seed", type=int, default=0)
    return parser


def _sampling_spec(args):
    base = {}
    if args.config:
        base = parse_run_config(storage.read_json(args.config)).sampling.model_dump()
    overrides = {
        "steps": args.steps, "strategy": args.strategy, "k_schedule": args.k_schedule, "gumbel": args.gumbel,
        "tau": args.tau, "mode": args.mode, "candidates": args.candidates, "count": args.count,
        "vanilla": args.vanilla,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return SamplingSpec.model_validate(base)


def dispatch(args):
    if args.command == "gen-corpus":
        return commands.gen_corpus(args.kind, args.K, args.N, args.count, args.seed, args.out)
    if args.command == "train":
        document = storage.read_json(args.config)
        if args.seed is not None:
            document["seed"] = args.seed
            document.setdefault("train", {})["seed"] = args.seed
        if args.steps is not None:
            document.setdefault("train", {})["steps"] = args.steps
        if args.lr is not None:
            document.setdefault("train", {})["learning_rate"] = args.lr
        if args.output_dir is not None:
            document.setdefault("paths", {})["output_dir"] = args.output_dir
        return commands.train(parse_run_config(document))
    if args.command == "sample":
        return commands.sample_command(args.checkpoint, _sampling_spec(args), args.out, args.seed, args.source)
    if args.command == "verify":
        return commands.verify_command(args.out, args.scope, args.draws, args.seed, args.schema)
    return commands.eval_command(args.generated, args.out, reference=args.reference, data_model=args.data_model,
                                 checkpoint=args.checkpoint, heldout=args.heldout, seed=args.seed, draws=args.draws)


def main(argv=None):
    logging.basicConfig(level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = dispatch(args)
    except DivergenceError as e:
        logger.error(f"Training diverged: {e}")
        return EXIT_DIVERGED
    except (DiffusionError, ValidationError, FileNotFoundError) as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_INVALID_CONFIG

    print(json.dumps(result, indent=2))
    if args.command == "verify" and not result["passed"]:
        return EXIT_VERIFY_FAILED
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
