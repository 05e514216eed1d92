"""
Command line entry point.

    python -m app pretrain --config run.json --seed 7 --out runs/seed7
    python -m app finetune --out runs/seed7
    python -m app sweep --gamma 3,2,1,0
    python -m app serve --port 8000

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O failure.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import ArtifactError, FlowError, UsageError
from app.core.logging import configure_logging
from app.schemas.experiment import ExperimentConfig, SeedConfig
from app.services.experiment_service import experiment_service

logger = logging.getLogger(__name__)

COMMANDS = ("pretrain", "finetune", "scratch", "sweep", "sample", "mcmc")


def _gamma_list(text: str) -> List[float]:
    try:
        return [float(g) for g in text.split(",") if g.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults to $CONFIG_PATH or built-in defaults")
    common.add_argument("--seed", type=int, help="set every seed from one integer (data=S, init=S+1, ...)")
    common.add_argument("--out", help="output directory for checkpoints and CSV artifacts")
    common.add_argument("--gamma", type=_gamma_list, help="comma-separated gamma values")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    common.add_argument("--log-level", default=None, help=f"logging level (default {settings.LOG_LEVEL})")

    parser = argparse.ArgumentParser(prog="mfflow", description="Multi-fidelity preconditioned conditional flows")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="maximum-likelihood pretraining on low-fidelity pairs")
    finetune = sub.add_parser("finetune", parents=[common], help="preconditioned variational fine-tuning")
    finetune.add_argument("--checkpoint", help="pretrained checkpoint (default <out>/pretrained.ckpt)")
    sub.add_parser("scratch", parents=[common], help="variational training from an identity flow")
    sub.add_parser("sweep", parents=[common], help="KL table over the gamma list")
    sample = sub.add_parser("sample", parents=[common], help="posterior samples and density grid from a checkpoint")
    sample.add_argument("--checkpoint", help="checkpoint to sample (default <out>/finetuned.ckpt)")
    sample.add_argument("-n", type=int, help="number of samples")
    mcmc = sub.add_parser("mcmc", parents=[common], help="SGLD reference chain, density grids and flow cross-check")
    mcmc.add_argument("--finetuned-checkpoint", help="fine-tuned flow to cross-check (default <out>/finetuned.ckpt)")
    mcmc.add_argument("--scratch-checkpoint", help="scratch flow to cross-check (default <out>/scratch.ckpt)")
    serve = sub.add_parser("serve", help="run the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (if any) with command-line overrides applied."""
    path = args.config or settings.CONFIG_PATH
    if path:
        try:
            config = ExperimentConfig.from_json(Path(path).read_text())
        except OSError as e:
            raise UsageError(f"could not read config {path}: {e}")
    else:
        config = ExperimentConfig()

    updates = {}
    if args.seed is not None:
        updates["seeds"] = SeedConfig.from_base(args.seed)
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.gamma is not None:
        updates["data"] = config.data.model_copy(update={"gammas": args.gamma})
    # round-trip through validation so overrides obey the same constraints
    return ExperimentConfig.model_validate(config.model_copy(update=updates).model_dump())


def run(args: argparse.Namespace) -> int:
    if args.command == "serve":
        import uvicorn

        uvicorn.run("app.main:app", host=args.host, port=args.port)
        return 0

    config = load_config(args)
    if args.print_config:
        print(config.to_json())
        return 0

    if args.command == "finetune":
        summary = experiment_service.finetune(config, checkpoint_path=args.checkpoint)
    elif args.command == "sample":
        summary = experiment_service.sample(config, checkpoint_path=args.checkpoint, n=args.n)
    elif args.command == "mcmc":
        summary = experiment_service.mcmc(
            config, finetuned_path=args.finetuned_checkpoint, scratch_path=args.scratch_checkpoint)
    else:
        summary = getattr(experiment_service, args.command)(config)
    print(summary.model_dump_json(indent=2))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(getattr(args, "log_level", None))
    try:
        return run(args)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return UsageError.exit_code
    except FlowError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return ArtifactError.exit_code


if __name__ == "__main__":
    sys.exit(main())
