"""Main entry point for the VLCD desk engine."""

import argparse
import asyncio
import logging
import sys
from typing import List, Optional

from src.cli.experiment import ArtifactMissingError, ExperimentDir, VerificationFailed
from src.cli.handlers import AblateHandler, BenchHandler, GenHandler, PipelineHandler, VerifyHandler
from src.config import ABLATION_LAMBDAS, ConfigError, get_settings, load_experiment_config, resolve_output_dir
from src.numerics import NumericsError
from src.services.checkpoint import CheckpointError
from src.services.losses import KNOWN_FAULTS
from src.services.synthdata import DatasetFormatError, GenerationError

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_VERIFY = 4


def setup_logging() -> None:
    """Configure logging for the application."""
    settings = get_settings()

    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        handlers=[
            logging.StreamHandler(sys.stdout),
        ],
    )

    logging.getLogger("sqlalchemy").setLevel(logging.WARNING)
    logging.getLogger("aiosqlite").setLevel(logging.WARNING)


def parse_lambdas(text: str) -> List[float]:
    """Comma-separated lambda list, e.g. '0.01,0.1,1,10'."""
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid lambda list: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("lambda list is empty")
    if any(value < 0 for value in values):
        raise argparse.ArgumentTypeError("lambdas must be >= 0")
    return values


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="vlcd", description="Vision-language contrastive distillation at desk scale")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="experiment JSON (default: configs/desk_default.json)")
    common.add_argument("--out", default=None, help="experiment directory (overrides output_dir)")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    common.add_argument("--force", action="store_true", help="regenerate artifacts; replace a changed experiment")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic datasets")

    pipeline = sub.add_parser("pipeline", parents=[common], help="teacher, predistill, distill, evaluate, bench")
    pipeline.add_argument("--gen", action="store_true", help="generate missing datasets first")
    pipeline.add_argument("--no-predistill", action="store_true", help="distill from a fresh student")
    pipeline.add_argument("--compare", action="store_true", help="also train and evaluate the baselines")

    ablate = sub.add_parser("ablate", parents=[common], help="lambda sweep with and without predistillation")
    ablate.add_argument("--lambdas", type=parse_lambdas, default=list(ABLATION_LAMBDAS))
    ablate.add_argument("--no-predistill", action="store_true", help="only run arms without predistillation")
    ablate.add_argument("--jobs", type=int, default=settings.jobs, help="parallel arms")

    sub.add_parser("bench", parents=[common], help="parameter, FLOP and throughput table")

    verify = sub.add_parser("verify", help="run the self-check battery")
    verify.add_argument("--cases", type=int, default=5, help="random cases per gradient check")
    verify.add_argument("--inject-fault", choices=KNOWN_FAULTS, default=None, help=argparse.SUPPRESS)
    return parser


async def run_command(args: argparse.Namespace) -> None:
    """Dispatch a parsed command to its handler."""
    if args.command == "verify":
        await VerifyHandler(cases=args.cases).verify_command(fault=args.inject_fault)
        return

    config = load_experiment_config(args.config, {"seed": args.seed})
    experiment = ExperimentDir(resolve_output_dir(config, args.out), config, force=args.force)

    async with experiment.running(args.command):
        if args.command == "gen":
            await GenHandler(experiment).gen_command()
        elif args.command == "pipeline":
            await PipelineHandler(experiment).pipeline_command(
                generate=args.gen, predistill=not args.no_predistill, compare=args.compare
            )
        elif args.command == "ablate":
            modes = (False,) if args.no_predistill else (True, False)
            await AblateHandler(experiment).ablate_command(args.lambdas, modes, jobs=args.jobs)
        elif args.command == "bench":
            await BenchHandler(experiment).bench_command()


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit code."""
    setup_logging()
    logger = logging.getLogger(__name__)
    args = build_parser().parse_args(argv)

    try:
        asyncio.run(run_command(args))
    except ConfigError as e:
        logger.error(f"Config error: {e.message}")
        return EXIT_CONFIG
    except ArtifactMissingError as e:
        logger.error(f"Missing artifact: {e.message}")
        return EXIT_MISSING
    except VerificationFailed as e:
        logger.error(f"Verification failed: {e.message}")
        return EXIT_VERIFY
    except (DatasetFormatError, CheckpointError) as e:
        logger.error(f"Unreadable artifact: {e.message}")
        return EXIT_IO
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except (GenerationError, NumericsError) as e:
        logger.error(f"Run failed: {e.message}")
        return EXIT_IO
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
