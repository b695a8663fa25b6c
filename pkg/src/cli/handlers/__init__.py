"""CLI subcommand handlers."""

from src.cli.handlers.ablate import AblateHandler
from src.cli.handlers.bench import BenchHandler
from src.cli.handlers.gen import GenHandler
from src.cli.handlers.pipeline import PipelineHandler
from src.cli.handlers.verify import VerifyHandler

__all__ = ["AblateHandler", "BenchHandler", "GenHandler", "PipelineHandler", "VerifyHandler"]
