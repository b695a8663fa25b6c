"""Parameter, FLOP and CPU-throughput comparison of encoders against the teacher."""

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from src.numerics.rng import Rng
from src.numerics.tensor import ContractError
from src.services.encoders import EncoderParams, count_params, estimate_flops, infer
from src.utils.formatting import divided, times

logger = logging.getLogger(__name__)

INNER_CALLS = 20
CSV_FIELDS = [
    "model", "params", "flops", "throughput", "param_ratio", "flops_ratio", "speedup",
    "param_note", "flops_note", "speed_note", "config_hash", "seed",
]


@dataclass
class BenchEntry:
    """Absolute measurements of one encoder plus ratios versus the teacher."""
    model: str
    params: int
    flops: int
    throughput: float
    timings: List[float] = field(default_factory=list)
    param_ratio: float = 1.0
    flops_ratio: float = 1.0
    speedup: float = 1.0

    def annotate(self, reference: "BenchEntry") -> None:
        self.param_ratio = reference.params / self.params
        self.flops_ratio = reference.flops / self.flops
        self.speedup = self.throughput / reference.throughput

    def row(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "params": self.params,
            "flops": self.flops,
            "throughput": self.throughput,
            "param_ratio": self.param_ratio,
            "flops_ratio": self.flops_ratio,
            "speedup": self.speedup,
            "param_note": divided(self.param_ratio),
            "flops_note": divided(self.flops_ratio),
            "speed_note": times(self.speedup),
        }


@dataclass
class BenchReport:
    """Teacher first, then every student."""
    entries: List[BenchEntry]
    batch: int
    repeats: int
    config_hash: str = ""
    seed: int = 0

    def to_json(self) -> str:
        payload = {
            "batch": self.batch,
            "repeats": self.repeats,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "models": [entry.row() for entry in self.entries],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for entry in self.entries:
            row = {key: repr(value) if isinstance(value, float) else value for key, value in entry.row().items()}
            writer.writerow({**row, "config_hash": self.config_hash, "seed": self.seed})
        return buffer.getvalue()


def bench_model(params: EncoderParams, batch: int, repeats: int, rng: Optional[Rng] = None) -> BenchEntry:
    """Median throughput over ``repeats`` timed runs of INNER_CALLS forward passes."""
    if repeats < 3:
        raise ContractError(f"bench_model needs repeats >= 3, got {repeats}")
    if batch < 1:
        raise ContractError(f"bench_model needs batch >= 1, got {batch}")
    spec = params.spec
    rng = rng or Rng(0).spawn("bench")
    x = rng.normal((batch, spec.input_dim))

    infer(params, x)
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(INNER_CALLS):
            infer(params, x)
        timings.append(time.perf_counter() - start)

    median = float(np.median(timings))
    throughput = batch * INNER_CALLS / median
    logger.info(f"{spec.name}: {count_params(spec)} params, {throughput:.0f} samples/s at batch {batch}")
    return BenchEntry(
        model=spec.name,
        params=count_params(spec),
        flops=estimate_flops(spec, batch),
        throughput=throughput,
        timings=timings,
    )


def build_report(teacher: EncoderParams, students: List[EncoderParams], batch: int, repeats: int,
                 seed: int = 0, config_hash: str = "") -> BenchReport:
    """Benchmark the teacher and each student on the same input batch."""
    entries = []
    for params in [teacher, *students]:
        entries.append(bench_model(params, batch, repeats, Rng(seed).spawn("bench")))
    reference = entries[0]
    for entry in entries:
        entry.annotate(reference)
    return BenchReport(entries=entries, batch=batch, repeats=repeats, config_hash=config_hash, seed=seed)
