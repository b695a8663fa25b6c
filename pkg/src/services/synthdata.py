"""Seeded synthetic world and the four experiment datasets.

Every dataset is a pure function of (WorldConfig, n): the generative
parameters come from the world stream and each dataset draws from its
own named sub-stream, so datasets can be generated in any order.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, ValidationError
from scipy.spatial.distance import cdist

from src.config import DEGRADED_TASKS, TASK_NAMES, TASK_POSITIVE_RATES, WorldConfig, config_hash
from src.numerics.rng import Rng
from src.numerics.tensor import ContractError, DegenerateLabelError, unit_rows

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
DATA_NAME = "data.bin"

POSITIVE_RATE_RANGE = (0.2, 0.8)
CALIBRATION_SAMPLES = 8192
MAX_ATTEMPTS = 8
SPLIT_ATTEMPTS = 32
AUGMENT_SCALE = (0.95, 1.05)

# Directory names under datasets/; the two holdouts reuse the pretrain and unlabeled kinds
DATASET_NAMES = ("pretrain", "holdout", "unlabeled", "unlabeled-holdout", "finetune", "degraded")

_DTYPES = {"<f8": np.dtype("<f8"), "u1": np.dtype("u1")}


class GenerationError(Exception):
    """Raised when a dataset cannot satisfy its generation checks."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


class DatasetFormatError(Exception):
    """Raised for unreadable or inconsistent dataset files."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


@dataclass
class World:
    """Generative parameters shared by every dataset of one configuration."""
    config: WorldConfig
    prototypes: np.ndarray
    mixing: np.ndarray
    text_prototypes: np.ndarray
    text_mixing: np.ndarray
    task_weights: np.ndarray
    thresholds: np.ndarray
    distortion: np.ndarray
    distortion_shift: np.ndarray

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def reconstruct(self, concepts: np.ndarray, attributes: np.ndarray) -> np.ndarray:
        """Noise-free image: concept prototype plus attribute mixing."""
        return self.prototypes[concepts] + attributes @ self.mixing

    def text_features(self, concepts: np.ndarray, attributes: np.ndarray) -> np.ndarray:
        """Unit text features: concept direction perturbed by the attributes."""
        w = self.config.text_attribute_weight
        return unit_rows(self.text_prototypes[concepts] + w * (attributes @ self.text_mixing))

    def task_scores(self, attributes: np.ndarray) -> np.ndarray:
        return attributes @ self.task_weights.T

    def task_labels(self, attributes: np.ndarray) -> np.ndarray:
        """Binary labels for all tasks, one column per task."""
        return (self.task_scores(attributes) > self.thresholds).astype(np.uint8)


@dataclass
class Dataset:
    """One generated dataset; optional blocks are None when absent."""
    kind: str
    x: np.ndarray
    seed: int
    config_hash: str
    v: Optional[np.ndarray] = None
    concepts: Optional[np.ndarray] = None
    attributes: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    tasks: Tuple[int, ...] = ()

    @property
    def count(self) -> int:
        return self.x.shape[0]

    @property
    def image_dim(self) -> int:
        return self.x.shape[1]

    def task_labels(self, task: int) -> np.ndarray:
        """Labels of one task index as a 0/1 vector."""
        if self.labels is None or task not in self.tasks:
            raise ContractError(f"{self.kind} dataset has no labels for task {task}")
        return self.labels[:, self.tasks.index(task)]


@dataclass
class Split:
    """Sorted train and test indices of one random split."""
    train: np.ndarray
    test: np.ndarray


class BlockSpec(BaseModel):
    name: str
    dtype: Literal["<f8", "u1"]
    shape: List[NonNegativeInt] = Field(min_length=1)
    offset: NonNegativeInt
    nbytes: NonNegativeInt


class Manifest(BaseModel):
    """Description of a dataset's binary layout and provenance."""
    model_config = ConfigDict(extra="ignore")

    kind: Literal["pretrain", "unlabeled", "finetune", "degraded"]
    count: NonNegativeInt
    image_dim: NonNegativeInt
    text_dim: NonNegativeInt
    seed: int
    config_hash: str
    tasks: List[NonNegativeInt] = []
    blocks: List[BlockSpec]
    data_file: str = DATA_NAME
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        payload = self.model_dump()
        payload["task_names"] = [TASK_NAMES[t] for t in self.tasks]
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def build_world(cfg: WorldConfig) -> World:
    """Draw prototypes, mixing matrices, task directions and thresholds."""
    if cfg.seed is None:
        raise ContractError("world seed must be resolved before generation")
    rng = Rng(cfg.seed).spawn("world")
    k, d_img, d_txt, n_attr = cfg.concepts, cfg.image_dim, cfg.text_dim, cfg.attributes

    prototypes = rng.normal((k, d_img))
    mixing = rng.normal((n_attr, d_img), scale=cfg.attribute_scale / np.sqrt(n_attr))
    text_prototypes = unit_rows(rng.normal((k, d_txt)))
    text_mixing = unit_rows(rng.normal((n_attr, d_txt))) / np.sqrt(n_attr)

    # each task is led by its own attribute with small contributions from the rest
    task_weights = 0.25 * rng.normal((len(TASK_NAMES), n_attr))
    task_weights[np.arange(len(TASK_NAMES)), np.arange(len(TASK_NAMES))] = 1.0
    task_weights = unit_rows(task_weights)

    gaussian = rng.normal((d_img, d_img), scale=1.0 / np.sqrt(d_img))
    distortion = np.eye(d_img) + 0.1 * gaussian
    distortion_shift = 0.1 * rng.normal((1, d_img))

    calibration = Rng(cfg.seed).spawn("calibration").normal((CALIBRATION_SAMPLES, n_attr))
    scores = calibration @ task_weights.T
    thresholds = np.array([
        np.quantile(scores[:, task], 1.0 - rate) for task, rate in enumerate(TASK_POSITIVE_RATES)
    ])

    return World(
        config=cfg,
        prototypes=prototypes,
        mixing=mixing,
        text_prototypes=text_prototypes,
        text_mixing=text_mixing,
        task_weights=task_weights,
        thresholds=thresholds,
        distortion=distortion,
        distortion_shift=distortion_shift,
    )


def _draw(world: World, rng: Rng, n: int, concept_count: int, noise_std: float):
    concepts = rng.integers(0, concept_count, n)
    attributes = rng.normal((n, world.config.attributes))
    clean = world.reconstruct(concepts, attributes)
    x = clean + rng.normal((n, world.config.image_dim), scale=noise_std)
    return concepts, attributes, clean, x


def _require_count(op: str, n: int, minimum: int) -> None:
    if n < minimum:
        raise ContractError(f"{op}: n must be >= {minimum}, got {n}")


def _rates_ok(labels: np.ndarray) -> bool:
    rates = labels.mean(axis=0)
    low, high = POSITIVE_RATE_RANGE
    return bool(np.all((rates >= low) & (rates <= high)))


def gen_pretrain_pairs(cfg: WorldConfig, n: int, stream: str = "pretrain",
                       world: Optional[World] = None) -> Dataset:
    """Image/text pairs with unit text features."""
    _require_count("gen_pretrain_pairs", n, 1)
    world = world or build_world(cfg)
    rng = Rng(cfg.seed).spawn(stream)
    concepts, attributes, _, x = _draw(world, rng, n, cfg.concepts, cfg.noise_std)
    v = world.text_features(concepts, attributes)
    logger.info(f"Generated {n} image-text pairs from stream '{stream}'")
    return Dataset(
        kind="pretrain", x=x, v=v, concepts=concepts, attributes=attributes,
        seed=cfg.seed, config_hash=world.hash,
    )


def unlabeled_prototypes(cfg: WorldConfig, world: World) -> np.ndarray:
    """Fresh concept prototypes, redrawn until far from the pretrain ones."""
    threshold = 0.5 * np.sqrt(2.0 * cfg.image_dim)
    for attempt in range(MAX_ATTEMPTS):
        rng = Rng(cfg.seed).spawn(f"unlabeled-world/{attempt}")
        candidates = rng.normal((cfg.unlabeled_concepts, cfg.image_dim), loc=0.5)
        distance = float(cdist(candidates, world.prototypes).min())
        if distance > threshold:
            return candidates
        logger.warning(f"Unlabeled prototypes too close to pretrain ones (min distance {distance:.3f}), redrawing")
    raise GenerationError(f"could not draw disjoint unlabeled prototypes in {MAX_ATTEMPTS} attempts")


def gen_unlabeled_corpus(cfg: WorldConfig, n: int, stream: str = "unlabeled",
                         world: Optional[World] = None) -> Dataset:
    """Images from a disjoint concept set; no text and no labels."""
    _require_count("gen_unlabeled_corpus", n, 1)
    world = world or build_world(cfg)
    prototypes = unlabeled_prototypes(cfg, world)
    rng = Rng(cfg.seed).spawn(stream)
    concepts = rng.integers(0, cfg.unlabeled_concepts, n)
    attributes = rng.normal((n, cfg.attributes))
    x = prototypes[concepts] + attributes @ world.mixing
    x = x + rng.normal((n, cfg.image_dim), scale=cfg.noise_std)
    logger.info(f"Generated {n} unlabeled images over {cfg.unlabeled_concepts} fresh concepts")
    return Dataset(kind="unlabeled", x=x, concepts=concepts, seed=cfg.seed, config_hash=world.hash)


def gen_finetune_labeled(cfg: WorldConfig, n: int, world: Optional[World] = None) -> Dataset:
    """Images labeled for every task, positive rates kept in range."""
    _require_count("gen_finetune_labeled", n, 10)
    world = world or build_world(cfg)
    for attempt in range(MAX_ATTEMPTS):
        rng = Rng(cfg.seed).spawn(f"finetune/{attempt}")
        concepts, attributes, _, x = _draw(world, rng, n, cfg.concepts, cfg.noise_std)
        labels = world.task_labels(attributes)
        if _rates_ok(labels):
            logger.info(f"Generated {n} labeled images (positive rates {np.round(labels.mean(axis=0), 3).tolist()})")
            return Dataset(
                kind="finetune", x=x, v=world.text_features(concepts, attributes), concepts=concepts,
                attributes=attributes, labels=labels, tasks=tuple(range(len(TASK_NAMES))),
                seed=cfg.seed, config_hash=world.hash,
            )
        logger.warning(f"Finetune attempt {attempt} missed the positive-rate range, redrawing")
    raise GenerationError(f"finetune labels out of range {POSITIVE_RATE_RANGE} after {MAX_ATTEMPTS} attempts")


def reconstruction_error(x: np.ndarray, reference: np.ndarray) -> float:
    """Mean squared residual per coordinate."""
    return float(np.mean((x - reference) ** 2))


def gen_degraded_set(cfg: WorldConfig, n: int, world: Optional[World] = None) -> Dataset:
    """Noisier, affinely distorted captures labeled for the degraded tasks only."""
    _require_count("gen_degraded_set", n, 10)
    if cfg.degraded_noise_std <= cfg.noise_std:
        raise ContractError("degraded_noise_std must exceed noise_std")
    world = world or build_world(cfg)
    columns = list(DEGRADED_TASKS)

    for attempt in range(MAX_ATTEMPTS):
        rng = Rng(cfg.seed).spawn(f"degraded/{attempt}")
        concepts, attributes, clean, x = _draw(world, rng, n, cfg.concepts, cfg.degraded_noise_std)
        x = x @ world.distortion + world.distortion_shift
        labels = world.task_labels(attributes)[:, columns]
        if not _rates_ok(labels):
            logger.warning(f"Degraded attempt {attempt} missed the positive-rate range, redrawing")
            continue

        reference_rng = Rng(cfg.seed).spawn("degraded-validation")
        _, _, ref_clean, ref_x = _draw(world, reference_rng, max(n, 200), cfg.concepts, cfg.noise_std)
        clean_error = reconstruction_error(ref_x, ref_clean)
        degraded_error = reconstruction_error(x, clean)
        if degraded_error <= clean_error:
            raise GenerationError(
                f"degraded reconstruction error {degraded_error:.4f} not above clean {clean_error:.4f}"
            )
        logger.info(f"Generated {n} degraded images (reconstruction error {degraded_error:.3f} vs {clean_error:.3f})")
        return Dataset(
            kind="degraded", x=x, v=world.text_features(concepts, attributes), concepts=concepts,
            attributes=attributes, labels=labels, tasks=tuple(columns),
            seed=cfg.seed, config_hash=world.hash,
        )
    raise GenerationError(f"degraded labels out of range {POSITIVE_RATE_RANGE} after {MAX_ATTEMPTS} attempts")


def augment(x: np.ndarray, rng: Rng, sigma: float,
            scale_range: Optional[Tuple[float, float]] = AUGMENT_SCALE) -> np.ndarray:
    """Gaussian jitter then a per-sample uniform scale; ``scale_range=None`` skips scaling."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ContractError("augment: input must be finite")
    out = x + rng.normal(x.shape, scale=sigma) if sigma > 0 else x.copy()
    if scale_range is not None:
        low, high = scale_range
        factors = low + (high - low) * rng.uniform(x.shape[0])
        out = out * factors[:, None]
    return out


def _has_both_classes(labels: np.ndarray, indices: np.ndarray) -> bool:
    subset = labels[indices]
    return bool(np.all(subset.min(axis=0) == 0) and np.all(subset.max(axis=0) == 1))


def split_random(count: int, k: int = 5, seed: int = 0, test_fraction: float = 0.2,
                 labels: Optional[np.ndarray] = None) -> List[Split]:
    """k independent train/test splits of range(count).

    With ``labels`` (n x tasks), a split whose train or test part misses a
    class of any task is redrawn from the same stream.
    """
    if count < 2 * k:
        raise ContractError(f"split_random: need at least {2 * k} samples for {k} splits, got {count}")
    n_test = min(count - 1, max(1, int(round(count * test_fraction))))
    rng = Rng(seed).spawn("split")
    splits = []
    for split_id in range(k):
        for _ in range(SPLIT_ATTEMPTS):
            order = rng.permutation(count)
            split = Split(train=np.sort(order[n_test:]), test=np.sort(order[:n_test]))
            if labels is None or (_has_both_classes(labels, split.train) and _has_both_classes(labels, split.test)):
                break
        else:
            raise DegenerateLabelError(f"split {split_id}: no split with both classes in {SPLIT_ATTEMPTS} draws")
        splits.append(split)
    return splits


def generate(name: str, cfg: WorldConfig, sizes, world: Optional[World] = None) -> Dataset:
    """Generate one named dataset (see DATASET_NAMES)."""
    world = world or build_world(cfg)
    if name == "pretrain":
        return gen_pretrain_pairs(cfg, sizes.pretrain, world=world)
    if name == "holdout":
        return gen_pretrain_pairs(cfg, sizes.holdout, stream="holdout", world=world)
    if name == "unlabeled":
        return gen_unlabeled_corpus(cfg, sizes.unlabeled, world=world)
    if name == "unlabeled-holdout":
        return gen_unlabeled_corpus(cfg, sizes.holdout, stream="unlabeled-holdout", world=world)
    if name == "finetune":
        return gen_finetune_labeled(cfg, sizes.finetune, world=world)
    if name == "degraded":
        return gen_degraded_set(cfg, sizes.degraded, world=world)
    raise ContractError(f"unknown dataset: {name}")


def _blocks(dataset: Dataset) -> List[Tuple[str, str, np.ndarray]]:
    blocks = [("x", "<f8", dataset.x)]
    if dataset.v is not None:
        blocks.append(("v", "<f8", dataset.v))
    if dataset.concepts is not None:
        blocks.append(("concepts", "<f8", np.asarray(dataset.concepts, dtype=np.float64)[:, None]))
    if dataset.attributes is not None:
        blocks.append(("attributes", "<f8", dataset.attributes))
    if dataset.labels is not None:
        blocks.append(("labels", "u1", dataset.labels))
    return blocks


def write_dataset(dataset: Dataset, directory: Path) -> Path:
    """Write manifest.json and data.bin; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    specs, chunks, offset = [], [], 0
    for name, dtype, array in _blocks(dataset):
        raw = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        specs.append(BlockSpec(name=name, dtype=dtype, shape=list(array.shape), offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)

    manifest = Manifest(
        kind=dataset.kind,
        count=dataset.count,
        image_dim=dataset.image_dim,
        text_dim=0 if dataset.v is None else dataset.v.shape[1],
        seed=dataset.seed,
        config_hash=dataset.config_hash,
        tasks=list(dataset.tasks),
        blocks=specs,
    )
    (directory / DATA_NAME).write_bytes(b"".join(chunks))
    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(manifest.to_json(), encoding="utf-8")
    logger.debug(f"Wrote {dataset.kind} dataset to {directory} ({offset} bytes)")
    return manifest_path


def read_manifest(directory: Path) -> Manifest:
    path = Path(directory) / MANIFEST_NAME
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: invalid JSON ({e.msg})")
    if not isinstance(payload, dict):
        raise DatasetFormatError(f"{path}: manifest must be a JSON object")
    if payload.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {payload.get('format_version')}")
    try:
        return Manifest.model_validate(payload)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise DatasetFormatError(f"{path}: malformed manifest ({problems})")


def read_dataset(directory: Path, expected_hash: Optional[str] = None) -> Dataset:
    """Load a dataset, validating sizes, counts and (optionally) the config hash."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if expected_hash is not None and manifest.config_hash != expected_hash:
        raise DatasetFormatError(f"{directory}: generated under config {manifest.config_hash[:12]}, "
                                 f"expected {expected_hash[:12]}")

    raw = (directory / manifest.data_file).read_bytes()
    declared = sum(block.nbytes for block in manifest.blocks)
    if declared != len(raw):
        raise DatasetFormatError(f"{directory}: data file has {len(raw)} bytes, manifest declares {declared}")

    arrays = {}
    for block in manifest.blocks:
        dtype = _DTYPES[block.dtype]
        shape = tuple(block.shape)
        if shape[0] != manifest.count:
            raise DatasetFormatError(f"{directory}: block {block.name} has {shape[0]} rows, count is {manifest.count}")
        chunk = raw[block.offset:block.offset + block.nbytes]
        if len(chunk) != int(np.prod(shape)) * dtype.itemsize:
            raise DatasetFormatError(f"{directory}: block {block.name} size does not match its shape")
        arrays[block.name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(
            np.float64 if dtype.kind == "f" else np.uint8
        )

    if "x" not in arrays:
        raise DatasetFormatError(f"{directory}: missing image block")
    concepts = arrays.get("concepts")
    return Dataset(
        kind=manifest.kind,
        x=arrays["x"],
        v=arrays.get("v"),
        concepts=None if concepts is None else concepts[:, 0].astype(np.int64),
        attributes=arrays.get("attributes"),
        labels=arrays.get("labels"),
        tasks=tuple(manifest.tasks),
        seed=manifest.seed,
        config_hash=manifest.config_hash,
    )
