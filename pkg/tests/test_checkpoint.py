"""Tests for the binary checkpoint format."""

import json
import struct

import numpy as np
import pytest

from src.config import EncoderSpec
from src.numerics.rng import Rng
from src.services import checkpoint as ckpt_io
from src.services.encoders import EncoderParams, init_params


def make_checkpoint(seed: int = 0) -> ckpt_io.Checkpoint:
    spec = EncoderSpec(name="student", input_dim=4, hidden=(5,), output_dim=3)
    return ckpt_io.Checkpoint(
        params=init_params(spec, Rng(seed)),
        stage="vlcd",
        seed=seed,
        epoch=2,
        config_hash="ab" * 32,
        config={"lambda": 1.0},
        loss_digest=ckpt_io.loss_digest([{"epoch": 0, "loss": 1.5}]),
        init="predistill",
        extra={"lambda": 1.0},
    )


def test_save_load_save_is_byte_identical(tmp_path):
    original = make_checkpoint()
    first = ckpt_io.save_checkpoint(original, tmp_path / "a.ckpt")
    loaded = ckpt_io.load_checkpoint(first)
    second = ckpt_io.save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert first.read_bytes() == second.read_bytes()
    for a, b in zip(original.params.tensors(), loaded.params.tensors()):
        assert a.tobytes() == b.tobytes()


def test_metadata_is_preserved():
    loaded = ckpt_io.from_bytes(ckpt_io.to_bytes(make_checkpoint(3)))
    assert loaded.stage == "vlcd" and loaded.seed == 3 and loaded.epoch == 2
    assert loaded.init == "predistill"
    assert loaded.config == {"lambda": 1.0}
    assert loaded.spec == make_checkpoint().spec
    assert loaded.loss_digest == ckpt_io.loss_digest([{"epoch": 0, "loss": 1.5}])


def test_loss_digest_depends_on_history():
    assert ckpt_io.loss_digest([{"loss": 1.0}]) != ckpt_io.loss_digest([{"loss": 1.0000001}])


def test_bad_magic_rejected():
    raw = ckpt_io.to_bytes(make_checkpoint())
    with pytest.raises(ckpt_io.BadMagicError):
        ckpt_io.from_bytes(b"XXXX" + raw[4:])


def test_truncated_checkpoint_rejected():
    raw = ckpt_io.to_bytes(make_checkpoint())
    for cut in (2, 10, len(raw) - 8):
        with pytest.raises(ckpt_io.TruncatedCheckpointError):
            ckpt_io.from_bytes(raw[:cut])


def test_unsupported_version_rejected():
    raw = ckpt_io.to_bytes(make_checkpoint())
    magic, _, length = struct.unpack_from("<4sIQ", raw)
    repacked = struct.pack("<4sIQ", magic, 2, length) + raw[struct.calcsize("<4sIQ"):]
    with pytest.raises(ckpt_io.UnsupportedVersionError):
        ckpt_io.from_bytes(repacked)


def test_trailing_bytes_rejected():
    raw = ckpt_io.to_bytes(make_checkpoint())
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.from_bytes(raw + b"\x00" * 8)


def test_shape_chain_mismatch_rejected():
    declared = EncoderSpec(name="student", input_dim=4, hidden=(5,), output_dim=3)
    actual = init_params(EncoderSpec(name="other", input_dim=4, hidden=(6,), output_dim=3), Rng(0))
    broken = ckpt_io.Checkpoint(
        params=EncoderParams(spec=declared, weights=actual.weights, biases=actual.biases),
        stage="teacher", seed=0, epoch=0, config_hash="00" * 32,
    )
    with pytest.raises(ckpt_io.ShapeChainError):
        ckpt_io.from_bytes(ckpt_io.to_bytes(broken))


def test_loaded_params_can_seed_further_training(tmp_path):
    original = make_checkpoint(5)
    path = ckpt_io.save_checkpoint(original, tmp_path / "predistill.ckpt")
    start = ckpt_io.load_checkpoint(path).params.copy()
    start.weights[0][0, 0] += 1.0
    reloaded = ckpt_io.load_checkpoint(path)
    np.testing.assert_array_equal(reloaded.params.weights[0], original.params.weights[0])


def with_metadata(raw: bytes, edit) -> bytes:
    """Checkpoint bytes with the metadata JSON replaced by edit(metadata)."""
    magic, version, length = struct.unpack_from("<4sIQ", raw)
    start = struct.calcsize("<4sIQ")
    metadata = edit(json.loads(raw[start:start + length]))
    encoded = json.dumps(metadata).encode("utf-8")
    return struct.pack("<4sIQ", magic, version, len(encoded)) + encoded + raw[start + length:]


def drop(key):
    def edit(metadata):
        del metadata[key]
        return metadata
    return edit


@pytest.mark.parametrize("edit", [
    drop("stage"),
    drop("seed"),
    drop("tensors"),
    lambda metadata: list(metadata.items()),
    lambda metadata: "vlcd",
    lambda metadata: {**metadata, "epoch": "late"},
    lambda metadata: {**metadata, "tensors": [{"name": "layers.0.weight"}]},
    lambda metadata: {**metadata, "tensors": [{"name": "layers.0.weight", "shape": [-4, 5]}]},
])
def test_malformed_metadata_raises_checkpoint_error(edit):
    raw = with_metadata(ckpt_io.to_bytes(make_checkpoint()), edit)
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.from_bytes(raw)


def test_unknown_metadata_keys_are_ignored():
    raw = with_metadata(ckpt_io.to_bytes(make_checkpoint(4)), lambda metadata: {**metadata, "note": "x"})
    assert ckpt_io.from_bytes(raw).seed == 4
