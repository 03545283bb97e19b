import struct

import numpy as np
import pytest

from modules.checkpoint import (
    Checkpoint,
    checkpoint_name,
    decode_checkpoint,
    encode_checkpoint,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from modules.errors import CheckpointError


def _ckpt() -> Checkpoint:
    arrays = {
        "G1/stem.conv.weight": np.arange(24, dtype=np.float32).reshape(2, 1, 3, 4),
        "adam/G1/stem.conv.weight/m": np.full((2, 1, 3, 4), 0.5, dtype=np.float32),
        "pool/D1/0000": np.zeros((1, 4, 4), dtype=np.float32),
    }
    meta = {"stage": 1, "step": 12, "adam": {"G1": {"t": 12, "lr": 0.0002}}}
    return Checkpoint("ab" * 32, 3, "SYNSEG", arrays, meta)


def test_encode_decode_preserves_everything() -> None:
    ckpt = _ckpt()
    payload = encode_checkpoint(ckpt)
    assert payload[:4] == b"SSN1"
    back = decode_checkpoint(payload)
    assert (back.config_hash, back.epoch, back.variant) == (ckpt.config_hash, 3, "SYNSEG")
    assert back.meta == ckpt.meta
    for name, arr in ckpt.arrays.items():
        np.testing.assert_array_equal(back.arrays[name], arr)
    assert encode_checkpoint(back) == payload


def test_groups() -> None:
    ckpt = _ckpt()
    assert list(ckpt.group("G1")) == ["stem.conv.weight"]
    assert ckpt.has_group("pool/D1")
    assert not ckpt.has_group("G2")


def test_corrupt_payloads_are_rejected() -> None:
    payload = encode_checkpoint(_ckpt())
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + payload[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(payload[:4] + struct.pack("<I", 2) + payload[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(payload[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(payload + b"\x00")


def test_files_and_listing(tmp_path) -> None:
    for epoch, stage in ((2, ""), (10, ""), (1, "stage1")):
        ckpt = _ckpt()
        ckpt.epoch = epoch
        save_checkpoint(tmp_path / checkpoint_name(epoch, stage), ckpt)
    assert [p.name for p in list_checkpoints(tmp_path)] == ["epoch_0002.ckpt", "epoch_0010.ckpt"]
    assert [p.name for p in list_checkpoints(tmp_path, "stage1")] == ["stage1_epoch_0001.ckpt"]
    assert load_checkpoint(tmp_path / "epoch_0010.ckpt").epoch == 10
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
