import numpy as np
import pytest

from lancer.checkpoint import Checkpoint, file_hash, load_checkpoint, save_checkpoint
from lancer.errors import CheckpointError


def make_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        kind="stage1",
        config={"backbone": {"d_model": 8}},
        tensors={
            "a": rng.normal(0, 1, (3, 4)),
            "b": rng.normal(0, 1, 5).astype(np.float32),
        },
        config_hash="deadbeef",
        extra={"note": 1},
    )


def test_save_load_save_identical(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ckpt = make_ckpt()
    save_checkpoint(p1, ckpt)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_tensors_roundtrip_bit_exact(tmp_path):
    path = tmp_path / "a.ckpt"
    ckpt = make_ckpt()
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    for name, arr in ckpt.tensors.items():
        assert loaded.tensors[name].dtype == arr.dtype
        assert np.array_equal(loaded.tensors[name], arr)
    assert loaded.config == ckpt.config
    assert loaded.config_hash == "deadbeef"
    assert loaded.extra == {"note": 1}


def test_truncated_file(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, make_ckpt())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bit_flip_detected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, make_ckpt())
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(path)


def test_version_skew(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, make_ckpt())
    blob = bytearray(path.read_bytes())
    blob[8] = 99  # format version field
    # recompute trailing checksum so only the version is wrong
    import hashlib

    body = bytes(blob[:-8])
    path.write_bytes(body + hashlib.blake2b(body, digest_size=8).digest())
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "a.ckpt"
    path.write_bytes(b"definitely not a checkpoint file at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_file_hash_stable(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, make_ckpt())
    assert file_hash(path) == file_hash(path)
