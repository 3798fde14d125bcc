import struct

import numpy as np
import pytest

from ggd.checkpoint import MAGIC, Checkpoint, CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from ggd.data import Vocab
from conftest import tiny_params


@pytest.fixture
def ckpt():
    p = tiny_params(src_vocab=6, tgt_vocab=5, seed=2)
    return Checkpoint(p, Vocab(["a", "b", "c"]), Vocab(["x", "y"]), {"update": 7, "tau": 0.5})


def test_save_load_save_is_byte_identical(tmp_path, ckpt):
    save_checkpoint(tmp_path / "a", ckpt.params, ckpt.src_vocab, ckpt.tgt_vocab, ckpt.metadata)
    loaded = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "b", loaded.params, loaded.src_vocab, loaded.tgt_vocab, loaded.metadata)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert loaded.params.config == ckpt.params.config
    assert all(np.array_equal(a.data, b.data) for a, b in zip(loaded.params, ckpt.params))
    assert loaded.src_vocab == ckpt.src_vocab and loaded.tgt_vocab == ckpt.tgt_vocab
    assert loaded.metadata == ckpt.metadata


def test_vocabularies_are_optional(ckpt):
    back = from_bytes(to_bytes(Checkpoint(ckpt.params)))
    assert back.src_vocab is None and back.tgt_vocab is None and back.metadata == {}


def test_loaded_params_are_trainable(ckpt):
    back = from_bytes(to_bytes(ckpt))
    assert all(t.requires_grad for t in back.params)


def test_bad_magic(tmp_path, ckpt):
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "junk")
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"GGDCKPT9" + to_bytes(ckpt)[8:])


def test_every_truncation_is_detected(ckpt):
    buf = to_bytes(ckpt)
    for n in list(range(8, 200)) + list(range(len(buf) - 40, len(buf))):
        with pytest.raises(CheckpointError):
            from_bytes(buf[:n])


def test_trailing_bytes_are_rejected(ckpt):
    with pytest.raises(CheckpointError):
        from_bytes(to_bytes(ckpt) + b"\x00")


def test_vocab_size_must_match_config(ckpt):
    bad = Checkpoint(ckpt.params, Vocab(["a"]), ckpt.tgt_vocab)
    with pytest.raises(CheckpointError):
        from_bytes(to_bytes(bad))


def test_tampered_tensor_shape_is_rejected(ckpt):
    buf = bytearray(to_bytes(ckpt))
    name = b"src_emb"
    at = bytes(buf).index(name) + len(name)
    ndim = struct.unpack_from("<I", buf, at)[0]
    assert ndim == 2
    struct.pack_into("<Q", buf, at + 4, 5)
    with pytest.raises(CheckpointError):
        from_bytes(bytes(buf))


def test_magic_is_first(ckpt):
    assert to_bytes(ckpt).startswith(MAGIC)
