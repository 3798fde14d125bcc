"""Binary checkpoint container for model parameters, vocabularies and run metadata.

Layout (all integers little-endian)::

    b"GGDCKPT1"
    config      u32 length + UTF-8 JSON (dims, vocab sizes, seed, init scale)
    src vocab   u8 present flag, then u32 length + UTF-8 newline-joined tokens
    tgt vocab   same as the source vocabulary
    metadata    u32 length + UTF-8 JSON
    tensors     u32 count, then per tensor in declared order:
                u32 name length + name, u32 ndim, ndim x u64 dims, f64 data

JSON blocks are written with sorted keys and no whitespace so a
load/save round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocab
from .model import ModelConfig, ModelParams, _param_shapes

MAGIC = b"GGDCKPT1"


class CheckpointError(ValueError):
    """Unreadable, truncated or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    params: ModelParams
    src_vocab: Vocab | None = None
    tgt_vocab: Vocab | None = None
    metadata: dict = field(default_factory=dict)


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_block(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _write_vocab(fh, vocab: Vocab | None) -> None:
    if vocab is None:
        fh.write(b"\x00")
        return
    fh.write(b"\x01")
    _write_block(fh, "\n".join(vocab.tokens).encode("utf-8"))


def to_bytes(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    _write_block(fh, _dump_json(ckpt.params.config.to_dict()))
    _write_vocab(fh, ckpt.src_vocab)
    _write_vocab(fh, ckpt.tgt_vocab)
    _write_block(fh, _dump_json(ckpt.metadata))
    fh.write(struct.pack("<I", len(ckpt.params.tensors)))
    for name, t in ckpt.params.tensors.items():
        _write_block(fh, name.encode("utf-8"))
        fh.write(struct.pack("<I", t.data.ndim))
        fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return fh.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def json(self):
        try:
            return json.loads(self.block().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt JSON block: {exc}") from None

    def vocab(self) -> Vocab | None:
        flag = self.take(1)
        if flag == b"\x00":
            return None
        if flag != b"\x01":
            raise CheckpointError("corrupt vocabulary flag")
        text = self.block().decode("utf-8")
        return Vocab(text.split("\n") if text else [])


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = buf[: len(MAGIC)]
    r.pos = len(MAGIC)
    if magic != MAGIC:
        raise CheckpointError(f"unknown checkpoint magic/version {magic!r}")
    try:
        config = ModelConfig(**r.json())
    except TypeError as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    src_vocab, tgt_vocab = r.vocab(), r.vocab()
    metadata = r.json()
    expected = _param_shapes(config)
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"expected {len(expected)} tensors, found {count}")
    arrays = {}
    for name, shape in expected:
        got = r.block().decode("utf-8")
        if got != name:
            raise CheckpointError(f"expected tensor {name!r}, found {got!r}")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q")
        if tuple(dims) != shape:
            raise CheckpointError(f"{name}: shape {dims} does not match config {shape}")
        n = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    for vocab, size, side in ((src_vocab, config.src_vocab, "source"), (tgt_vocab, config.tgt_vocab, "target")):
        if vocab is not None and len(vocab) != size:
            raise CheckpointError(f"{side} vocabulary has {len(vocab)} entries, config says {size}")
    params = ModelParams.initialize(config)
    params.load_arrays(arrays)
    return Checkpoint(params, src_vocab, tgt_vocab, metadata)


def save_checkpoint(path, params: ModelParams, src_vocab=None, tgt_vocab=None, metadata=None) -> None:
    Path(path).write_bytes(to_bytes(Checkpoint(params, src_vocab, tgt_vocab, dict(metadata or {}))))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(buf)
