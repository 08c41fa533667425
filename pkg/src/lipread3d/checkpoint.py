"""Binary checkpoint files with lineage metadata and a trailing checksum.

Layout (all integers little-endian)::

    magic  b"LR3DCKPT"
    u32    format version
    32 B   config digest (SHA-256 of the canonical config JSON)
    u64    parent checksum (0 for a root checkpoint)
    u16    stage-name length, then UTF-8 stage name
    u32    metadata length, then UTF-8 JSON metadata
    u32    entry count
    per entry: u16 name length, UTF-8 name, u8 ndim, u32 extents..., f32 values
    u64    checksum (BLAKE2b, 8-byte digest) of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Union

import numpy as np

from .errors import ContractError, FormatError, ShapeError

MAGIC = b"LR3DCKPT"
FORMAT_VERSION = 1

PathOrFile = Union[str, os.PathLike, BinaryIO]


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def config_digest(config) -> bytes:
    """SHA-256 of the canonical JSON form of ``config`` (a dict or None)."""
    text = json.dumps(config if config is not None else {}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).digest()


@dataclass
class Checkpoint:
    stage: str
    entries: "OrderedDict[str, np.ndarray]"
    config_digest: bytes = b"\0" * 32
    parent: int = 0
    meta: dict = field(default_factory=dict)
    checksum: int = 0
    version: int = FORMAT_VERSION


def encode(state, stage: str = "train", config=None, parent: int = 0, meta: Optional[dict] = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += config_digest(config)
    out += struct.pack("<Q", parent)
    name = stage.encode()
    out += struct.pack("<H", len(name)) + name
    meta = dict(meta or {})
    if config is not None:
        meta.setdefault("config", config)
    blob = json.dumps(meta, sort_keys=True, default=str).encode()
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(state))
    for key, value in state.items():
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"entry {key!r} holds non-finite values")
        k = key.encode()
        out += struct.pack("<H", len(k)) + k
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<Q", checksum64(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if checksum64(body) != stored:
        raise FormatError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    (parent,) = r.unpack("<Q")
    (n,) = r.unpack("<H")
    stage = r.take(n).decode()
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        key = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        entries[key] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise FormatError("trailing bytes after the last entry")
    return Checkpoint(stage, entries, digest, parent, meta, stored, version)


def save_checkpoint(model, sink: PathOrFile, stage: str = "train", config=None, parent: int = 0,
                    meta: Optional[dict] = None) -> int:
    """Write ``model``'s parameters and buffers; returns the file checksum."""
    payload = encode(model.state_dict(), stage, config, parent, meta)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(payload)
    else:
        sink.write(payload)
    return struct.unpack("<Q", payload[-8:])[0]


def read_checkpoint(source: PathOrFile) -> Checkpoint:
    if isinstance(source, (str, os.PathLike)):
        try:
            with open(source, "rb") as fh:
                return decode(fh.read())
        except FileNotFoundError as exc:
            raise FormatError(f"missing checkpoint {source}") from exc
    return decode(source.read())


def load_checkpoint(source: PathOrFile, model=None) -> Checkpoint:
    """Read and verify a checkpoint; when ``model`` is given, load it in place.

    The shape table is compared entry by entry in file order, and the first
    mismatch is reported by name.
    """
    ckpt = read_checkpoint(source)
    if model is not None:
        own = model.state_dict()
        for key, value in ckpt.entries.items():
            if key not in own:
                raise FormatError(f"shape table mismatch: unexpected entry {key!r}")
            if own[key].shape != value.shape:
                raise FormatError(f"shape table mismatch at {key!r}: file {list(value.shape)}, "
                                  f"model {list(own[key].shape)}")
        missing = [k for k in own if k not in ckpt.entries]
        if missing:
            raise FormatError(f"shape table mismatch: model entry {missing[0]!r} absent from file")
        try:
            model.load_state_dict(ckpt.entries)
        except ShapeError as exc:  # pragma: no cover - guarded above
            raise FormatError(str(exc)) from exc
    return ckpt
