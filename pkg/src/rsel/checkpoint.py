"""Binary checkpoint container.

Layout: magic ``RSEL``, format version, vocabulary fingerprint, a kind tag
("encoder", "map", ...), a canonical JSON config blob, then named
little-endian float32 tensors with shapes. Serialization is canonical
(tensors sorted by name, compact JSON) so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .hashing import Fingerprinter
from .numerics import ParamStore

MAGIC = b"RSEL"
FORMAT_VERSION = 1


@dataclasses.dataclass
class Checkpoint:
    kind: str
    config: dict
    params: ParamStore
    vocab_fingerprint: int

    def fingerprint(self) -> int:
        """Content hash over kind, config, vocabulary and all tensors."""
        fp = Fingerprinter()
        fp.update(self.kind)
        fp.update(_canonical_json(self.config))
        fp.update(struct.pack("<Q", self.vocab_fingerprint))
        for name in sorted(self.params.names()):
            value = self.params[name].value
            fp.update(name)
            fp.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return fp.digest()


def _canonical_json(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def _write_str(out: list[bytes], s: str) -> None:
    data = s.encode("utf-8")
    out.append(struct.pack("<I", len(data)))
    out.append(data)


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict,
    params: ParamStore,
    vocab_fingerprint: int,
) -> None:
    chunks: list[bytes] = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, vocab_fingerprint)]
    _write_str(chunks, kind)
    _write_str(chunks, _canonical_json(config))
    names = sorted(params.names())
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        value = params[name].value
        _write_str(chunks, name)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes(), str(path))
    if reader.take(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    vocab_fingerprint = reader.u64()
    kind = reader.string()
    config = json.loads(reader.string())
    params = ParamStore()
    for _ in range(reader.u32()):
        name = reader.string()
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = reader.take(4 * count)
        value = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        params.add(name, value)
    if reader.pos != len(reader.data):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(
        kind=kind, config=config, params=params, vocab_fingerprint=vocab_fingerprint
    )
