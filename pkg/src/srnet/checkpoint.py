"""Binary checkpoint container.

Layout (little-endian)::

    b"SRNT" | u32 version
    u32 n_params, then per parameter:
        u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f32 data[prod(dims)]
    u32 n_masks, then per mask:
        u32 name_len | name | u32 rank | u64 dims[rank]
        u8 bits[ceil(numel / 8)]            (binary mask, LSB-first packing)
        u8 has_real | f32 real[numel]?      (real-valued mask when has_real == 1)
        f32 threshold                       (NaN when unset)
    u32 provenance_len | UTF-8 "key=value" lines
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"SRNT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class MaskRecord:
    binary: np.ndarray
    real: np.ndarray | None = None
    threshold: float | None = None


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, MaskRecord] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)


def _write_name(f: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _write_shape(f: BinaryIO, shape: tuple[int, ...]) -> None:
    f.write(struct.pack("<I", len(shape)))
    f.write(struct.pack(f"<{len(shape)}Q", *shape))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def _read_name(f: BinaryIO) -> str:
    return _read_exact(f, _read_u32(f)).decode("utf-8")


def _read_shape(f: BinaryIO) -> tuple[int, ...]:
    rank = _read_u32(f)
    return tuple(struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank)))


def dumps(ckpt: Checkpoint) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    f.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        _write_name(f, name)
        _write_shape(f, arr.shape)
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    f.write(struct.pack("<I", len(ckpt.masks)))
    for name, rec in ckpt.masks.items():
        bits = np.asarray(rec.binary)
        _write_name(f, name)
        _write_shape(f, bits.shape)
        f.write(np.packbits(bits.reshape(-1) != 0, bitorder="little").tobytes())
        if rec.real is None:
            f.write(b"\x00")
        else:
            f.write(b"\x01")
            f.write(np.ascontiguousarray(rec.real, dtype="<f4").tobytes())
        thr = math.nan if rec.threshold is None else float(rec.threshold)
        f.write(struct.pack("<f", thr))
    prov = "".join(f"{k}={v}\n" for k, v in ckpt.provenance.items()).encode("utf-8")
    f.write(struct.pack("<I", len(prov)))
    f.write(prov)
    return f.getvalue()


def loads(data: bytes) -> Checkpoint:
    f = io.BytesIO(data)
    if f.read(4) != MAGIC:
        raise CheckpointError("not an SRNT checkpoint (bad magic)")
    version = _read_u32(f)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    ckpt = Checkpoint()
    for _ in range(_read_u32(f)):
        name = _read_name(f)
        shape = _read_shape(f)
        n = int(np.prod(shape, dtype=np.int64))
        ckpt.params[name] = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    for _ in range(_read_u32(f)):
        name = _read_name(f)
        shape = _read_shape(f)
        n = int(np.prod(shape, dtype=np.int64))
        packed = np.frombuffer(_read_exact(f, (n + 7) // 8), dtype=np.uint8)
        bits = np.unpackbits(packed, count=n, bitorder="little").astype(np.float32).reshape(shape)
        real = None
        if _read_exact(f, 1) == b"\x01":
            real = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        thr = struct.unpack("<f", _read_exact(f, 4))[0]
        ckpt.masks[name] = MaskRecord(bits, real, None if math.isnan(thr) else thr)
    prov = _read_exact(f, _read_u32(f)).decode("utf-8")
    for line in prov.splitlines():
        key, _, value = line.partition("=")
        ckpt.provenance[key] = value
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return ckpt


def save(path: str | Path, params: Mapping[str, np.ndarray], masks: Mapping[str, MaskRecord] | None = None,
         provenance: Mapping[str, object] | None = None) -> None:
    ckpt = Checkpoint(dict(params), dict(masks or {}), {k: str(v) for k, v in (provenance or {}).items()})
    Path(path).write_bytes(dumps(ckpt))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
