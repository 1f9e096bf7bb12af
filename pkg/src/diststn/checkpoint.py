"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"DSTN"  u32 version=1  u32 tensor_count
    per tensor: u16 name_len, name (utf-8), u8 ndim, ndim * u32 dims, f64 values
    u32 crc32 of every preceding byte

Architecture settings ride along as ``meta.*`` tensors so a file fully
describes the model it came from.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import DistStnModel, ModelConfig

MAGIC = b"DSTN"
VERSION = 1

_TUPLE_FIELDS = {"enc_channels", "kernels", "strides", "pose_hidden"}
_FLOAT_FIELDS = {"alpha", "beta"}


def _meta_tensors(cfg: ModelConfig) -> list[tuple[str, np.ndarray]]:
    out = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        arr = np.asarray(value, dtype=np.float64)
        out.append((f"meta.{f.name}", arr))
    return out


def encode_tensors(named: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if len(blob) < 16:
        raise FormatError("file too short for a checkpoint", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("CRC32 mismatch", offset=len(blob) - 4)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)

    end = len(blob) - 4
    pos = 12
    out = []

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > end:
            raise FormatError("truncated tensor record", offset=pos)
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    for _ in range(count):
        (name_len,) = take("<H")
        start = pos
        (raw,) = take(f"<{name_len}s")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", offset=start) from exc
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I")
        n = int(np.prod(dims, dtype=np.int64))
        if pos + 8 * n > end:
            raise FormatError(f"tensor {name!r} overruns the file", offset=pos)
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
        out.append((name, arr))
    if pos != end:
        raise FormatError("trailing bytes after last tensor", offset=pos)
    return out


def model_to_bytes(model: DistStnModel) -> bytes:
    named = _meta_tensors(model.config) + [(n, t.data) for n, t in model.named_parameters()]
    return encode_tensors(named)


def model_from_bytes(blob: bytes) -> DistStnModel:
    tensors = decode_tensors(blob)
    meta = {n[5:]: a for n, a in tensors if n.startswith("meta.")}
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in meta:
            raise FormatError(f"checkpoint lacks meta.{f.name}")
        v = meta[f.name]
        if f.name in _TUPLE_FIELDS:
            kwargs[f.name] = tuple(int(x) for x in v.reshape(-1))
        elif f.name in _FLOAT_FIELDS:
            kwargs[f.name] = float(v)
        else:
            kwargs[f.name] = int(v)
    model = DistStnModel(ModelConfig(**kwargs))
    state = {n: a for n, a in tensors if not n.startswith("meta.")}
    expected = {n for n, _ in model.named_parameters()}
    if set(state) != expected:
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        raise FormatError(f"parameter set mismatch; missing={missing} extra={extra}")
    model.load_state_dict(state)
    return model


def save_checkpoint(model: DistStnModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_checkpoint(path: str | Path) -> DistStnModel:
    return model_from_bytes(Path(path).read_bytes())
