"""Chip files and dataset manifests.

Chip layout (little-endian)::

    b"SARC"  u32 version=1  u32 H  u32 W  u32 class_id
    f32 aspect_deg  f32 depression_deg  H*W f32 amplitudes (row-major)

A manifest is a CSV with header ``path,class_id,aspect_deg,depression_deg``
and one row per chip; paths are relative to the manifest's directory.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import TargetChip
from .errors import FormatError

MAGIC = b"SARC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIff")
MANIFEST_FIELDS = ("path", "class_id", "aspect_deg", "depression_deg")


def chip_to_bytes(chip: TargetChip) -> bytes:
    img = np.ascontiguousarray(chip.image, dtype="<f4")
    h, w = img.shape
    head = _HEADER.pack(MAGIC, VERSION, h, w, chip.class_id, chip.aspect_deg, chip.depression_deg)
    return head + img.tobytes()


def chip_from_bytes(blob: bytes) -> TargetChip:
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than the chip header", offset=len(blob))
    magic, version, h, w, class_id, aspect, depression = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    expected = _HEADER.size + 4 * h * w
    if len(blob) != expected:
        raise FormatError(
            f"header says {h}x{w} ({expected} bytes) but file has {len(blob)}",
            offset=min(len(blob), expected),
        )
    img = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)
    return TargetChip(img, class_id, float(aspect), float(depression))


def write_chip(chip: TargetChip, path: str | Path) -> None:
    Path(path).write_bytes(chip_to_bytes(chip))


def read_chip(path: str | Path) -> TargetChip:
    chip = chip_from_bytes(Path(path).read_bytes())
    chip.path = str(path)
    return chip


def _fmt(x: float) -> str:
    return repr(float(np.float32(x)))


def write_manifest(records: Iterable[tuple[str, TargetChip]], path: str | Path) -> int:
    """Write ``(relative_path, chip)`` rows; returns the row count."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(MANIFEST_FIELDS)
        for rel, chip in records:
            out.writerow([rel, chip.class_id, _fmt(chip.aspect_deg), _fmt(chip.depression_deg)])
            n += 1
    return n


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise FormatError(f"manifest header {reader.fieldnames} != {list(MANIFEST_FIELDS)}")
        return [
            {
                "path": row["path"],
                "class_id": int(row["class_id"]),
                "aspect_deg": float(row["aspect_deg"]),
                "depression_deg": float(row["depression_deg"]),
            }
            for row in reader
        ]


def chip_filename(chip: TargetChip, index: int) -> str:
    return (
        f"c{chip.class_id:02d}_d{chip.depression_deg:05.2f}_a{chip.aspect_deg:06.2f}_{index:05d}.sarc"
    )


def save_dataset(chips: Sequence[TargetChip], out_dir: str | Path) -> Path:
    """Write every chip under ``out_dir/chips`` plus ``out_dir/manifest.csv``."""
    out = Path(out_dir)
    (out / "chips").mkdir(parents=True, exist_ok=True)
    records = []
    for i, chip in enumerate(chips):
        rel = f"chips/{chip_filename(chip, i)}"
        write_chip(chip, out / rel)
        chip.path = rel
        records.append((rel, chip))
    manifest = out / "manifest.csv"
    write_manifest(records, manifest)
    return manifest


def load_dataset(manifest: str | Path) -> list[TargetChip]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    chips = []
    for rec in read_manifest(manifest):
        chip = read_chip(manifest.parent / rec["path"])
        if chip.class_id != rec["class_id"]:
            raise FormatError(f"{rec['path']}: class {chip.class_id} disagrees with manifest")
        chip.path = rec["path"]
        chips.append(chip)
    return chips
