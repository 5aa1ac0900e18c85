"""Writer for the RDA1 embedding/class file format.

Independent implementation of the consumer's documented wire format; the
test suite proves byte-level conformance by feeding exported files through
the consumer CLI. All integers little-endian; payload is row-major float64;
a CRC32 of everything preceding it closes the file.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"RDA1"
VERSION = 1
KIND_EMBEDDINGS = 0
KIND_CLASSES = 1

SPLIT_TAGS = ("base-train", "base-test", "new-test", "ttt-stream")


class ExportError(Exception):
    """Raised for unusable jobs: missing data, bad classes, model failures."""


def encode_embeddings(
    features: np.ndarray, labels: np.ndarray, split_tag: str, normalized: bool
) -> bytes:
    feats = np.ascontiguousarray(features, dtype="<f8")
    labs = np.ascontiguousarray(labels, dtype="<u4")
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ExportError(f"need a nonempty 2-D feature matrix, got shape {feats.shape}")
    if labs.shape != (feats.shape[0],):
        raise ExportError("one label per row required")
    if split_tag not in SPLIT_TAGS:
        raise ExportError(f"unknown split tag {split_tag!r}")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<BBH", KIND_EMBEDDINGS, VERSION, 0)
    out += struct.pack("<II", feats.shape[0], feats.shape[1])
    out += feats.tobytes()
    out += labs.tobytes()
    out += struct.pack("<BB", SPLIT_TAGS.index(split_tag), int(normalized))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def encode_classes(
    weights: np.ndarray, names: list[str], learnable: bool, normalized: bool
) -> bytes:
    rows = np.ascontiguousarray(weights, dtype="<f8")
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ExportError(f"need at least two class rows, got shape {rows.shape}")
    if len(names) != rows.shape[0] or len(set(names)) != len(names):
        raise ExportError("class names must be unique and pair with rows")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<BBH", KIND_CLASSES, VERSION, 0)
    out += struct.pack("<II", rows.shape[0], rows.shape[1])
    out += rows.tobytes()
    for name in names:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    out += struct.pack("<BB", int(learnable), int(normalized))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def write(blob: bytes, path: Path) -> None:
    Path(path).write_bytes(blob)
