"""Embedding containers, the RDA1 binary format, and synthetic datasets.

RDA1 layout (all integers little-endian):

    4s  magic  b"RDA1"
    u8  kind   0 = embeddings, 1 = classes
    u8  version = 1
    u16 reserved = 0
    u32 rows
    u32 cols
    rows*cols float64 payload (row-major)
    kind 0: rows u32 labels, u8 split_tag, u8 normalized
    kind 1: per class u16 name length + UTF-8 bytes, then u8 learnable,
            u8 normalized
    u32 CRC32 of every preceding byte

Synthetic bundles place class prototypes on the unit sphere and offset the
class matrix from the image clusters (a modality gap), so calibration has
signal to learn while zero-shot stays strong.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    FormatError,
    SizeError,
    TruncatedFileError,
    UnsupportedVersionError,
)

MAGIC = b"RDA1"
VERSION = 1
KIND_EMBEDDINGS = 0
KIND_CLASSES = 1

SPLIT_TAGS = ("base-train", "base-test", "new-test", "ttt-stream")
_MAX_CLASSES = 2**16

_UNIT_NORM_TOL = 1e-9


@dataclass
class EmbeddingBatch:
    """B x D image embeddings with integer labels."""

    features: np.ndarray
    labels: np.ndarray
    normalized: bool
    split_tag: str

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float64, order="C", copy=True)
        self.labels = np.array(self.labels, dtype=np.int64, copy=True)
        if self.features.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ContractError(
                f"labels shape {self.labels.shape} does not pair with features {self.features.shape}"
            )
        if self.split_tag not in SPLIT_TAGS:
            raise ConfigError(f"unknown split_tag {self.split_tag!r}, expected one of {SPLIT_TAGS}")
        if self.normalized:
            norms = np.linalg.norm(self.features, axis=1)
            if self.features.shape[0] and np.max(np.abs(norms - 1.0)) > _UNIT_NORM_TOL:
                raise ContractError("normalized batch has rows with non-unit norm")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ClassMatrix:
    """K x D class embedding (or classifier) matrix with class names."""

    weights: np.ndarray
    class_names: list[str]
    learnable: bool = False
    normalized: bool = True

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, order="C", copy=True)
        self.class_names = [str(n) for n in self.class_names]
        if self.weights.ndim != 2:
            raise ContractError(f"class weights must be 2-D, got shape {self.weights.shape}")
        k = self.weights.shape[0]
        if k < 2:
            raise ContractError(f"need at least 2 classes, got {k}")
        if k > _MAX_CLASSES:
            raise SizeError(f"class count {k} exceeds the supported maximum {_MAX_CLASSES}")
        if len(self.class_names) != k:
            raise ContractError(f"{len(self.class_names)} names for {k} classes")
        if len(set(self.class_names)) != k:
            raise ContractError("duplicate class names")
        if self.normalized:
            norms = np.linalg.norm(self.weights, axis=1)
            if np.max(np.abs(norms - 1.0)) > _UNIT_NORM_TOL:
                raise ContractError("normalized class matrix has rows with non-unit norm")

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class DatasetBundle:
    base_train: EmbeddingBatch
    base_test: EmbeddingBatch
    new_test: EmbeddingBatch
    base_classes: ClassMatrix
    new_classes: ClassMatrix

    def __post_init__(self):
        overlap = set(self.base_classes.class_names) & set(self.new_classes.class_names)
        if overlap:
            raise ContractError(f"base and new class names overlap: {sorted(overlap)}")


def check_pairing(batch: EmbeddingBatch, classes: ClassMatrix) -> None:
    """Labels must index into the class matrix and widths must agree."""
    if batch.dim != classes.dim:
        raise ContractError(f"embedding dim {batch.dim} != class dim {classes.dim}")
    if batch.count and (batch.labels.min() < 0 or batch.labels.max() >= classes.count):
        raise ContractError(
            f"labels outside [0, {classes.count}): range "
            f"[{batch.labels.min()}, {batch.labels.max()}]"
        )


# ---------------------------------------------------------------------------
# RDA1 serialization

PathOrFile = Union[str, Path, BinaryIO]


def _encode_embeddings(batch: EmbeddingBatch) -> bytes:
    rows, cols = batch.features.shape
    if rows == 0:
        raise DegenerateInputError("refusing to save an empty embedding batch")
    if cols == 0:
        raise DegenerateInputError("refusing to save zero-width embeddings")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<BBH", KIND_EMBEDDINGS, VERSION, 0)
    out += struct.pack("<II", rows, cols)
    out += batch.features.astype("<f8").tobytes()
    out += batch.labels.astype("<u4").tobytes()
    out += struct.pack("<BB", SPLIT_TAGS.index(batch.split_tag), int(batch.normalized))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def _encode_classes(classes: ClassMatrix) -> bytes:
    rows, cols = classes.weights.shape
    out = bytearray()
    out += MAGIC
    out += struct.pack("<BBH", KIND_CLASSES, VERSION, 0)
    out += struct.pack("<II", rows, cols)
    out += classes.weights.astype("<f8").tobytes()
    for name in classes.class_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise SizeError(f"class name too long ({len(raw)} bytes)")
        out += struct.pack("<H", len(raw)) + raw
    out += struct.pack("<BB", int(classes.learnable), int(classes.normalized))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save(obj: Union[EmbeddingBatch, ClassMatrix], target: PathOrFile) -> None:
    if isinstance(obj, EmbeddingBatch):
        blob = _encode_embeddings(obj)
    elif isinstance(obj, ClassMatrix):
        blob = _encode_classes(obj)
    else:
        raise ContractError(f"cannot save object of type {type(obj).__name__}")
    if hasattr(target, "write"):
        target.write(blob)
    else:
        Path(target).write_bytes(blob)


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.blob)}"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(source: PathOrFile) -> Union[EmbeddingBatch, ClassMatrix]:
    if hasattr(source, "read"):
        blob = source.read()
    else:
        blob = Path(source).read_bytes()
    cur = _Cursor(blob)

    if cur.take(4) != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    kind, version, reserved = cur.unpack("<BBH")
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version}, this build reads {VERSION}")
    if reserved != 0:
        raise FormatError(f"reserved field must be 0, got {reserved}")
    rows, cols = cur.unpack("<II")
    payload = np.frombuffer(cur.take(rows * cols * 8), dtype="<f8").reshape(rows, cols)

    if kind == KIND_EMBEDDINGS:
        labels = np.frombuffer(cur.take(rows * 4), dtype="<u4").astype(np.int64)
        tag_code, normalized = cur.unpack("<BB")
        if tag_code >= len(SPLIT_TAGS):
            raise FormatError(f"unknown split tag code {tag_code}")
        body_end = cur.pos
        (crc,) = cur.unpack("<I")
        _check_crc(blob, body_end, crc, cur)
        return EmbeddingBatch(
            features=payload,
            labels=labels,
            normalized=bool(normalized),
            split_tag=SPLIT_TAGS[tag_code],
        )
    if kind == KIND_CLASSES:
        names = []
        for _ in range(rows):
            (ln,) = cur.unpack("<H")
            names.append(cur.take(ln).decode("utf-8"))
        learnable, normalized = cur.unpack("<BB")
        body_end = cur.pos
        (crc,) = cur.unpack("<I")
        _check_crc(blob, body_end, crc, cur)
        return ClassMatrix(
            weights=payload,
            class_names=names,
            learnable=bool(learnable),
            normalized=bool(normalized),
        )
    raise FormatError(f"unknown kind byte {kind}")


def _check_crc(blob: bytes, body_end: int, stored: int, cur: _Cursor) -> None:
    if cur.pos != len(blob):
        raise FormatError(f"{len(blob) - cur.pos} trailing bytes after checksum")
    actual = zlib.crc32(blob[:body_end])
    if actual != stored:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}")


def load_tsv(path: Union[str, Path], split_tag: str = "base-test") -> EmbeddingBatch:
    """Plain-text import: header ``dim=D``, then ``label\\tf1\\t...\\tfD`` rows."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [ln for ln in lines if ln.strip()]
    if not rows:
        raise FormatError("empty TSV file")
    header = rows[0].strip()
    if not header.startswith("dim="):
        raise FormatError(f"TSV header must be dim=D, got {header!r}")
    try:
        dim = int(header[4:])
    except ValueError as exc:
        raise FormatError(f"unparseable TSV header {header!r}") from exc
    feats = []
    labels = []
    for lineno, row in enumerate(rows[1:], start=2):
        cells = row.split("\t")
        if len(cells) != dim + 1:
            raise FormatError(f"line {lineno}: expected {dim + 1} columns, got {len(cells)}")
        try:
            labels.append(int(cells[0]))
            feats.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: unparseable number") from exc
    return EmbeddingBatch(
        features=np.array(feats), labels=np.array(labels), normalized=False, split_tag=split_tag
    )


def l2_normalized(batch: EmbeddingBatch) -> EmbeddingBatch:
    norms = np.linalg.norm(batch.features, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("batch contains a zero row; cannot normalize")
    return replace(batch, features=batch.features / norms, normalized=True)


# ---------------------------------------------------------------------------
# synthetic data


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _cluster_samples(
    rng: np.random.Generator, prototypes: np.ndarray, shots: int, sigma: float
) -> tuple[np.ndarray, np.ndarray]:
    k, dim = prototypes.shape
    labels = np.repeat(np.arange(k), shots)
    noise = rng.standard_normal((k * shots, dim))
    feats = prototypes[labels] + sigma * noise
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return feats, labels


def synth_gaussian(
    k: int,
    dim: int,
    shots: int = 16,
    sigma: float = 0.35,
    seed: int = 0,
    *,
    new_k: int | None = None,
    test_shots: int | None = None,
) -> DatasetBundle:
    """Deterministic sphere-cluster bundle in the base-to-new layout.

    Image embeddings are ``normalize(prototype + sigma * gauss)``; the class
    matrix perturbs each prototype by sigma/2 before normalizing, standing in
    for the text/image modality gap of real encoders.
    """
    if k < 2 or dim < 2 or shots < 1 or sigma <= 0.0:
        raise ConfigError(
            f"need k >= 2, dim >= 2, shots >= 1, sigma > 0; got k={k} dim={dim} shots={shots} sigma={sigma}"
        )
    new_k = k if new_k is None else new_k
    # Test splits default to 4x the shot count so split accuracies carry
    # roughly half the binomial noise of the 16-shot training budget.
    test_shots = 4 * shots if test_shots is None else test_shots
    if k > _MAX_CLASSES or new_k > _MAX_CLASSES:
        raise SizeError(f"class count exceeds the supported maximum {_MAX_CLASSES}")

    # Independent substreams per component, so e.g. a different test size
    # cannot change the class matrices or the training draw.
    streams = np.random.SeedSequence(seed).spawn(7)

    base_protos = _unit_rows(np.random.default_rng(streams[0]), k, dim)
    new_protos = _unit_rows(np.random.default_rng(streams[1]), new_k, dim)

    def class_matrix(protos: np.ndarray, prefix: str, stream) -> ClassMatrix:
        jitter = np.random.default_rng(stream).standard_normal(protos.shape)
        rows = protos + (sigma / 2.0) * jitter
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        names = [f"{prefix}_{i:03d}" for i in range(protos.shape[0])]
        return ClassMatrix(weights=rows, class_names=names, learnable=False, normalized=True)

    base_classes = class_matrix(base_protos, "base", streams[2])
    new_classes = class_matrix(new_protos, "new", streams[3])

    train_f, train_y = _cluster_samples(np.random.default_rng(streams[4]), base_protos, shots, sigma)
    base_f, base_y = _cluster_samples(np.random.default_rng(streams[5]), base_protos, test_shots, sigma)
    new_f, new_y = _cluster_samples(np.random.default_rng(streams[6]), new_protos, test_shots, sigma)

    return DatasetBundle(
        base_train=EmbeddingBatch(train_f, train_y, True, "base-train"),
        base_test=EmbeddingBatch(base_f, base_y, True, "base-test"),
        new_test=EmbeddingBatch(new_f, new_y, True, "new-test"),
        base_classes=base_classes,
        new_classes=new_classes,
    )


def synth_stream(
    k: int,
    dim: int,
    size: int,
    sigma: float,
    seed: int = 0,
) -> EmbeddingBatch:
    """Test-time stream drawn from the same base prototypes as ``synth_gaussian(k, dim, ..., seed)``.

    A ``sigma`` above the training value models a drifted test distribution.
    """
    if size < 1:
        raise ConfigError(f"stream size must be >= 1, got {size}")
    if sigma <= 0.0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    # Same prototype substream as synth_gaussian, so streams pair with bundles.
    proto_stream = np.random.SeedSequence(seed).spawn(1)[0]
    base_protos = _unit_rows(np.random.default_rng(proto_stream), k, dim)
    stream_rng = np.random.default_rng((seed, 0xD81F))
    labels = stream_rng.integers(0, k, size=size)
    feats = base_protos[labels] + sigma * stream_rng.standard_normal((size, dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return EmbeddingBatch(feats, labels, True, "ttt-stream")


def ttt_views(
    sample: np.ndarray,
    n_views: int = 63,
    jitter: float = 0.1,
    drop_frac: float = 0.1,
    seed: int = 0,
) -> np.ndarray:
    """Original row plus ``n_views`` augmented rows, all unit-normalized.

    Augmentation is embedding-level: coordinate dropout followed by Gaussian
    jitter, a stand-in for image-space view generation when only embeddings
    exist. Row 0 is the sample exactly as given.
    """
    vec = np.array(sample, dtype=np.float64).reshape(-1)
    if not 0.0 <= drop_frac < 1.0:
        raise ConfigError(f"drop_frac must be in [0, 1), got {drop_frac}")
    if n_views < 0 or jitter < 0.0:
        raise ConfigError(f"need n_views >= 0 and jitter >= 0, got {n_views}, {jitter}")
    dim = vec.shape[0]
    rng = np.random.default_rng(seed)
    out = np.empty((n_views + 1, dim))
    out[0] = vec
    for i in range(1, n_views + 1):
        while True:
            kept = rng.random(dim) >= drop_frac
            view = vec * kept + jitter * rng.standard_normal(dim)
            norm = np.linalg.norm(view)
            if norm > 1e-12:
                break
        # Skip the division when the view is already unit, so the no-op
        # augmentation (jitter=0, drop_frac=0) reproduces the input exactly.
        out[i] = view if abs(norm - 1.0) <= 1e-12 else view / norm
    return out
