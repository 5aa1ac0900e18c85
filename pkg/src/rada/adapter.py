"""Mask generator: a multi-query attention layer over the class axis.

Per sample, three queries (image row broadcast over classes, the class
matrix, and the sample's rational matrix) attend to keys/values projected
from the rational matrix; the averaged attention output is projected back to
K x D and added to an all-ones baseline. The output projection starts at
exactly zero, so a freshly built adapter is a no-op on predictions.

Variants: query subsets drop queries from the average; ``mlp`` swaps the
attention layer for a per-class two-layer tanh MLP (no cross-class
interaction, the contrast the ablations probe). Extra layers query the
running mask against the same rational keys/values and add their outputs
(residual stacking).
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from . import numerics as nm
from .embedio import ClassMatrix, EmbeddingBatch
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContractError,
    FormatError,
    ShapeError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .rational import RationalTensor

VARIANTS = ("multi-query", "query-R", "query-hR", "query-fR", "mlp")

_QUERY_SETS = {
    "multi-query": ("image", "class", "rational"),
    "query-R": ("rational",),
    "query-hR": ("class", "rational"),
    "query-fR": ("image", "rational"),
}

CHECKPOINT_MAGIC = b"RDAM"
CHECKPOINT_VERSION = 1


@dataclass
class AdapterParams:
    """All learnable projection matrices, grouped per stacked layer."""

    variant: str
    dim: int
    inner: int
    n_layers: int
    layers: list[dict[str, nm.Tensor]]

    def learnables(self) -> list[nm.Tensor]:
        return [t for layer in self.layers for t in layer.values()]

    def named_learnables(self) -> list[tuple[str, nm.Tensor]]:
        return [
            (f"layer{i}.{name}", t)
            for i, layer in enumerate(self.layers)
            for name, t in layer.items()
        ]

    def copy(self) -> "AdapterParams":
        layers = [
            {name: nm.Tensor(t.data, requires_grad=True) for name, t in layer.items()}
            for layer in self.layers
        ]
        return AdapterParams(self.variant, self.dim, self.inner, self.n_layers, layers)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.variant}|{self.dim}|{self.inner}|{self.n_layers}".encode())
        for name, t in self.named_learnables():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


def _layer_matrix_names(variant: str, layer_index: int) -> list[str]:
    if layer_index == 0:
        if variant == "mlp":
            return ["hidden", "out"]
        return [f"query_{q}" for q in _QUERY_SETS[variant]] + ["key", "value", "out"]
    return ["query_mask", "key", "value", "out"]


def _matrix_shape(name: str, dim: int, inner: int) -> tuple[int, int]:
    return (inner, dim) if name == "out" else (dim, inner)


# Expected row norm of each projector's input for unit-norm embeddings:
# rational rows are entrywise products of two unit rows (norm ~ 1/sqrt(D)),
# residual-mask rows sit near the all-ones row (norm ~ sqrt(D)). Scaling the
# fan-in init by the inverse, plus a gain, keeps attention logits O(1) at
# every width; plain fan-in init leaves them ~1e-3 here, collapsing every
# attention row to the uniform distribution and stalling training.
INIT_GAIN = 6.0


def _input_scale(name: str, dim: int) -> float:
    if name in ("query_rational", "key", "value", "hidden"):
        return 1.0 / math.sqrt(dim)
    if name == "query_mask":
        return math.sqrt(dim)
    return 1.0


def init_params(
    dim: int,
    inner: int | None = None,
    variant: str = "multi-query",
    n_layers: int = 1,
    seed: int = 0,
) -> AdapterParams:
    """Fresh parameters: fan-in uniform init, output projections exactly zero."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown adapter variant {variant!r}, expected one of {VARIANTS}")
    inner = dim if inner is None else inner
    if inner <= 0:
        raise ConfigError(f"inner width must be positive, got {inner}")
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
    rng = np.random.default_rng(seed)
    layers = []
    for li in range(n_layers):
        layer: dict[str, nm.Tensor] = {}
        for name in _layer_matrix_names(variant, li):
            shape = _matrix_shape(name, dim, inner)
            if name == "out":
                data = np.zeros(shape)
            else:
                bound = INIT_GAIN / (math.sqrt(dim) * _input_scale(name, dim))
                data = rng.uniform(-bound, bound, size=shape)
            layer[name] = nm.Tensor(data, requires_grad=True)
        layers.append(layer)
    return AdapterParams(variant, dim, inner, n_layers, layers)


@dataclass
class MaskTensor:
    """B x K x D mask in residual form (all-ones baseline plus learned offset)."""

    values: nm.Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def _attend(
    query: nm.Tensor,
    key: nm.Tensor,
    value: nm.Tensor,
    inner: int,
    suppress_key: int | None = None,
) -> nm.Tensor:
    scores = nm.scale(nm.matmul(query, nm.transpose(key)), 1.0 / math.sqrt(inner))
    if suppress_key is not None:
        blocker = np.zeros(scores.shape)
        blocker[:, suppress_key] = -1e30
        scores = nm.add(scores, nm.Tensor(blocker))
        row_gate = np.ones(value.shape)
        row_gate[suppress_key, :] = 0.0
        value = nm.mul(value, nm.Tensor(row_gate))
    return nm.matmul(nm.softmax_lastdim(scores), value)


def _first_layer_offset(
    params: AdapterParams,
    feature_row: nm.Tensor,
    class_rows: nm.Tensor,
    rational_plane: nm.Tensor,
    suppress_key: int | None,
) -> nm.Tensor:
    layer = params.layers[0]
    if params.variant == "mlp":
        hidden = nm.tanh(nm.matmul(rational_plane, layer["hidden"]))
        return nm.matmul(hidden, layer["out"])
    k = class_rows.shape[0]
    sources = {
        "image": nm.repeat_row(feature_row, k),
        "class": class_rows,
        "rational": rational_plane,
    }
    key = nm.matmul(rational_plane, layer["key"])
    value = nm.matmul(rational_plane, layer["value"])
    queries = _QUERY_SETS[params.variant]
    acc = None
    for q in queries:
        projected = nm.matmul(sources[q], layer[f"query_{q}"])
        out = _attend(projected, key, value, params.inner, suppress_key)
        acc = out if acc is None else nm.add(acc, out)
    averaged = nm.scale(acc, 1.0 / len(queries))
    return nm.matmul(averaged, layer["out"])


def _stacked_layer_offset(
    layer: dict[str, nm.Tensor],
    running_mask: nm.Tensor,
    rational_plane: nm.Tensor,
    inner: int,
    suppress_key: int | None,
) -> nm.Tensor:
    query = nm.matmul(running_mask, layer["query_mask"])
    key = nm.matmul(rational_plane, layer["key"])
    value = nm.matmul(rational_plane, layer["value"])
    return nm.matmul(_attend(query, key, value, inner, suppress_key), layer["out"])


def mask_offsets(
    params: AdapterParams,
    features: nm.Tensor,
    class_rows: nm.Tensor,
    rational: nm.Tensor,
    suppress_key: int | None = None,
) -> nm.Tensor:
    """Pre-residual mask offsets for a whole batch (tensor-level core)."""
    b = features.shape[0]
    if rational.shape[0] != b:
        raise ShapeError(f"rational batch {rational.shape} does not match features {features.shape}")
    if features.shape[1] != params.dim or class_rows.shape[1] != params.dim:
        raise ShapeError(
            f"adapter built for width {params.dim}, got features {features.shape} "
            f"and classes {class_rows.shape}"
        )
    planes = []
    for bi in range(b):
        feature_row = nm.take_row(features, bi)
        plane = nm.take_plane(rational, bi)
        acc = _first_layer_offset(params, feature_row, class_rows, plane, suppress_key)
        for layer in params.layers[1:]:
            running = nm.add_scalar(acc, 1.0)
            acc = nm.add(
                acc, _stacked_layer_offset(layer, running, plane, params.inner, suppress_key)
            )
        planes.append(acc)
    return nm.stack_planes(planes)


def compute_mask(
    params: AdapterParams,
    images: EmbeddingBatch,
    classes: ClassMatrix | nm.Tensor,
    rational: RationalTensor,
    suppress_key: int | None = None,
) -> MaskTensor:
    """Mask for every sample in the batch; all-ones at zero output projections.

    ``suppress_key`` removes one class's key/value rows from every attention,
    a probe for cross-class influence.
    """
    if not images.normalized:
        raise ContractError("image embeddings must be normalized before mask computation")
    feats = nm.Tensor(images.features)
    if isinstance(classes, nm.Tensor):
        class_rows = classes
    else:
        if not classes.normalized:
            raise ContractError("class matrix must be normalized before mask computation")
        class_rows = nm.Tensor(classes.weights)
    offsets = mask_offsets(params, feats, class_rows, rational.values, suppress_key)
    return MaskTensor(values=nm.add_scalar(offsets, 1.0))


# ---------------------------------------------------------------------------
# checkpoint format

PathOrFile = Union[str, Path, BinaryIO]


def save_params(params: AdapterParams, target: PathOrFile) -> None:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack(
        "<BBB", CHECKPOINT_VERSION, VARIANTS.index(params.variant), params.n_layers
    )
    out += struct.pack("<II", params.dim, params.inner)
    for li, layer in enumerate(params.layers):
        for name in _layer_matrix_names(params.variant, li):
            out += layer[name].data.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    blob = bytes(out)
    if hasattr(target, "write"):
        target.write(blob)
    else:
        Path(target).write_bytes(blob)


def load_params(source: PathOrFile) -> AdapterParams:
    if hasattr(source, "read"):
        blob = source.read()
    else:
        blob = Path(source).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(f"needed {n} bytes at offset {pos}, file has {len(blob)}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {blob[:4]!r}")
    version, variant_code, n_layers = struct.unpack("<BBB", take(3))
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if variant_code >= len(VARIANTS):
        raise FormatError(f"unknown adapter variant code {variant_code}")
    if n_layers < 1:
        raise FormatError("checkpoint declares zero layers")
    variant = VARIANTS[variant_code]
    dim, inner = struct.unpack("<II", take(8))
    layers = []
    for li in range(n_layers):
        layer = {}
        for name in _layer_matrix_names(variant, li):
            rows, cols = _matrix_shape(name, dim, inner)
            data = np.frombuffer(take(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            layer[name] = nm.Tensor(data, requires_grad=True)
        layers.append(layer)
    body_end = pos
    (crc,) = struct.unpack("<I", take(4))
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after checksum")
    actual = zlib.crc32(blob[:body_end])
    if actual != crc:
        raise ChecksumError(f"CRC32 mismatch: stored {crc:#010x}, computed {actual:#010x}")
    return AdapterParams(variant, dim, inner, n_layers, layers)
