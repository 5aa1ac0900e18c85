"""Rational matrix and the two equivalent logit formulations.

For normalized image embeddings and class embeddings, entry (b, i, j) of the
rational tensor is the j-th coordinate product between sample b and class i.
Summing the last axis recovers the cosine logits, so an all-ones mask makes
the masked formulation coincide with the plain zero-shot one; that identity
is a tested invariant, not an assumption.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .embedio import ClassMatrix, EmbeddingBatch, check_pairing
from .errors import ConfigError, ContractError, ShapeError

DEFAULT_LOGIT_SCALE = 100.0


@dataclass
class RationalTensor:
    """B x K x D entrywise products of unit-norm inputs."""

    values: nm.Tensor
    source_normalized: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def _require_normalized(images: EmbeddingBatch, classes: ClassMatrix) -> None:
    if not images.normalized:
        raise ContractError("image embeddings must be normalized before rational computation")
    if not classes.normalized:
        raise ContractError("class matrix must be normalized before rational computation")


def rational_values(features: nm.Tensor, class_rows: nm.Tensor) -> nm.Tensor:
    """Tensor-level core: out[b, i, j] = features[b, j] * class_rows[i, j]."""
    return nm.rational_product(features, class_rows)


def compute_rational(images: EmbeddingBatch, classes: ClassMatrix | nm.Tensor) -> RationalTensor:
    """Rational tensor for a batch against a class matrix.

    Passing a ``Tensor`` for ``classes`` keeps the result differentiable with
    respect to those rows (the learnable-classifier path); rows are assumed
    unit-norm in that case, which the caller guarantees by normalizing on
    the tape.
    """
    feats = nm.Tensor(images.features)
    if isinstance(classes, nm.Tensor):
        if not images.normalized:
            raise ContractError("image embeddings must be normalized before rational computation")
        return RationalTensor(values=rational_values(feats, classes))
    _require_normalized(images, classes)
    check_pairing(images, classes)
    return RationalTensor(values=rational_values(feats, nm.Tensor(classes.weights)))


def zeroshot_logits(
    images: EmbeddingBatch,
    classes: ClassMatrix,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
) -> nm.Tensor:
    """Scaled cosine logits, one row per sample."""
    if logit_scale <= 0.0:
        raise ConfigError(f"logit_scale must be positive, got {logit_scale}")
    _require_normalized(images, classes)
    check_pairing(images, classes)
    feats = nm.Tensor(images.features)
    weights = nm.Tensor(classes.weights)
    return nm.scale(nm.matmul(feats, nm.transpose(weights)), logit_scale)


def masked_logits(
    rational: RationalTensor | nm.Tensor,
    mask: nm.Tensor,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
) -> nm.Tensor:
    """logits[b, i] = logit_scale * sum_j mask[b, i, j] * rational[b, i, j]."""
    if logit_scale <= 0.0:
        raise ConfigError(f"logit_scale must be positive, got {logit_scale}")
    values = rational.values if isinstance(rational, RationalTensor) else rational
    if values.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} != rational shape {values.shape}")
    return nm.scale(nm.sum_lastdim(nm.mul(mask, values)), logit_scale)


def all_ones_mask(rational: RationalTensor) -> nm.Tensor:
    return nm.Tensor(np.ones(rational.shape))
