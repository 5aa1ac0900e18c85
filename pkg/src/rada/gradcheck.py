"""Full-objective finite-difference verification on small seeded instances.

This wires a complete forward pass (rational tensor, mask, logits, loss) for
each training regime and compares tape gradients of every learnable matrix
against central differences. Instances are randomized away from the
zero-init point so kinked regularizer formats are checked at generic
coordinates, and the logit scale is kept moderate so the softmax stays away
from saturation.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .adapter import AdapterParams, init_params
from .embedio import ClassMatrix, EmbeddingBatch
from .errors import ConfigError
from .losses import REG_NORMS, LossConfig, adapt_loss, mask_reg, total_loss, ttt_entropy
from .rational import rational_values
from .adapter import mask_offsets

CHECK_REGIMES = ("EFT", "TTT", "FFT-lite-stage1", "FFT-lite-stage2")
DEFAULT_CHECK_SCALE = 5.0


def perturbed_params(
    dim: int, inner: int, variant: str, n_layers: int, seed: int, noise: float = 0.3
) -> AdapterParams:
    params = init_params(dim, inner, variant=variant, n_layers=n_layers, seed=seed)
    rng = np.random.default_rng((seed, 0xA5))
    for t in params.learnables():
        t.data += noise * rng.standard_normal(t.data.shape)
    return params


def _instance(b: int, k: int, dim: int, seed: int):
    rng = np.random.default_rng((seed, 0x11))
    feats = rng.standard_normal((b, dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    weights = rng.standard_normal((k, dim))
    weights /= np.linalg.norm(weights, axis=1, keepdims=True)
    labels = rng.integers(0, k, size=b)
    images = EmbeddingBatch(feats, labels, normalized=True, split_tag="base-train")
    classes = ClassMatrix(weights, [f"c{i}" for i in range(k)], normalized=True)
    return images, classes


def _rebuild(template: AdapterParams, tensors) -> AdapterParams:
    it = iter(tensors)
    layers = [{name: next(it) for name in layer} for layer in template.layers]
    return AdapterParams(template.variant, template.dim, template.inner, template.n_layers, layers)


def full_objective_check(
    regime: str,
    variant: str = "multi-query",
    reg_norm: str = "L2",
    b: int = 2,
    k: int = 3,
    dim: int = 4,
    inner: int = 4,
    n_layers: int = 1,
    seed: int = 0,
    logit_scale: float = DEFAULT_CHECK_SCALE,
    h: float = 1e-5,
) -> float:
    """Max relative gradient error of the full objective for one regime."""
    if regime not in CHECK_REGIMES:
        raise ConfigError(f"unknown regime {regime!r}, expected one of {CHECK_REGIMES}")
    if reg_norm not in REG_NORMS:
        raise ConfigError(f"unknown regularizer norm {reg_norm!r}")

    images, classes = _instance(b, k, dim, seed)
    params = perturbed_params(dim, inner, variant, n_layers, seed)
    feats = nm.Tensor(images.features)
    labels = images.labels

    learnable_classifier = regime == "FFT-lite-stage2"
    class_leaf = nm.Tensor(classes.weights, requires_grad=learnable_classifier)
    n_adapter = len(params.learnables())

    if regime == "EFT":
        cfg = LossConfig.for_eft(reg_norm=reg_norm)
    elif regime == "TTT":
        cfg = LossConfig(reg_weight=1.0, reg_norm=reg_norm, apply_reg=True)
    elif regime == "FFT-lite-stage1":
        cfg = LossConfig(reg_weight=1.0, reg_norm=reg_norm, apply_reg=True)
    else:
        cfg = LossConfig(reg_weight=1.0, reg_norm=reg_norm, apply_reg=False)

    def objective(tensors: list[nm.Tensor]) -> nm.Tensor:
        rebuilt = _rebuild(params, tensors[:n_adapter])
        rows = tensors[n_adapter] if learnable_classifier else class_leaf
        class_rows = nm.l2_normalize_rows(rows) if regime.startswith("FFT-lite") else rows
        rat = rational_values(feats, class_rows)
        mask = nm.add_scalar(mask_offsets(rebuilt, feats, class_rows, rat), 1.0)
        logits = nm.scale(nm.sum_lastdim(nm.mul(mask, rat)), logit_scale)
        parts: dict[str, nm.Tensor] = {}
        if regime == "TTT":
            parts["entropy"] = ttt_entropy(logits, cfg.entropy_mode)
        else:
            parts["adapt"] = adapt_loss(logits, labels)
        if cfg.apply_reg:
            parts["reg"] = mask_reg(mask, cfg)
        return total_loss(regime, cfg, parts)

    check_list: list[nm.Tensor] = list(params.learnables())
    if learnable_classifier:
        check_list.append(class_leaf)
    return nm.finite_diff_check(objective, check_list, h=h)
