"""Training objectives: adapted cross-entropy, test-time entropy, mask regularizer.

The regularizer penalizes deviation of the mask from its all-ones rest
point. It is reduced by the mean (not the sum) over entries so the weight
transfers across class counts and widths; the L-infinity format takes the
max instead. At the all-ones mask every format is exactly zero, so a fresh
adapter adds nothing to the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .adapter import MaskTensor
from .errors import ConfigError, ContractError

REG_NORMS = ("L1", "L2", "Linf")
REGIMES = ("EFT", "TTT", "FFT-lite-stage1", "FFT-lite-stage2")

ENTROPY_MODES = ("marginal", "mean-per-sample")


@dataclass
class LossConfig:
    reg_weight: float = 1.0
    reg_norm: str = "L2"
    apply_reg: bool = True
    entropy_mode: str = "marginal"

    def __post_init__(self):
        if self.reg_weight < 0.0:
            raise ConfigError(f"regularizer weight must be >= 0, got {self.reg_weight}")
        if self.reg_norm not in REG_NORMS:
            raise ConfigError(f"unknown regularizer norm {self.reg_norm!r}, expected {REG_NORMS}")
        if self.entropy_mode not in ENTROPY_MODES:
            raise ConfigError(f"unknown entropy mode {self.entropy_mode!r}")

    @classmethod
    def for_eft(cls, **overrides) -> "LossConfig":
        kwargs = {"reg_weight": 1.5, "reg_norm": "L2", "apply_reg": True}
        kwargs.update(overrides)
        return cls(**kwargs)


def adapt_loss(logits: nm.Tensor, labels) -> nm.Tensor:
    """Mean cross-entropy of the logits at the true labels (log-sum-exp form)."""
    idx = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ContractError(f"expected 2-D logits, got shape {logits.shape}")
    if idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ContractError(f"labels shape {idx.shape} does not pair with logits {logits.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise ContractError(f"label out of range [0, {logits.shape[1]})")
    lse = nm.logsumexp_lastdim(logits)
    picked = nm.gather_rows(logits, idx)
    return nm.mean_all(nm.sub(lse, picked))


def ttt_entropy(logits: nm.Tensor, mode: str = "marginal") -> nm.Tensor:
    """Entropy objective over a sub-batch of logit rows.

    ``marginal`` takes the entropy of the averaged softmax distribution;
    ``mean-per-sample`` averages each row's own entropy instead.
    """
    if logits.data.ndim != 2 or logits.shape[0] < 1:
        raise ContractError(f"expected a nonempty 2-D logit block, got shape {logits.shape}")
    probs = nm.softmax_lastdim(logits)
    if mode == "marginal":
        averaged = nm.mean_axis0(probs)
        return nm.neg(nm.sum_all(nm.xlogx(averaged)))
    if mode == "mean-per-sample":
        per_entry = nm.xlogx(probs)
        return nm.neg(nm.scale(nm.sum_all(per_entry), 1.0 / logits.shape[0]))
    raise ConfigError(f"unknown entropy mode {mode!r}")


def mask_reg(mask: MaskTensor | nm.Tensor, cfg: LossConfig) -> nm.Tensor:
    """Deviation of the mask from all-ones under the configured norm format."""
    values = mask.values if isinstance(mask, MaskTensor) else mask
    deviation = nm.add_scalar(values, -1.0)
    if cfg.reg_norm == "L2":
        return nm.mean_all(nm.mul(deviation, deviation))
    if cfg.reg_norm == "L1":
        return nm.mean_all(nm.absolute(deviation))
    if cfg.reg_norm == "Linf":
        return nm.max_all(nm.absolute(deviation))
    raise ConfigError(f"unknown regularizer norm {cfg.reg_norm!r}")


def total_loss(regime: str, cfg: LossConfig, parts: dict[str, nm.Tensor]) -> nm.Tensor:
    """Combine per-regime loss parts.

    EFT and FFT-lite stage 1 add the weighted regularizer to the adapted
    cross-entropy; TTT adds it to the entropy term; FFT-lite stage 2 is
    cross-entropy alone and refuses a regularizer because the classifier is
    learnable there.
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}, expected one of {REGIMES}")

    def need(name: str) -> nm.Tensor:
        if name not in parts:
            raise ConfigError(f"regime {regime} needs loss part {name!r}")
        return parts[name]

    if regime == "FFT-lite-stage2":
        if cfg.apply_reg or "reg" in parts:
            raise ContractError("regularizer requested while the classifier is learnable")
        return need("adapt")

    main = need("entropy") if regime == "TTT" else need("adapt")
    if not cfg.apply_reg or cfg.reg_weight == 0.0:
        return main
    return nm.add(main, nm.scale(need("reg"), cfg.reg_weight))
