"""Source-data fine-tuning loops and base-to-new evaluation.

Two regimes train on precomputed embeddings. The efficient regime updates
only the mask generator against frozen class embeddings (single-sample
steps, SGD with momentum under cosine decay). The two-stage lite regime
first trains the mask generator against a frozen classifier initialized
from the class embeddings, then unfreezes that classifier jointly at a much
smaller step size (AdamW, decoupled weight decay); the classifier rows are
re-normalized on the tape at every step so the rational computation always
sees unit rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from . import numerics as nm
from .adapter import AdapterParams, compute_mask, mask_offsets
from .embedio import ClassMatrix, DatasetBundle, EmbeddingBatch, check_pairing
from .errors import ConfigError, ContractError, DegenerateInputError, TrainingDivergedError
from .losses import LossConfig, adapt_loss, mask_reg, total_loss
from .rational import DEFAULT_LOGIT_SCALE, compute_rational, masked_logits, rational_values

OPTIMIZERS = ("sgd-momentum", "adamw")


@dataclass
class RunConfig:
    regime: str = "EFT"
    learning_rate: float = 0.0009
    epochs: int = 13
    batch_size: int = 1
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    logit_scale: float = DEFAULT_LOGIT_SCALE
    loss: LossConfig = field(default_factory=LossConfig.for_eft)
    eval_every: int = 1  # epochs between history evals; 0 = final only
    # two-stage lite schedule
    stage1_lr: float = 0.004
    stage2_lr: float = 0.000004
    stage1_epochs: int = 5
    stage2_epochs: int = 5

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate >= 0, batch_size >= 1, epochs >= 0 required")

    @classmethod
    def fft_lite(cls, **overrides) -> "RunConfig":
        kwargs = dict(
            regime="FFT-lite",
            optimizer="adamw",
            weight_decay=0.1,
            batch_size=32,
            loss=LossConfig(reg_weight=1.0, reg_norm="L2", apply_reg=True),
        )
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class MaskStats:
    mean: float
    std: float
    min: float
    max: float


@dataclass
class SplitEval:
    accuracy: float
    per_class: dict[str, float]
    mask_stats: MaskStats
    predictions: np.ndarray


@dataclass
class EvalReport:
    base_acc: float
    new_acc: float
    harmonic_mean: float
    per_class: dict[str, float]
    mask_stats: MaskStats


@dataclass
class EpochStats:
    epoch: int
    loss: float
    reg: float
    base_acc: float
    new_acc: float


def harmonic_mean(a: float, b: float) -> float:
    if a + b == 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


# ---------------------------------------------------------------------------
# optimizers


class SgdMomentum:
    def __init__(self, tensors, lr, momentum=0.9, total_steps=None):
        self.tensors = list(tensors)
        self.lr = lr
        self.momentum = momentum
        self.total_steps = total_steps
        self.step_index = 0
        self.velocity = [np.zeros_like(t.data) for t in self.tensors]

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = min(self.step_index / self.total_steps, 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self, grads) -> None:
        lr = self.current_lr()
        for t, v, g in zip(self.tensors, self.velocity, grads):
            v *= self.momentum
            v += g
            t.data -= lr * v
        self.step_index += 1


class AdamW:
    def __init__(self, tensors, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 total_steps=None):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.step_index = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = min(self.step_index / self.total_steps, 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self, grads) -> None:
        lr = self.current_lr()
        self.step_index += 1
        b1c = 1.0 - self.beta1**self.step_index
        b2c = 1.0 - self.beta2**self.step_index
        for t, m, v, g in zip(self.tensors, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data -= lr * update


def _make_optimizer(cfg: RunConfig, tensors, lr, total_steps):
    if cfg.optimizer == "adamw":
        return AdamW(tensors, lr, weight_decay=cfg.weight_decay, total_steps=total_steps)
    return SgdMomentum(tensors, lr, momentum=cfg.momentum, total_steps=total_steps)


# ---------------------------------------------------------------------------
# evaluation


def _mask_stats(values: np.ndarray) -> MaskStats:
    return MaskStats(
        mean=float(values.mean()),
        std=float(values.std()),
        min=float(values.min()),
        max=float(values.max()),
    )


def evaluate(
    batch: EmbeddingBatch,
    classes: ClassMatrix,
    params: AdapterParams | None = None,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
) -> SplitEval:
    """Argmax accuracy of masked logits; all-ones mask when params is None."""
    if batch.count == 0:
        raise DegenerateInputError("cannot evaluate an empty batch")
    check_pairing(batch, classes)
    r = compute_rational(batch, classes)
    if params is None:
        mask_values = nm.Tensor(np.ones(r.shape))
    else:
        mask_values = compute_mask(params, batch, classes, r).values
    logits = masked_logits(r, mask_values, logit_scale)
    predictions = logits.data.argmax(axis=1)
    correct = predictions == batch.labels
    per_class: dict[str, float] = {}
    for idx, name in enumerate(classes.class_names):
        hits = batch.labels == idx
        if hits.any():
            per_class[name] = float(correct[hits].mean() * 100.0)
    return SplitEval(
        accuracy=float(correct.mean() * 100.0),
        per_class=per_class,
        mask_stats=_mask_stats(mask_values.data),
        predictions=predictions,
    )


def bundle_report(
    bundle: DatasetBundle,
    params: AdapterParams | None = None,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
    base_classes: ClassMatrix | None = None,
) -> EvalReport:
    """Base and new split accuracies plus their harmonic mean.

    ``base_classes`` overrides the bundle's base class matrix (the trained
    classifier in the two-stage regime); new classes always come from the
    bundle since they were never trained.
    """
    base_cm = bundle.base_classes if base_classes is None else base_classes
    base = evaluate(bundle.base_test, base_cm, params, logit_scale)
    new = evaluate(bundle.new_test, bundle.new_classes, params, logit_scale)
    per_class = {f"base/{k}": v for k, v in base.per_class.items()}
    per_class.update({f"new/{k}": v for k, v in new.per_class.items()})
    # Aggregate mask stats over both eval splits, weighted by entry counts.
    n_base = bundle.base_test.count * base_cm.count * base_cm.dim
    n_new = bundle.new_test.count * bundle.new_classes.count * bundle.new_classes.dim
    mean = (base.mask_stats.mean * n_base + new.mask_stats.mean * n_new) / (n_base + n_new)
    stats = MaskStats(
        mean=float(mean),
        std=float((base.mask_stats.std * n_base + new.mask_stats.std * n_new) / (n_base + n_new)),
        min=min(base.mask_stats.min, new.mask_stats.min),
        max=max(base.mask_stats.max, new.mask_stats.max),
    )
    return EvalReport(
        base_acc=base.accuracy,
        new_acc=new.accuracy,
        harmonic_mean=harmonic_mean(base.accuracy, new.accuracy),
        per_class=per_class,
        mask_stats=stats,
    )


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: AdapterParams
    history: list[EpochStats]
    classifier: ClassMatrix | None = None


def _epoch_batches(rng: np.random.Generator, count: int, batch_size: int) -> Iterable[np.ndarray]:
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def _train_step(
    params: AdapterParams,
    feats_all: np.ndarray,
    labels_all: np.ndarray,
    chunk: np.ndarray,
    class_rows_source,
    cfg: RunConfig,
    regime: str,
    step_index: int,
):
    """One gradient evaluation; returns (tape, total, parts)."""
    batch = EmbeddingBatch(
        feats_all[chunk], labels_all[chunk], normalized=True, split_tag="base-train"
    )
    with nm.GradTape() as tape:
        feats = nm.Tensor(batch.features)
        class_rows = class_rows_source()
        rat = rational_values(feats, class_rows)
        offsets = mask_offsets(params, feats, class_rows, rat)
        mask_values = nm.add_scalar(offsets, 1.0)
        logits = nm.scale(nm.sum_lastdim(nm.mul(mask_values, rat)), cfg.logit_scale)
        parts = {"adapt": adapt_loss(logits, batch.labels)}
        if cfg.loss.apply_reg:
            parts["reg"] = mask_reg(mask_values, cfg.loss)
        total = total_loss(regime, cfg.loss, parts)
    value = total.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(
            step_index, {k: v.item() for k, v in parts.items()} | {"total": value}
        )
    return tape, total, parts


def train_eft(bundle: DatasetBundle, params: AdapterParams, cfg: RunConfig) -> TrainResult:
    """Mask-generator-only fine-tuning on the base training split."""
    if not bundle.base_classes.normalized:
        raise ContractError("base classes must be normalized for frozen-classifier training")
    check_pairing(bundle.base_train, bundle.base_classes)
    rng = np.random.default_rng(cfg.seed)
    feats_all = bundle.base_train.features
    labels_all = bundle.base_train.labels
    n = bundle.base_train.count
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    learnables = params.learnables()
    opt = _make_optimizer(cfg, learnables, cfg.learning_rate, total_steps)
    frozen_rows = nm.Tensor(bundle.base_classes.weights)

    history: list[EpochStats] = []
    step_index = 0
    for epoch in range(cfg.epochs):
        losses_seen: list[float] = []
        regs_seen: list[float] = []
        for chunk in _epoch_batches(rng, n, cfg.batch_size):
            tape, total, parts = _train_step(
                params, feats_all, labels_all, chunk, lambda: frozen_rows, cfg, "EFT", step_index
            )
            tape.backward(total)
            opt.step([tape.gradient(t) for t in learnables])
            losses_seen.append(total.item())
            regs_seen.append(parts["reg"].item() if "reg" in parts else 0.0)
            step_index += 1
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            report = bundle_report(bundle, params, cfg.logit_scale)
            history.append(
                EpochStats(
                    epoch=epoch + 1,
                    loss=float(np.mean(losses_seen)),
                    reg=float(np.mean(regs_seen)),
                    base_acc=report.base_acc,
                    new_acc=report.new_acc,
                )
            )
    if cfg.epochs and not history:
        report = bundle_report(bundle, params, cfg.logit_scale)
        history.append(
            EpochStats(cfg.epochs, float(np.mean(losses_seen)), float(np.mean(regs_seen)),
                       report.base_acc, report.new_acc)
        )
    return TrainResult(params=params, history=history)


def train_fft_lite(bundle: DatasetBundle, params: AdapterParams, cfg: RunConfig) -> TrainResult:
    """Two-stage schedule with a learnable classifier initialized from the classes.

    Stage 1 trains the mask generator (regularized objective, classifier
    frozen); stage 2 jointly updates the mask generator and the classifier
    with cross-entropy alone.
    """
    check_pairing(bundle.base_train, bundle.base_classes)
    rng = np.random.default_rng(cfg.seed)
    feats_all = bundle.base_train.features
    labels_all = bundle.base_train.labels
    n = bundle.base_train.count

    # Classifier starts as an exact copy of the normalized class embeddings.
    classifier = nm.Tensor(bundle.base_classes.weights, requires_grad=True)

    history: list[EpochStats] = []
    step_index = 0

    def run_stage(regime: str, epochs: int, lr: float, tensors: list[nm.Tensor], loss_cfg: LossConfig):
        nonlocal step_index
        stage_cfg = replace(cfg, loss=loss_cfg)
        opt = AdamW(tensors, lr, weight_decay=cfg.weight_decay)
        for epoch in range(epochs):
            losses_seen: list[float] = []
            regs_seen: list[float] = []
            for chunk in _epoch_batches(rng, n, cfg.batch_size):
                tape, total, parts = _train_step(
                    params,
                    feats_all,
                    labels_all,
                    chunk,
                    lambda: nm.l2_normalize_rows(classifier),
                    stage_cfg,
                    regime,
                    step_index,
                )
                tape.backward(total)
                opt.step([tape.gradient(t) for t in tensors])
                losses_seen.append(total.item())
                regs_seen.append(parts["reg"].item() if "reg" in parts else 0.0)
                step_index += 1
            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                report = bundle_report(
                    bundle, params, cfg.logit_scale, base_classes=_classifier_matrix()
                )
                history.append(
                    EpochStats(
                        epoch=len(history) + 1,
                        loss=float(np.mean(losses_seen)),
                        reg=float(np.mean(regs_seen)),
                        base_acc=report.base_acc,
                        new_acc=report.new_acc,
                    )
                )

    def _classifier_matrix() -> ClassMatrix:
        norms = np.linalg.norm(classifier.data, axis=1, keepdims=True)
        # Skip the division on already-unit rows so an untrained classifier
        # round-trips bit-for-bit.
        rows = classifier.data if np.all(np.abs(norms - 1.0) <= 1e-12) else classifier.data / norms
        return ClassMatrix(
            rows, bundle.base_classes.class_names, learnable=True, normalized=True
        )

    stage1_loss = LossConfig(
        reg_weight=cfg.loss.reg_weight, reg_norm=cfg.loss.reg_norm, apply_reg=True
    )
    stage2_loss = LossConfig(reg_weight=0.0, reg_norm=cfg.loss.reg_norm, apply_reg=False)
    run_stage("FFT-lite-stage1", cfg.stage1_epochs, cfg.stage1_lr, params.learnables(), stage1_loss)
    run_stage(
        "FFT-lite-stage2",
        cfg.stage2_epochs,
        cfg.stage2_lr,
        params.learnables() + [classifier],
        stage2_loss,
    )
    return TrainResult(params=params, history=history, classifier=_classifier_matrix())


# ---------------------------------------------------------------------------
# artifacts


def write_history_csv(history: list[EpochStats], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "reg", "base_acc", "new_acc"])
        for row in history:
            writer.writerow(
                [row.epoch, f"{row.loss:.10g}", f"{row.reg:.10g}",
                 f"{row.base_acc:.10g}", f"{row.new_acc:.10g}"]
            )


def write_report(report: EvalReport, path: Union[str, Path], extra: dict | None = None) -> None:
    lines = {
        "base_acc": f"{report.base_acc:.10g}",
        "new_acc": f"{report.new_acc:.10g}",
        "harmonic_mean": f"{report.harmonic_mean:.10g}",
        "mask_mean": f"{report.mask_stats.mean:.10g}",
        "mask_std": f"{report.mask_stats.std:.10g}",
        "mask_min": f"{report.mask_stats.min:.10g}",
        "mask_max": f"{report.mask_stats.max:.10g}",
    }
    for name, value in sorted(report.per_class.items()):
        lines[f"per_class/{name}"] = f"{value:.10g}"
    if extra:
        lines.update({k: str(v) for k, v in extra.items()})
    text = "".join(f"{k}={v}\n" for k, v in lines.items())
    Path(path).write_text(text, encoding="utf-8")
