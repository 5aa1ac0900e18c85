"""Brute-force verification of the sufficiency and masking inequalities.

Everything runs on small discrete ensembles: a finite support of
(embedding, label) pairs with exact probabilities against one fixed class
matrix. Mutual information is the plug-in value over the exactly enumerated
joint, so the lemma comparisons carry no estimation error. Mask searches
enumerate the grid {0.5, 1, 2} per entry; those factors are powers of two,
so masking is exact in binary floating point and every run reproduces
bit-for-bit.

Statistics are quantized into uniform bins before counting. When the
quantizer is injective on the support (checked, never assumed), the
sufficiency equality and the constrained-mask equalities hold exactly;
collisions are reported instead of asserted away.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, SizeError

MASK_GRID = (0.5, 1.0, 2.0)

_MAX_DIM = 4
_MAX_CLASSES = 3
_MAX_SUPPORT = 32

EQ_TOL = 1e-12


@dataclass(frozen=True)
class Quantizer:
    """Uniform-bin bucketizer for real-valued statistics."""

    bins: int = 4096
    lo: float = -2.0
    hi: float = 2.0

    def __post_init__(self):
        if self.bins < 1 or not self.hi > self.lo:
            raise ConfigError(f"need bins >= 1 and hi > lo, got {self}")

    def bucket(self, values: np.ndarray) -> tuple[int, ...]:
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        scaled = (flat - self.lo) / (self.hi - self.lo) * self.bins
        idx = np.clip(np.floor(scaled).astype(np.int64), 0, self.bins - 1)
        return tuple(int(i) for i in idx)


@dataclass
class SupportPoint:
    features: np.ndarray
    label: int
    prob: float


@dataclass
class DiscreteEnsemble:
    points: list[SupportPoint]
    classes: np.ndarray
    quantizer: Quantizer = field(default_factory=Quantizer)

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.float64)
        if not self.points:
            raise DegenerateInputError("ensemble needs a nonempty support")
        if len(self.points) > _MAX_SUPPORT:
            raise SizeError(f"support {len(self.points)} exceeds brute-force budget {_MAX_SUPPORT}")
        k, d = self.classes.shape
        if d > _MAX_DIM or k > _MAX_CLASSES:
            raise SizeError(f"classes {k}x{d} exceed brute-force budget {_MAX_CLASSES}x{_MAX_DIM}")
        for p in self.points:
            p.features = np.asarray(p.features, dtype=np.float64).reshape(-1)
            if p.features.shape[0] != d:
                raise ConfigError(f"support width {p.features.shape[0]} != class width {d}")
        total = math.fsum(p.prob for p in self.points)
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"support probabilities sum to {total!r}, expected 1")

    @property
    def dim(self) -> int:
        return self.classes.shape[1]

    @property
    def n_classes(self) -> int:
        return self.classes.shape[0]

    def rational(self, features: np.ndarray) -> np.ndarray:
        return features[None, :] * self.classes


def _plug_in_mi(triples: list[tuple[int, Hashable, float]]) -> float:
    joint: dict[tuple[int, Hashable], float] = {}
    p_label: dict[int, float] = {}
    p_stat: dict[Hashable, float] = {}
    for y, t, prob in triples:
        key = (y, t)
        joint[key] = joint.get(key, 0.0) + prob
        p_label[y] = p_label.get(y, 0.0) + prob
        p_stat[t] = p_stat.get(t, 0.0) + prob
    total = 0.0
    for (y, t), p in joint.items():
        if p > 0.0:
            total += p * math.log(p / (p_label[y] * p_stat[t]))
    return total


def mutual_information(
    ensemble: DiscreteEnsemble,
    statistic: Callable[[np.ndarray, np.ndarray], Hashable],
) -> float:
    """Plug-in I(label; statistic) over the exact enumerated joint."""
    return _plug_in_mi(
        [
            (p.label, statistic(p.features, ensemble.classes), p.prob)
            for p in ensemble.points
        ]
    )


# ---------------------------------------------------------------------------
# sufficiency (joint embeddings vs rational matrix)


@dataclass
class Lemma1Report:
    mi_raw: float
    mi_rational: float
    collisions_raw: list[tuple[int, int]]
    collisions_rational: list[tuple[int, int]]

    @property
    def injective(self) -> bool:
        return not self.collisions_raw and not self.collisions_rational

    @property
    def equal(self) -> bool:
        return abs(self.mi_raw - self.mi_rational) <= EQ_TOL

    @property
    def holds(self) -> bool:
        # With injective quantization sufficiency is an equality; otherwise
        # the rational statistic may only lose information.
        if self.injective:
            return self.equal
        return self.mi_rational <= self.mi_raw + EQ_TOL


def _collisions(buckets: Sequence[Hashable], points: list[SupportPoint]) -> list[tuple[int, int]]:
    found = []
    for i in range(len(buckets)):
        for j in range(i + 1, len(buckets)):
            if buckets[i] == buckets[j] and not np.array_equal(
                points[i].features, points[j].features
            ):
                found.append((i, j))
    return found


def verify_lemma1(ensemble: DiscreteEnsemble) -> Lemma1Report:
    """Compare the label information of (f, h) against the rational matrix."""
    q = ensemble.quantizer
    raw = [q.bucket(p.features) for p in ensemble.points]
    rational = [q.bucket(ensemble.rational(p.features)) for p in ensemble.points]
    return Lemma1Report(
        mi_raw=_mi_with_buckets(ensemble, raw),
        mi_rational=_mi_with_buckets(ensemble, rational),
        collisions_raw=_collisions(raw, ensemble.points),
        collisions_rational=_collisions(rational, ensemble.points),
    )


def _mi_with_buckets(ensemble: DiscreteEnsemble, buckets: Sequence[Hashable]) -> float:
    return _plug_in_mi(
        [(p.label, b, p.prob) for p, b in zip(ensemble.points, buckets)]
    )


# ---------------------------------------------------------------------------
# masking schemes (lemmas 2 and 3)


SCHEME_KINDS = ("full", "image-side", "text-side", "joint")


@dataclass(frozen=True)
class MaskScheme:
    """Where a searched mask applies: the rational matrix, one modality, or both."""

    kind: str
    values: tuple

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ConfigError(f"unknown mask scheme {self.kind!r}, expected one of {SCHEME_KINDS}")


@dataclass
class SchemeResult:
    best: float
    best_mask: MaskScheme
    evaluations: int


@dataclass
class Lemma23Report:
    full: SchemeResult
    image_side: SchemeResult
    text_side: SchemeResult
    joint: SchemeResult
    constrained_equality_dev: float
    invertible_equality_dev: float
    collisions: bool
    partial: bool = False

    @property
    def lemma2_holds(self) -> bool:
        return (
            self.full.best >= self.image_side.best - EQ_TOL
            and self.full.best >= self.text_side.best - EQ_TOL
        )

    @property
    def lemma3_holds(self) -> bool:
        return self.full.best >= self.joint.best - EQ_TOL

    @property
    def lemma2_strict(self) -> bool:
        return self.full.best > max(self.image_side.best, self.text_side.best) + EQ_TOL

    @property
    def lemma3_strict(self) -> bool:
        return self.full.best > self.joint.best + EQ_TOL


def _grid(shape: int):
    return itertools.product(MASK_GRID, repeat=shape)


def verify_lemma23(ensemble: DiscreteEnsemble, budget: int = 1_000_000) -> Lemma23Report:
    """Exhaustive grid search over mask placements for the masking lemmas.

    Returns a partial report (no scheme values, no assertions possible) when
    the planned number of statistic evaluations exceeds ``budget``.
    """
    k, d = ensemble.n_classes, ensemble.dim
    q = ensemble.quantizer
    n_full = len(MASK_GRID) ** (k * d)
    n_img = len(MASK_GRID) ** d
    planned = n_full + n_img + n_full + n_img * n_full
    if planned > budget:
        def empty(kind):
            return SchemeResult(best=math.nan, best_mask=MaskScheme(kind, ()), evaluations=0)

        return Lemma23Report(
            full=empty("full"), image_side=empty("image-side"),
            text_side=empty("text-side"), joint=empty("joint"),
            constrained_equality_dev=math.nan, invertible_equality_dev=math.nan,
            collisions=True, partial=True,
        )

    feats = [p.features for p in ensemble.points]
    rats = [ensemble.rational(f) for f in feats]
    raw_f_buckets = [q.bucket(f) for f in feats]

    def mi_of(buckets: list[Hashable]) -> float:
        return _mi_with_buckets(ensemble, buckets)

    collisions = False

    def check_distinct(buckets: list[Hashable]) -> None:
        nonlocal collisions
        if len(set(buckets)) != len(buckets) and not collisions:
            distinct = len({f.tobytes() for f in feats})
            if distinct == len(feats):
                collisions = True

    # full K x D masks on the rational matrix
    best_full = -1.0
    best_full_mask: tuple[float, ...] = ()
    full_values: dict[tuple[float, ...], float] = {}
    for mask in _grid(k * d):
        marr = np.asarray(mask).reshape(k, d)
        buckets = [q.bucket(r * marr) for r in rats]
        check_distinct(buckets)
        value = mi_of(buckets)
        full_values[mask] = value
        if value > best_full:
            best_full, best_full_mask = value, mask
    full = SchemeResult(best_full, MaskScheme("full", best_full_mask), n_full)

    # image-side masks: statistic is (f o m, h) with h constant
    best_img = -1.0
    best_img_mask: tuple[float, ...] = ()
    img_values: dict[tuple[float, ...], float] = {}
    for mask in _grid(d):
        marr = np.asarray(mask)
        buckets = [q.bucket(f * marr) for f in feats]
        check_distinct(buckets)
        value = mi_of(buckets)
        img_values[mask] = value
        if value > best_img:
            best_img, best_img_mask = value, mask
    image_side = SchemeResult(best_img, MaskScheme("image-side", best_img_mask), n_img)

    # text-side masks: statistic is (h o m, f); the masked classes are a
    # constant, so the raw embedding carries all the information
    best_txt = -1.0
    best_txt_mask: tuple[float, ...] = ()
    for mask in _grid(k * d):
        marr = np.asarray(mask).reshape(k, d)
        hm = q.bucket(ensemble.classes * marr)
        buckets = [(hm, rb) for rb in raw_f_buckets]
        value = mi_of(buckets)
        if value > best_txt:
            best_txt, best_txt_mask = value, mask
    text_side = SchemeResult(best_txt, MaskScheme("text-side", best_txt_mask), n_full)

    # joint masks on both sides
    best_joint = -1.0
    best_joint_mask = ((), ())
    invertible_dev = 0.0
    for img_mask in _grid(d):
        marr = np.asarray(img_mask)
        masked_f_buckets = [q.bucket(f * marr) for f in feats]
        for txt_mask in _grid(k * d):
            tarr = np.asarray(txt_mask).reshape(k, d)
            hm = q.bucket(ensemble.classes * tarr)
            buckets = [(hm, fb) for fb in masked_f_buckets]
            value = mi_of(buckets)
            if value > best_joint:
                best_joint, best_joint_mask = value, (img_mask, txt_mask)
            # every grid mask is entrywise nonzero, hence invertible; the
            # joint scheme must then match the image-side scheme exactly
            invertible_dev = max(invertible_dev, abs(value - img_values[img_mask]))
    joint = SchemeResult(best_joint, MaskScheme("joint", best_joint_mask), n_img * n_full)

    # constrained case: a column-constant full mask replicates the image mask
    constrained_dev = 0.0
    for img_mask, img_value in img_values.items():
        replicated = tuple(np.tile(np.asarray(img_mask), (k, 1)).reshape(-1))
        constrained_dev = max(constrained_dev, abs(full_values[replicated] - img_value))

    return Lemma23Report(
        full=full,
        image_side=image_side,
        text_side=text_side,
        joint=joint,
        constrained_equality_dev=constrained_dev,
        invertible_equality_dev=invertible_dev,
        collisions=collisions,
    )


# ---------------------------------------------------------------------------
# randomized collision-free ensembles


def random_ensemble(
    seed: int,
    k: int = 2,
    d: int = 2,
    support: int = 6,
    bins: int = 4096,
    max_attempts: int = 200,
) -> DiscreteEnsemble:
    """Seeded ensemble whose grid statistics are injective on the support.

    Candidates are redrawn (deterministically) until, for every pair of
    support points, some embedding coordinate and some rational entry keep
    the pair in distinct buckets under all three grid scalings. That makes
    every masked statistic injective, so the lemma equalities are exact.
    """
    quantizer = Quantizer(bins=bins)
    for attempt in range(max_attempts):
        rng = np.random.default_rng((seed, attempt, 0x1F))
        classes = rng.standard_normal((k, d))
        classes /= np.linalg.norm(classes, axis=1, keepdims=True)
        feats = rng.standard_normal((support, d))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        labels = rng.integers(0, k, size=support)
        weights = rng.integers(1, 5, size=support).astype(np.float64)
        probs = weights / math.fsum(weights)

        if _fully_separated(feats, classes, quantizer):
            points = [
                SupportPoint(features=feats[i], label=int(labels[i]), prob=float(probs[i]))
                for i in range(support)
            ]
            return DiscreteEnsemble(points=points, classes=classes, quantizer=quantizer)
    raise ConfigError(f"no collision-free ensemble found in {max_attempts} attempts")


def _fully_separated(feats: np.ndarray, classes: np.ndarray, q: Quantizer) -> bool:
    n, d = feats.shape
    rats = [feats[i][None, :] * classes for i in range(n)]

    def separated(values_a: np.ndarray, values_b: np.ndarray) -> bool:
        # Some coordinate must land in distinct buckets under all scalings.
        for j in range(values_a.size):
            a, b = values_a.reshape(-1)[j], values_b.reshape(-1)[j]
            if all(
                q.bucket(np.array([m * a])) != q.bucket(np.array([m * b])) for m in MASK_GRID
            ):
                return True
        return False

    for i in range(n):
        for j in range(i + 1, n):
            if not separated(feats[i], feats[j]):
                return False
            if not separated(rats[i], rats[j]):
                return False
    return True


# ---------------------------------------------------------------------------
# reporting


def report_lines(index: int, lemma1: Lemma1Report, lemma23: Lemma23Report) -> list[str]:
    def verdict(lhs: float, rhs: float) -> str:
        if abs(lhs - rhs) <= EQ_TOL:
            return "equal"
        if lhs > rhs:
            return "holds"
        return "violated"

    lines = [
        f"ensemble={index} lemma=1 lhs={lemma1.mi_rational:.12g} "
        f"rhs={lemma1.mi_raw:.12g} verdict={verdict(lemma1.mi_rational, lemma1.mi_raw)}",
        f"ensemble={index} lemma=2 lhs={lemma23.full.best:.12g} "
        f"rhs={lemma23.image_side.best:.12g} "
        f"verdict={verdict(lemma23.full.best, lemma23.image_side.best)}",
        f"ensemble={index} lemma=2 lhs={lemma23.full.best:.12g} "
        f"rhs={lemma23.text_side.best:.12g} "
        f"verdict={verdict(lemma23.full.best, lemma23.text_side.best)}",
        f"ensemble={index} lemma=3 lhs={lemma23.full.best:.12g} "
        f"rhs={lemma23.joint.best:.12g} "
        f"verdict={verdict(lemma23.full.best, lemma23.joint.best)}",
    ]
    return lines
