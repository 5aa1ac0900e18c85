"""Plug-in MI values, sufficiency equality, and the masking inequalities."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rada import infotheory as it
from rada.errors import ConfigError, SizeError
from rada.infotheory import DiscreteEnsemble, Quantizer, SupportPoint


def simple_ensemble(points, classes=None, bins=4096):
    classes = np.eye(2) if classes is None else np.asarray(classes)
    return DiscreteEnsemble(
        points=[SupportPoint(np.asarray(f, float), y, p) for f, y, p in points],
        classes=classes,
        quantizer=Quantizer(bins=bins),
    )


class TestMutualInformation:
    def test_independent_label_gives_zero(self):
        # same feature distribution under both labels
        ens = simple_ensemble(
            [
                ((0.5, 0.1), 0, 0.25),
                ((0.5, 0.1), 1, 0.25),
                ((-0.3, 0.9), 0, 0.25),
                ((-0.3, 0.9), 1, 0.25),
            ]
        )
        mi = it.mutual_information(ens, lambda f, h: ens.quantizer.bucket(f))
        assert abs(mi) <= 1e-12

    def test_perfect_binary_channel_gives_log_two(self):
        ens = simple_ensemble(
            [((1.0, 0.0), 0, 0.5), ((0.0, 1.0), 1, 0.5)]
        )
        mi = it.mutual_information(ens, lambda f, h: ens.quantizer.bucket(f))
        assert mi == pytest.approx(math.log(2.0), abs=1e-12)

    def test_three_point_hand_computation(self):
        # Two points share a bucket under a 4-bin quantizer; the third is
        # separate. Hand value: .5 ln(4/3) + .25 ln(2/3) + .25 ln 2.
        ens = simple_ensemble(
            [
                ((0.1, 0.1), 0, 0.5),
                ((0.3, 0.2), 1, 0.25),
                ((1.5, 0.5), 1, 0.25),
            ],
            bins=4,
        )
        buckets = [ens.quantizer.bucket(p.features) for p in ens.points]
        assert buckets[0] == buckets[1] != buckets[2]
        expected = 0.5 * math.log(4 / 3) + 0.25 * math.log(2 / 3) + 0.25 * math.log(2.0)
        mi = it.mutual_information(ens, lambda f, h: ens.quantizer.bucket(f))
        assert mi == pytest.approx(expected, abs=1e-15)

    def test_nonnegative_and_symmetric(self):
        for seed in range(10):
            ens = it.random_ensemble(seed)
            buckets = [ens.quantizer.bucket(p.features) for p in ens.points]
            mi = it._mi_with_buckets(ens, buckets)
            assert mi >= -1e-15
            # symmetry: swap the roles of label and statistic
            swapped = it._plug_in_mi(
                [(hash(b), p.label, p.prob) for p, b in zip(ens.points, buckets)]
            )
            assert mi == pytest.approx(swapped, abs=1e-12)

    def test_budget_limits(self):
        with pytest.raises(SizeError):
            DiscreteEnsemble(
                points=[SupportPoint(np.zeros(5), 0, 1.0)],
                classes=np.zeros((2, 5)),
            )
        with pytest.raises(ConfigError):
            simple_ensemble([((1.0, 0.0), 0, 0.7)])  # probabilities != 1


class TestLemma1:
    def test_equality_on_collision_free_ensembles(self):
        for seed in range(25):
            report = it.verify_lemma1(it.random_ensemble(seed))
            assert report.injective
            assert report.equal and report.holds

    def test_engineered_collision_loses_information(self):
        # A zero class-matrix column hides the only coordinate separating
        # the two labels, so the rational statistic drops below the raw one.
        classes = np.array([[1.0, 0.0], [0.5, 0.0]])
        ens = simple_ensemble(
            [
                ((0.6, 0.8), 0, 0.5),
                ((0.6, -0.8), 1, 0.5),
            ],
            classes=classes,
        )
        report = it.verify_lemma1(ens)
        assert report.collisions_rational and not report.collisions_raw
        assert report.mi_rational <= report.mi_raw - 0.5  # strictly less
        assert report.holds

    def test_single_point_support_has_zero_information(self):
        ens = DiscreteEnsemble(
            points=[SupportPoint(np.array([1.0, 0.0]), 0, 1.0)],
            classes=np.eye(2),
        )
        report = it.verify_lemma1(ens)
        assert report.mi_raw == 0.0 and report.mi_rational == 0.0
        assert report.equal


class TestLemma23:
    def test_inequalities_and_equality_cases_randomized(self):
        for seed in range(25):
            report = it.verify_lemma23(it.random_ensemble(seed))
            assert not report.partial and not report.collisions
            assert report.lemma2_holds and report.lemma3_holds
            assert report.constrained_equality_dev <= it.EQ_TOL
            assert report.invertible_equality_dev <= it.EQ_TOL

    def test_identity_masks_reproduce_unmasked_information(self):
        ens = it.random_ensemble(3)
        report = it.verify_lemma23(ens)
        lemma1 = it.verify_lemma1(ens)
        # injective quantization: every scheme's best equals I(Y; rational)
        for value in (report.full.best, report.image_side.best,
                      report.text_side.best, report.joint.best):
            assert value == pytest.approx(lemma1.mi_rational, abs=1e-12)

    def test_engineered_strictness_fixture(self):
        # Coarse bins; no image-side mask can separate the pair, but a full
        # mask doubling one rational entry crosses a bucket boundary.
        ens = simple_ensemble(
            [
                ((0.6, 0.8), 0, 0.5),
                ((0.8, 0.6), 1, 0.5),
            ],
            classes=np.array([[1.0, 0.0], [0.8, 0.6]]),
            bins=4,
        )
        report = it.verify_lemma23(ens)
        assert report.image_side.best == pytest.approx(0.0, abs=1e-12)
        assert report.text_side.best == pytest.approx(0.0, abs=1e-12)
        assert report.joint.best == pytest.approx(0.0, abs=1e-12)
        assert report.full.best == pytest.approx(math.log(2.0), abs=1e-12)
        assert report.lemma2_strict and report.lemma3_strict

    def test_budget_exceeded_gives_partial_report(self):
        report = it.verify_lemma23(it.random_ensemble(0), budget=10)
        assert report.partial
        assert math.isnan(report.full.best)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 5_000), coarsen_seed=st.integers(0, 5_000), m=st.integers(1, 4))
    def test_data_processing_inequality(self, seed, coarsen_seed, m):
        ens = it.random_ensemble(seed % 50)
        buckets = [ens.quantizer.bucket(p.features) for p in ens.points]
        mi_full = it._mi_with_buckets(ens, buckets)
        rng = np.random.default_rng(coarsen_seed)
        mapping = {b: int(rng.integers(0, m)) for b in set(buckets)}
        mi_coarse = it._mi_with_buckets(ens, [mapping[b] for b in buckets])
        assert mi_coarse <= mi_full + 1e-12


class TestReportLines:
    def test_format(self):
        ens = it.random_ensemble(1)
        lines = it.report_lines(1, it.verify_lemma1(ens), it.verify_lemma23(ens))
        assert len(lines) == 4
        for line in lines:
            assert line.startswith("ensemble=1 lemma=")
            assert "lhs=" in line and "rhs=" in line
            assert line.rsplit("verdict=", 1)[1] in ("holds", "equal", "violated")
