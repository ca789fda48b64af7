"""Metric definitions against hand-computed values."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htdn import metrics as mx
from htdn.errors import ContractError, DataError


def _labels_from_counts(tp, fp, tn, fn):
    y = [1] * tp + [0] * fp + [0] * tn + [1] * fn
    p = [1] * tp + [1] * fp + [0] * tn + [0] * fn
    return np.array(y), np.array(p)


class TestConfusion:
    def test_counts(self):
        y, p = _labels_from_counts(3, 2, 4, 1)
        c = mx.confusion(y, p)
        assert (c.tp, c.fp, c.tn, c.fn) == (3, 2, 4, 1)
        assert c.total == 10

    def test_matches_plain_loop(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, size=500)
        p = rng.integers(0, 2, size=500)
        c = mx.confusion(y, p)
        tally = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
        for a, b in zip(y, p):
            key = ("t" if a == b else "f") + ("p" if b == 1 else "n")
            tally[key] += 1
        assert (c.tp, c.fp, c.tn, c.fn) == (tally["tp"], tally["fp"], tally["tn"], tally["fn"])

    def test_rejects_nonbinary(self):
        with pytest.raises(ContractError):
            mx.confusion([0, 1, 2], [0, 1, 1])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ContractError, match="mismatch"):
            mx.confusion([0, 1], [0, 1, 1])

    def test_rejects_empty(self):
        with pytest.raises(ContractError):
            mx.confusion([], [])


class TestWeightedAccuracy:
    def test_hand_value(self):
        # recall 9/10, specificity 13/20 -> (0.9 + 0.65) / 2
        y, p = _labels_from_counts(9, 7, 13, 1)
        assert mx.weighted_accuracy(mx.confusion(y, p)) == pytest.approx(0.775)

    def test_perfect(self):
        y, p = _labels_from_counts(5, 0, 5, 0)
        assert mx.weighted_accuracy(mx.confusion(y, p)) == 1.0

    @given(st.lists(st.integers(0, 1), min_size=2, max_size=60).filter(
        lambda ls: 0 < sum(ls) < len(ls)), st.integers(0, 1))
    @settings(max_examples=80)
    def test_constant_predictor_is_half(self, labels, const):
        y = np.array(labels)
        p = np.full_like(y, const)
        assert mx.weighted_accuracy(mx.confusion(y, p)) == 0.5

    def test_needs_both_classes(self):
        with pytest.raises(ContractError, match="both classes"):
            mx.weighted_accuracy(mx.confusion([1, 1], [1, 0]))

    def test_insensitive_to_imbalance(self):
        # same recall/specificity at 10x the negative count
        a = mx.weighted_accuracy(mx.confusion(*_labels_from_counts(8, 5, 15, 2)))
        b = mx.weighted_accuracy(mx.confusion(*_labels_from_counts(8, 50, 150, 2)))
        assert a == pytest.approx(b)


class TestAccuracy:
    def test_majority_vote_on_skewed_corpus(self):
        # all-negative prediction on a 3257-positive / 6992-negative corpus
        y, p = _labels_from_counts(0, 0, 6992, 3257)
        c = mx.confusion(y, p)
        assert mx.accuracy(c) == pytest.approx(6992 / 10249)
        assert mx.weighted_accuracy(c) == 0.5


class TestPrf1:
    def test_exact_counts(self):
        c = mx.ConfusionCounts(tp=83283, fp=23217, tn=0, fn=112217)
        precision, recall, f1 = mx.prf1(c)
        assert precision == pytest.approx(83283 / 106500)
        assert recall == pytest.approx(83283 / 195500)
        expected_f1 = 2 * precision * recall / (precision + recall)
        assert f1 == pytest.approx(expected_f1)
        assert round(100 * f1, 1) == 55.2

    def test_zero_conventions(self):
        assert mx.prf1(mx.ConfusionCounts(0, 0, 5, 3)) == (0.0, 0.0, 0.0)
        assert mx.prf1(mx.ConfusionCounts(0, 2, 5, 0)) == (0.0, 0.0, 0.0)

    def test_summarize_keys(self):
        y, p = _labels_from_counts(3, 2, 4, 1)
        s = mx.summarize(y, p)
        assert s["tp"] == 3 and s["fn"] == 1
        assert 0 <= s["f1"] <= 1
        assert s["accuracy"] == pytest.approx(0.7)


class TestKrippendorff:
    def test_two_rater_hand_case(self):
        # units (a,a), (a,b), (b,b): coincidences [[2,1],[1,2]],
        # D_o = 2/6, D_e = 18/30, alpha = 4/9
        ratings = [["a", "a"], ["a", "b"], ["b", "b"]]
        assert mx.krippendorff_alpha(ratings) == pytest.approx(4 / 9)

    def test_missing_ratings_hand_case(self):
        # (a,a,a) contributes 3 to o[a,a]; (a,-,b) one cross pair each way;
        # (b,b) two; D_o = 2/7, D_e = 4/7, alpha = 1/2
        ratings = [["a", "a", "a"], ["a", None, "b"], ["b", "b"]]
        assert mx.krippendorff_alpha(ratings) == pytest.approx(0.5)

    def test_all_identical_is_one(self, caplog):
        with caplog.at_level("INFO"):
            a = mx.krippendorff_alpha([["x", "x"], ["x", "x", "x"]])
        assert a == 1.0

    def test_random_ratings_near_zero(self):
        rng = np.random.default_rng(3)
        cats = ["a", "b", "c"]
        ratings = [[cats[i] for i in rng.integers(0, 3, size=3)] for _ in range(600)]
        assert abs(mx.krippendorff_alpha(ratings)) < 0.1

    def test_unit_order_invariance(self):
        ratings = [["a", "b"], ["b", "b"], ["a", "a"], ["a", "b", None]]
        a = mx.krippendorff_alpha(ratings)
        b = mx.krippendorff_alpha(list(reversed(ratings)))
        assert a == pytest.approx(b)

    def test_single_rating_units_drop_out(self):
        base = [["a", "a"], ["a", "b"], ["b", "b"]]
        padded = base + [["a"], [None, "b"]]
        assert mx.krippendorff_alpha(padded) == pytest.approx(mx.krippendorff_alpha(base))

    def test_no_pairable_units_rejected(self):
        with pytest.raises(ContractError):
            mx.krippendorff_alpha([["a"], ["b"]])

    def test_only_nominal(self):
        with pytest.raises(ContractError):
            mx.krippendorff_alpha([["a", "a"]], metric="interval")

    def test_perfect_disagreement_is_negative(self):
        ratings = [["a", "b"]] * 10
        assert mx.krippendorff_alpha(ratings) < 0


class TestSimpleAgreement:
    def test_hand_value(self):
        # unit 1: 1 of 1 pair agrees; unit 2: 1 of 3 pairs
        ratings = [["a", "a"], ["a", "a", "b"]]
        assert mx.simple_agreement(ratings) == pytest.approx((1.0 + 1 / 3) / 2)


class TestAnnotationFile:
    def test_load(self, tmp_path):
        p = tmp_path / "ann.tsv"
        p.write_text("u1\tunsure\tlikely yes\nu2\tcertainly no\t-\tcertainly no\n")
        units = mx.load_annotations(p)
        assert units == [["unsure", "likely yes"], ["certainly no", None, "certainly no"]]

    def test_bad_level_names_line(self, tmp_path):
        p = tmp_path / "ann.tsv"
        p.write_text("u1\tunsure\tnope\n")
        with pytest.raises(DataError, match=r"ann\.tsv:1"):
            mx.load_annotations(p)

    def test_needs_two_columns(self, tmp_path):
        p = tmp_path / "ann.tsv"
        p.write_text("u1\tunsure\n")
        with pytest.raises(DataError, match="two rating"):
            mx.load_annotations(p)

    def test_empty_rejected(self, tmp_path):
        p = tmp_path / "ann.tsv"
        p.write_text("\n")
        with pytest.raises(DataError, match="no annotation rows"):
            mx.load_annotations(p)
