"""Metric unit examples plus the metric-axiom property tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmt.metrics import bleu, distinct1, levenshtein, tag_accuracy

seqs = st.lists(st.integers(0, 4), min_size=0, max_size=12)


class TestBleu:
    def test_self_match_is_100(self):
        cands = [["a", "b", "c", "d", "e"], ["x", "y"]]
        assert bleu(cands, cands) == pytest.approx(100.0)

    def test_all_empty_candidates(self):
        assert bleu([[], []], [["a"], ["b"]]) == 0.0

    def test_clipped_unigram_zero_higher_orders(self):
        # "the the the the" vs "the cat": unigram precision clipped to 1/4,
        # every higher order is 0, so unsmoothed BLEU is 0.
        assert bleu([["the"] * 4], [["the", "cat"]]) == 0.0

    def test_smoothing_rescues_short_match(self):
        score = bleu([["the", "cat"]], [["the", "cat", "sat"]], smooth=True)
        assert 0.0 < score < 100.0

    def test_brevity_penalty(self):
        # perfect prefix match, candidate shorter: BP = exp(1 - ref/cand);
        # orders longer than the candidate have no n-grams and are skipped
        cand = [["a", "b", "c"]]
        ref = [["a", "b", "c", "d"]]
        assert bleu(cand, ref) == pytest.approx(100.0 * np.exp(1 - 4 / 3))
        cand = [["a", "b", "c", "d"]]
        ref = [["a", "b", "c", "d", "e"]]
        assert bleu(cand, ref) == pytest.approx(100.0 * np.exp(1 - 5 / 4))

    def test_short_self_match_still_100(self):
        assert bleu([["a", "b"]], [["a", "b"]]) == pytest.approx(100.0)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [])

    def test_pairing_preserved(self):
        cands = [["a", "b"], ["c", "d"]]
        refs = [["a", "b"], ["c", "d"]]
        assert bleu(cands, refs) == pytest.approx(100.0)
        # swapping pairings breaks the match
        assert bleu(cands, refs[::-1]) < 100.0


class TestDistinct1:
    def test_repeated_word(self):
        assert distinct1([["a", "a", "a"]]) == pytest.approx(1 / 3)

    def test_all_distinct(self):
        assert distinct1([["a", "b"], ["c", "d"]]) == pytest.approx(1.0)

    def test_shared_across_sentences(self):
        assert distinct1([["a", "b"], ["a", "c"]]) == pytest.approx(3 / 4)

    def test_duplicate_sentence_never_increases(self):
        base = [["a", "b"], ["a", "c"]]
        assert distinct1(base + [base[0]]) <= distinct1(base)

    def test_zero_tokens_rejected(self):
        with pytest.raises(ValueError):
            distinct1([[]])


class TestLevenshtein:
    def test_equal(self):
        assert levenshtein([1, 2, 3], [1, 2, 3]) == 0

    def test_empty_vs_k(self):
        assert levenshtein([], [7, 8, 9]) == 3
        assert levenshtein([7, 8, 9], []) == 3

    def test_kitten_sitting(self):
        assert levenshtein("kitten", "sitting") == 3

    def test_against_recursive_oracle(self):
        def slow(a, b):
            if not a:
                return len(b)
            if not b:
                return len(a)
            return min(slow(a[1:], b) + 1, slow(a, b[1:]) + 1,
                       slow(a[1:], b[1:]) + (a[0] != b[0]))

        rng = np.random.default_rng(0)
        for _ in range(30):
            a = rng.integers(0, 3, size=rng.integers(0, 6)).tolist()
            b = rng.integers(0, 3, size=rng.integers(0, 6)).tolist()
            assert levenshtein(a, b) == slow(a, b)

    @given(seqs, seqs)
    @settings(max_examples=150, deadline=None)
    def test_symmetry_and_identity(self, a, b):
        assert levenshtein(a, b) == levenshtein(b, a)
        assert (levenshtein(a, b) == 0) == (a == b)

    @given(seqs, seqs, seqs)
    @settings(max_examples=150, deadline=None)
    def test_triangle_inequality(self, a, b, c):
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


class TestTagAccuracy:
    def test_identical(self):
        assert tag_accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_disjoint(self):
        assert tag_accuracy([1, 1], [2, 2]) == 0.0

    def test_half(self):
        assert tag_accuracy([1, 2], [1, 3]) == 0.5

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            tag_accuracy([1], [1, 2])
