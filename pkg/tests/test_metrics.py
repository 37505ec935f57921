import math

import pytest

from retrocap.metrics import bleu, bleu_scores, build_idf, cider, tokenize


class TestTokenize:
    def test_lowercase_split_strip(self):
        assert tokenize("The  red Car, parked.") == ["the", "red", "car", "parked"]

    def test_internal_punctuation_survives(self):
        assert tokenize("left_of") == ["left_of"]

    def test_empty(self):
        assert tokenize("  ...  ") == []


class TestBleu:
    def test_identical_single_reference(self):
        hyp = tokenize("a red car parked outside")
        assert bleu(hyp, [hyp]) == pytest.approx(1.0)

    def test_identical_short_sentence(self):
        # orders longer than the hypothesis are excluded, not zeroed
        hyp = ["red", "car"]
        assert bleu(hyp, [hyp]) == pytest.approx(1.0)

    def test_clipping_fixture(self):
        # "the the the" vs "the cat": unigram precision clipped to 1/3
        score = bleu(["the", "the", "the"], [["the", "cat"]], max_n=1)
        assert score == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_zero_fourgram_gives_zero(self):
        hyp = tokenize("a b c d e")
        ref = tokenize("a b c x d e")  # shares trigrams at most
        assert bleu(hyp, [ref], max_n=4) == 0.0

    def test_smoothing_flag_rescues_zero(self):
        hyp = tokenize("a b c d e")
        ref = tokenize("a b c x d e")
        assert bleu(hyp, [ref], max_n=4, smooth=True) > 0.0

    def test_brevity_penalty(self):
        # hyp 2 tokens vs closest ref length 4: BP = exp(1 - 4/2)
        hyp = ["a", "b"]
        ref = [["a", "b", "c", "d"]]
        expected = math.exp(1 - 4 / 2) * math.exp(
            (math.log(1.0) + math.log(1.0)) / 2
        )
        assert bleu(hyp, ref, max_n=2) == pytest.approx(expected)

    def test_closest_reference_length_ties_prefer_shorter(self):
        hyp = ["a", "b", "c"]
        refs = [["a", "b"], ["a", "b", "c", "d"]]  # lengths 2 and 4, both |diff|=1
        # r = 2 -> c >= r -> BP = 1
        assert bleu(hyp, refs, max_n=1) == pytest.approx(1.0)

    def test_reference_order_symmetric(self):
        hyp = tokenize("a red car")
        r1, r2 = tokenize("a red truck"), tokenize("the red car")
        assert bleu(hyp, [r1, r2]) == bleu(hyp, [r2, r1])

    def test_empty_hypothesis_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [["a"]])

    def test_empty_references_rejected(self):
        with pytest.raises(ValueError):
            bleu(["a"], [])
        with pytest.raises(ValueError):
            bleu(["a"], [[]])

    def test_bleu_scores_keys(self):
        hyp = tokenize("a red car parked")
        out = bleu_scores(hyp, [hyp])
        assert set(out) == {"bleu1", "bleu2", "bleu3", "bleu4"}
        assert all(v == pytest.approx(1.0) for v in out.values())

    def test_range(self):
        hyp = tokenize("a red car parked outside the house")
        ref = tokenize("a blue car stood outside")
        for n in range(1, 5):
            assert 0.0 <= bleu(hyp, [ref], max_n=n, smooth=True) <= 1.0


CORPUS = [
    tokenize("a red car parked"),
    tokenize("a blue car parked"),
    tokenize("the dog runs"),
]


class TestCider:
    def test_hand_computed_fixture(self):
        # corpus above; hypothesis "a red car" vs reference "a red car parked".
        #
        # Unigram df: a 2, red 1, car 2, parked 2, blue 1, the 1, dog 1, runs 1
        # with L = ln(3/2), M = ln(3):
        #   cos1 = sqrt(2 L^2 + M^2) / sqrt(3 L^2 + M^2)
        # Bigram df: (a,red) 1, (red,car) 1, (car,parked) 2:
        #   cos2 = sqrt(2) * M / sqrt(2 M^2 + L^2)
        # Trigram df all 1: hyp {(a,red,car)}, ref adds (red,car,parked):
        #   cos3 = 1/sqrt(2)
        # The hypothesis has no 4-grams: cos4 = 0.
        L, M = math.log(1.5), math.log(3.0)
        expected = 10.0 / 4.0 * (
            math.sqrt(2 * L * L + M * M) / math.sqrt(3 * L * L + M * M)
            + math.sqrt(2.0) * M / math.sqrt(2 * M * M + L * L)
            + 1.0 / math.sqrt(2.0)
        )
        assert expected == pytest.approx(6.562804290090329, abs=1e-12)
        stats = build_idf(CORPUS)
        got = cider(tokenize("a red car"), [CORPUS[0]], stats)
        assert got == pytest.approx(expected, abs=1e-9)

    def test_identity_scores_ten(self):
        stats = build_idf(CORPUS)
        assert cider(CORPUS[0], [CORPUS[0]], stats) == pytest.approx(10.0, abs=1e-9)

    def test_disjoint_scores_zero(self):
        stats = build_idf(CORPUS)
        assert cider(tokenize("x y z w"), [CORPUS[0]], stats) == 0.0

    def test_reference_order_symmetric(self):
        stats = build_idf(CORPUS)
        hyp = tokenize("a red car")
        assert cider(hyp, [CORPUS[0], CORPUS[1]], stats) == pytest.approx(
            cider(hyp, [CORPUS[1], CORPUS[0]], stats)
        )

    def test_duplicate_reference_copy_leaves_score_unchanged(self):
        stats = build_idf(CORPUS)
        hyp = tokenize("a red car")
        base = cider(hyp, [CORPUS[0], CORPUS[1]], stats)
        with_copy = cider(hyp, [CORPUS[0], CORPUS[1], CORPUS[0]], stats)
        assert with_copy == pytest.approx(base, abs=1e-12)

    def test_range(self):
        stats = build_idf(CORPUS)
        for hyp in (CORPUS[0], tokenize("a car"), tokenize("dog runs fast")):
            assert 0.0 <= cider(hyp, [CORPUS[1], CORPUS[2]], stats) <= 10.0

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_idf([])

    def test_empty_references_rejected(self):
        stats = build_idf(CORPUS)
        with pytest.raises(ValueError):
            cider(["a"], [], stats)
