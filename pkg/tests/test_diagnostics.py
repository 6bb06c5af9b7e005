import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esabre.diagnostics import auroc, classify, confusion_metrics, inclusion_probabilities, psrf


class TestPsrf:
    def test_identical_chains_floor_to_one(self):
        trace = np.sin(np.arange(40.0))
        assert psrf([trace, trace.copy()]) == 1.0

    def test_gross_divergence(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0.0, 1.0, 1000)
        b = rng.normal(10.0, 1.0, 1000)
        assert psrf([a, b]) > 3.0

    def test_formula_on_known_arrays(self):
        a = np.array([0.0, 1.0, 0.0, 1.0])
        b = np.array([1.0, 2.0, 1.0, 2.0])
        # second halves [0,1], [1,2]: n=2, W = 0.5, B = n*var(means) = 1
        expected = np.sqrt((2 - 1) / 2 + 1.0 / (2 * 0.5))
        assert psrf([a, b]) == pytest.approx(expected, abs=1e-12)

    def test_constant_chains_unequal_means(self):
        assert psrf([np.zeros(10), np.ones(10)]) == np.inf

    def test_iid_calibration(self):
        rng = np.random.default_rng(42)
        below = 0
        reps = 30
        for _ in range(reps):
            chains = rng.normal(size=(4, 5000))
            if psrf(chains) < 1.01:
                below += 1
        assert below >= reps - 1

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        chains = rng.normal(size=(3, 400))
        assert psrf(chains) == pytest.approx(psrf(chains * 3.0 - 7.0), rel=1e-12)


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_enumerated_pairs(self):
        # positives 0.9, 0.4 vs negatives 0.8, 0.3: wins 3 of 4 comparisons
        assert auroc([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]) == 0.75

    def test_degenerate_truth_rejected(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])

    @given(
        st.lists(st.integers(-50, 50), min_size=4, max_size=30),
        st.data(),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone_transform_invariance(self, scores, data):
        # Integer-valued scores keep strictly increasing transforms exact in
        # floating point, so tie patterns are preserved.
        truth = data.draw(
            st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores))
        )
        if sum(truth) in (0, len(truth)):
            truth[0] = 1 - truth[0]
        scores = np.asarray(scores, dtype=float)
        a = auroc(scores, truth)
        assert a == pytest.approx(auroc(3.0 * scores + 11.0, truth), abs=1e-12)
        assert a == pytest.approx(auroc(np.exp(0.1 * scores), truth), abs=1e-12)

    def test_reflection_identity_without_ties(self):
        rng = np.random.default_rng(7)
        scores = rng.permutation(20).astype(float)
        truth = rng.integers(0, 2, 20)
        truth[0], truth[1] = 0, 1
        assert auroc(scores, truth) + auroc(-scores, truth) == pytest.approx(1.0)


class TestClassify:
    def test_strict_threshold(self):
        out = classify([0.9, 0.5, 0.1], "fixed_threshold", threshold=0.5)
        assert out.tolist() == [1, 0, 0]

    def test_top_block_count(self):
        out = classify(np.linspace(0, 1, 10), "top_pi_hat", pi_hat=0.2)
        assert out.sum() == 2

    def test_round_half_to_even(self):
        probs = np.linspace(0, 1, 10)
        assert classify(probs, "top_pi_hat", pi_hat=0.25).sum() == 2  # 2.5 -> 2
        assert classify(probs, "top_pi_hat", pi_hat=0.35).sum() == 4  # 3.5 -> 4

    def test_tie_break_lower_index(self):
        out = classify([0.5, 0.9, 0.5, 0.2], "top_pi_hat", pi_hat=0.5)
        assert out.tolist() == [1, 1, 0, 0]

    def test_exact_count_under_full_tie(self):
        out = classify(np.full(8, 0.3), "top_pi_hat", pi_hat=0.5)
        assert out.sum() == 4
        assert out.tolist() == [1, 1, 1, 1, 0, 0, 0, 0]


class TestConfusion:
    def test_perfect(self):
        rep = confusion_metrics([1, 0, 1], [1, 0, 1])
        assert rep.sensitivity == rep.specificity == rep.f1 == 1.0

    def test_complement(self):
        rep = confusion_metrics([0, 1, 0], [1, 0, 1])
        assert rep.sensitivity == 0.0

    def test_hand_computed(self):
        # TP=2, FP=1, FN=1, TN=1
        rep = confusion_metrics([1, 1, 1, 0, 0], [1, 1, 0, 1, 0])
        assert rep.precision == pytest.approx(2 / 3)
        assert rep.sensitivity == pytest.approx(2 / 3)
        assert rep.f1 == pytest.approx(2 / 3)

    def test_empty_selection_f1_zero(self):
        rep = confusion_metrics([0, 0], [1, 0])
        assert rep.f1 == 0.0


class TestInclusionProbabilities:
    def test_pooling_identity(self):
        class Fake:
            def __init__(self, g):
                self._g = np.asarray(g, dtype=np.int8)

            def stacked(self):
                return {"gamma": self._g}

        a = Fake([[1, 0], [1, 0]])
        b = Fake([[1, 1], [0, 1], [1, 1], [0, 1]])
        pooled = inclusion_probabilities([a, b])
        counts = np.vstack([a.stacked()["gamma"], b.stacked()["gamma"]])
        assert np.allclose(pooled, counts.mean(axis=0))
        assert pooled[0] == pytest.approx(4 / 6)
