"""Unit tests for the classifier and language-model heads."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rkm.data import TokenStream
from rkm.heads import Classifier, LanguageModel, classify, lm_step, perplexity, unigram_perplexity
from rkm.models import CellConfig, CellVariant, ClassifierConfig, LMConfig


def make_classifier(vocab_size=5, m=3, d=4, n=2, classes=3, variant=CellVariant.RKM_LSTM):
    cell = CellConfig(variant=variant, m=m, d=d, n=n)
    return Classifier.create(
        ClassifierConfig(cell=cell, num_classes=classes, vocab_size=vocab_size)
    )


def make_lm(vocab=("a", "b", "c", "d"), m=3, d=4, n=1, variant=CellVariant.RKM_LSTM):
    cell = CellConfig(variant=variant, m=m, d=d, n=n)
    return LanguageModel.create(LMConfig(cell=cell, vocab_size=len(vocab)), list(vocab))


class TestClassifier:
    """Tests for Classifier."""

    def test_probabilities(self):
        """classify returns a distribution over the classes."""
        probs = classify(make_classifier(), [0, 3, 4, 1])
        assert probs.shape == (3,)
        assert np.all(probs >= 0.0)
        assert probs.sum() == pytest.approx(1.0)

    def test_single_step_sequence(self):
        """A length-1 sequence is enough to classify."""
        assert classify(make_classifier(), [2]).shape == (3,)

    def test_empty_sequence(self):
        """An empty sequence is rejected."""
        with pytest.raises(ValueError, match="empty"):
            classify(make_classifier(), [])

    def test_batch_matches_single(self):
        """A [T, B] batch of ids gives the rows of B single calls."""
        model = make_classifier()
        ids = np.array([[0, 1], [2, 3], [4, 0]])
        batched = model.logits(ids).data
        for b in range(2):
            assert_allclose(batched[b], model.logits(ids[:, b]).data, rtol=0, atol=1e-12)

    def test_raw_features(self):
        """Without a vocabulary the classifier reads feature vectors directly."""
        cell = CellConfig(variant=CellVariant.CNN, m=2, d=3, n=3)
        model = Classifier.create(ClassifierConfig(cell=cell, num_classes=2))
        assert "embedding" not in model.head
        probs = classify(model, np.ones((5, 2)))
        assert probs.shape == (2,)

    def test_shared_bias_shift_keeps_prediction(self):
        """Adding one constant to every fc2 bias leaves the probabilities and the argmax alone."""
        model = make_classifier()
        seq = [0, 3, 4, 1]
        before = classify(model, seq)
        model.head["fc2.b"].value.data += 7.5
        after = classify(model, seq)
        assert np.argmax(after) == np.argmax(before)
        assert_allclose(after, before, rtol=0, atol=1e-12)

    def test_parameter_names_unique(self):
        """Cell and head parameters share one namespace."""
        params = make_classifier().parameters()
        assert {"fc1.w", "fc2.b", "embedding", "content.x"} <= set(params)


class TestLanguageModel:
    """Tests for LanguageModel."""

    def test_next_token_distribution(self):
        """lm_step returns a distribution over the vocabulary."""
        probs = lm_step(make_lm(), ["a", "b", "c"])
        assert probs.shape == (4,)
        assert probs.sum() == pytest.approx(1.0)

    def test_tokens_and_ids_agree(self):
        """String tokens are encoded through the vocabulary."""
        model = make_lm()
        assert_allclose(lm_step(model, ["b", "d"]), lm_step(model, [1, 3]), rtol=0, atol=0)

    def test_unknown_token(self):
        """Tokens outside the vocabulary are rejected."""
        with pytest.raises(ValueError, match="unknown"):
            lm_step(make_lm(), ["a", "z"])

    def test_empty_history(self):
        """There is nothing to condition on."""
        with pytest.raises(ValueError, match="empty"):
            lm_step(make_lm(), [])

    def test_zero_weights_give_uniform_perplexity(self):
        """A model that predicts uniformly has perplexity V."""
        model = make_lm()
        model.head["readout.w"].value.data[...] = 0.0
        ppl = perplexity(model, [0, 1, 2, 3, 2, 1, 0])
        assert ppl == pytest.approx(4.0, rel=1e-12)

    @pytest.mark.parametrize("n", [1, 3])
    def test_chunking_does_not_change_perplexity(self, n):
        """Carrying state and n-gram context across chunks equals one long pass."""
        model = make_lm(n=n)
        ids = np.random.default_rng(0).integers(0, 4, size=23)
        whole = perplexity(model, ids, bptt=100)
        assert perplexity(model, ids, bptt=5) == pytest.approx(whole, rel=1e-10)

    def test_confidently_wrong_model_scores_inf(self):
        """A huge loss gives an infinite perplexity instead of an overflow."""
        model = make_lm(vocab=("a", "b"), d=2, variant=CellVariant.CNN)
        model.head["readout.b"].value.data[...] = [1000.0, 0.0]
        assert perplexity(model, [1, 1, 1]) == math.inf
        stats = model.evaluate(TokenStream(np.array([1, 1, 1]), ["a", "b"]))
        assert stats["loss"] == math.inf

    def test_perplexity_needs_two_tokens(self):
        """One token has no successor to predict."""
        with pytest.raises(ValueError):
            perplexity(make_lm(), [1])

    def test_wide_cell_warns(self, caplog):
        """d > V is allowed but logged."""
        make_lm(d=8)
        assert "exceeds the vocabulary" in caplog.text

    def test_evaluate_reports_loss(self):
        """evaluate returns the perplexity and its log."""
        stats = make_lm().evaluate(TokenStream(np.array([0, 1, 2, 3, 0]), ["a", "b", "c", "d"]))
        assert stats["loss"] == pytest.approx(math.log(stats["perplexity"]))


class TestUnigramPerplexity:
    """Tests for the unigram baseline."""

    def test_uniform_counts(self):
        """Equal counts give perplexity V."""
        assert unigram_perplexity([0, 1, 2, 3], [0, 1, 2], 4) == pytest.approx(4.0)

    def test_frequent_tokens_score_better(self):
        """Predicting the dominant token beats the uniform rate."""
        train = [0] * 20 + [1, 2, 3]
        assert unigram_perplexity(train, [0, 0, 0, 0], 4) < 4.0

    def test_needs_two_tokens(self):
        """The first token is never scored."""
        with pytest.raises(ValueError):
            unigram_perplexity([0, 1], [0], 2)
