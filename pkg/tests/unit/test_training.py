"""Unit tests for optimizers, clipping and the training loop."""

import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rkm.constants import BEST_CHECKPOINT_NAME, REPORT_FILE_NAME
from rkm.data import (
    SequenceDataset,
    TokenStream,
    gen_delayed_recall,
    gen_parity,
    split_dataset,
)
from rkm.engine import Parameter
from rkm.errors import DivergenceError
from rkm.heads import Classifier, LanguageModel
from rkm.models import CellConfig, CellVariant, ClassifierConfig, LMConfig, TrainConfig
from rkm.training import Adam, SGDMomentum, clip_grad_norm, evaluate, global_norm, train


def small_classifier(seed=0, vocab_size=3, classes=2):
    cell = CellConfig(variant=CellVariant.RKM_LSTM, m=4, d=6, seed=seed)
    return Classifier.create(
        ClassifierConfig(cell=cell, num_classes=classes, vocab_size=vocab_size, seed=seed)
    )


class TestOptimizers:
    """Tests for Adam and SGD with momentum."""

    def test_adam_first_step_is_lr_sized(self):
        """With bias correction the first Adam step moves each coordinate by about lr."""
        p = Parameter.create("w", np.array([1.0, -1.0]))
        Adam({"w": p}, lr=0.1).step({"w": np.array([3.0, -0.5])})
        assert_allclose(p.data, [0.9, -0.9], rtol=1e-6)

    def test_sgd_momentum_accumulates(self):
        """Velocity adds the new gradient to the decayed old one."""
        p = Parameter.create("w", np.array([0.0]))
        opt = SGDMomentum({"w": p}, lr=1.0, momentum=0.5)
        opt.step({"w": np.array([1.0])})
        opt.step({"w": np.array([1.0])})
        assert p.data[0] == pytest.approx(-2.5)

    def test_adam_zero_gradient_is_a_no_op(self):
        """A zero gradient on fresh moments leaves the parameter and both moments at rest."""
        p = Parameter.create("w", np.array([0.25, -3.0]))
        opt = Adam({"w": p}, lr=0.1)
        opt.step({"w": np.zeros(2)})
        assert_array_equal(p.data, [0.25, -3.0])
        assert_array_equal(opt.m["w"], [0.0, 0.0])
        assert_array_equal(opt.v["w"], [0.0, 0.0])

    def test_frozen_parameters_stay(self):
        """Parameters marked untrainable are not updated."""
        p = Parameter.create("w", np.array([2.0]), trainable=False)
        Adam({"w": p}, lr=1.0).step({"w": np.array([1.0])})
        assert_array_equal(p.data, [2.0])


class TestClipping:
    """Tests for global-norm clipping."""

    def test_scales_to_max_norm(self):
        """Gradients above the limit are rescaled jointly."""
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        before = clip_grad_norm(grads, 1.0)
        assert before == pytest.approx(5.0)
        assert global_norm(grads) == pytest.approx(1.0)
        assert grads["a"][0] / grads["b"][0] == pytest.approx(0.75)

    def test_small_gradients_untouched(self):
        """Gradients under the limit keep their values."""
        grads = {"a": np.array([0.3, 0.4])}
        clip_grad_norm(grads, 1.0)
        assert_array_equal(grads["a"], [0.3, 0.4])


class TestTrain:
    """Tests for the training loop."""

    def test_loss_decreases_on_easy_task(self):
        """Delayed recall with lag 1 is learned within a few epochs."""
        data = gen_delayed_recall(lag=1, classes=2, length=4, count=320, seed=0)
        train_set, val_set = split_dataset(data, [0.75, 0.25], seed=0)
        cell = CellConfig(variant=CellVariant.RKM_LSTM, m=4, d=8)
        model = Classifier.create(ClassifierConfig(cell=cell, num_classes=2, vocab_size=3))
        report = train(model, train_set, val_set, TrainConfig(lr=0.02, epochs=10, batch_size=16))
        assert report.epochs[-1].train_loss < report.epochs[0].train_loss
        assert report.best_metric > 0.6

    def test_same_seed_same_report(self):
        """Two runs with one seed produce identical losses."""
        data = gen_parity(3, 40, seed=1)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
        first = train(small_classifier(), data, data, cfg)
        second = train(small_classifier(), data, data, cfg)
        assert [r.train_loss for r in first.epochs] == [r.train_loss for r in second.epochs]

    def test_writes_checkpoint_and_report(self, tmp_path):
        """The best checkpoint and the per-epoch CSV land in the output directory."""
        data = gen_parity(3, 20, seed=1)
        cfg = TrainConfig(epochs=2, batch_size=10)
        report = train(small_classifier(), data, data, cfg, tmp_path)
        assert report.best_checkpoint == tmp_path / BEST_CHECKPOINT_NAME
        assert report.best_checkpoint.exists()
        with (tmp_path / REPORT_FILE_NAME).open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["epoch", "train_loss", "val_metric", "seconds"]
        assert len(rows) == 3

    def test_early_stopping(self):
        """With zero learning rate nothing improves and patience stops the run."""
        data = gen_parity(3, 20, seed=1)
        cfg = TrainConfig(lr=0.0, epochs=10, batch_size=10, patience=2)
        report = train(small_classifier(), data, data, cfg)
        assert report.stopped_early
        assert len(report.epochs) == 3
        assert report.best_epoch == 1

    def test_zero_learning_rate_keeps_parameters(self):
        """With lr=0 every parameter is bitwise unchanged after training."""
        model = small_classifier()
        before = {name: p.data.copy() for name, p in model.parameters().items()}
        cfg = TrainConfig(lr=0.0, epochs=2)
        train(model, gen_parity(3, 20, seed=1), gen_parity(3, 10, seed=2), cfg)
        for name, p in model.parameters().items():
            assert_array_equal(p.data, before[name])

    def test_single_example_is_memorized(self):
        """One example is fitted to a training loss below 1e-3."""
        data = gen_parity(3, 1, seed=0)
        cfg = TrainConfig(lr=0.05, epochs=300, batch_size=1)
        report = train(small_classifier(), data, data, cfg)
        assert report.epochs[-1].train_loss < 1e-3

    def test_divergence_is_reported(self):
        """A non-finite loss stops training with the epoch and step."""
        model = small_classifier()
        model.head["fc2.w"].value.data[...] = np.nan
        with pytest.raises(DivergenceError, match="epoch 1, step 1"):
            train(model, gen_parity(3, 10, seed=0), gen_parity(3, 10, seed=1), TrainConfig())

    def test_cell_divergence_names_epoch_and_step(self):
        """An overflowing cell state is reported with the epoch and step it happened at."""
        model = small_classifier()
        model.cell.params["content.x"].value.data[...] = 1e308
        model.head["embedding"].value.data[...] = 10.0
        data = gen_parity(3, 10, seed=0)
        with pytest.raises(DivergenceError, match="non-finite at epoch 1, step 1"):
            train(model, data, data, TrainConfig())

    def test_language_model_perplexity_drops(self):
        """A periodic stream becomes predictable."""
        ids = np.tile(np.arange(4), 60)
        stream = TokenStream(ids, ["a", "b", "c", "d"])
        train_stream, val_stream = stream.split(0.2)
        cell = CellConfig(variant=CellVariant.RKM_LSTM, m=4, d=8)
        model = LanguageModel.create(LMConfig(cell=cell, vocab_size=4), stream.vocab)
        cfg = TrainConfig(lr=0.05, epochs=20, batch_size=4, bptt=8)
        report = train(model, train_stream, val_stream, cfg)
        assert report.metric == "perplexity"
        assert report.best_metric < 2.0

    def test_evaluate_is_repeatable_and_at_chance(self):
        """An untrained classifier on random labels scores the same twice, near one half."""
        rng = np.random.default_rng(9)
        data = SequenceDataset(
            list(rng.integers(0, 3, size=(400, 5))),
            rng.integers(0, 2, size=400),
            2,
            vocab=list("abc"),
        )
        model = small_classifier()
        first = evaluate(model, data)
        assert evaluate(model, data) == first
        assert 0.3 <= first["accuracy"] <= 0.7

    def test_evaluate_rejects_empty(self):
        """There is nothing to score in an empty set."""
        data = gen_parity(3, 4, seed=0).subset([])
        with pytest.raises(ValueError, match="empty"):
            evaluate(small_classifier(), data)
