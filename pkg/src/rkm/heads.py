"""
Output heads around one cell.

Classifier: embed (or read raw features), run the cell, mean-pool h' over
time, then ``fc2(tanh(fc1(·)))`` and a softmax.

Language model: embed, run the cell and read every step out as
``y_t = A h'_t + β``. The projection E of ``U = AE`` is folded into the
cell width, so A is the only output matrix.
"""

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np
from numpy.typing import ArrayLike

from rkm.cells import CellParams, CellState, init_params, run_sequence
from rkm.data import SequenceDataset, TokenStream, batches, bptt_chunks
from rkm.engine import (
    Array,
    Parameter,
    Value,
    affine,
    collect_parameters,
    detach,
    embed,
    mean_pool,
    softmax_xent,
    tanh,
)
from rkm.models import ClassifierConfig, LMConfig, TrainConfig
from rkm.ngram import as_steps

logger = logging.getLogger(__name__)


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> Array:
    r = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-r, r, size=(rows, cols))


def _embedding(rng: np.random.Generator, vocab_size: int, m: int) -> Parameter:
    return Parameter.create("embedding", rng.normal(0.0, 0.1, size=(vocab_size, m)))


@dataclass
class Classifier:
    kind: ClassVar[str] = "classifier"

    config: ClassifierConfig
    cell: CellParams
    head: dict[str, Parameter]
    vocab: list[str] | None = None

    @classmethod
    def create(cls, config: ClassifierConfig, vocab: list[str] | None = None) -> "Classifier":
        rng = np.random.default_rng(config.seed)
        d, m, V = config.cell.d, config.cell.m, config.num_classes
        head = {
            "fc1.w": Parameter.create("fc1.w", _glorot(rng, d, d)),
            "fc1.b": Parameter.create("fc1.b", np.zeros(d)),
            "fc2.w": Parameter.create("fc2.w", _glorot(rng, V, d)),
            "fc2.b": Parameter.create("fc2.b", np.zeros(V)),
        }
        if config.vocab_size is not None:
            head["embedding"] = _embedding(rng, config.vocab_size, m)
        return cls(config=config, cell=init_params(config.cell), head=head, vocab=vocab)

    def parameters(self) -> dict[str, Parameter]:
        return collect_parameters(self.cell.parameters(), self.head.values())

    def _steps(self, inputs: ArrayLike) -> list[Value]:
        if "embedding" in self.head:
            ids = np.asarray(inputs, dtype=np.int64)
            return [embed(self.head["embedding"].value, ids[t]) for t in range(ids.shape[0])]
        return as_steps(inputs)

    def logits(self, inputs: ArrayLike) -> Value:
        """Class scores for time-major inputs (``[T]``/``[T, B]`` ids or ``[T, (B,) m]`` features)."""
        if np.asarray(inputs).shape[0] == 0:
            raise ValueError("classify: empty sequence")
        states = run_sequence(self.cell, self.config.cell, self._steps(inputs))
        pooled = mean_pool([s.h for s in states])
        hidden = tanh(affine(self.head["fc1.w"].value, pooled, self.head["fc1.b"].value))
        return affine(self.head["fc2.w"].value, hidden, self.head["fc2.b"].value)

    def loss(self, inputs: ArrayLike, labels: ArrayLike) -> tuple[Value, Array]:
        return softmax_xent(self.logits(inputs), labels)

    def batch_losses(
        self, data: SequenceDataset, cfg: TrainConfig, rng: np.random.Generator
    ) -> Iterator[Value]:
        for batch in batches(data, cfg.batch_size, rng):
            yield self.loss(batch.inputs, batch.labels)[0]

    def evaluate(self, data: SequenceDataset, batch_size: int = 256) -> dict[str, float]:
        if len(data) == 0:
            raise ValueError("evaluate: empty dataset")
        correct, total_loss = 0, 0.0
        for batch in batches(data, batch_size):
            loss, probs = self.loss(batch.inputs, batch.labels)
            correct += int(np.sum(np.argmax(probs, axis=-1) == batch.labels))
            total_loss += loss.item() * len(batch.labels)
        return {"accuracy": correct / len(data), "loss": total_loss / len(data)}


def classify(model: Classifier, sequence: ArrayLike) -> Array:
    """Class probabilities ``[V]`` for one sequence."""
    _loss, probs = softmax_xent(model.logits(sequence), 0)
    return probs


@dataclass
class LanguageModel:
    kind: ClassVar[str] = "lm"

    config: LMConfig
    cell: CellParams
    head: dict[str, Parameter]
    vocab: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, config: LMConfig, vocab: list[str] | None = None) -> "LanguageModel":
        rng = np.random.default_rng(config.seed)
        d, m, V = config.cell.d, config.cell.m, config.vocab_size
        if d > V:
            logger.warning(f"Output width d={d} exceeds the vocabulary ({V}): U=AE is not low rank")
        head = {
            "embedding": _embedding(rng, V, m),
            "readout.w": Parameter.create("readout.w", _glorot(rng, V, d)),
            "readout.b": Parameter.create("readout.b", np.zeros(V)),
        }
        return cls(config=config, cell=init_params(config.cell), head=head, vocab=list(vocab or []))

    def parameters(self) -> dict[str, Parameter]:
        return collect_parameters(self.cell.parameters(), self.head.values())

    @property
    def context_length(self) -> int:
        return (self.config.cell.n - 1) * self.config.cell.dilation

    def run(
        self,
        ids: ArrayLike,
        state: CellState | None = None,
        context: np.ndarray | None = None,
    ) -> tuple[list[Value], CellState, np.ndarray | None]:
        """
        Logits for every position of a time-major id block.

        ``context`` holds the ids preceding the block; they only fill the
        n-gram window. The returned state is detached and the returned
        context is what the next block needs.
        """
        block = np.asarray(ids, dtype=np.int64)
        full = block if context is None else np.concatenate([context, block])
        start = 0 if context is None else len(context)
        E = self.head["embedding"].value
        steps = [embed(E, full[t]) for t in range(len(full))]
        states = run_sequence(self.cell, self.config.cell, steps, initial_state=state, start=start)
        A, beta = self.head["readout.w"].value, self.head["readout.b"].value
        logits = [affine(A, s.h, beta) for s in states]
        last = states[-1]
        keep = self.context_length
        carry = full[max(0, len(full) - keep) :] if keep else None
        return logits, CellState(c=detach(last.c), h=detach(last.h)), carry

    def batch_losses(
        self, data: TokenStream, cfg: TrainConfig, rng: np.random.Generator
    ) -> Iterator[Value]:
        """Truncated backpropagation: the state crosses chunk borders without its gradient."""
        state, context = None, None
        for inputs, targets in bptt_chunks(data, cfg.batch_size, cfg.bptt):
            logits, state, context = self.run(inputs, state, context)
            yield mean_pool([softmax_xent(y, targets[t])[0] for t, y in enumerate(logits)])

    def evaluate(self, data: TokenStream, bptt: int = 35) -> dict[str, float]:
        ppl = perplexity(self, data.ids, bptt)
        return {"perplexity": ppl, "loss": math.log(ppl)}


def _encode(model: LanguageModel, history: Sequence[int | str]) -> np.ndarray:
    if history and isinstance(history[0], str):
        index = {tok: i for i, tok in enumerate(model.vocab)}
        unknown = [tok for tok in history if tok not in index]
        if unknown:
            raise ValueError(f"unknown token(s): {unknown!r}")
        return np.asarray([index[tok] for tok in history], dtype=np.int64)
    return np.asarray(history, dtype=np.int64)


def lm_step(model: LanguageModel, history: Sequence[int | str]) -> Array:
    """Next-token distribution ``[V]`` after reading ``history`` from a zero state."""
    if len(history) == 0:
        raise ValueError("lm_step: empty history")
    logits, _state, _context = model.run(_encode(model, history))
    _loss, probs = softmax_xent(logits[-1], 0)
    return probs


def perplexity(model: LanguageModel, ids: ArrayLike, bptt: int = 35) -> float:
    """``exp`` of the mean next-token negative log-likelihood under teacher forcing."""
    tokens = np.asarray(ids, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError("perplexity: corpus needs at least two tokens")
    inputs, targets = tokens[:-1, None], tokens[1:, None]
    total = 0.0
    state, context = None, None
    for start in range(0, len(inputs), bptt):
        logits, state, context = model.run(inputs[start : start + bptt], state, context)
        for t, y in enumerate(logits):
            total += softmax_xent(y, targets[start + t])[0].item()
    # a confident wrong model scores inf rather than overflowing
    with np.errstate(over="ignore"):
        return float(np.exp(total / len(inputs)))


def unigram_perplexity(train_ids: ArrayLike, eval_ids: ArrayLike, vocab_size: int) -> float:
    """Perplexity of add-one smoothed token frequencies, scored on the same positions as the LM."""
    train = np.asarray(train_ids, dtype=np.int64)
    targets = np.asarray(eval_ids, dtype=np.int64)[1:]
    if targets.size == 0:
        raise ValueError("unigram_perplexity: evaluation corpus needs at least two tokens")
    counts = np.bincount(train, minlength=vocab_size).astype(np.float64) + 1.0
    log_probs = np.log(counts / counts.sum())
    return math.exp(-float(np.mean(log_probs[targets])))
