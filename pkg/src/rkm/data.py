"""
Datasets, file formats and synthetic tasks.

Sequences are stored time-major: token sequences as int64 ``[T]`` and
signal sequences as float64 ``[T, C]``. On disk a signal is a ``[C, T]``
matrix (one row per channel, one column per time step).

Token CSV:
    one example per line, ``label,tok tok tok``; the vocabulary lives in a
    sidecar ``<file>.vocab`` (one token per line, id = line index) or is
    built from the file in order of first appearance.

Binary signal file (little-endian):
    ``b"RKMS"``, version u32, C u32, T u32, label u32, then C*T f64 row-major.

CSV signal file:
    header line ``C,T,label`` followed by C lines of T comma-separated reals.
"""

import logging
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from rkm.constants import SIGNAL_MAGIC, SIGNAL_VERSION
from rkm.errors import DatasetFormatError

logger = logging.getLogger(__name__)

_SIGNAL_HEADER = struct.Struct("<4sIIII")
SIGNAL_SUFFIXES = (".rkms", ".csv")


@dataclass
class SequenceDataset:
    """(sequence, label) pairs plus what a model needs to read them."""

    sequences: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    kind: Literal["tokens", "signals"] = "tokens"
    vocab: list[str] | None = None
    channels: int | None = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != len(self.labels):
            raise ValueError(
                f"{len(self.sequences)} sequences but {len(self.labels)} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.kind == "signals":
            widths = {s.shape[1] for s in self.sequences if s.ndim == 2}
            if any(s.ndim != 2 for s in self.sequences) or len(widths) > 1:
                raise ValueError("signal sequences must share one channel count")
            if self.channels is None and widths:
                self.channels = widths.pop()
        elif self.vocab is not None:
            for seq in self.sequences:
                if seq.size and (seq.min() < 0 or seq.max() >= len(self.vocab)):
                    raise ValueError("token id outside the vocabulary")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def input_dim(self) -> int:
        """Vocabulary size for token data, channel count for signals."""
        if self.kind == "signals":
            return int(self.channels or 0)
        if self.vocab is None:
            raise ValueError("token dataset has no vocabulary")
        return len(self.vocab)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "SequenceDataset":
        return SequenceDataset(
            sequences=[self.sequences[i] for i in indices],
            labels=self.labels[np.asarray(indices, dtype=np.int64)],
            num_classes=self.num_classes,
            kind=self.kind,
            vocab=self.vocab,
            channels=self.channels,
        )


@dataclass
class Batch:
    inputs: np.ndarray  # [T, B] token ids or [T, B, C] signals
    labels: np.ndarray  # [B]


@dataclass
class TokenStream:
    """A single running text for language modeling."""

    ids: np.ndarray
    vocab: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.ids.size)

    def split(self, val_fraction: float) -> tuple["TokenStream", "TokenStream"]:
        if not 0.0 < val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
        cut = int(round(len(self) * (1.0 - val_fraction)))
        return TokenStream(self.ids[:cut], self.vocab), TokenStream(self.ids[cut:], self.vocab)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".vocab")


def load_token_csv(
    path: str | Path, vocab: list[str] | None = None, num_classes: int | None = None
) -> SequenceDataset:
    """
    Parse a token CSV into a dataset.

    Args:
        path: file of ``label,tok tok tok`` rows
        vocab: fixed vocabulary; when absent the sidecar file is used, or
            the vocabulary is built in order of first appearance
        num_classes: defaults to the largest label plus one (at least 2)

    Raises:
        DatasetFormatError: malformed row, unknown token or empty file
    """
    path = Path(path)
    if vocab is None and _sidecar(path).exists():
        vocab = _sidecar(path).read_text(encoding="utf-8").split("\n")
        if vocab and vocab[-1] == "":
            vocab.pop()
    growing = vocab is None
    tokens: list[str] = list(vocab or [])
    index = {tok: i for i, tok in enumerate(tokens)}

    sequences, labels = [], []
    with path.open(encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            label_text, sep, body = line.partition(",")
            if not sep:
                raise DatasetFormatError(f"{path}:{line_no}: expected 'label,tokens'")
            try:
                label = int(label_text)
            except ValueError:
                raise DatasetFormatError(
                    f"{path}:{line_no}: label {label_text!r} is not an integer"
                ) from None
            if label < 0:
                raise DatasetFormatError(f"{path}:{line_no}: negative label {label}")
            ids = []
            for tok in body.split():
                if tok not in index:
                    if not growing:
                        raise DatasetFormatError(f"{path}:{line_no}: unknown token {tok!r}")
                    index[tok] = len(tokens)
                    tokens.append(tok)
                ids.append(index[tok])
            if not ids:
                raise DatasetFormatError(f"{path}:{line_no}: row has no tokens")
            sequences.append(np.asarray(ids, dtype=np.int64))
            labels.append(label)

    if not sequences:
        raise DatasetFormatError(f"{path}: empty dataset")
    classes = num_classes or max(2, max(labels) + 1)
    logger.info(f"Loaded {len(sequences)} rows from {path} (vocab {len(tokens)})")
    return SequenceDataset(sequences, np.asarray(labels), classes, "tokens", tokens)


def write_token_csv(dataset: SequenceDataset, path: str | Path) -> Path:
    """Write rows and the vocabulary sidecar; load_token_csv reads them back unchanged."""
    if dataset.kind != "tokens" or dataset.vocab is None:
        raise ValueError("write_token_csv needs a token dataset with a vocabulary")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vocab = dataset.vocab
    if any(not tok or any(ch.isspace() for ch in tok) for tok in vocab):
        raise ValueError("tokens must be non-empty and free of whitespace")
    lines = [
        f"{label},{' '.join(vocab[i] for i in seq)}"
        for seq, label in zip(dataset.sequences, dataset.labels)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _sidecar(path).write_text("\n".join(vocab) + "\n", encoding="utf-8")
    return path


def read_signal(path: str | Path) -> tuple[np.ndarray, int]:
    """
    Read one signal file.

    Returns:
        Tuple of (matrix ``[C, T]``, label)
    """
    path = Path(path)
    if path.suffix == ".csv":
        return _read_signal_csv(path)
    raw = path.read_bytes()
    if len(raw) < _SIGNAL_HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, C, T, label = _SIGNAL_HEADER.unpack_from(raw)
    if magic != SIGNAL_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != SIGNAL_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    expected = _SIGNAL_HEADER.size + 8 * C * T
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}: header declares {C}x{T} values ({expected} bytes), file has {len(raw)} bytes"
        )
    body = np.frombuffer(raw, dtype="<f8", offset=_SIGNAL_HEADER.size)
    return body.reshape(C, T).astype(np.float64), int(label)


def _read_signal_csv(path: Path) -> tuple[np.ndarray, int]:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        C, T, label = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise DatasetFormatError(f"{path}:1: header must be 'C,T,label'") from None
    if len(lines) - 1 != C:
        raise DatasetFormatError(f"{path}: header declares {C} channels, found {len(lines) - 1}")
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise DatasetFormatError(f"{path}:{line_no}: non-numeric value") from None
        if len(row) != T:
            raise DatasetFormatError(f"{path}:{line_no}: expected {T} values, found {len(row)}")
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(C, T), label


def write_signal_matrix(matrix: np.ndarray, label: int, path: str | Path) -> Path:
    """Write a ``[C, T]`` signal; the format follows the suffix (``.csv`` or binary)."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"signal must be a [C, T] matrix, got shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    C, T = arr.shape
    if path.suffix == ".csv":
        body = "\n".join(",".join(repr(float(v)) for v in row) for row in arr)
        path.write_text(f"{C},{T},{label}\n{body}\n", encoding="utf-8")
    else:
        header = _SIGNAL_HEADER.pack(SIGNAL_MAGIC, SIGNAL_VERSION, C, T, label)
        path.write_bytes(header + arr.astype("<f8").tobytes())
    return path


def load_signal_matrix(path: str | Path, num_classes: int | None = None) -> SequenceDataset:
    """A one-example dataset from a single signal file."""
    matrix, label = read_signal(path)
    return SequenceDataset(
        sequences=[matrix.T.copy()],
        labels=np.asarray([label]),
        num_classes=num_classes or max(2, label + 1),
        kind="signals",
        channels=matrix.shape[0],
    )


def load_signal_dir(path: str | Path, num_classes: int | None = None) -> SequenceDataset:
    """Every signal file of a directory, in file-name order."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix in SIGNAL_SUFFIXES)
    if not files:
        raise DatasetFormatError(f"{path}: no signal files")
    sequences, labels = [], []
    for file in files:
        matrix, label = read_signal(file)
        sequences.append(matrix.T.copy())
        labels.append(label)
    classes = num_classes or max(2, max(labels) + 1)
    logger.info(f"Loaded {len(files)} signal files from {path}")
    return SequenceDataset(sequences, np.asarray(labels), classes, "signals")


def load_dataset(
    path: str | Path,
    vocab: list[str] | None = None,
    kind: Literal["tokens", "signals"] | None = None,
) -> SequenceDataset:
    """
    Dispatch on the path: a directory of signals, a signal file or a token CSV.

    A ``.csv`` file is read as tokens unless ``kind`` says signals.
    """
    path = Path(path)
    if path.is_dir():
        return load_signal_dir(path)
    if path.suffix == ".rkms" or kind == "signals":
        return load_signal_matrix(path)
    return load_token_csv(path, vocab=vocab)


def load_text_corpus(path: str | Path, vocab: list[str] | None = None) -> TokenStream:
    """Character-level stream; the vocabulary is the sorted character set unless given."""
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        raise DatasetFormatError(f"{path}: empty corpus")
    chars = vocab if vocab is not None else sorted(set(text))
    index = {ch: i for i, ch in enumerate(chars)}
    unknown = set(text) - index.keys()
    if unknown:
        raise DatasetFormatError(f"{path}: characters outside the vocabulary: {sorted(unknown)!r}")
    return TokenStream(np.fromiter((index[ch] for ch in text), dtype=np.int64), list(chars))


def _token_vocab(size: int) -> list[str]:
    return [f"s{i}" for i in range(size)]


def gen_delayed_recall(
    lag: int, classes: int, length: int, count: int, seed: int
) -> SequenceDataset:
    """
    Recall the symbol seen ``lag`` steps before a query marker.

    Positions 0..T-1 hold symbols drawn uniformly from ``classes`` values,
    position T holds the marker (id ``classes``), and the label is the
    symbol at position T - lag.
    """
    if not 1 <= lag < length:
        raise ValueError(f"lag must lie in [1, length) (lag={lag}, length={length})")
    rng = np.random.default_rng(seed)
    symbols = rng.integers(0, classes, size=(count, length))
    marker = np.full((count, 1), classes)
    rows = np.concatenate([symbols, marker], axis=1)
    labels = symbols[:, length - lag]
    vocab = _token_vocab(classes) + ["?"]
    return SequenceDataset(list(rows.astype(np.int64)), labels, classes, "tokens", vocab)


def gen_parity(length: int, count: int, seed: int) -> SequenceDataset:
    """Binary strings labelled with the XOR of their bits."""
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(count, length))
    labels = np.bitwise_xor.reduce(bits, axis=1)
    return SequenceDataset(list(bits.astype(np.int64)), labels, 2, "tokens", ["0", "1"])


def contains_ngram(seq: np.ndarray, gram: Sequence[int]) -> bool:
    k = len(gram)
    target = np.asarray(gram)
    return any(np.array_equal(seq[i : i + k], target) for i in range(len(seq) - k + 1))


def gen_keyword(
    count: int,
    seed: int,
    length: int = 20,
    vocab_size: int = 8,
    keyword: tuple[int, int, int] = (1, 2, 3),
) -> SequenceDataset:
    """Label 1 when the keyword trigram occurs anywhere in the sequence."""
    if length < len(keyword):
        raise ValueError(f"length {length} cannot hold a keyword of {len(keyword)} tokens")
    if max(keyword) >= vocab_size:
        raise ValueError("keyword tokens must lie inside the vocabulary")
    rng = np.random.default_rng(seed)
    sequences, labels = [], []
    for _ in range(count):
        positive = bool(rng.random() < 0.5)
        seq = rng.integers(0, vocab_size, size=length)
        while contains_ngram(seq, keyword):
            seq = rng.integers(0, vocab_size, size=length)
        if positive:
            at = int(rng.integers(0, length - len(keyword) + 1))
            seq[at : at + len(keyword)] = keyword
        sequences.append(seq.astype(np.int64))
        labels.append(int(positive))
    return SequenceDataset(sequences, np.asarray(labels), 2, "tokens", _token_vocab(vocab_size))


def split_dataset(
    dataset: SequenceDataset, fractions: Sequence[float], seed: int | None = None
) -> tuple[SequenceDataset, ...]:
    """
    Cut the dataset into consecutive index ranges, then shuffle inside each part.

    Parts are disjoint whatever the seed since the cut happens before any shuffle.
    """
    if not fractions or any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ValueError(f"fractions must be positive and sum to at most 1, got {fractions}")
    bounds = np.round(np.cumsum([0.0, *fractions]) * len(dataset)).astype(int)
    rng = np.random.default_rng(seed) if seed is not None else None
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        indices = np.arange(lo, hi)
        if rng is not None:
            rng.shuffle(indices)
        parts.append(dataset.subset(indices))
    return tuple(parts)


def batches(
    dataset: SequenceDataset, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[Batch]:
    """
    Mini-batches of equal-length sequences, time-major.

    Sequences are bucketed by length so no padding is needed; with an rng
    both the order inside each bucket and the batch order are shuffled.
    """
    if len(dataset) == 0:
        raise ValueError("batches: empty dataset")
    buckets: dict[int, list[int]] = {}
    for i, seq in enumerate(dataset.sequences):
        buckets.setdefault(len(seq), []).append(i)
    chunks = []
    for length in sorted(buckets):
        members = np.asarray(buckets[length])
        if rng is not None:
            rng.shuffle(members)
        chunks.extend(members[i : i + batch_size] for i in range(0, len(members), batch_size))
    order = rng.permutation(len(chunks)) if rng is not None else range(len(chunks))
    for k in order:
        idx = chunks[k]
        inputs = np.stack([dataset.sequences[i] for i in idx], axis=1)
        yield Batch(inputs=inputs, labels=dataset.labels[idx])


def bptt_chunks(
    stream: TokenStream, batch_size: int, bptt: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """
    Split a stream into ``batch_size`` parallel tracks and walk them in windows.

    Yields:
        (inputs ``[k, B]``, next-token targets ``[k, B]``) with k ≤ bptt
    """
    steps = (len(stream) - 1) // batch_size
    if steps < 1:
        raise ValueError(f"stream of {len(stream)} tokens is too short for {batch_size} tracks")
    usable = stream.ids[: steps * batch_size + 1]
    inputs = usable[:-1].reshape(batch_size, steps).T
    targets = usable[1:].reshape(batch_size, steps).T
    for start in range(0, steps, bptt):
        yield inputs[start : start + bptt], targets[start : start + bptt]
