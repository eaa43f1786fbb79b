"""Unit tests for datasets, file formats and synthetic tasks."""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from rkm.constants import SIGNAL_MAGIC
from rkm.data import (
    SequenceDataset,
    TokenStream,
    batches,
    bptt_chunks,
    contains_ngram,
    gen_delayed_recall,
    gen_keyword,
    gen_parity,
    load_dataset,
    load_signal_dir,
    load_signal_matrix,
    load_text_corpus,
    load_token_csv,
    read_signal,
    split_dataset,
    write_signal_matrix,
    write_token_csv,
)
from rkm.errors import DatasetFormatError


class TestTokenCsv:
    """Tests for the token CSV format."""

    def test_builds_vocab_in_order_of_appearance(self, tmp_path):
        """Without a sidecar the vocabulary grows as tokens are seen."""
        path = tmp_path / "rows.csv"
        path.write_text("1,b a b\n0,c\n", encoding="utf-8")
        ds = load_token_csv(path)
        assert ds.vocab == ["b", "a", "c"]
        assert_array_equal(ds.sequences[0], [0, 1, 0])
        assert_array_equal(ds.labels, [1, 0])
        assert ds.num_classes == 2

    def test_write_then_load_uses_sidecar(self, tmp_path):
        """A written file comes back with the same ids and vocabulary."""
        ds = gen_parity(5, 6, seed=0)
        path = write_token_csv(ds, tmp_path / "parity.csv")
        assert (tmp_path / "parity.csv.vocab").exists()
        loaded = load_token_csv(path)
        assert loaded.vocab == ["0", "1"]
        for a, b in zip(ds.sequences, loaded.sequences):
            assert_array_equal(a, b)

    def test_unknown_token_with_fixed_vocab(self, tmp_path):
        """A fixed vocabulary rejects unseen tokens, naming the line."""
        path = tmp_path / "rows.csv"
        path.write_text("0,a\n1,z\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match=r"rows.csv:2: unknown token 'z'"):
            load_token_csv(path, vocab=["a"])

    def test_malformed_label(self, tmp_path):
        """Labels must be integers."""
        path = tmp_path / "rows.csv"
        path.write_text("x,a\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match=":1:"):
            load_token_csv(path)

    def test_missing_separator(self, tmp_path):
        """Each row needs a label and tokens."""
        path = tmp_path / "rows.csv"
        path.write_text("0 a b\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="label,tokens"):
            load_token_csv(path)

    def test_empty_file(self, tmp_path):
        """A file without rows is not a dataset."""
        path = tmp_path / "rows.csv"
        path.write_text("\n\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="empty"):
            load_token_csv(path)


class TestSignals:
    """Tests for the signal file formats."""

    @pytest.mark.parametrize("suffix", [".rkms", ".csv"])
    def test_written_matrix_reads_back(self, tmp_path, suffix):
        """Both encodings store a [C, T] matrix and its label."""
        matrix = np.random.default_rng(0).normal(size=(3, 7))
        path = write_signal_matrix(matrix, 2, tmp_path / f"sig{suffix}")
        read, label = read_signal(path)
        assert_array_equal(read, matrix)
        assert label == 2

    def test_binary_header_layout(self, tmp_path):
        """The binary file starts with the magic and a version word."""
        path = write_signal_matrix(np.zeros((1, 2)), 0, tmp_path / "s.rkms")
        raw = path.read_bytes()
        assert raw[:4] == SIGNAL_MAGIC
        assert len(raw) == 20 + 16

    def test_truncated_binary(self, tmp_path):
        """A body shorter than the header declares is rejected."""
        path = write_signal_matrix(np.zeros((2, 3)), 0, tmp_path / "s.rkms")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DatasetFormatError, match="bytes"):
            read_signal(path)

    def test_bad_magic(self, tmp_path):
        """Files of another format are rejected."""
        path = tmp_path / "s.rkms"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(DatasetFormatError, match="magic"):
            read_signal(path)

    def test_csv_row_length(self, tmp_path):
        """Each channel row must hold T values."""
        path = tmp_path / "s.csv"
        path.write_text("2,3,0\n1,2,3\n1,2\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match=":3:"):
            read_signal(path)

    def test_directory_is_time_major(self, tmp_path):
        """Loaded signals are [T, C] and labels come from the files."""
        write_signal_matrix(np.ones((2, 4)), 0, tmp_path / "a.rkms")
        write_signal_matrix(np.zeros((2, 5)), 1, tmp_path / "b.csv")
        ds = load_signal_dir(tmp_path)
        assert ds.kind == "signals"
        assert ds.channels == 2
        assert ds.sequences[0].shape == (4, 2)
        assert_array_equal(ds.labels, [0, 1])

    def test_mixed_channel_counts(self, tmp_path):
        """Every signal of a dataset has the same channel count."""
        write_signal_matrix(np.ones((2, 4)), 0, tmp_path / "a.rkms")
        write_signal_matrix(np.ones((3, 4)), 1, tmp_path / "b.rkms")
        with pytest.raises(ValueError, match="channel"):
            load_signal_dir(tmp_path)

    def test_load_dataset_dispatch(self, tmp_path):
        """A single .rkms file loads as a one-example dataset."""
        path = write_signal_matrix(np.ones((1, 3)), 1, tmp_path / "one.rkms")
        ds = load_dataset(path)
        assert len(ds) == 1
        assert ds.input_dim == 1

    def test_csv_signal_with_kind_hint(self, tmp_path):
        """A .csv file is read as a signal when the caller asks for signals."""
        path = write_signal_matrix(np.ones((2, 3)), 1, tmp_path / "one.csv")
        ds = load_dataset(path, kind="signals")
        assert ds.kind == "signals"
        assert ds.sequences[0].shape == (3, 2)
        assert_array_equal(ds.labels, [1])

    def test_single_matrix_class_count(self, tmp_path):
        """Without an explicit count the label fixes a lower bound of two classes."""
        path = write_signal_matrix(np.zeros((1, 4)), 0, tmp_path / "z.csv")
        assert load_signal_matrix(path).num_classes == 2
        assert load_signal_matrix(path, num_classes=5).num_classes == 5


class TestTextCorpus:
    """Tests for the character corpus loader."""

    def test_sorted_character_vocab(self, tmp_path):
        """Ids index the sorted character set, newlines included."""
        path = tmp_path / "corpus.txt"
        path.write_text("ba\nab", encoding="utf-8")
        stream = load_text_corpus(path)
        assert stream.vocab == ["\n", "a", "b"]
        assert_array_equal(stream.ids, [2, 1, 0, 1, 2])

    def test_fixed_vocab_rejects_new_characters(self, tmp_path):
        """Characters outside a given vocabulary are reported."""
        path = tmp_path / "corpus.txt"
        path.write_text("abc", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="outside"):
            load_text_corpus(path, vocab=["a", "b"])

    def test_split_at_end(self):
        """The validation part is the tail of the stream."""
        stream = TokenStream(np.arange(10), ["x"] * 10)
        train, val = stream.split(0.2)
        assert_array_equal(train.ids, np.arange(8))
        assert_array_equal(val.ids, [8, 9])


class TestGenerators:
    """Tests for the synthetic tasks."""

    def test_delayed_recall_layout(self):
        """Rows hold T symbols, then the marker; the label is the symbol lag steps before it."""
        ds = gen_delayed_recall(lag=3, classes=4, length=8, count=50, seed=1)
        assert ds.vocab[-1] == "?"
        for seq, label in zip(ds.sequences, ds.labels):
            assert len(seq) == 9
            assert seq[-1] == 4
            assert seq[8 - 3] == label
            assert seq[:-1].max() < 4

    def test_delayed_recall_seeded(self):
        """The same seed gives the same dataset."""
        a = gen_delayed_recall(2, 3, 5, 10, seed=9)
        b = gen_delayed_recall(2, 3, 5, 10, seed=9)
        assert_array_equal(np.stack(a.sequences), np.stack(b.sequences))

    def test_delayed_recall_lag_range(self):
        """The lag must point inside the sequence."""
        with pytest.raises(ValueError, match="lag"):
            gen_delayed_recall(lag=8, classes=2, length=8, count=1, seed=0)

    def test_parity_labels(self):
        """Labels are the XOR of the bits."""
        ds = gen_parity(6, 40, seed=3)
        for seq, label in zip(ds.sequences, ds.labels):
            assert int(seq.sum()) % 2 == label

    def test_keyword_labels(self):
        """Positives contain the keyword and negatives never do."""
        ds = gen_keyword(60, seed=2, length=10)
        for seq, label in zip(ds.sequences, ds.labels):
            assert contains_ngram(seq, (1, 2, 3)) == bool(label)
        assert 0 < ds.labels.sum() < 60


class TestSplitAndBatches:
    """Tests for splitting and batching."""

    def test_split_is_disjoint(self):
        """Parts never share an example whatever the seed."""
        ds = SequenceDataset(
            [np.array([i], dtype=np.int64) for i in range(100)],
            np.arange(100) % 2,
            2,
            vocab=[str(i) for i in range(100)],
        )
        train, val, test = split_dataset(ds, [0.6, 0.2, 0.2], seed=5)
        ids = [int(s[0]) for part in (train, val, test) for s in part.sequences]
        assert sorted(ids) == list(range(100))
        assert (len(train), len(val), len(test)) == (60, 20, 20)

    def test_split_fractions_validated(self):
        """Fractions above one in total are rejected."""
        with pytest.raises(ValueError, match="fractions"):
            split_dataset(gen_parity(3, 10, seed=0), [0.8, 0.5])

    def test_batches_bucket_by_length(self):
        """Each batch is time-major and holds sequences of one length."""
        ds = SequenceDataset(
            [np.zeros(3, dtype=np.int64)] * 5 + [np.ones(2, dtype=np.int64)] * 3,
            np.zeros(8),
            2,
            vocab=["a", "b"],
        )
        shapes = sorted(b.inputs.shape for b in batches(ds, 2, np.random.default_rng(0)))
        assert shapes == [(2, 1), (2, 2), (3, 1), (3, 2), (3, 2)]

    def test_batches_cover_everything_once(self):
        """Every example appears in exactly one batch."""
        ds = gen_parity(4, 37, seed=0)
        total = sum(len(b.labels) for b in batches(ds, 8, np.random.default_rng(1)))
        assert total == 37

    def test_signal_batches(self):
        """Signal batches are [T, B, C]."""
        ds = SequenceDataset([np.zeros((5, 3))] * 4, np.zeros(4), 2, kind="signals")
        (batch,) = list(batches(ds, 4))
        assert batch.inputs.shape == (5, 4, 3)

    def test_bptt_tracks(self):
        """Targets are the next token along each parallel track."""
        stream = TokenStream(np.arange(21), [str(i) for i in range(21)])
        chunks = list(bptt_chunks(stream, batch_size=2, bptt=4))
        assert [x.shape for x, _ in chunks] == [(4, 2), (4, 2), (2, 2)]
        x, y = chunks[0]
        assert_array_equal(x[:, 1], [10, 11, 12, 13])
        assert_array_equal(y, x + 1)

    def test_bptt_too_short(self):
        """A stream needs at least one step per track."""
        with pytest.raises(ValueError, match="too short"):
            list(bptt_chunks(TokenStream(np.arange(2), ["a", "b"]), 2, 4))
