"""Unit tests for the nested and recursive kernel evaluations."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rkm.kernel_oracle import (
    KERNELS,
    filter_responses,
    identity,
    nested_eval,
    recursive_eval,
    recursive_trace,
    scaled_linear,
    tanh_kernel,
    truncation_error,
)
from rkm.ngram import FilterBank


@pytest.fixture
def case():
    rng = np.random.default_rng(11)
    bank = FilterBank.from_blocks(rng.normal(size=(2, 3, 2)))
    sequence = rng.normal(size=(7, 2))
    return bank, sequence


class TestNestedEval:
    """Tests for nested_eval."""

    def test_identity_kernel_sums_responses(self, case):
        """With q = identity the full nest is the sum of all responses so far."""
        bank, sequence = case
        responses = filter_responses(bank, sequence)
        nested = nested_eval(identity(), bank, sequence, 4, 5)
        assert_allclose(nested, sum(responses[:5]), rtol=0, atol=1e-12)

    def test_depth_one_is_q_of_fresh_response(self, case):
        """A depth-1 nest with zero tail is q(r_t + q(0))."""
        bank, sequence = case
        kernel = tanh_kernel()
        r = filter_responses(bank, sequence)[3]
        assert_array_equal(nested_eval(kernel, bank, sequence, 3, 1), np.tanh(r))

    def test_depth_bounds(self, case):
        """depth must lie in [1, t+1]."""
        bank, sequence = case
        with pytest.raises(ValueError, match="depth"):
            nested_eval(identity(), bank, sequence, 2, 4)
        with pytest.raises(ValueError, match="depth"):
            nested_eval(identity(), bank, sequence, 2, 0)

    def test_time_bounds(self, case):
        """t must index the sequence."""
        bank, sequence = case
        with pytest.raises(ValueError, match="out of range"):
            nested_eval(identity(), bank, sequence, 7, 1)


class TestRecursiveEval:
    """Tests for recursive_eval against the nested form."""

    @pytest.mark.parametrize("name", sorted(KERNELS))
    def test_full_depth_matches_recursion(self, case, name):
        """Full-depth nesting with zero tail equals the recursion at every step."""
        bank, sequence = case
        kernel = KERNELS[name]()
        recursive = recursive_eval(kernel, bank, sequence)
        for t in range(len(sequence)):
            assert_allclose(
                nested_eval(kernel, bank, sequence, t, t + 1), recursive[t], rtol=0, atol=1e-12
            )

    def test_scaled_linear_closed_form(self):
        """A unit impulse through a unit filter leaves σ_i² σ_f^{2t} in the cell."""
        bank = FilterBank.from_blocks(np.ones((1, 1, 1)))
        sequence = np.zeros((4, 1))
        sequence[0, 0] = 1.0
        _hs, cells = recursive_trace(scaled_linear(0.5, 0.5), bank, sequence)
        assert [c[0] for c in cells] == [0.5, 0.25, 0.125, 0.0625]

    def test_feedback_shape(self, case):
        """Feedback must be square in the number of filters."""
        bank, sequence = case
        with pytest.raises(ValueError):
            recursive_eval(identity(), bank, sequence, feedback=np.zeros((2, 2)))

    def test_zero_feedback_changes_nothing(self, case):
        """A zero feedback matrix reproduces the plain recursion."""
        bank, sequence = case
        kernel = tanh_kernel(0.7)
        plain = recursive_eval(kernel, bank, sequence)
        fed = recursive_eval(kernel, bank, sequence, feedback=np.zeros((3, 3)))
        assert_allclose(np.stack(plain), np.stack(fed), rtol=0, atol=0)

    @pytest.mark.parametrize("name", sorted(KERNELS))
    def test_input_permutation(self, name):
        """Permuting input coordinates together with the filter columns leaves h' unchanged."""
        rng = np.random.default_rng(12)
        blocks = rng.normal(size=(3, 2, 4))
        sequence = rng.normal(size=(6, 4))
        perm = np.array([2, 0, 3, 1])
        kernel = KERNELS[name]()
        plain = recursive_eval(kernel, FilterBank.from_blocks(blocks), sequence)
        permuted = recursive_eval(
            kernel, FilterBank.from_blocks(blocks[:, :, perm]), sequence[:, perm]
        )
        assert_allclose(np.stack(plain), np.stack(permuted), rtol=0, atol=1e-12)


class TestTruncationError:
    """Tests for truncation_error."""

    def test_full_depth_is_exact(self, case):
        """The full nest has no truncation gap."""
        bank, sequence = case
        gaps = truncation_error(tanh_kernel(), bank, sequence, [len(sequence)])
        assert gaps[len(sequence)] < 1e-12

    def test_gap_shrinks_with_depth_for_contracting_kernel(self):
        """With σ_f² < 1 and positive responses, deeper nests get closer."""
        rng = np.random.default_rng(4)
        bank = FilterBank.from_blocks(np.abs(rng.normal(size=(2, 3, 2))))
        sequence = np.abs(rng.normal(size=(7, 2)))
        gaps = truncation_error(scaled_linear(0.3, 1.0), bank, sequence, [1, 3, 5])
        assert gaps[1] > gaps[3] > gaps[5] > 0.0
