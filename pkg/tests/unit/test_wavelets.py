"""Unit tests for Morlet-wavelet filter banks."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rkm.errors import ShapeError
from rkm.wavelets import (
    centered_grid,
    init_wavelet_params,
    materialize,
    morlet_tensor,
    wavelet_grad_check,
)


@pytest.fixture
def params():
    return init_wavelet_params(3, 2, 5, np.random.default_rng(0))


class TestWaveletFilters:
    """Tests for filter materialization."""

    def test_centered_grid(self):
        """The grid is symmetric about zero."""
        assert_array_equal(centered_grid(4), [-1.5, -0.5, 0.5, 1.5])

    def test_parameter_count_independent_of_length(self):
        """2KC + 2K parameters whatever the filter length."""
        rng = np.random.default_rng(0)
        short = init_wavelet_params(4, 3, 2, rng)
        long = init_wavelet_params(4, 3, 50, rng)
        assert short.count() == long.count() == 2 * 4 * 3 + 2 * 4

    def test_tensor_formula(self, params):
        """Entries are α cos(ω t + φ) exp(-β t²)."""
        tensor = morlet_tensor(params)
        k, c, tau = 1, 0, 3
        t = params.time_grid[tau]
        expected = (
            params.alpha.data[k, c]
            * np.cos(params.omega.data[k] * t + params.phi.data[k, c])
            * np.exp(-params.beta.data[k] * t * t)
        )
        assert tensor.shape == (3, 2, 5)
        assert tensor[k, c, tau] == pytest.approx(expected)

    def test_bank_blocks_read_grid_backwards(self, params):
        """Block k of the bank samples grid point n-1-k."""
        bank = materialize(params, 5)
        tensor = morlet_tensor(params)
        assert (bank.n, bank.j, bank.m) == (5, 3, 2)
        for k in range(5):
            assert_allclose(bank.blocks[k], tensor[:, :, 4 - k], rtol=0, atol=1e-15)

    def test_grid_length_must_match(self, params):
        """Materializing for another window length is rejected."""
        with pytest.raises(ShapeError):
            materialize(params, 4)

    def test_negative_decay_warns(self, params, caplog):
        """A negative β is allowed but logged."""
        params.beta.value.data[0] = -0.1
        materialize(params, 5)
        assert "Negative wavelet decay" in caplog.text


class TestWaveletGradCheck:
    """Tests for the wavelet gradient check."""

    def test_passes(self):
        """Analytic gradients of α, ω, φ, β agree with central differences."""
        report = wavelet_grad_check()
        assert report.passed
        assert {"alpha", "omega", "phi", "beta"} <= set(report.cases[0].errors)
