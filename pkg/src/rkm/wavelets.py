"""
Morlet-wavelet filter banks.

Filter k on channel c is ``α_kc cos(ω_k t + φ_kc) exp(-β_k t²)`` sampled on a
fixed centered grid ``t_τ = τ - (n-1)/2``. Only the four parameter families
are learned, so the parameter count ``2KC + 2K`` does not grow with n.
"""

import logging
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel

from rkm.engine import (
    Array,
    Parameter,
    Value,
    affine,
    backward,
    constant,
    finite_diff_grad,
    mean_pool,
    record,
    relative_error,
    softmax_xent,
    tanh,
)
from rkm.errors import ShapeError
from rkm.ngram import FilterBank, contract, window

logger = logging.getLogger(__name__)


def centered_grid(n: int) -> Array:
    return np.arange(n, dtype=np.float64) - (n - 1) / 2.0


@dataclass
class WaveletParams:
    alpha: Parameter  # [K, C]
    omega: Parameter  # [K]
    phi: Parameter  # [K, C]
    beta: Parameter  # [K]
    time_grid: Array  # [n]

    @property
    def num_filters(self) -> int:
        return self.alpha.data.shape[0]

    @property
    def num_channels(self) -> int:
        return self.alpha.data.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.alpha, self.omega, self.phi, self.beta]

    def count(self) -> int:
        return sum(p.size for p in self.parameters())


def init_wavelet_params(
    num_filters: int,
    num_channels: int,
    n: int,
    rng: np.random.Generator,
    prefix: str = "wavelet",
) -> WaveletParams:
    """Low frequencies and wide envelopes so filters cover long windows at the start."""
    K, C = num_filters, num_channels
    return WaveletParams(
        alpha=Parameter.create(f"{prefix}.alpha", rng.uniform(-0.1, 0.1, size=(K, C))),
        omega=Parameter.create(f"{prefix}.omega", rng.uniform(0.0, np.pi / 4, size=K)),
        phi=Parameter.create(f"{prefix}.phi", rng.uniform(-np.pi, np.pi, size=(K, C))),
        beta=Parameter.create(f"{prefix}.beta", rng.uniform(0.0, 0.05, size=K)),
        time_grid=centered_grid(n),
    )


def morlet_tensor(p: WaveletParams) -> Array:
    """The filter tensor ``[K, C, n]`` in grid order."""
    t = p.time_grid
    alpha, omega, phi, beta = (q.data for q in p.parameters())
    return (
        alpha[:, :, None]
        * np.cos(omega[:, None, None] * t + phi[:, :, None])
        * np.exp(-beta[:, None, None] * (t * t))
    )


def _morlet_matrix(p: WaveletParams) -> Value:
    """
    Differentiable ``[K, n*C]`` bank matrix.

    Block k (lag k) samples grid point n-1-k, so the oldest column of a
    window meets the start of the grid and the filter reads forward in time.
    """
    t = p.time_grid[::-1]
    K, C, L = p.num_filters, p.num_channels, t.shape[0]
    alpha, omega, phi, beta = p.alpha.value, p.omega.value, p.phi.value, p.beta.value

    phase = omega.data[:, None, None] * t + phi.data[:, :, None]
    cos, sin = np.cos(phase), np.sin(phase)
    envelope = np.exp(-beta.data[:, None, None] * (t * t))
    filters = alpha.data[:, :, None] * cos * envelope
    data = filters.transpose(0, 2, 1).reshape(K, L * C)
    out = record(data, (alpha, omega, phi, beta), "morlet")

    def _backward() -> None:
        g = out.grad.reshape(K, L, C).transpose(0, 2, 1)
        d_phase = g * (-alpha.data[:, :, None] * sin * envelope)
        if alpha.requires_grad:
            alpha._accumulate((g * cos * envelope).sum(axis=2))
        if phi.requires_grad:
            phi._accumulate(d_phase.sum(axis=2))
        if omega.requires_grad:
            omega._accumulate((d_phase * t).sum(axis=(1, 2)))
        if beta.requires_grad:
            beta._accumulate((g * filters * -(t * t)).sum(axis=(1, 2)))

    out._backward = _backward
    return out


def materialize(p: WaveletParams, n: int) -> FilterBank:
    """Filter bank with K filters over C channels whose contraction is a per-channel 1-d convolution."""
    if n != p.time_grid.shape[0]:
        raise ShapeError("materialize", grid=p.time_grid.shape, window=(n,))
    if np.any(p.beta.data < 0):
        logger.warning(
            f"Negative wavelet decay {p.beta.data.min():.4g}: filters grow with |t|"
        )
    return FilterBank(matrix=_morlet_matrix(p), n=n, m=p.num_channels)


class WaveletGradCase(BaseModel):
    num_filters: int
    num_channels: int
    n: int
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


class WaveletGradReport(BaseModel):
    cases: list[WaveletGradCase]
    tolerance: float
    passed: bool


def wavelet_grad_check(
    configs: tuple[tuple[int, int, int], ...] = ((2, 3, 4), (4, 2, 3), (3, 4, 2)),
    seed: int = 0,
    tolerance: float = 1e-5,
) -> WaveletGradReport:
    """Compare backward gradients for α, ω, φ, β against central differences on a pooled softmax loss."""
    rng = np.random.default_rng(seed)
    cases = []
    for K, C, n in configs:
        p = init_wavelet_params(K, C, n, rng)
        # larger amplitudes so the loss is not flat in the other families
        p.alpha.value.data[...] = rng.normal(size=(K, C))
        sequence = rng.normal(size=(n + 2, C))
        readout = constant(rng.normal(size=(2, K)))
        label = int(rng.integers(2))
        params = {q.name: q for q in p.parameters()}

        def loss_value() -> Value:
            bank = materialize(p, n)
            hs = [tanh(contract(bank, window(sequence, t, n))) for t in range(len(sequence))]
            loss, _probs = softmax_xent(affine(readout, mean_pool(hs)), label)
            return loss

        analytic = backward(loss_value(), params)
        numeric = finite_diff_grad(lambda _: loss_value().item(), params)
        errors = {
            name.split(".")[-1]: relative_error(analytic[name], numeric[name])
            for name in params
        }
        logger.debug(f"wavelet gradcheck K={K} C={C} n={n}: {errors}")
        cases.append(WaveletGradCase(num_filters=K, num_channels=C, n=n, errors=errors))
    passed = all(case.max_error < tolerance for case in cases)
    return WaveletGradReport(cases=cases, tolerance=tolerance, passed=passed)
