"""
Reference evaluation of the recurrent kernel.

Two independent evaluations of the same quantity:

* nested, literally ``q[x̃ᵀx_t + q[x̃ᵀx_{t-1} + q[...]]]`` built innermost first;
* recursive, ``c_t = x̃ᵀx_t + q(c_{t-1})`` and ``h'_t = q(c_t)``.

Both read the filter responses through ``ngram.contract`` so they see
exactly the numbers the cells see.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from rkm.engine import Array
from rkm.errors import ShapeError
from rkm.ngram import FilterBank, as_steps, contract, window

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PointwiseKernel:
    """
    q_θ applied elementwise to filter responses.

    ``input_gain`` scales the fresh response before it is added to q of the
    past, which is how the linear kernel carries σ_i².
    """

    name: str
    q: Callable[[Array], Array]
    theta: tuple[float, ...] = field(default=())
    input_gain: float = 1.0

    def __call__(self, u: Array) -> Array:
        return self.q(u)


def identity() -> PointwiseKernel:
    return PointwiseKernel("identity", lambda u: u)


def scaled_linear(sigma_f_sq: float = 0.5, sigma_i_sq: float = 1.0) -> PointwiseKernel:
    """Linear kernel: q(u) = σ_f² u, fresh responses weighted by σ_i²."""
    return PointwiseKernel(
        "scaled-linear",
        lambda u: sigma_f_sq * u,
        theta=(sigma_i_sq, sigma_f_sq),
        input_gain=sigma_i_sq,
    )


def tanh_kernel(gain: float = 1.0) -> PointwiseKernel:
    return PointwiseKernel("tanh", lambda u: np.tanh(gain * u), theta=(gain,))


KERNELS: dict[str, Callable[[], PointwiseKernel]] = {
    "identity": identity,
    "scaled-linear": scaled_linear,
    "tanh": tanh_kernel,
}


def filter_responses(
    bank: FilterBank, sequence: Sequence | ArrayLike, dilation: int = 1
) -> list[Array]:
    """x̃_iᵀX_t for every filter i and every time step t."""
    steps = as_steps(sequence)
    if not steps:
        raise ValueError("filter_responses: empty sequence")
    return [contract(bank, window(steps, t, bank.n, dilation)).data for t in range(len(steps))]


def nested_eval(
    kernel: PointwiseKernel,
    bank: FilterBank,
    sequence: Sequence | ArrayLike,
    t: int,
    depth: int,
    dilation: int = 1,
    tail: float | ArrayLike = 0.0,
) -> Array:
    """
    Evaluate h'_t as a depth-N nest of q, the innermost term first.

    ``tail`` stands in for the memory older than the nest; the exact kernel
    takes it as zero.
    """
    responses = filter_responses(bank, sequence, dilation)
    if not 0 <= t < len(responses):
        raise ValueError(f"time index {t} out of range for sequence of length {len(responses)}")
    if not 1 <= depth <= t + 1:
        raise ValueError(f"depth must lie in [1, {t + 1}] at t={t}, got {depth}")
    inner = np.broadcast_to(np.asarray(tail, dtype=np.float64), responses[t].shape).copy()
    for k in range(depth - 1, -1, -1):
        inner = kernel.input_gain * responses[t - k] + kernel(inner)
    return kernel(inner)


def recursive_trace(
    kernel: PointwiseKernel,
    bank: FilterBank,
    sequence: Sequence | ArrayLike,
    feedback: ArrayLike | None = None,
    dilation: int = 1,
) -> tuple[list[Array], list[Array]]:
    """
    Run ``c_t = x̃ᵀX_t (+ H̃ h'_{t-1}) + q(c_{t-1})``, ``h'_t = q(c_t)`` from c = 0.

    Args:
        feedback: optional H̃ ``[j, j]``; the fresh term then also reads the previous output

    Returns:
        Tuple of (h'_t list, c_t list)
    """
    responses = filter_responses(bank, sequence, dilation)
    j = bank.j
    H = None
    if feedback is not None:
        H = np.asarray(feedback, dtype=np.float64)
        if H.shape != (j, j):
            raise ShapeError("recursive_eval", feedback=H.shape, filters=(j,))
    c = np.zeros_like(responses[0])
    h = np.zeros_like(responses[0])
    outputs, cells = [], []
    for response in responses:
        fresh = response if H is None else response + h @ H.T
        c = kernel.input_gain * fresh + kernel(c)
        h = kernel(c)
        cells.append(c)
        outputs.append(h)
    return outputs, cells


def recursive_eval(
    kernel: PointwiseKernel,
    bank: FilterBank,
    sequence: Sequence | ArrayLike,
    feedback: ArrayLike | None = None,
    dilation: int = 1,
) -> list[Array]:
    return recursive_trace(kernel, bank, sequence, feedback, dilation)[0]


def truncation_error(
    kernel: PointwiseKernel,
    bank: FilterBank,
    sequence: Sequence | ArrayLike,
    depths: Sequence[int],
    tail: float = 0.0,
) -> dict[int, float]:
    """
    Max abs gap at the last step between a depth-N nest and the full recursion.

    The nest drops everything older than N steps, replacing it with ``tail``.
    """
    steps = as_steps(sequence)
    t = len(steps) - 1
    exact = recursive_eval(kernel, bank, steps)[t]
    gaps = {}
    for depth in depths:
        approx = nested_eval(kernel, bank, steps, t, depth, tail=tail)
        gaps[depth] = float(np.max(np.abs(approx - exact)))
    logger.debug(f"truncation error for {kernel.name}: {gaps}")
    return gaps
