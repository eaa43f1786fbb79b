"""
N-gram inputs and the filter contraction.

A window at time t stacks ``(x_t, x_{t-s}, ..., x_{t-(n-1)s})`` for dilation
s, zero-padding positions before the start of the sequence. A filter bank
holds n blocks of shape ``[j, m]`` side by side in one ``[j, n*m]`` matrix,
block k occupying columns ``k*m:(k+1)*m``, so contracting the bank with a
window is a single affine map on the stacked window.
"""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from rkm.engine import Array, Value, affine, concat, constant, hadamard
from rkm.errors import ShapeError


@dataclass(frozen=True)
class NGramWindow:
    """The stacked input X_t; out-of-range columns are exact zero vectors."""

    columns: tuple[Value, ...]
    dilation: int = 1

    @property
    def n(self) -> int:
        return len(self.columns)

    @property
    def m(self) -> int:
        return self.columns[0].shape[-1]

    def stacked(self) -> Value:
        if self.n == 1:
            return self.columns[0]
        return concat(self.columns)

    def data(self) -> Array:
        """Column data as an array ``[n, ..., m]``."""
        return np.stack([c.data for c in self.columns])


def as_steps(sequence: Sequence[Value] | ArrayLike) -> list[Value]:
    """Normalize a sequence (time on the first axis) into per-step Values."""
    if isinstance(sequence, (list, tuple)) and sequence and isinstance(sequence[0], Value):
        return list(sequence)  # type: ignore[arg-type]
    arr = np.asarray(sequence, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(
            f"sequence must have a time axis and a feature axis, got shape {arr.shape}"
        )
    return [constant(row) for row in arr]


def window(
    sequence: Sequence[Value] | ArrayLike, t: int, n: int, dilation: int = 1
) -> NGramWindow:
    """Assemble X_t: column k holds x_{t-k*dilation}, or zeros when that index is negative."""
    steps = as_steps(sequence)
    if n < 1 or dilation < 1:
        raise ValueError(f"window length and dilation must be >= 1 (n={n}, dilation={dilation})")
    if not 0 <= t < len(steps):
        raise ValueError(f"time index {t} out of range for sequence of length {len(steps)}")
    zeros: Value | None = None
    columns: list[Value] = []
    for k in range(n):
        pos = t - k * dilation
        if pos >= 0:
            columns.append(steps[pos])
        else:
            if zeros is None:
                zeros = constant(np.zeros_like(steps[0].data))
            columns.append(zeros)
    return NGramWindow(columns=tuple(columns), dilation=dilation)


def filter_mask(lengths: Sequence[int], n: int, m: int) -> Array:
    """Zero mask giving filter i an effective length of ``lengths[i]`` blocks."""
    mask = np.zeros((len(lengths), n * m))
    for i, length in enumerate(lengths):
        if not 1 <= length <= n:
            raise ValueError(f"filter length {length} outside [1, {n}]")
        mask[i, : length * m] = 1.0
    return mask


@dataclass
class FilterBank:
    """n filter blocks ``X̃_0, X̃_{-1}, ..., X̃_{-n+1}`` of shape ``[j, m]``."""

    matrix: Value
    n: int
    m: int
    mask: Array | None = None

    def __post_init__(self) -> None:
        if self.matrix.shape != (self.matrix.shape[0], self.n * self.m):
            raise ShapeError("FilterBank", matrix=self.matrix.shape, blocks=(self.n, self.m))
        if self.mask is not None and self.mask.shape != self.matrix.shape:
            raise ShapeError("FilterBank", matrix=self.matrix.shape, mask=self.mask.shape)

    @classmethod
    def from_blocks(cls, blocks: ArrayLike) -> "FilterBank":
        arr = np.asarray(blocks, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError("FilterBank.from_blocks", blocks=arr.shape)
        n, j, m = arr.shape
        return cls(matrix=constant(np.concatenate(list(arr), axis=1)), n=n, m=m)

    @property
    def j(self) -> int:
        return self.matrix.shape[0]

    @property
    def blocks(self) -> Array:
        """Effective blocks as ``[n, j, m]``."""
        data = self.matrix.data if self.mask is None else self.matrix.data * self.mask
        return data.reshape(self.j, self.n, self.m).transpose(1, 0, 2)

    def effective(self) -> Value:
        if self.mask is None:
            return self.matrix
        return hadamard(self.matrix, constant(self.mask))


def contract(bank: FilterBank, win: NGramWindow) -> Value:
    """``X̃·X_t = Σ_k X̃_{-k} x_{t-k}`` for every row of the window."""
    if win.n != bank.n or win.m != bank.m:
        raise ShapeError("contract", bank=(bank.n, bank.j, bank.m), window=(win.n, win.m))
    return affine(bank.effective(), win.stacked())
