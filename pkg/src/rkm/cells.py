"""
The recurrent kernel machine cell family.

All seven variants share one step function; a variant only decides which
pieces are allocated and how they are combined:

    content   c̃_t = X̃·X_t (+ H̃ h'_{t-1})        tanh(· + b_c) for the LSTM
    gates     g_t = σ(X̃_g·X_t (+ W̃_g h'_{t-1}) + b_g)
    memory    dynamic  c_t = η_t ⊙ c̃_t + f_t ⊙ c_{t-1}
              coupled  c_t = (1 - f_t) ⊙ c̃_t + f_t ⊙ c_{t-1}
              static   c_t = σ_i² c̃_t + σ_f² c_{t-1}
              none     c_t = σ_i² c̃_t
    output    h'_t = gate ⊙ c_t, gate ⊙ tanh(c_t) or tanh(c_t)

Layer normalization, when enabled, replaces c_t right after the memory
update; gates never see normalized quantities.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike

from rkm.engine import (
    Parameter,
    Value,
    add,
    affine,
    constant,
    hadamard,
    layer_norm,
    one_minus,
    scale,
    sigmoid,
    tanh,
)
from rkm.errors import DivergenceError, ShapeError
from rkm.models import CellConfig, CellVariant
from rkm.ngram import FilterBank, NGramWindow, as_steps, contract, filter_mask, window
from rkm.wavelets import WaveletParams, init_wavelet_params, materialize

logger = logging.getLogger(__name__)

__all__ = [
    "CellParams",
    "CellState",
    "CellVariant",
    "VariantTraits",
    "TRAITS",
    "content_bank",
    "count_allocated",
    "init_params",
    "param_count",
    "run_sequence",
    "step",
    "zero_state",
]


@dataclass(frozen=True)
class VariantTraits:
    recurrent: bool
    gates: tuple[str, ...]
    memory: Literal["dynamic", "coupled", "static", "none"]
    output_gate: str | None
    squash_output: bool
    squash_content: bool = False

    @property
    def cell_bias(self) -> bool:
        return self.squash_content


TRAITS: dict[CellVariant, VariantTraits] = {
    CellVariant.LSTM: VariantTraits(
        True, ("o", "eta", "f"), "dynamic", "o", squash_output=True, squash_content=True
    ),
    CellVariant.RKM_LSTM: VariantTraits(True, ("o", "eta", "f"), "dynamic", "o", False),
    CellVariant.RKM_CIFG: VariantTraits(True, ("o", "f"), "coupled", "o", False),
    CellVariant.LINEAR_KERNEL_OUTGATE: VariantTraits(True, ("o",), "static", "o", False),
    CellVariant.LINEAR_KERNEL: VariantTraits(True, (), "static", None, True),
    CellVariant.GATED_CNN: VariantTraits(False, ("eta",), "none", "eta", False),
    CellVariant.CNN: VariantTraits(False, (), "none", None, True),
}


@dataclass
class CellState:
    c: Value  # memory cell
    h: Value  # hidden output h'


@dataclass
class CellParams:
    params: dict[str, Parameter]
    wavelet: WaveletParams | None = None

    def __getitem__(self, name: str) -> Value:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def get(self, name: str) -> Value | None:
        param = self.params.get(name)
        return param.value if param is not None else None

    def parameters(self) -> list[Parameter]:
        extra = self.wavelet.parameters() if self.wavelet is not None else []
        return [*self.params.values(), *extra]


def param_count(variant: CellVariant, m: int, d: int, n: int) -> int:
    """Weight count of a cell, biases and layer-norm parameters excluded."""
    if min(m, d, n) < 1:
        raise ValueError(f"dimensions must be positive (m={m}, d={d}, n={n})")
    traits = TRAITS[variant]
    fan_in = n * m + (d if traits.recurrent else 0)
    return fan_in * d * (1 + len(traits.gates))


def count_allocated(params: CellParams) -> int:
    """Scalars of the weights init_params actually allocated, counted the same way as param_count."""
    total = sum(
        p.size for name, p in params.params.items() if name.endswith((".x", ".h"))
    )
    if params.wavelet is not None:
        total += params.wavelet.count()
    return total


def init_params(config: CellConfig) -> CellParams:
    """
    Allocate exactly the arrays the variant uses.

    Weights are uniform in ±sqrt(6 / (fan_in + fan_out)); gate biases start
    at 0 except the forget gate at 1; the same seed gives identical arrays.
    """
    traits = TRAITS[config.variant]
    rng = np.random.default_rng(config.seed)
    m, d, n = config.m, config.d, config.n
    gate_n = n if config.ngram_gates else 1
    params: dict[str, Parameter] = {}

    def glorot(name: str, rows: int, cols: int) -> None:
        r = np.sqrt(6.0 / (rows + cols))
        params[name] = Parameter.create(name, rng.uniform(-r, r, size=(rows, cols)))

    def fill(name: str, size: int, value: float) -> None:
        params[name] = Parameter.create(name, np.full(size, value))

    wavelet = None
    if config.wavelet:
        wavelet = init_wavelet_params(d, m, n, rng)
    else:
        glorot("content.x", d, n * m)
    if traits.recurrent:
        glorot("content.h", d, d)
    if traits.cell_bias:
        fill("content.b", d, 0.0)

    for gate in traits.gates:
        glorot(f"gate_{gate}.x", d, gate_n * m)
        if traits.recurrent:
            glorot(f"gate_{gate}.h", d, d)
        fill(f"gate_{gate}.b", d, 1.0 if gate == "f" else 0.0)

    if config.use_layer_norm:
        fill("norm.gain", d, 1.0)
        fill("norm.bias", d, 0.0)

    if config.learn_gains and traits.memory in ("static", "none"):
        params["gain.sigma_i_sq"] = Parameter.create("gain.sigma_i_sq", config.sigma_i_sq)
        if traits.memory == "static":
            params["gain.sigma_f_sq"] = Parameter.create("gain.sigma_f_sq", config.sigma_f_sq)

    logger.debug(
        f"Initialized {config.variant.value} cell (m={m}, d={d}, n={n}): "
        f"{sum(p.size for p in params.values())} scalars"
    )
    return CellParams(params=params, wavelet=wavelet)


def content_bank(params: CellParams, config: CellConfig) -> FilterBank:
    if params.wavelet is not None:
        return materialize(params.wavelet, config.n)
    mask = None
    if config.filter_lengths is not None:
        mask = filter_mask(config.filter_lengths, config.n, config.m)
    return FilterBank(matrix=params["content.x"], n=config.n, m=config.m, mask=mask)


def zero_state(config: CellConfig, batch_shape: tuple[int, ...] = ()) -> CellState:
    shape = (*batch_shape, config.d)
    return CellState(c=constant(np.zeros(shape)), h=constant(np.zeros(shape)))


def _gain(params: CellParams, config: CellConfig, name: str) -> float | Value:
    learned = params.get(f"gain.{name}")
    if learned is not None:
        return learned
    return float(getattr(config, name))


def step(
    params: CellParams,
    config: CellConfig,
    state: CellState,
    win: NGramWindow,
    bank: FilterBank | None = None,
) -> CellState:
    """Advance the cell by one time step."""
    traits = TRAITS[config.variant]
    if win.n != config.n or win.m != config.m:
        raise ShapeError("step", window=(win.n, win.m), config=(config.n, config.m))
    batch_shape = win.columns[0].shape[:-1]
    if state.c.shape != (*batch_shape, config.d) or state.h.shape != state.c.shape:
        raise ShapeError(
            "step", c=state.c.shape, h=state.h.shape, expected=(*batch_shape, config.d)
        )

    x = win.stacked()
    x_gate = x if config.ngram_gates else win.columns[0]

    def preactivation(name: str, inputs: Value) -> Value:
        bias = params.get(f"{name}.b")
        if traits.recurrent:
            return add(
                affine(params[f"{name}.x"], inputs),
                affine(params[f"{name}.h"], state.h, bias),
            )
        return affine(params[f"{name}.x"], inputs, bias)

    gates = {g: sigmoid(preactivation(f"gate_{g}", x_gate)) for g in traits.gates}

    c_tilde = contract(bank if bank is not None else content_bank(params, config), win)
    if traits.recurrent:
        c_tilde = add(c_tilde, affine(params["content.h"], state.h, params.get("content.b")))
    if traits.squash_content:
        c_tilde = tanh(c_tilde)

    if traits.memory == "dynamic":
        c = add(hadamard(gates["eta"], c_tilde), hadamard(gates["f"], state.c))
    elif traits.memory == "coupled":
        c = add(hadamard(one_minus(gates["f"]), c_tilde), hadamard(gates["f"], state.c))
    elif traits.memory == "static":
        c = add(
            scale(c_tilde, _gain(params, config, "sigma_i_sq")),
            scale(state.c, _gain(params, config, "sigma_f_sq")),
        )
    else:
        c = scale(c_tilde, _gain(params, config, "sigma_i_sq"))

    if config.use_layer_norm:
        c = layer_norm(c, params["norm.gain"], params["norm.bias"], config.layer_norm_eps)

    emitted = tanh(c) if traits.squash_output else c
    h = hadamard(gates[traits.output_gate], emitted) if traits.output_gate else emitted

    if not (np.all(np.isfinite(c.data)) and np.all(np.isfinite(h.data))):
        raise DivergenceError(f"{config.variant.value} cell state became non-finite")
    return CellState(c=c, h=h)


def run_sequence(
    params: CellParams,
    config: CellConfig,
    sequence: Sequence[Value] | ArrayLike,
    initial_state: CellState | None = None,
    start: int = 0,
) -> list[CellState]:
    """
    Run the cell over a sequence (time on the first axis) from a zero state.

    Steps before ``start`` only serve as n-gram context, which lets a caller
    continue a stream whose state was carried over from an earlier chunk.

    Returns:
        The CellState of every step from ``start`` on; ``state.h`` is h'_t
    """
    steps = as_steps(sequence)
    if not steps or start >= len(steps):
        raise ValueError("run_sequence: empty sequence")
    if steps[0].shape[-1] != config.m:
        raise ShapeError("run_sequence", step=steps[0].shape, m=(config.m,))
    state = initial_state or zero_state(config, steps[0].shape[:-1])
    bank = content_bank(params, config)
    states = []
    for t in range(start, len(steps)):
        state = step(params, config, state, window(steps, t, config.n, config.dilation), bank)
        states.append(state)
    return states
