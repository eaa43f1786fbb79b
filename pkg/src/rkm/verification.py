"""
Verification suites shared by the tests and the CLI.

Each suite returns a pydantic report with a ``passed`` flag:

* gradient_suite: backward against central differences for every variant
* reduction_identities: the reductions between variants, run on random weights
* kernel_equivalence: nested against recursive kernel evaluation
* impulse_response: fading memory of the static-gain cells
"""

import logging
from collections.abc import Iterable, Sequence

import numpy as np
from pydantic import BaseModel

from rkm.cells import CellParams, init_params, run_sequence
from rkm.constants import GRADCHECK_TOLERANCE
from rkm.engine import (
    Array,
    Value,
    affine,
    backward,
    constant,
    finite_diff_grad,
    mean_pool,
    relative_error,
    softmax_xent,
)
from rkm.kernel_oracle import KERNELS, nested_eval, recursive_trace, scaled_linear
from rkm.models import STATIC_MEMORY, CellConfig, CellVariant
from rkm.ngram import FilterBank
from rkm.wavelets import wavelet_grad_check

logger = logging.getLogger(__name__)


class GradCase(BaseModel):
    label: str
    variant: CellVariant
    n: int
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


class GradientReport(BaseModel):
    cases: list[GradCase]
    tolerance: float
    passed: bool

    def worst_by_variant(self) -> dict[str, float]:
        worst: dict[str, float] = {}
        for case in self.cases:
            worst[case.label] = max(worst.get(case.label, 0.0), case.max_error)
        return worst


def _randomize(params: CellParams, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Fresh normal draws for every weight, bias and wavelet amplitude; gains keep their value."""
    for name, param in params.params.items():
        if not name.startswith("gain."):
            param.value.data[...] = rng.normal(0.0, scale, size=param.data.shape)
    if params.wavelet is not None:
        # unit amplitudes so the loss is not flat in the other wavelet families
        alpha = params.wavelet.alpha
        alpha.value.data[...] = rng.normal(size=alpha.data.shape)


def cell_grad_errors(config: CellConfig, length: int = 5, seed: int = 0) -> dict[str, float]:
    """Relative error per parameter of a pooled softmax loss over one random sequence."""
    rng = np.random.default_rng(seed)
    params = init_params(config)
    _randomize(params, rng)
    sequence = rng.normal(size=(length, config.m))
    readout = constant(rng.normal(size=(3, config.d)))
    label = int(rng.integers(3))
    named = {p.name: p for p in params.parameters()}

    def loss() -> Value:
        states = run_sequence(params, config, sequence)
        value, _probs = softmax_xent(affine(readout, mean_pool([s.h for s in states])), label)
        return value

    analytic = backward(loss(), named)
    numeric = finite_diff_grad(lambda _: loss().item(), named)
    return {name: relative_error(analytic[name], numeric[name]) for name in named}


def gradient_suite(
    variants: Iterable[CellVariant] = tuple(CellVariant),
    ns: Sequence[int] = (1, 2, 3),
    m: int = 3,
    d: int = 4,
    seed: int = 0,
    tolerance: float = GRADCHECK_TOLERANCE,
    extras: bool = True,
) -> GradientReport:
    """
    Finite-difference check of every variant at each window length.

    With ``extras`` the suite also covers layer normalization, learned
    gains, wavelet content banks and the standalone wavelet check.
    """
    cases = []
    for variant in variants:
        for n in ns:
            cfg = CellConfig(variant=variant, m=m, d=d, n=n, seed=seed)
            errors = cell_grad_errors(cfg, seed=seed)
            cases.append(GradCase(label=variant.value, variant=variant, n=n, errors=errors))
            logger.debug(f"gradcheck {variant.value} n={n}: max {max(errors.values()):.2e}")
    if extras:
        n = max(ns)
        specials = {
            "rkm-lstm+layer-norm": CellConfig(
                variant=CellVariant.RKM_LSTM, m=m, d=d, n=n, use_layer_norm=True, seed=seed
            ),
            "linear-kernel+learned-gains": CellConfig(
                variant=CellVariant.LINEAR_KERNEL, m=m, d=d, n=n, learn_gains=True, seed=seed
            ),
            "rkm-lstm+wavelet": CellConfig(
                variant=CellVariant.RKM_LSTM, m=m, d=d, n=n, wavelet=True, seed=seed
            ),
            "cnn+wavelet": CellConfig(
                variant=CellVariant.CNN, m=m, d=d, n=n, wavelet=True, seed=seed
            ),
        }
        for label, cfg in specials.items():
            errors = cell_grad_errors(cfg, seed=seed)
            cases.append(GradCase(label=label, variant=cfg.variant, n=cfg.n, errors=errors))
        wavelet = wavelet_grad_check(seed=seed, tolerance=tolerance)
        for wcase in wavelet.cases:
            cases.append(
                GradCase(
                    label="wavelet",
                    variant=CellVariant.CNN,
                    n=wcase.n,
                    errors=wcase.errors,
                )
            )
    passed = all(case.max_error < tolerance for case in cases)
    logger.info(f"Gradient suite: {len(cases)} cases, passed={passed}")
    return GradientReport(cases=cases, tolerance=tolerance, passed=passed)


class IdentityResult(BaseModel):
    name: str
    seeds: int
    max_diff: float
    exact: bool
    tolerance: float
    passed: bool


class IdentityReport(BaseModel):
    results: list[IdentityResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def _copy(dst: CellParams, src: CellParams, mapping: dict[str, str]) -> None:
    for target, source in mapping.items():
        dst.params[target].value.data[...] = src.params[source].data


def _zero(params: CellParams, *names: str) -> None:
    for name in names:
        params.params[name].value.data[...] = 0.0


def _outputs(params: CellParams, cfg: CellConfig, sequence: Array) -> Array:
    return np.stack([s.h.data for s in run_sequence(params, cfg, sequence)])


def gated_cnn_pair(
    seed: int, m: int = 3, d: int = 4, n: int = 2, length: int = 8
) -> tuple[Array, Array]:
    """Gated CNN and the output-gated linear kernel at σ_i²=1, σ_f²=0 with feedback removed."""
    rng = np.random.default_rng(seed)
    sequence = rng.normal(size=(length, m))
    g_cfg = CellConfig(variant=CellVariant.GATED_CNN, m=m, d=d, n=n, sigma_i_sq=1.0)
    k_cfg = CellConfig(
        variant=CellVariant.LINEAR_KERNEL_OUTGATE, m=m, d=d, n=n, sigma_i_sq=1.0, sigma_f_sq=0.0
    )
    gated, kernel = init_params(g_cfg), init_params(k_cfg)
    _randomize(gated, rng)
    _randomize(kernel, rng)
    _copy(
        kernel,
        gated,
        {"content.x": "content.x", "gate_o.x": "gate_eta.x", "gate_o.b": "gate_eta.b"},
    )
    _zero(kernel, "content.h", "gate_o.h")
    return _outputs(gated, g_cfg, sequence), _outputs(kernel, k_cfg, sequence)


def cnn_pair(
    seed: int, m: int = 3, d: int = 4, n: int = 2, length: int = 8
) -> tuple[Array, Array]:
    """CNN and the linear kernel at σ_f²=0 with feedback removed."""
    rng = np.random.default_rng(seed)
    sequence = rng.normal(size=(length, m))
    c_cfg = CellConfig(variant=CellVariant.CNN, m=m, d=d, n=n)
    k_cfg = CellConfig(variant=CellVariant.LINEAR_KERNEL, m=m, d=d, n=n, sigma_f_sq=0.0)
    cnn, kernel = init_params(c_cfg), init_params(k_cfg)
    _randomize(cnn, rng)
    _randomize(kernel, rng)
    _copy(kernel, cnn, {"content.x": "content.x"})
    _zero(kernel, "content.h")
    return _outputs(cnn, c_cfg, sequence), _outputs(kernel, k_cfg, sequence)


def ran_step(
    weights: dict[str, Array], x: Array, c: Array, h: Array
) -> tuple[Array, Array]:
    """
    One step of a recurrent additive network, coded directly in numpy.

    ``c̃ = W_cx x``, ``i = σ(W_ix x + W_ih h + b_i)``, ``f = σ(W_fx x + W_fh h + b_f)``,
    ``c = i ⊙ c̃ + f ⊙ c`` and the output is c itself.
    """

    def logistic(z: Array) -> Array:
        return 1.0 / (1.0 + np.exp(-z))

    content = weights["W_cx"] @ x
    i = logistic(weights["W_ix"] @ x + weights["W_ih"] @ h + weights["b_i"])
    f = logistic(weights["W_fx"] @ x + weights["W_fh"] @ h + weights["b_f"])
    c_new = i * content + f * c
    return c_new, c_new


def ran_pair(seed: int, m: int = 3, d: int = 4, length: int = 8) -> tuple[Array, Array]:
    """RKM-LSTM with the output gate pinned open and no content feedback, against ran_step."""
    rng = np.random.default_rng(seed)
    sequence = rng.normal(size=(length, m))
    cfg = CellConfig(variant=CellVariant.RKM_LSTM, m=m, d=d, n=1)
    params = init_params(cfg)
    _randomize(params, rng)
    _zero(params, "content.h", "gate_o.x", "gate_o.h")
    # σ(1000) rounds to exactly 1.0
    params.params["gate_o.b"].value.data[...] = 1000.0
    weights = {
        "W_cx": params.params["content.x"].data,
        "W_ix": params.params["gate_eta.x"].data,
        "W_ih": params.params["gate_eta.h"].data,
        "b_i": params.params["gate_eta.b"].data,
        "W_fx": params.params["gate_f.x"].data,
        "W_fh": params.params["gate_f.h"].data,
        "b_f": params.params["gate_f.b"].data,
    }
    c, h = np.zeros(d), np.zeros(d)
    reference = []
    for x in sequence:
        c, h = ran_step(weights, x, c, h)
        reference.append(h)
    return _outputs(params, cfg, sequence), np.stack(reference)


def cifg_pair(
    seed: int, m: int = 3, d: int = 4, n: int = 2, length: int = 8
) -> tuple[Array, Array]:
    """RKM-CIFG against RKM-LSTM whose input gate is the negated forget gate, so η = 1 - f."""
    rng = np.random.default_rng(seed)
    sequence = rng.normal(size=(length, m))
    c_cfg = CellConfig(variant=CellVariant.RKM_CIFG, m=m, d=d, n=n)
    l_cfg = CellConfig(variant=CellVariant.RKM_LSTM, m=m, d=d, n=n)
    cifg, lstm = init_params(c_cfg), init_params(l_cfg)
    _randomize(cifg, rng)
    shared = [name for name in cifg.params if name in lstm.params]
    _copy(lstm, cifg, {name: name for name in shared})
    for part in ("x", "h", "b"):
        lstm.params[f"gate_eta.{part}"].value.data[...] = -cifg.params[f"gate_f.{part}"].data
    return _outputs(cifg, c_cfg, sequence), _outputs(lstm, l_cfg, sequence)


IDENTITIES = {
    "gated-cnn=linear-kernel-outgate": (gated_cnn_pair, True, 0.0),
    "rkm-lstm(o=1)=ran": (ran_pair, False, 1e-12),
    "rkm-cifg=tied-rkm-lstm": (cifg_pair, False, 1e-12),
    "cnn=linear-kernel": (cnn_pair, True, 0.0),
}


def reduction_identities(seeds: Iterable[int] = range(10)) -> IdentityReport:
    """Run each reduction on every seed; exact identities must agree bit for bit."""
    seeds = list(seeds)
    results = []
    for name, (pair, exact, tolerance) in IDENTITIES.items():
        worst, identical = 0.0, True
        for seed in seeds:
            a, b = pair(seed)
            worst = max(worst, float(np.max(np.abs(a - b))))
            identical = identical and np.array_equal(a, b)
        passed = identical if exact else worst < tolerance
        results.append(
            IdentityResult(
                name=name,
                seeds=len(seeds),
                max_diff=worst,
                exact=exact,
                tolerance=tolerance,
                passed=passed,
            )
        )
        logger.debug(f"identity {name}: max diff {worst:.3e} passed={passed}")
    return IdentityReport(results=results)


class EquivalenceResult(BaseModel):
    kernel: str
    seeds: int
    max_diff: float
    passed: bool


class EquivalenceReport(BaseModel):
    results: list[EquivalenceResult]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def _random_bank(rng: np.random.Generator, j: int, n: int, m: int) -> FilterBank:
    return FilterBank.from_blocks(rng.normal(size=(n, j, m)))


def nested_vs_recursive(kernel_name: str, seed: int) -> float:
    """Largest gap between full-depth nesting and the recursion over every step of one random case."""
    rng = np.random.default_rng(seed)
    j, n, m = (int(v) for v in rng.integers(1, 5, size=3))
    length = int(rng.integers(1, 13))
    bank = _random_bank(rng, j, min(n, 3), m)
    sequence = rng.normal(size=(length, m))
    kernel = KERNELS[kernel_name]()
    recursive, _cells = recursive_trace(kernel, bank, sequence)
    worst = 0.0
    for t in range(length):
        nested = nested_eval(kernel, bank, sequence, t, t + 1)
        worst = max(worst, float(np.max(np.abs(nested - recursive[t]))))
    return worst


def oracle_vs_linear_kernel(
    seed: int, m: int = 3, d: int = 4, n: int = 2, length: int = 10
) -> float:
    """Memory cells of LINEAR_KERNEL without feedback against the scaled-linear recursion."""
    rng = np.random.default_rng(seed)
    cfg = CellConfig(variant=CellVariant.LINEAR_KERNEL, m=m, d=d, n=n)
    params = init_params(cfg)
    _randomize(params, rng)
    _zero(params, "content.h")
    sequence = rng.normal(size=(length, m))
    cells = np.stack([s.c.data for s in run_sequence(params, cfg, sequence)])
    bank = FilterBank(matrix=params["content.x"], n=n, m=m)
    _hs, oracle = recursive_trace(scaled_linear(cfg.sigma_f_sq, cfg.sigma_i_sq), bank, sequence)
    return float(np.max(np.abs(cells - np.stack(oracle))))


def kernel_equivalence(
    seeds: Iterable[int] = range(20), tolerance: float = 1e-10
) -> EquivalenceReport:
    seeds = list(seeds)
    results = []
    for name in KERNELS:
        worst = max(nested_vs_recursive(name, seed) for seed in seeds)
        results.append(
            EquivalenceResult(
                kernel=name, seeds=len(seeds), max_diff=worst, passed=worst < tolerance
            )
        )
    worst = max(oracle_vs_linear_kernel(seed) for seed in seeds)
    results.append(
        EquivalenceResult(
            kernel="linear-kernel-cell", seeds=len(seeds), max_diff=worst, passed=worst == 0.0
        )
    )
    return EquivalenceReport(results=results, tolerance=tolerance)


class ImpulseRow(BaseModel):
    lag: int
    measured: float
    predicted: float
    ratio: float
    off_diagonal: float


class ImpulseReport(BaseModel):
    variant: CellVariant
    sigma_i_sq: float
    sigma_f_sq: float
    rows: list[ImpulseRow]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(
            abs(r.ratio - 1.0) <= self.tolerance and r.off_diagonal == 0.0 for r in self.rows
        )


def _ratio(measured: float, predicted: float) -> float:
    if predicted == 0.0:
        return 1.0 if measured == 0.0 else float("inf")
    return measured / predicted


def impulse_response(
    variant: CellVariant = CellVariant.LINEAR_KERNEL,
    sigma_i_sq: float = 0.5,
    sigma_f_sq: float = 0.5,
    lags: int = 20,
    d: int = 1,
    tolerance: float = 1e-10,
) -> ImpulseReport:
    """
    Measure how much of c̃_0 is left in c_N for N = 0..lags.

    The content bank is the identity and feedback is removed, so an impulse
    on input coordinate k is exactly an impulse of c̃ on coordinate k. The
    measured Jacobian column is compared with σ_i² σ_f^{2N}.
    """
    if variant not in STATIC_MEMORY:
        raise ValueError(
            f"impulse response needs a static-memory variant, got {variant.value}"
        )
    cfg = CellConfig(
        variant=variant, m=d, d=d, n=1, sigma_i_sq=sigma_i_sq, sigma_f_sq=sigma_f_sq
    )
    params = init_params(cfg)
    params.params["content.x"].value.data[...] = np.eye(d)
    _zero(params, "content.h")
    jacobians = np.zeros((lags + 1, d, d))
    for k in range(d):
        sequence = np.zeros((lags + 1, d))
        sequence[0, k] = 1.0
        for lag, state in enumerate(run_sequence(params, cfg, sequence)):
            jacobians[lag, :, k] = state.c.data
    rows = []
    for lag in range(lags + 1):
        predicted = sigma_i_sq * sigma_f_sq**lag
        diagonal = np.diag(jacobians[lag])
        measured = float(diagonal[np.argmax(np.abs(diagonal - predicted))])
        off = jacobians[lag] - np.diag(diagonal)
        rows.append(
            ImpulseRow(
                lag=lag,
                measured=measured,
                predicted=predicted,
                ratio=_ratio(measured, predicted),
                off_diagonal=float(np.max(np.abs(off))),
            )
        )
    return ImpulseReport(
        variant=variant,
        sigma_i_sq=sigma_i_sq,
        sigma_f_sq=sigma_f_sq,
        rows=rows,
        tolerance=tolerance,
    )
