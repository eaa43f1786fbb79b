from enum import Enum
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from rkm.constants import DEFAULT_SEED, DEFAULT_SIGMA_SQ, LAYER_NORM_EPS, OUTPUT_DIR


class CellVariant(str, Enum):
    """The seven cells, ordered from richest gating to the plain CNN."""

    LSTM = "lstm"
    RKM_LSTM = "rkm-lstm"
    RKM_CIFG = "rkm-cifg"
    LINEAR_KERNEL_OUTGATE = "linear-kernel-outgate"
    LINEAR_KERNEL = "linear-kernel"
    GATED_CNN = "gated-cnn"
    CNN = "cnn"

    @property
    def tag(self) -> int:
        return list(CellVariant).index(self)

    @classmethod
    def from_tag(cls, tag: int) -> "CellVariant":
        return list(cls)[tag]


STATIC_MEMORY = {CellVariant.LINEAR_KERNEL_OUTGATE, CellVariant.LINEAR_KERNEL}
MEMORYLESS = {CellVariant.GATED_CNN, CellVariant.CNN}


class CellConfig(BaseModel):
    variant: CellVariant = CellVariant.RKM_LSTM
    m: int = Field(gt=0)  # input width (channels for raw signals)
    d: int = Field(gt=0)  # memory and hidden width
    n: int = Field(default=1, ge=1)
    dilation: int = Field(default=1, ge=1)
    sigma_i_sq: float = Field(default=DEFAULT_SIGMA_SQ, ge=0.0, le=1.0)
    sigma_f_sq: float = Field(default=DEFAULT_SIGMA_SQ, ge=0.0, le=1.0)
    use_layer_norm: bool = False
    layer_norm_eps: float = Field(default=LAYER_NORM_EPS, gt=0.0)
    learn_gains: bool = False
    ngram_gates: bool = True
    filter_lengths: list[int] | None = None
    wavelet: bool = False
    seed: int = DEFAULT_SEED

    @model_validator(mode="after")
    def _apply_variant_constraints(self) -> "CellConfig":
        if self.variant in MEMORYLESS:
            self.sigma_f_sq = 0.0
        elif self.variant in STATIC_MEMORY and not self.sigma_f_sq < 1.0:
            raise ValueError(
                f"sigma_f_sq must be < 1 for {self.variant.value} (got {self.sigma_f_sq})"
            )
        if self.filter_lengths is not None:
            if len(self.filter_lengths) != self.d:
                raise ValueError(
                    f"filter_lengths needs one entry per filter ({self.d}), got {len(self.filter_lengths)}"
                )
            if any(not 1 <= length <= self.n for length in self.filter_lengths):
                raise ValueError(f"filter_lengths must lie in [1, {self.n}]")
            if self.wavelet:
                raise ValueError("filter_lengths cannot be combined with wavelet filters")
        return self


class ClassifierConfig(BaseModel):
    cell: CellConfig
    num_classes: int = Field(ge=2)
    vocab_size: int | None = Field(default=None, gt=0)  # None reads raw feature vectors
    fc_activation: Literal["tanh"] = "tanh"
    seed: int = DEFAULT_SEED


class LMConfig(BaseModel):
    cell: CellConfig
    vocab_size: int = Field(gt=0)
    seed: int = DEFAULT_SEED


class TrainConfig(BaseModel):
    optimizer: Literal["adam", "sgd-momentum"] = "adam"
    lr: float = Field(default=1e-3, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=32, gt=0)
    epochs: int = Field(default=10, ge=1)
    clip_norm: float = Field(default=5.0, gt=0.0)
    seed: int = DEFAULT_SEED
    patience: int | None = Field(default=None, ge=1)
    bptt: int = Field(default=35, ge=1)


TaskName = Literal["delayed-recall", "parity", "keyword", "tokens", "signals", "chars"]


class RunConfig(BaseModel):
    """Everything one CLI training or evaluation run needs."""

    command: str
    variant: CellVariant = CellVariant.RKM_LSTM
    m: int = Field(default=32, gt=0)
    d: int = Field(default=64, gt=0)
    n: int = Field(default=1, ge=1)
    dilation: int = Field(default=1, ge=1)
    sigma_i_sq: float = DEFAULT_SIGMA_SQ
    sigma_f_sq: float = DEFAULT_SIGMA_SQ
    layer_norm: bool = False
    wavelet: bool = False
    task: TaskName = "delayed-recall"
    data: Path | None = None
    val_data: Path | None = None
    lag: int = Field(default=10, ge=1)
    classes: int = Field(default=4, ge=2)
    length: int = Field(default=30, ge=2)
    count: int = Field(default=4000, ge=1)
    val_count: int = Field(default=1000, ge=1)
    train: TrainConfig = Field(default_factory=TrainConfig)
    seed: int = DEFAULT_SEED
    checkpoint: Path | None = None
    out: Path = Path(OUTPUT_DIR) / "run"

    @field_validator("variant", mode="before")
    @classmethod
    def _normalize_variant(cls, value: Any) -> Any:
        if isinstance(value, str):
            return value.strip().lower().replace("_", "-")
        return value


class ScenarioRun(BaseModel):
    """One named run of a scenario file; ``expect`` holds metric bounds checked after training."""

    name: str
    settings: dict[str, Any]
    expect: dict[str, float] = {}


class Scenario(BaseModel):
    description: str = ""
    runs: list[ScenarioRun]
