import csv
import logging
import math
import time
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from rkm.checkpoint import Model, save_model
from rkm.constants import BEST_CHECKPOINT_NAME, REPORT_FILE_NAME
from rkm.data import SequenceDataset, TokenStream
from rkm.engine import Array, Parameter, backward
from rkm.errors import DivergenceError
from rkm.heads import Classifier
from rkm.models import TrainConfig

logger = logging.getLogger(__name__)

Data = SequenceDataset | TokenStream


class Adam:
    """Adaptive-moment updates with bias correction."""

    def __init__(
        self,
        params: dict[str, Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, Array]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, param in self.params.items():
            if not param.trainable:
                continue
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param.value.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGDMomentum:
    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3, momentum: float = 0.9):
        self.params = params
        self.lr, self.momentum = lr, momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, Array]) -> None:
        for name, param in self.params.items():
            if not param.trainable:
                continue
            self.velocity[name] = self.momentum * self.velocity[name] + grads[name]
            param.value.data -= self.lr * self.velocity[name]


Optimizer = Adam | SGDMomentum


def make_optimizer(params: dict[str, Parameter], cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGDMomentum(params, cfg.lr, cfg.momentum)


def global_norm(grads: dict[str, Array]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, Array], max_norm: float) -> float:
    """
    Rescale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping
    """
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= factor
    return norm


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_metric: float
    seconds: float


class TrainReport(BaseModel):
    metric: str
    epochs: list[EpochRecord] = []
    best_epoch: int | None = None
    best_metric: float | None = None
    best_checkpoint: Path | None = None
    stopped_early: bool = False

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "train_loss", "val_metric", "seconds"])
            for rec in self.epochs:
                writer.writerow(
                    [rec.epoch, repr(rec.train_loss), repr(rec.val_metric), f"{rec.seconds:.3f}"]
                )
        return path


def metric_name(model: Model) -> str:
    return "accuracy" if isinstance(model, Classifier) else "perplexity"


def _improved(model: Model, value: float, best: float | None) -> bool:
    if best is None:
        return True
    return value > best if isinstance(model, Classifier) else value < best


def evaluate(model: Model, data: Data) -> dict[str, float]:
    """Accuracy for classifiers, perplexity for language models; parameters are left untouched."""
    if len(data) == 0:
        raise ValueError("evaluate: empty dataset")
    return model.evaluate(data)  # type: ignore[arg-type]


def train(
    model: Model,
    train_data: Data,
    val_data: Data,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainReport:
    """
    Mini-batch training with global-norm clipping before every update.

    The shuffle order comes from ``cfg.seed`` only, so two runs with the same
    seed produce identical reports. When ``out_dir`` is given the best
    validation checkpoint and the CSV report are written there.

    Raises:
        DivergenceError: a loss or cell state became non-finite
    """
    params = model.parameters()
    optimizer = make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    metric = metric_name(model)
    report = TrainReport(metric=metric)
    out = Path(out_dir) if out_dir is not None else None
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        total, count = 0.0, 0
        losses = model.batch_losses(train_data, cfg, rng)  # type: ignore[arg-type]
        try:
            for loss in losses:
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value}")
                grads = backward(loss, params)
                clip_grad_norm(grads, cfg.clip_norm)
                optimizer.step(grads)
                total += value
                count += 1
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at epoch {epoch}, step {count + 1}") from exc
        val = evaluate(model, val_data)[metric]
        seconds = time.perf_counter() - started
        train_loss = total / max(count, 1)
        report.epochs.append(
            EpochRecord(epoch=epoch, train_loss=train_loss, val_metric=val, seconds=seconds)
        )
        logger.info(
            f"epoch {epoch}/{cfg.epochs}: train_loss={train_loss:.4f} "
            f"val_{metric}={val:.4f} ({seconds:.1f}s)"
        )

        if _improved(model, val, report.best_metric):
            report.best_epoch, report.best_metric = epoch, val
            stale = 0
            if out is not None:
                report.best_checkpoint = save_model(model, out / BEST_CHECKPOINT_NAME)
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                logger.warning(
                    f"No validation improvement for {stale} epochs, stopping after epoch {epoch}"
                )
                report.stopped_early = True
                break

    if out is not None:
        report.write_csv(out / REPORT_FILE_NAME)
    return report
