"""
Command-line entry point.

    rkm train --variant rkm-lstm --task delayed-recall --lag 10 --d 64
    rkm eval --checkpoint .output/run/best.ckpt
    rkm gradcheck | equiv | impulse | paramcount | suite scenarios/memory_separation.toml

Every command accepts ``--config FILE`` (key=value lines or a TOML table);
file values become flag defaults, so explicit flags win. Results go to
stdout as ``key=value`` lines (CSV for ``impulse``).
"""

import argparse
import logging
import sys
import tomllib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Literal

from pydantic import ValidationError

from rkm.cells import count_allocated, param_count
from rkm.checkpoint import Model, load_model
from rkm.constants import LOG_DIR, LOG_FORMAT, LOG_LEVEL, OUTPUT_DIR
from rkm.data import (
    SequenceDataset,
    TokenStream,
    gen_delayed_recall,
    gen_keyword,
    gen_parity,
    load_dataset,
    load_text_corpus,
    split_dataset,
)
from rkm.errors import RKMError
from rkm.heads import Classifier, LanguageModel, unigram_perplexity
from rkm.models import (
    CellConfig,
    CellVariant,
    ClassifierConfig,
    LMConfig,
    RunConfig,
    Scenario,
    TrainConfig,
)
from rkm.training import Data, TrainReport, evaluate, train
from rkm.verification import (
    gradient_suite,
    impulse_response,
    kernel_equivalence,
    reduction_identities,
)
from utils.common_utils import load_config_file

logger = logging.getLogger(__name__)

DEFAULT_CORPUS = Path(__file__).resolve().parents[2] / "data" / "corpus" / "fables.txt"
VARIANTS = [v.value for v in CellVariant]
TASKS = ["delayed-recall", "parity", "keyword", "tokens", "signals", "chars"]

# flag dest -> TrainConfig field
TRAIN_KEYS = {
    "optimizer": "optimizer",
    "lr": "lr",
    "momentum": "momentum",
    "epochs": "epochs",
    "batch": "batch_size",
    "clip": "clip_norm",
    "patience": "patience",
    "bptt": "bptt",
}

_file_handler: logging.Handler | None = None


def get_log_dir() -> Path:
    """Get the log directory path and create it if it doesn't exist."""
    log_dir = Path(LOG_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)
    return log_dir


def create_log_file(log_dir: Path, timestamp: str, command: str) -> Path:
    return log_dir / f"{timestamp}_{command}.log"


def setup_logging(level: str, command: str) -> None:
    """Log to stderr and to a timestamped file under the log directory."""
    global _file_handler
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, stream=sys.stderr)
    root = logging.getLogger()
    root.setLevel(level.upper())
    if _file_handler is not None:
        root.removeHandler(_file_handler)
        _file_handler.close()
    timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
    _file_handler = logging.FileHandler(
        create_log_file(get_log_dir(), timestamp, command), encoding="utf-8"
    )
    _file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(_file_handler)


def _variant(text: str) -> CellVariant:
    key = str(text).strip().lower().replace("_", "-")
    try:
        return CellVariant(key)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown variant {text!r} (choose from {', '.join(VARIANTS)})"
        ) from None


def _flag(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def build_parser(defaults: Mapping[str, Any] | None = None) -> argparse.ArgumentParser:
    """The full parser; ``defaults`` (from a config file) replace the built-in flag defaults."""
    given = dict(defaults or {})

    def default(key: str, fallback: Any) -> Any:
        return given.get(key, fallback)

    base = argparse.ArgumentParser(add_help=False)
    base.add_argument("--config", help="key=value or .toml file supplying flag defaults")
    base.add_argument("--seed", type=int, default=default("seed", 0), help="random seed")
    base.add_argument(
        "--log-level",
        default=default("log_level", LOG_LEVEL),
        help="logging level (default: RKM_LOG_LEVEL or INFO)",
    )

    cell = argparse.ArgumentParser(add_help=False)
    cell.add_argument(
        "--variant",
        type=_variant,
        default=default("variant", "rkm-lstm"),
        help=f"cell variant: {', '.join(VARIANTS)}",
    )
    cell.add_argument("--m", type=int, default=default("m", 32), help="input width")
    cell.add_argument("--d", type=int, default=default("d", 64), help="cell width")
    cell.add_argument("--n", type=int, default=default("n", 1), help="n-gram window length")
    cell.add_argument("--dilation", type=int, default=default("dilation", 1), help="window stride")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument(
        "--sigma-i-sq", type=float, default=default("sigma_i_sq", 0.5), help="static input gain"
    )
    model.add_argument(
        "--sigma-f-sq", type=float, default=default("sigma_f_sq", 0.5), help="static forget gain"
    )
    model.add_argument(
        "--layer-norm",
        type=_flag,
        nargs="?",
        const=True,
        default=default("layer_norm", False),
        help="normalize the memory cell after each update",
    )
    model.add_argument(
        "--wavelet",
        type=_flag,
        nargs="?",
        const=True,
        default=default("wavelet", False),
        help="generate the content filters from Morlet wavelets",
    )

    task = argparse.ArgumentParser(add_help=False)
    task.add_argument(
        "--task", choices=TASKS, default=default("task", "delayed-recall"), help="task to run"
    )
    task.add_argument("--data", type=Path, default=default("data", None), help="dataset path")
    task.add_argument(
        "--val-data", type=Path, default=default("val_data", None), help="validation dataset path"
    )
    task.add_argument("--lag", type=int, default=default("lag", 10), help="delayed-recall lag")
    task.add_argument("--classes", type=int, default=default("classes", 4), help="symbol count")
    task.add_argument("--length", type=int, default=default("length", 30), help="sequence length")
    task.add_argument("--count", type=int, default=default("count", 4000), help="training examples")
    task.add_argument(
        "--val-count", type=int, default=default("val_count", 1000), help="validation examples"
    )

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument(
        "--optimizer",
        choices=["adam", "sgd-momentum"],
        default=default("optimizer", "adam"),
        help="update rule",
    )
    fit.add_argument("--lr", type=float, default=default("lr", 1e-3), help="learning rate")
    fit.add_argument(
        "--momentum", type=float, default=default("momentum", 0.9), help="SGD momentum"
    )
    fit.add_argument("--epochs", type=int, default=default("epochs", 10), help="training epochs")
    fit.add_argument("--batch", type=int, default=default("batch", 32), help="batch size")
    fit.add_argument("--clip", type=float, default=default("clip", 5.0), help="gradient norm clip")
    fit.add_argument(
        "--patience", type=int, default=default("patience", None), help="early-stop patience"
    )
    fit.add_argument("--bptt", type=int, default=default("bptt", 35), help="LM truncation window")
    fit.add_argument(
        "--out",
        type=Path,
        default=default("out", Path(OUTPUT_DIR) / "run"),
        help="output directory for checkpoint and report",
    )

    parser = argparse.ArgumentParser(
        prog="rkm", description="Recurrent kernel machine cells: training and verification"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    cmd = commands.add_parser(
        "train", parents=[base, cell, model, task, fit], help="train a classifier or language model"
    )
    cmd.set_defaults(func=cmd_train)

    cmd = commands.add_parser(
        "eval", parents=[base, task], help="evaluate a checkpoint on a dataset"
    )
    cmd.add_argument(
        "--checkpoint",
        type=Path,
        required="checkpoint" not in given,
        default=given.get("checkpoint"),
        help="checkpoint written by train",
    )
    cmd.set_defaults(func=cmd_eval)

    cmd = commands.add_parser(
        "gradcheck", parents=[base], help="finite-difference check of every variant"
    )
    cmd.add_argument("--m", type=int, default=3, help="input width")
    cmd.add_argument("--d", type=int, default=4, help="cell width")
    cmd.add_argument("--tolerance", type=float, default=1e-5, help="max relative error")
    cmd.set_defaults(func=cmd_gradcheck)

    cmd = commands.add_parser(
        "paramcount", parents=[base, cell], help="weight count of a variant"
    )
    cmd.set_defaults(func=cmd_paramcount)

    cmd = commands.add_parser(
        "equiv", parents=[base], help="reduction identities and kernel recursion check"
    )
    cmd.add_argument(
        "--seeds", type=int, default=default("seeds", 10), help="random cases per check"
    )
    cmd.set_defaults(func=cmd_equiv)

    cmd = commands.add_parser("impulse", parents=[base], help="fading-memory impulse response")
    cmd.add_argument(
        "--variant",
        type=_variant,
        default=default("variant", "linear-kernel"),
        help="linear-kernel or linear-kernel-outgate",
    )
    cmd.add_argument(
        "--sigma-i-sq", type=float, default=default("sigma_i_sq", 0.5), help="static input gain"
    )
    cmd.add_argument(
        "--sigma-f-sq", type=float, default=default("sigma_f_sq", 0.5), help="static forget gain"
    )
    cmd.add_argument("--lags", type=int, default=default("lags", 20), help="largest lag N")
    cmd.add_argument("--d", type=int, default=1, help="cell width")
    cmd.set_defaults(func=cmd_impulse)

    cmd = commands.add_parser("suite", parents=[base], help="run a scenario file of training runs")
    cmd.add_argument("scenario", type=Path, help="scenario TOML file")
    cmd.set_defaults(func=cmd_suite)
    return parser


def run_config(command: str, values: Mapping[str, Any]) -> RunConfig:
    """Assemble a RunConfig from flag-style keys (``batch``, ``clip`` ...)."""
    train_values = {
        TRAIN_KEYS[key]: value
        for key, value in values.items()
        if key in TRAIN_KEYS and value is not None
    }
    if values.get("seed") is not None:
        train_values.setdefault("seed", values["seed"])
    rest = {
        key: value
        for key, value in values.items()
        if key in RunConfig.model_fields
        and key not in ("command", "train")
        and value is not None
    }
    return RunConfig(command=command, train=TrainConfig(**train_values), **rest)


def cell_config(run: RunConfig, m: int) -> CellConfig:
    return CellConfig(
        variant=run.variant,
        m=m,
        d=run.d,
        n=run.n,
        dilation=run.dilation,
        sigma_i_sq=run.sigma_i_sq,
        sigma_f_sq=run.sigma_f_sq,
        use_layer_norm=run.layer_norm,
        wavelet=run.wavelet,
        seed=run.seed,
    )


def _generated(run: RunConfig) -> SequenceDataset:
    total = run.count + run.val_count
    if run.task == "delayed-recall":
        return gen_delayed_recall(run.lag, run.classes, run.length, total, run.seed)
    if run.task == "parity":
        return gen_parity(run.length, total, run.seed)
    return gen_keyword(total, run.seed, length=run.length)


def classification_data(run: RunConfig) -> tuple[SequenceDataset, SequenceDataset]:
    """Training and validation sets; the two never share an index."""
    if run.task in ("delayed-recall", "parity", "keyword"):
        full = _generated(run)
        total = len(full)
        train_set, val_set = split_dataset(
            full, [run.count / total, run.val_count / total], seed=run.seed
        )
        return train_set, val_set
    if run.data is None:
        raise ValueError(f"task {run.task} needs --data")
    kind: Literal["tokens", "signals"] = "signals" if run.task == "signals" else "tokens"
    full = load_dataset(run.data, kind=kind)
    if run.val_data is not None:
        val = load_dataset(run.val_data, vocab=full.vocab, kind=kind)
        val.num_classes = full.num_classes = max(full.num_classes, val.num_classes)
        return full, val
    train_set, val_set = split_dataset(full, [0.8, 0.2], seed=run.seed)
    return train_set, val_set


def corpus_data(run: RunConfig) -> tuple[TokenStream, TokenStream]:
    path = run.data or DEFAULT_CORPUS
    stream = load_text_corpus(path)
    if run.val_data is not None:
        return stream, load_text_corpus(run.val_data, vocab=stream.vocab)
    return stream.split(0.1)


def build_run(run: RunConfig) -> tuple[Model, Data, Data]:
    if run.task == "chars":
        train_stream, val_stream = corpus_data(run)
        vocab = train_stream.vocab
        lm_config = LMConfig(cell=cell_config(run, run.m), vocab_size=len(vocab), seed=run.seed)
        return LanguageModel.create(lm_config, vocab), train_stream, val_stream
    train_set, val_set = classification_data(run)
    signals = train_set.kind == "signals"
    config = ClassifierConfig(
        cell=cell_config(run, train_set.input_dim if signals else run.m),
        num_classes=train_set.num_classes,
        vocab_size=None if signals else train_set.input_dim,
        seed=run.seed,
    )
    return Classifier.create(config, train_set.vocab), train_set, val_set


@dataclass
class RunOutcome:
    report: TrainReport
    metrics: dict[str, float]
    model: Model


def execute_run(run: RunConfig) -> RunOutcome:
    """Train one configuration and score its best checkpoint on the validation data."""
    model, train_data, val_data = build_run(run)
    logger.info(
        f"Training {run.variant.value} on {run.task}: "
        f"{count_allocated(model.cell)} cell weights, {len(train_data)} training items"
    )
    report = train(model, train_data, val_data, run.train, run.out)
    if report.best_checkpoint is not None:
        model = load_model(report.best_checkpoint)
    metrics = evaluate(model, val_data)
    if isinstance(model, LanguageModel):
        assert isinstance(train_data, TokenStream) and isinstance(val_data, TokenStream)
        baseline = unigram_perplexity(train_data.ids, val_data.ids, len(model.vocab))
        metrics["unigram_perplexity"] = baseline
        metrics["perplexity_ratio"] = metrics["perplexity"] / baseline
    return RunOutcome(report=report, metrics=metrics, model=model)


def _print_metrics(metrics: Mapping[str, Any], prefix: str = "") -> None:
    for key in sorted(metrics):
        value = metrics[key]
        text = repr(value) if isinstance(value, float) else str(value)
        print(f"{prefix}{key}={text}")


def cmd_train(args: argparse.Namespace) -> int:
    run = run_config("train", vars(args))
    outcome = execute_run(run)
    report = outcome.report
    _print_metrics(
        {
            "task": run.task,
            "variant": run.variant.value,
            "epochs": len(report.epochs),
            "best_epoch": report.best_epoch,
            "checkpoint": report.best_checkpoint,
            "report": run.out / "report.csv",
            "cell_weights": count_allocated(outcome.model.cell),
            **{f"val_{k}": v for k, v in outcome.metrics.items()},
        }
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.checkpoint)
    data: Data
    if isinstance(model, LanguageModel):
        data = load_text_corpus(args.data or DEFAULT_CORPUS, vocab=model.vocab)
    elif args.data is not None:
        kind: Literal["tokens", "signals"] = (
            "signals" if model.config.vocab_size is None else "tokens"
        )
        data = load_dataset(args.data, vocab=model.vocab, kind=kind)
    else:
        run = run_config("eval", {**vars(args), "variant": model.config.cell.variant})
        _train_set, data = classification_data(run)
    _print_metrics(evaluate(model, data))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = gradient_suite(
        ns=(1, 2, 3), m=args.m, d=args.d, seed=args.seed, tolerance=args.tolerance
    )
    for label, worst in report.worst_by_variant().items():
        print(f"{label}={worst:.3e}")
    print(f"passed={str(report.passed).lower()}")
    return 0 if report.passed else 1


def cmd_paramcount(args: argparse.Namespace) -> int:
    print(param_count(args.variant, args.m, args.d, args.n))
    return 0


def cmd_equiv(args: argparse.Namespace) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    identities = reduction_identities(seeds)
    for result in identities.results:
        print(f"{result.name}={'PASS' if result.passed else 'FAIL'} max_diff={result.max_diff:.3e}")
    kernels = kernel_equivalence(range(args.seed, args.seed + max(args.seeds, 20)))
    for kres in kernels.results:
        verdict = "PASS" if kres.passed else "FAIL"
        print(f"recursion.{kres.kernel}={verdict} max_diff={kres.max_diff:.3e}")
    return 0 if identities.passed and kernels.passed else 1


def cmd_impulse(args: argparse.Namespace) -> int:
    report = impulse_response(args.variant, args.sigma_i_sq, args.sigma_f_sq, args.lags, d=args.d)
    print("lag,measured,predicted,ratio")
    for row in report.rows:
        print(f"{row.lag},{row.measured!r},{row.predicted!r},{row.ratio!r}")
    return 0 if report.passed else 1


def load_scenario(path: Path) -> Scenario:
    return Scenario.model_validate(tomllib.loads(path.read_text(encoding="utf-8")))


def check_expectations(metrics: Mapping[str, float], expect: Mapping[str, float]) -> list[str]:
    """Failed bounds; ``min_x``/``max_x`` keys bound metric ``x``."""
    failures = []
    for key, bound in expect.items():
        kind, _, name = key.partition("_")
        if kind not in ("min", "max") or name not in metrics:
            failures.append(f"{key}: unknown expectation")
            continue
        value = metrics[name]
        if (kind == "min" and value < bound) or (kind == "max" and value > bound):
            failures.append(f"{name}={value:.4f} violates {key}={bound}")
    return failures


def cmd_suite(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if scenario.description:
        logger.info(f"Scenario {args.scenario}: {scenario.description}")
    all_passed = True
    for entry in scenario.runs:
        settings = {"seed": args.seed, **entry.settings}
        run = run_config("suite", settings)
        run = run.model_copy(update={"out": run.out / entry.name})
        outcome = execute_run(run)
        failures = check_expectations(outcome.metrics, entry.expect)
        for failure in failures:
            logger.warning(f"{entry.name}: {failure}")
        _print_metrics(outcome.metrics, prefix=f"{entry.name}.")
        print(f"{entry.name}={'FAIL' if failures else 'PASS'}")
        all_passed = all_passed and not failures
    return 0 if all_passed else 1


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _rest = pre.parse_known_args(argv)
    parser = build_parser()
    if known.config is not None:
        try:
            parser = build_parser(load_config_file(known.config))
        except (OSError, ValueError, tomllib.TOMLDecodeError) as e:
            parser.error(f"cannot read config {known.config}: {e}")
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.command)
    try:
        return int(args.func(args))
    except ValidationError as e:
        parser.error(str(e))
    except (RKMError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
