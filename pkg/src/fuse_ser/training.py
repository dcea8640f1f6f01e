"""Training protocol: SGD/Nesterov, best-on-dev selection, seeds and LOSO."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses, metrics
from .data import DIMENSIONS, EmbeddingScaler, ExampleSet, FoldPlan, UtteranceRecord, make_batches
from .evaluation import EvalReport, evaluate, predict, selection_value, write_json, write_report
from .models import Model, ModelSpec, save_checkpoint
from .optim import SGD

logger = logging.getLogger(__name__)

TASKS = ("four_class", "single_task", "multitask")
LOSS_FOR_TASK = {"weighted_ce": ("four_class",), "mse": ("single_task",), "ccc": ("single_task", "multitask")}
HEAD_FOR_TASK = {"four_class": "classification", "single_task": "regression", "multitask": "multitask_regression"}


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, trace: Sequence[float]):
        tail = ", ".join(f"{v:.4g}" for v in list(trace)[-5:])
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}; recent losses [{tail}]")
        self.epoch, self.batch, self.trace = epoch, batch, list(trace)


@dataclass(frozen=True)
class TrainRunConfig:
    model: ModelSpec
    task: str = "four_class"
    loss: str = "weighted_ce"
    dimension: Optional[str] = None
    epochs: int = 60
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    selection_metric: Optional[str] = None
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    ce_normalize: str = "batch"
    standardize_embeddings: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError("task", f"must be one of {TASKS}, got {self.task!r}")
        if self.loss not in LOSS_FOR_TASK:
            raise ConfigError("loss", f"must be one of {tuple(LOSS_FOR_TASK)}, got {self.loss!r}")
        if self.task not in LOSS_FOR_TASK[self.loss]:
            raise ConfigError(
                "loss",
                f"loss {self.loss!r} is incompatible with task {self.task!r} "
                "(weighted_ce <-> four_class, mse <-> single_task, ccc <-> single_task or multitask)",
            )
        if self.task == "single_task" and self.dimension not in DIMENSIONS:
            raise ConfigError("dimension", f"single_task needs one of {DIMENSIONS}")
        want = HEAD_FOR_TASK[self.task]
        if self.model.head != want:
            raise ConfigError("model.head", f"task {self.task!r} needs head {want!r}, got {self.model.head!r}")
        if self.task == "four_class" and self.model.n_classes != 4:
            raise ConfigError("model.n_classes", "the four-class task needs n_classes = 4")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs/batch_size/lr", "must be positive")
        if self.metric not in ("uar", "ccc_mean"):
            raise ConfigError("selection_metric", f"unknown metric {self.selection_metric!r}")

    @property
    def metric(self) -> str:
        if self.selection_metric is not None:
            return self.selection_metric
        return "uar" if self.task == "four_class" else "ccc_mean"

    def with_seed(self, seed: int) -> "TrainRunConfig":
        return TrainRunConfig(**{**self.__dict__, "seed": seed})

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        if "model" not in d:
            raise ConfigError("model", "missing model specification")
        try:
            spec = ModelSpec.from_dict(d.pop("model"))
        except (TypeError, ValueError) as exc:
            raise ConfigError("model", str(exc)) from exc
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        return cls(model=spec, **d)


@dataclass
class RunResult:
    seed: int
    best_epoch: int
    best_dev_metric: float
    dev_curve: list
    train_loss_curve: list
    first_epoch_batch_losses: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    test_report: Optional[EvalReport] = None
    model: Optional[Model] = field(default=None, repr=False)
    embedding_scaler: Optional[EmbeddingScaler] = None

    @property
    def test_metric(self) -> Optional[float]:
        return None if self.test_report is None else self.test_report.headline_value

    def summary(self) -> dict:
        out = {
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_dev_metric": self.best_dev_metric,
            "checkpoint_path": self.checkpoint_path,
        }
        if self.test_report is not None:
            out["test"] = self.test_report.to_dict()
        return out


def compute_loss(config: TrainRunConfig, outputs, batch, weights):
    if config.loss == "weighted_ce":
        return losses.weighted_cross_entropy(outputs, batch.labels, weights, normalize=config.ce_normalize)
    if config.loss == "mse":
        return losses.mse_loss(outputs, batch.targets)
    return losses.ccc_loss(outputs, batch.targets)


def _write_curves(path: Path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "dev_metric"])
        for i, (loss, dev) in enumerate(zip(result.train_loss_curve, result.dev_curve), start=1):
            writer.writerow([i, repr(loss), repr(dev)])


def train(
    config: TrainRunConfig,
    train_set: ExampleSet,
    dev_set: ExampleSet,
    run_dir=None,
    test_set: Optional[ExampleSet] = None,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> RunResult:
    """Train for ``config.epochs`` and keep the epoch that is best on dev.

    One seed drives everything; it is split into independent streams for
    parameter initialisation and batch shuffling. Ties in the dev metric
    keep the earlier epoch.
    """
    if len(train_set) == 0 or len(dev_set) == 0:
        raise ValueError("train and dev sets must be non-empty")
    scaler = None
    if config.standardize_embeddings and train_set.emb is not None:
        scaler = EmbeddingScaler.fit(train_set.emb)
        train_set, dev_set = scaler.apply(train_set), scaler.apply(dev_set)
        test_set = None if test_set is None else scaler.apply(test_set)
    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = Model(config.model, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    opt = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay, config.grad_clip)

    weights = None
    if config.loss == "weighted_ce":
        counts = np.bincount(train_set.labels, minlength=config.model.n_classes)
        weights = losses.class_weights(counts.tolist())

    best_state, best_tracked = None, None
    best_value, best_epoch = -math.inf, 0
    dev_curve, loss_curve, first_batches = [], [], []
    trace: list[float] = []
    for epoch in range(1, config.epochs + 1):
        batch_losses = []
        for b_idx, batch in enumerate(make_batches(train_set, config.batch_size, shuffle_rng, shuffle=True)):
            if len(batch) < 2:
                # train-mode batch norm is undefined on one sample at 1x1 resolution
                logger.debug("skipping singleton batch in epoch %d", epoch)
                continue
            out = model(batch.x, batch.emb, train=True)
            loss = compute_loss(config, out, batch, weights)
            value = loss.item()
            trace.append(value)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b_idx, trace)
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(value)
        if epoch == 1:
            first_batches = list(batch_losses)
        epoch_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        dev_value = selection_value(config.task, predict(model, dev_set), dev_set, config.metric)
        loss_curve.append(epoch_loss)
        dev_curve.append(dev_value)
        if dev_value > best_value:
            best_value, best_epoch = dev_value, epoch
            best_state, best_tracked = model.state_dict(), model.bn_tracked()
        logger.info("seed %d epoch %d loss %.4f dev %s %.4f", config.seed, epoch, epoch_loss, config.metric, dev_value)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, dev_value)

    model.load_state_dict(best_state, best_tracked)
    result = RunResult(config.seed, best_epoch, best_value, dev_curve, loss_curve, first_batches, model=model,
                       embedding_scaler=scaler)
    if test_set is not None:
        result.test_report = evaluate(model, test_set, config.task, config.dimension)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = run_dir / "checkpoint.bin"
        save_checkpoint(ckpt, model, {
            "task": config.task,
            "dimension": config.dimension,
            "seed": config.seed,
            "best_epoch": best_epoch,
            "best_dev_metric": best_value,
            "embedding_scaler": None if scaler is None else scaler.to_dict(),
        })
        result.checkpoint_path = str(ckpt)
        _write_curves(run_dir / "curves.csv", result)
        write_json(run_dir / "metrics.json", {"config": config.to_dict(), **result.summary()})
        if result.test_report is not None:
            write_report(result.test_report, run_dir / "test")
    return result


# ---------------------------------------------------------------- repetition


@dataclass
class SeedsResult:
    results: list
    metric: str
    values: list
    summary: dict
    best_seed_index: int

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "values": self.values,
            "summary": self.summary,
            "best_seed": self.results[self.best_seed_index].seed,
            "runs": [r.summary() for r in self.results],
        }


def _train_job(args):
    config, train_set, dev_set, run_dir, test_set = args
    result = train(config, train_set, dev_set, run_dir, test_set)
    result.model = None  # keep inter-process payloads small
    return result


def run_seeds(
    config: TrainRunConfig,
    train_set: ExampleSet,
    dev_set: ExampleSet,
    test_set: Optional[ExampleSet] = None,
    n_seeds: int = 5,
    base_seed: Optional[int] = None,
    run_dir=None,
    jobs: int = 1,
) -> SeedsResult:
    """Repeat training with seeds ``base_seed .. base_seed + n_seeds - 1``.

    The summary is computed on the test headline metric when a test set is
    given, otherwise on the best dev metric; std uses the n-1 denominator.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    base = config.seed if base_seed is None else base_seed
    jobs_args = []
    for k in range(n_seeds):
        seed = base + k
        sub = None if run_dir is None else Path(run_dir) / f"seed{seed}"
        jobs_args.append((config.with_seed(seed), train_set, dev_set, sub, test_set))
    if jobs > 1 and n_seeds > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, n_seeds)) as pool:
            results = list(pool.map(_train_job, jobs_args))
    else:
        results = [train(*a) for a in jobs_args]
    if test_set is not None:
        values = [r.test_metric for r in results]
        name = f"test_{results[0].test_report.headline}"
    else:
        values = [r.best_dev_metric for r in results]
        name = f"dev_{config.metric}"
    best = metrics.best_index([r.best_dev_metric for r in results])
    out = SeedsResult(results, name, values, metrics.summarize(values), best)
    if run_dir is not None:
        write_json(Path(run_dir) / "summary.json", out.to_dict())
    return out


@dataclass
class LosoResult:
    folds: list  # (Fold, RunResult)
    fold_metrics: list
    aggregate: float
    cross_corpus_metrics: list = field(default_factory=list)
    cross_corpus_aggregate: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "folds": [
                {"test_speaker": f.test_speaker, "dev_speaker": f.dev_speaker, **r.summary()}
                for f, r in self.folds
            ],
            "fold_metrics": self.fold_metrics,
            "aggregate": self.aggregate,
            "cross_corpus_metrics": self.cross_corpus_metrics,
            "cross_corpus_aggregate": self.cross_corpus_aggregate,
        }


def run_loso(
    config: TrainRunConfig,
    plan: FoldPlan,
    records: Sequence[UtteranceRecord],
    to_examples: Callable[[Sequence[UtteranceRecord]], ExampleSet],
    run_dir=None,
    external_test: Optional[ExampleSet] = None,
) -> LosoResult:
    """Train one model per fold and test it on the held-out speaker.

    With ``external_test`` every fold model is also evaluated there and the
    cross-corpus metric (PCC for regression, UAR for classification) is
    averaged over folds.
    """
    folds, fold_values, cross = [], [], []
    for i, fold in enumerate(plan.folds):
        train_r, dev_r, test_r = plan.split(records, i)
        sub = None if run_dir is None else Path(run_dir) / f"fold{i:02d}_{fold.test_speaker}" / f"seed{config.seed}"
        result = train(config, to_examples(train_r), to_examples(dev_r), sub, to_examples(test_r))
        fold_values.append(result.test_metric)
        if external_test is not None:
            ext = external_test if result.embedding_scaler is None else result.embedding_scaler.apply(external_test)
            report = evaluate(result.model, ext, config.task, config.dimension, cross_corpus=True)
            cross.append(report.headline_value)
            if sub is not None:
                write_report(report, sub / "cross_corpus")
        result.model = None
        folds.append((fold, result))
    out = LosoResult(
        folds,
        fold_values,
        float(np.mean(fold_values)),
        cross,
        float(np.mean(cross)) if cross else None,
    )
    if run_dir is not None:
        write_json(Path(run_dir) / f"loso_seed{config.seed}.json", out.to_dict())
    return out


__all__ = [
    "ConfigError", "LosoResult", "RunResult", "SeedsResult", "TrainRunConfig",
    "TrainingDivergedError", "run_loso", "run_seeds", "train",
]
