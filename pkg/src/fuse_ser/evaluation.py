"""Batch-wise inference and evaluation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from .data import DIMENSIONS, EMOTIONS, ExampleSet, make_batches, task_columns
from .losses import DegenerateStatisticsError
from .models import Model


def predict(model: Model, data: ExampleSet, batch_size: int = 128) -> np.ndarray:
    """Eval-mode outputs for every example, in order."""
    outs = []
    for batch in make_batches(data, batch_size, shuffle=False):
        outs.append(model(batch.x, batch.emb, train=False).data)
    if not outs:
        return np.zeros((0, model.spec.n_outputs), dtype=np.float32)
    return np.concatenate(outs, axis=0)


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except DegenerateStatisticsError:
        return float("nan")


def selection_value(task: str, outputs: np.ndarray, data: ExampleSet, metric: str) -> float:
    """Dev metric used for checkpoint selection (UAR or mean CCC)."""
    if metric == "uar":
        cm = metrics.ConfusionMatrix.from_labels(data.labels, outputs.argmax(axis=1), outputs.shape[1])
        return metrics.uar(cm) if np.all(cm.support > 0) else float(np.mean(
            [cm.counts[k, k] / cm.support[k] for k in range(cm.n_classes) if cm.support[k] > 0]
        ))
    if metric == "ccc_mean":
        vals = [_safe(metrics.ccc, outputs[:, d], data.targets[:, d]) for d in range(data.targets.shape[1])]
        vals = [0.0 if np.isnan(v) else v for v in vals]
        return float(np.mean(vals))
    raise ValueError(f"unknown selection metric {metric!r}")


@dataclass
class EvalReport:
    task: str
    metrics: dict
    headline: str
    confusion: Optional[metrics.ConfusionMatrix] = None
    residual_fits: dict = field(default_factory=dict)
    predictions: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def headline_value(self) -> float:
        return self.metrics[self.headline]

    def to_dict(self) -> dict:
        out = {
            "task": self.task,
            "headline": self.headline,
            "metrics": self.metrics,
            "residual_fits": self.residual_fits,
            "meta": self.meta,
        }
        if self.confusion is not None:
            out["confusion"] = self.confusion.counts.tolist()
        return out


def evaluate(
    model: Model,
    data: ExampleSet,
    task: str,
    dimension: Optional[str] = None,
    cross_corpus: bool = False,
    batch_size: int = 128,
) -> EvalReport:
    outputs = predict(model, data, batch_size)
    head = model.spec.head
    if task == "four_class":
        if head != "classification":
            raise ValueError(f"four_class evaluation needs a classification head, model has {head!r}")
        if data.labels is None:
            raise ValueError("test data carries no class labels")
        pred = outputs.argmax(axis=1)
        cm = metrics.ConfusionMatrix.from_labels(data.labels, pred, outputs.shape[1])
        value = metrics.uar(cm)
        rows = [
            {"id": i, "true": EMOTIONS[t], "predicted": EMOTIONS[p]}
            for i, t, p in zip(data.ids, data.labels, pred)
        ]
        return EvalReport(task, {"uar": value}, "uar", confusion=cm, predictions=rows)

    cols = task_columns(task, dimension)
    if data.targets is None or data.targets.shape[1] != len(cols):
        raise ValueError(f"test data lacks targets for {cols}")
    if outputs.shape[1] != len(cols):
        raise ValueError(f"model emits {outputs.shape[1]} outputs, task {task!r} needs {len(cols)}")
    out: dict = {}
    fits: dict = {}
    resid_rows = []
    for d, name in enumerate(cols):
        y_t, y_p = data.targets[:, d].astype(np.float64), outputs[:, d].astype(np.float64)
        out[f"{name}_ccc"] = _safe(metrics.ccc, y_p, y_t)
        out[f"{name}_pcc"] = _safe(metrics.pcc, y_p, y_t)
        out[f"{name}_mse"] = metrics.mse(y_p, y_t)
        try:
            slope, intercept = metrics.residual_fit(y_true=y_t, y_pred=y_p)
            fits[name] = {"slope": slope, "intercept": intercept}
        except (DegenerateStatisticsError, ValueError):
            fits[name] = {"slope": None, "intercept": None}
        resid_rows += [{"dimension": name, "y_t": t, "y_p": p, "e": t - p} for t, p in zip(y_t, y_p)]
    out["ccc"] = float(np.nanmean([out[f"{c}_ccc"] for c in cols]))
    out["pcc"] = float(np.nanmean([out[f"{c}_pcc"] for c in cols]))
    out["mse"] = float(np.mean([out[f"{c}_mse"] for c in cols]))
    rows = []
    for i, uid in enumerate(data.ids):
        row = {"id": uid}
        for d, name in enumerate(cols):
            row[f"{name}_true"] = float(data.targets[i, d])
            row[f"{name}_pred"] = float(outputs[i, d])
        rows.append(row)
    headline = "pcc" if cross_corpus else "ccc"
    return EvalReport(task, out, headline, residual_fits=fits, predictions=rows, residuals=resid_rows,
                      meta={"cross_corpus": cross_corpus})


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def write_report(report: EvalReport, out_dir) -> None:
    """metrics.json, predictions.csv and confusion.csv or residuals.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "metrics.json", report.to_dict())
    if report.predictions:
        with open(out_dir / "predictions.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(report.predictions[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(report.predictions)
    if report.confusion is not None:
        with open(out_dir / "confusion.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            k = report.confusion.n_classes
            names = list(EMOTIONS) if k == len(EMOTIONS) else [str(i) for i in range(k)]
            writer.writerow(["true\\predicted", *names])
            for name, row in zip(names, report.confusion.counts):
                writer.writerow([name, *row.tolist()])
    if report.residuals:
        with open(out_dir / "residuals.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["dimension", "y_t", "y_p", "e"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(report.residuals)


def read_confusion(path) -> metrics.ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return metrics.ConfusionMatrix(np.array([[int(v) for v in r[1:]] for r in rows[1:]]))


def read_residuals(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["dimension"], []).append((float(row["y_t"]), float(row["y_p"])))
    return {k: (np.array([a for a, _ in v]), np.array([b for _, b in v])) for k, v in out.items()}


__all__ = [
    "DIMENSIONS", "EvalReport", "evaluate", "predict", "read_confusion", "read_residuals",
    "selection_value", "write_json", "write_report",
]
