"""Command-line entry point: ``fuse-ser <command> [flags]``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck, metrics
from .data import (
    EmbeddingScaler, ManifestError, SynthConfig, build_examples, four_class_filter, load_manifest, loso_folds,
    save_manifest, synth_bimodal_dataset,
)
from .embeddings import EmbeddingParseError, load_store, save_store
from .evaluation import evaluate, read_confusion, read_residuals, write_json, write_report
from .framing import FramingError, write_features
from .frontend import FrontendConfig, log_mel, read_wav
from .models import load_checkpoint
from .training import ConfigError, TrainingDivergedError, TrainRunConfig, run_loso, run_seeds

logger = logging.getLogger("fuse_ser")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


# ------------------------------------------------------------------ helpers


def _resolve(path: Optional[str], base: Path) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else base / p


def _headline_label(metric: str) -> str:
    return metric.split("_", 1)[-1].upper()


def _render(metric: str, summary: dict) -> str:
    # UAR is rendered as a percentage, correlations as fractions
    percent = metric.endswith("uar")
    return f"{_headline_label(metric)}: {metrics.format_mean_std(summary, percent=percent)}"


def _prepare_run_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"run directory {path} already exists; pass --force to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- synth-data


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    cfg = SynthConfig(noise=args.noise, embedding_dim=args.embedding_dim, n_frames=args.n_frames)
    ds = synth_bimodal_dataset(args.n_per_class, cfg, seed=args.seed)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for r in ds.records:
        write_features(out / r.feature_path, ds.features[r.id])
    save_manifest(ds.records, out / "manifest.csv")
    save_store(ds.store, out / "embeddings.csv", [r.id for r in ds.records])
    counts = {s: sum(r.split == s for r in ds.records) for s in ("train", "dev", "test")}
    print(f"wrote {len(ds.records)} utterances to {out} (train {counts['train']}, dev {counts['dev']}, test {counts['test']})")
    return EXIT_OK


# ----------------------------------------------------------------- featurize


def cmd_featurize(args) -> int:
    manifest = Path(args.manifest)
    base = manifest.parent
    out = Path(args.out)
    records = load_manifest(manifest)
    pending = [r for r in records if not (r.feature_path and _resolve(r.feature_path, base).exists())]
    if not pending:
        print(f"{manifest}: every utterance already has features; nothing to do")
        return EXIT_OK
    cfg = FrontendConfig(
        sample_rate=args.sample_rate, window_ms=args.window_ms, hop_ms=args.hop_ms,
        n_mels=args.n_mels, f_min=args.f_min, f_max=args.f_max, max_duration=args.max_duration,
    )
    (out / "features").mkdir(parents=True, exist_ok=True)
    failed = []
    updated = []
    pending_ids = {r.id for r in pending}
    for r in records:
        if r.id not in pending_ids:
            keep = r.feature_path
            if keep and not Path(keep).is_absolute():
                keep = os.path.relpath(base / keep, out)
            updated.append(replace(r, feature_path=keep))
            continue
        if not r.audio_path:
            failed.append((r.id, "no audio_path"))
            updated.append(r)
            continue
        try:
            wave = read_wav(_resolve(r.audio_path, base))
            spec = log_mel(wave, cfg)
        except (OSError, ValueError) as exc:
            failed.append((r.id, str(exc)))
            updated.append(r)
            continue
        rel = f"features/{r.id}.bin"
        write_features(out / rel, spec.frames)
        audio = r.audio_path if Path(r.audio_path).is_absolute() else os.path.relpath(base / r.audio_path, out)
        updated.append(replace(r, feature_path=rel, audio_path=audio))
    save_manifest(updated, out / "manifest.csv")
    for uid, why in failed:
        print(f"error: {uid}: {why}", file=sys.stderr)
    print(f"featurized {len(pending) - len(failed)} of {len(pending)} utterances into {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


# --------------------------------------------------------------------- train


def load_train_config(path: Path) -> tuple[TrainRunConfig, dict]:
    """Split a JSON config into the run config and the data/run section.

    Besides the :class:`TrainRunConfig` fields the file carries ``data``
    (``manifest``, optional ``embeddings``, ``n_frames``, ``dataset``),
    ``n_seeds`` and ``run_dir``. Relative paths resolve against the config
    file's directory.
    """
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    extra = {k: raw.pop(k) for k in ("data", "n_seeds", "run_dir") if k in raw}
    data = extra.get("data")
    if not isinstance(data, dict) or "manifest" not in data:
        raise ConfigError("data.manifest", "required")
    known = {"manifest", "embeddings", "n_frames", "dataset"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"data.{sorted(unknown)[0]}", "unknown field")
    n_seeds = extra.get("n_seeds", 5)
    if not isinstance(n_seeds, int) or n_seeds < 1:
        raise ConfigError("n_seeds", "must be a positive integer")
    try:
        config = TrainRunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError("<root>", str(exc)) from exc
    return config, {**extra, "n_seeds": n_seeds}


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    config, extra = load_train_config(cfg_path)
    base = cfg_path.parent
    data = extra["data"]
    manifest = _resolve(data["manifest"], base)
    records = load_manifest(manifest)
    if config.task == "four_class" and data.get("dataset"):
        records = four_class_filter(records, data["dataset"])
    store = load_store(_resolve(data["embeddings"], base)) if data.get("embeddings") else None
    if config.model.fusion != "none" and store is None:
        raise ConfigError("data.embeddings", f"fusion {config.model.fusion!r} needs an embedding file")
    if store is not None and store.dim != config.model.embedding_dim:
        raise ConfigError("model.embedding_dim", f"embedding file has dimension {store.dim}")

    def to_examples(rs):
        return build_examples(rs, config.task, store=store, dimension=config.dimension,
                              n_frames=data.get("n_frames"), base_dir=manifest.parent)

    run_dir = Path(args.run_dir or extra.get("run_dir") or (Path("runs") / cfg_path.stem))
    if not run_dir.is_absolute() and not args.run_dir and extra.get("run_dir"):
        run_dir = base / run_dir
    _prepare_run_dir(run_dir, args.force)
    write_json(run_dir / "run.json", {
        "config": config.to_dict(), "data": data, "n_seeds": extra["n_seeds"], "loso": bool(args.loso),
    })
    headline = "uar" if config.task == "four_class" else "ccc"

    if args.loso:
        plan = loso_folds(records)
        values, per_seed = [], []
        for k in range(extra["n_seeds"]):
            res = run_loso(config.with_seed(config.seed + k), plan, records, to_examples, run_dir)
            values.append(res.aggregate)
            per_seed.append(res)
            print(f"seed {config.seed + k}: {_headline_label(headline)} {res.aggregate:.4f} over {len(plan)} folds")
        best = metrics.best_index(values)
        confusion = None
        residual_files = []
        for fold, r in per_seed[best].folds:
            sub = run_dir / f"fold{plan.folds.index(fold):02d}_{fold.test_speaker}" / f"seed{r.seed}" / "test"
            if (sub / "confusion.csv").exists():
                cm = read_confusion(sub / "confusion.csv").counts
                confusion = cm if confusion is None else confusion + cm
            if (sub / "residuals.csv").exists():
                residual_files.append(os.path.relpath(sub / "residuals.csv", run_dir))
        metric_name = f"test_{headline}"
        summary = metrics.summarize(values)
        write_json(run_dir / "summary.json", {
            "task": config.task, "metric": metric_name, "values": values, "summary": summary,
            "best_seed": config.seed + best, "n_folds": len(plan),
            "confusion": None if confusion is None else confusion.tolist(),
            "residual_files": residual_files,
        })
    else:
        splits = {s: [r for r in records if r.split == s] for s in ("train", "dev", "test")}
        for s in ("train", "dev"):
            if not splits[s]:
                raise ManifestError(f"manifest has no {s!r} rows; assign splits or use --loso")
        test = to_examples(splits["test"]) if splits["test"] else None
        res = run_seeds(config, to_examples(splits["train"]), to_examples(splits["dev"]), test,
                        n_seeds=extra["n_seeds"], run_dir=run_dir, jobs=args.jobs)
        for r, v in zip(res.results, res.values):
            print(f"seed {r.seed}: {_headline_label(res.metric)} {v:.4f} (best epoch {r.best_epoch})")
        values, metric_name, summary = res.values, res.metric, res.summary
        best_run = res.results[res.best_seed_index]
        payload = res.to_dict()
        payload["task"] = config.task
        rep = best_run.test_report
        payload["confusion"] = None if rep is None or rep.confusion is None else rep.confusion.counts.tolist()
        payload["residual_files"] = (
            [f"seed{best_run.seed}/test/residuals.csv"] if rep is not None and rep.residuals else []
        )
        write_json(run_dir / "summary.json", payload)
    print(_render(metric_name, summary))
    return EXIT_OK


# ------------------------------------------------------------------ evaluate


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return EXIT_RUNTIME
    model, meta = load_checkpoint(ckpt)
    task = args.task or meta.get("task")
    dimension = args.dimension or meta.get("dimension")
    if task is None:
        raise UsageError("checkpoint records no task; pass --task")
    manifest = Path(args.manifest)
    records = load_manifest(manifest)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
        if not records:
            raise ManifestError(f"manifest has no {args.split!r} rows")
    store = load_store(args.embeddings) if args.embeddings else None
    if model.spec.fusion != "none" and store is None:
        raise UsageError(f"checkpoint uses {model.spec.fusion} fusion; pass --embeddings")
    if store is not None and model.spec.fusion != "none" and store.dim != model.spec.embedding_dim:
        raise UsageError(f"embedding dimension {store.dim} does not match the checkpoint's {model.spec.embedding_dim}")
    data = build_examples(records, task, store=store, dimension=dimension, n_frames=args.n_frames,
                          base_dir=manifest.parent)
    if meta.get("embedding_scaler"):
        data = EmbeddingScaler.from_dict(meta["embedding_scaler"]).apply(data)
    report = evaluate(model, data, task, dimension, cross_corpus=args.cross_corpus)
    report.meta.update({"checkpoint": str(ckpt), "manifest": str(manifest)})
    out = Path(args.out)
    write_report(report, out)
    label = report.headline.upper()
    value = report.headline_value
    shown = f"{100 * value:.1f}" if report.headline == "uar" else f"{value:.3f}"
    print(f"{label}: {shown}")
    return EXIT_OK


# ------------------------------------------------------------------- analyze


def _load_group(path: Path) -> dict:
    summary_path = path / "summary.json"
    if not summary_path.exists():
        raise UsageError(f"{path} is not a run directory (no summary.json)")
    summary = json.loads(summary_path.read_text())
    if "task" not in summary:
        run = json.loads((path / "run.json").read_text()) if (path / "run.json").exists() else {}
        summary["task"] = run.get("config", {}).get("task")
    return {"name": path.name, "path": path, **summary}


def analyze_groups(groups: list[dict], baselines: Sequence[str], alpha: float = 0.05, equal_var: bool = True) -> dict:
    """Mean (std) per group, t-tests against each baseline, confusion deltas, residual fits."""
    tasks = {g["task"] for g in groups}
    if len(tasks) != 1:
        raise UsageError(f"run groups have different tasks: {sorted(map(str, tasks))}")
    names = [g["name"] for g in groups]
    for b in baselines:
        if b not in names:
            raise UsageError(f"baseline {b!r} is not among the runs {names}")
    by_name = {g["name"]: g for g in groups}
    markers = "*†‡§"
    out: dict = {"task": tasks.pop(), "groups": [], "comparisons": [], "confusion_deltas": {}, "residual_fits": {}}
    for g in groups:
        out["groups"].append({"name": g["name"], "metric": g["metric"], "values": g["values"],
                              **metrics.summarize(g["values"])})
    for bi, b in enumerate(baselines):
        base = by_name[b]
        for g in groups:
            if len(g["values"]) < 2 or len(base["values"]) < 2:
                continue
            tt = metrics.ttest_independent(g["values"], base["values"], alpha=alpha, equal_var=equal_var)
            out["comparisons"].append({
                "group": g["name"], "baseline": b, "t": tt.t, "p": tt.p, "df": tt.df,
                "significant": tt.significant, "marker": markers[bi % len(markers)] if tt.significant else "",
            })
        if base.get("confusion") is not None:
            for g in groups:
                if g["name"] == b or g.get("confusion") is None:
                    continue
                try:
                    delta = metrics.confusion_delta(metrics.ConfusionMatrix(np.array(g["confusion"])),
                                                    metrics.ConfusionMatrix(np.array(base["confusion"])))
                except ValueError as exc:
                    logger.warning("confusion delta %s vs %s skipped: %s", g["name"], b, exc)
                    continue
                out["confusion_deltas"][f"{g['name']} vs {b}"] = delta.render()
    for g in groups:
        fits = {}
        pooled: dict[str, tuple[list, list]] = {}
        for rel in g.get("residual_files") or []:
            for dim, (yt, yp) in read_residuals(g["path"] / rel).items():
                acc = pooled.setdefault(dim, ([], []))
                acc[0].extend(yt.tolist())
                acc[1].extend(yp.tolist())
        for dim, (yt, yp) in pooled.items():
            try:
                slope, intercept = metrics.residual_fit(y_true=yt, y_pred=yp)
                fits[dim] = {"slope": slope, "intercept": intercept}
            except (ValueError, metrics.DegenerateStatisticsError):
                fits[dim] = {"slope": None, "intercept": None}
        if fits:
            out["residual_fits"][g["name"]] = fits
    return out


def _print_analysis(result: dict) -> None:
    marks: dict[str, str] = {}
    for c in result["comparisons"]:
        marks[c["group"]] = marks.get(c["group"], "") + c["marker"]
    print(f"task: {result['task']}")
    for g in result["groups"]:
        label = _render(g["metric"], g)
        print(f"  {g['name']:<24s} {label}{marks.get(g['name'], '')}  (n={g['n']})")
    for c in result["comparisons"]:
        if c["group"] != c["baseline"]:
            print(f"  t-test {c['group']} vs {c['baseline']}: t={c['t']:.3f} p={c['p']:.4g}{' ' + c['marker'] if c['marker'] else ''}")
    for key, grid in result["confusion_deltas"].items():
        print(f"  confusion change, {key} (rows true, columns predicted):")
        for row in grid:
            print("    " + " ".join(f"{cell:>6s}" for cell in row))
    for name, fits in result["residual_fits"].items():
        for dim, fit in fits.items():
            if fit["slope"] is None:
                print(f"  residual fit {name} {dim}: undefined")
            else:
                print(f"  residual fit {name} {dim}: slope {fit['slope']:.3f} intercept {fit['intercept']:.3f}")


def cmd_analyze(args) -> int:
    if len(args.runs) < 2:
        raise UsageError("analyze needs at least two run directories")
    groups = [_load_group(Path(p)) for p in args.runs]
    result = analyze_groups(groups, args.baseline, alpha=args.alpha, equal_var=not args.welch)
    _print_analysis(result)
    if args.out:
        write_json(args.out, result)
    return EXIT_OK


# ----------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    def show(res: gradcheck.CheckResult) -> None:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name:<28s} worst relative error {res.worst:.2e}", flush=True)

    if args.corrupt:
        with gradcheck.corrupted_backward(args.corrupt):
            report = gradcheck.run_suite(args.spec, seed=args.seed, on_result=show)
    else:
        report = gradcheck.run_suite(args.spec, seed=args.seed, on_result=show)
    failures = report.failures()
    print(f"{len(report.results) - len(failures)}/{len(report.results)} checks passed")
    return EXIT_OK if not failures else EXIT_RUNTIME


# -------------------------------------------------------------------- parser


def _default_jobs() -> int:
    raw = os.environ.get("FUSE_SER_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuse-ser", description="Audio-text fusion for speech emotion recognition.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write the synthetic bimodal corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=SynthConfig.noise)
    p.add_argument("--embedding-dim", type=int, default=SynthConfig.embedding_dim)
    p.add_argument("--n-frames", type=int, default=SynthConfig.n_frames)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("featurize", help="compute log-Mel features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=FrontendConfig.sample_rate)
    p.add_argument("--window-ms", type=float, default=FrontendConfig.window_ms)
    p.add_argument("--hop-ms", type=float, default=FrontendConfig.hop_ms)
    p.add_argument("--n-mels", type=int, default=FrontendConfig.n_mels)
    p.add_argument("--f-min", type=float, default=FrontendConfig.f_min)
    p.add_argument("--f-max", type=float, default=None)
    p.add_argument("--max-duration", type=float, default=None)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train over seeds or LOSO folds")
    p.add_argument("--config", required=True)
    p.add_argument("--loso", action="store_true", help="leave-one-speaker-out folds instead of fixed splits")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--force", action="store_true", help="replace an existing run directory")
    p.add_argument("--jobs", type=int, default=_default_jobs(), help="parallel seed runs (default $FUSE_SER_JOBS or 1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--out", default="eval")
    p.add_argument("--split", default="test", choices=("train", "dev", "test", "unassigned", "all"))
    p.add_argument("--task", default=None, choices=("four_class", "single_task", "multitask"))
    p.add_argument("--dimension", default=None)
    p.add_argument("--n-frames", type=int, default=None)
    p.add_argument("--cross-corpus", action="store_true", help="report PCC as the regression headline")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="compare run groups")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--baseline", nargs="+", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--welch", action="store_true", help="Welch's t-test instead of pooled variance")
    p.add_argument("--out", default=None, help="also write the comparison as JSON")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and architecture")
    p.add_argument("--spec", choices=("tiny", "default"), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, EmbeddingParseError, FramingError, TrainingDivergedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
