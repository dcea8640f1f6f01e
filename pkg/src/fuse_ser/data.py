"""Manifests, cross-validation folds, batching and the synthetic corpus."""

from __future__ import annotations

import csv
import hashlib
import logging
import queue
import threading
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .embeddings import EmbeddingStore, toy_embed
from .framing import read_features

logger = logging.getLogger(__name__)

EMOTIONS = ("angry", "happy", "neutral", "sad")
DIMENSIONS = ("arousal", "valence", "dominance")
SPLITS = ("train", "dev", "test", "unassigned")
MANIFEST_COLUMNS = (
    "id", "audio_path", "feature_path", "transcript", "speaker_id", "session_id",
    "emotion", "arousal", "valence", "dominance", "split",
)
SCALES = {"msp": (1.0, 7.0), "iemocap": (1.0, 5.0)}
LOG_FLOOR = float(np.log(1e-10))


class ManifestError(ValueError):
    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(f"row {row}: {message}" if row is not None else message)
        self.row = row


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    speaker_id: str = ""
    session_id: str = ""
    audio_path: Optional[str] = None
    feature_path: Optional[str] = None
    transcript: Optional[str] = None
    emotion: Optional[str] = None
    arousal: Optional[float] = None
    valence: Optional[float] = None
    dominance: Optional[float] = None
    split: str = "unassigned"

    def dimension(self, name: str) -> Optional[float]:
        return getattr(self, name)


def _opt_float(value: str, column: str, row: int) -> Optional[float]:
    value = value.strip()
    if not value:
        return None
    try:
        out = float(value)
    except ValueError:
        raise ManifestError(f"{column} is not a number: {value!r}", row) from None
    if not np.isfinite(out):
        raise ManifestError(f"{column} is not finite", row)
    return out


def load_manifest(path, scale: Optional[tuple[float, float]] = None) -> list[UtteranceRecord]:
    """Read and validate a manifest CSV.

    ``scale`` bounds the dimensional labels (e.g. ``(1, 7)`` for a 7-point
    scale); row numbers in errors count the header as row 1.
    """
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("id", "speaker_id", "session_id") if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"manifest header lacks columns {missing}")
        for row_no, row in enumerate(reader, start=2):
            uid = (row.get("id") or "").strip()
            if not uid:
                raise ManifestError("empty id", row_no)
            if uid in seen:
                raise ManifestError(f"duplicate id {uid!r}", row_no)
            seen.add(uid)
            audio = (row.get("audio_path") or "").strip() or None
            feats = (row.get("feature_path") or "").strip() or None
            if audio is None and feats is None:
                raise ManifestError(f"{uid}: needs audio_path or feature_path", row_no)
            split = (row.get("split") or "").strip() or "unassigned"
            if split not in SPLITS:
                raise ManifestError(f"{uid}: unknown split {split!r}", row_no)
            dims = {}
            for col in DIMENSIONS:
                v = _opt_float(row.get(col) or "", col, row_no)
                if v is not None and scale is not None and not scale[0] <= v <= scale[1]:
                    raise ManifestError(
                        f"{uid}: {col}={v} outside the [{scale[0]:g}, {scale[1]:g}] scale", row_no
                    )
                dims[col] = v
            records.append(UtteranceRecord(
                id=uid,
                speaker_id=(row.get("speaker_id") or "").strip(),
                session_id=(row.get("session_id") or "").strip(),
                audio_path=audio,
                feature_path=feats,
                transcript=row.get("transcript") or None,
                emotion=(row.get("emotion") or "").strip().lower() or None,
                split=split,
                **dims,
            ))
    counts = Counter(r.emotion for r in records if r.emotion)
    splits = Counter(r.split for r in records)
    logger.info("loaded %d records from %s; classes %s; splits %s", len(records), path, dict(counts), dict(splits))
    return records


def save_manifest(records: Sequence[UtteranceRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            row = []
            for col in MANIFEST_COLUMNS:
                v = getattr(r, col)
                row.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
            writer.writerow(row)


def four_class_filter(records: Sequence[UtteranceRecord], dataset: str) -> list[UtteranceRecord]:
    """Keep angry/happy/neutral/sad; for IEMOCAP, excited is merged into happy first."""
    if dataset not in ("msp", "iemocap"):
        raise ValueError(f"dataset must be 'msp' or 'iemocap', got {dataset!r}")
    out = []
    for r in records:
        label = (r.emotion or "").lower()
        if dataset == "iemocap" and label == "excited":
            r = replace(r, emotion="happy")
            label = "happy"
        if label in EMOTIONS:
            out.append(r)
    if not out:
        logger.warning("four-class filter left no records")
    return out


# -------------------------------------------------------------------- folds


@dataclass(frozen=True)
class Fold:
    test_speaker: str
    dev_speaker: str
    train_speakers: tuple


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def split(self, records: Sequence[UtteranceRecord], index: int):
        fold = self.folds[index]
        train = [r for r in records if r.speaker_id in fold.train_speakers]
        dev = [r for r in records if r.speaker_id == fold.dev_speaker]
        test = [r for r in records if r.speaker_id == fold.test_speaker]
        return train, dev, test


def loso_folds(records: Sequence[UtteranceRecord]) -> FoldPlan:
    """One fold per speaker; the session partner is the dev speaker."""
    sessions: dict[str, set] = {}
    for r in records:
        if not r.speaker_id or not r.session_id:
            raise ManifestError(f"{r.id}: speaker_id and session_id are required for LOSO")
        sessions.setdefault(r.session_id, set()).add(r.speaker_id)
    owner: dict[str, str] = {}
    for sess, speakers in sessions.items():
        if len(speakers) != 2:
            raise ManifestError(f"session {sess!r} has {len(speakers)} speakers; LOSO needs exactly 2")
        for spk in speakers:
            if spk in owner and owner[spk] != sess:
                raise ManifestError(f"speaker {spk!r} appears in sessions {owner[spk]!r} and {sess!r}")
            owner[spk] = sess
    all_speakers = sorted(owner)
    folds = []
    for sess in sorted(sessions):
        pair = sorted(sessions[sess])
        for test, dev in ((pair[0], pair[1]), (pair[1], pair[0])):
            train = tuple(s for s in all_speakers if s not in (test, dev))
            if not train:
                raise ManifestError(f"fold for {test!r} has an empty training set")
            folds.append(Fold(test, dev, train))
    return FoldPlan(tuple(folds))


# ----------------------------------------------------------------- examples


@dataclass
class ExampleSet:
    """Arrays for a list of utterances, ready for batching."""

    ids: list
    x: np.ndarray  # [N, T, n_mels]
    emb: Optional[np.ndarray] = None  # [N, L_dim]
    labels: Optional[np.ndarray] = None  # [N] int class indices
    targets: Optional[np.ndarray] = None  # [N, D] floats

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "ExampleSet":
        index = np.asarray(index, dtype=np.int64)
        return ExampleSet(
            [self.ids[i] for i in index],
            self.x[index],
            None if self.emb is None else self.emb[index],
            None if self.labels is None else self.labels[index],
            None if self.targets is None else self.targets[index],
        )


@dataclass(frozen=True)
class EmbeddingScaler:
    """Per-dimension standardisation of linguistic embeddings.

    Fitted on the training split only; dimensions with no spread keep unit
    scale.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, emb: np.ndarray, eps: float = 1e-8) -> "EmbeddingScaler":
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError(f"need a non-empty [N, L_dim] matrix, got {emb.shape}")
        std = emb.std(axis=0)
        return cls(emb.mean(axis=0), np.where(std > eps, std, 1.0))

    def apply(self, data: ExampleSet) -> ExampleSet:
        if data.emb is None:
            return data
        emb = ((data.emb - self.mean) / self.std).astype(np.float32)
        return replace(data, emb=emb)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingScaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Batch:
    ids: list
    x: np.ndarray
    emb: Optional[np.ndarray]
    labels: Optional[np.ndarray]
    targets: Optional[np.ndarray]

    def __len__(self) -> int:
        return len(self.ids)


def fit_frames(frames: np.ndarray, n_frames: Optional[int]) -> np.ndarray:
    """Centre-crop or pad (with the log floor) along time to ``n_frames``."""
    if n_frames is None or frames.shape[0] == n_frames:
        return frames
    t = frames.shape[0]
    if t > n_frames:
        start = (t - n_frames) // 2
        return frames[start:start + n_frames]
    pad = np.full((n_frames - t, frames.shape[1]), LOG_FLOOR, dtype=frames.dtype)
    return np.concatenate([frames, pad], axis=0)


def task_columns(task: str, dimension: Optional[str] = None) -> Optional[tuple]:
    if task == "four_class":
        return None
    if task == "single_task":
        if dimension not in DIMENSIONS:
            raise ValueError(f"single_task needs a dimension in {DIMENSIONS}, got {dimension!r}")
        return (dimension,)
    if task == "multitask":
        return DIMENSIONS
    raise ValueError(f"unknown task {task!r}")


def build_examples(
    records: Sequence[UtteranceRecord],
    task: str,
    features: Mapping[str, np.ndarray] | None = None,
    store: Optional[EmbeddingStore] = None,
    dimension: Optional[str] = None,
    n_frames: Optional[int] = None,
    base_dir=None,
) -> ExampleSet:
    """Gather spectrograms, embeddings and labels for ``records``.

    Features come from ``features`` when given, otherwise from each record's
    feature file (relative paths resolve against ``base_dir``).
    """
    xs = []
    for r in records:
        if features is not None and r.id in features:
            frames = features[r.id]
        else:
            if not r.feature_path:
                raise ManifestError(f"{r.id}: no features available (run featurize first)")
            path = Path(r.feature_path)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            frames = read_features(path)
        xs.append(fit_frames(np.asarray(frames, dtype=np.float32), n_frames))
    shapes = {x.shape for x in xs}
    if len(shapes) > 1:
        raise ManifestError(f"spectrograms differ in shape {sorted(shapes)[:3]}; set n_frames")
    x = np.stack(xs) if xs else np.zeros((0, 0, 0), dtype=np.float32)
    emb = store.matrix([r.id for r in records]) if store is not None else None
    labels = targets = None
    cols = task_columns(task, dimension)
    if cols is None:
        try:
            labels = np.array([EMOTIONS.index(r.emotion) for r in records], dtype=np.int64)
        except ValueError:
            bad = next(r for r in records if r.emotion not in EMOTIONS)
            raise ManifestError(f"{bad.id}: emotion {bad.emotion!r} is not one of {EMOTIONS}") from None
    else:
        vals = [[r.dimension(c) for c in cols] for r in records]
        for r, row in zip(records, vals):
            if any(v is None for v in row):
                raise ManifestError(f"{r.id}: missing dimensional label for {cols}")
        targets = np.array(vals, dtype=np.float32).reshape(len(records), len(cols))
    return ExampleSet([r.id for r in records], x, emb, labels, targets)


def make_batches(data, batch_size: int = 64, seed: int | np.random.Generator = 0, shuffle: bool = True) -> Iterator:
    """Yield consecutive batches covering every item exactly once.

    ``data`` is an :class:`ExampleSet` (yielding :class:`Batch`) or any
    sequence (yielding lists). The final partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if isinstance(data, ExampleSet):
            sub = data.subset(idx)
            yield Batch(sub.ids, sub.x, sub.emb, sub.labels, sub.targets)
        else:
            yield [data[i] for i in idx]


_DONE = object()


def prefetch(batches: Iterator, depth: int = 1) -> Iterator:
    """Produce the next batch in a background thread while the caller trains."""
    q: queue.Queue = queue.Queue(maxsize=max(1, depth))
    errors: list = []

    def producer():
        try:
            for b in batches:
                q.put(b)
        except BaseException as exc:  # re-raised in the consumer
            errors.append(exc)
        finally:
            q.put(_DONE)

    threading.Thread(target=producer, daemon=True).start()
    while True:
        item = q.get()
        if item is _DONE:
            if errors:
                raise errors[0]
            return
        yield item


# ------------------------------------------------------------ synthetic data

POSITIVE_WORDS = ("great", "love", "wonderful", "glad", "lovely", "fantastic")
NEGATIVE_WORDS = ("awful", "hate", "terrible", "sorry", "miserable", "dreadful")
FRAME_WORDS = ("i", "think", "that", "is")


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 64
    n_mels: int = 64
    embedding_dim: int = 16
    noise: float = 0.5
    stripe_amplitude: float = 1.0
    stripe_period: int = 4
    level_gain: float = 1.0
    label_noise: float = 0.3
    words_per_utterance: int = 4
    n_sessions: int = 5
    splits: tuple = (0.7, 0.15, 0.15)


@dataclass
class SynthDataset:
    records: list
    features: dict
    store: EmbeddingStore
    config: SynthConfig
    acoustic_bit: np.ndarray
    linguistic_bit: np.ndarray
    energy: np.ndarray

    def by_split(self, split: str) -> list:
        return [r for r in self.records if r.split == split]


def _hash_unit(key: str) -> float:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64


def assign_splits(ids: Sequence[str], fractions: Sequence[float], groups: Optional[Sequence] = None) -> list[str]:
    """Deterministic split by ranking ids on a hash, per group.

    Each group is cut at its cumulative fractions, so split sizes are exact
    up to rounding.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.size != 3 or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"split fractions must be three nonnegatives summing to 1, got {fractions}")
    groups = list(groups) if groups is not None else [0] * len(ids)
    out = [""] * len(ids)
    by_group: dict = {}
    for i, g in enumerate(groups):
        by_group.setdefault(g, []).append(i)
    for members in by_group.values():
        ranked = sorted(members, key=lambda i: (_hash_unit(ids[i]), ids[i]))
        n = len(ranked)
        cut1 = int(round(fractions[0] * n))
        cut2 = int(round((fractions[0] + fractions[1]) * n))
        for rank, i in enumerate(ranked):
            out[i] = "train" if rank < cut1 else ("dev" if rank < cut2 else "test")
    return out


def stripe_templates(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean acoustic patterns: frequency stripes (bit 0) and time stripes (bit 1)."""
    t = np.arange(cfg.n_frames)[:, None]
    f = np.arange(cfg.n_mels)[None, :]
    w = 2.0 * np.pi / cfg.stripe_period
    along_freq = np.cos(w * f) * np.ones((cfg.n_frames, 1))
    along_time = np.cos(w * t) * np.ones((1, cfg.n_mels))
    return cfg.stripe_amplitude * along_freq, cfg.stripe_amplitude * along_time


def synth_bimodal_dataset(n_per_class: int, config: SynthConfig = SynthConfig(), seed: int = 0) -> SynthDataset:
    """Four-class corpus where class = 2 * linguistic_bit + acoustic_bit.

    The acoustic bit selects the stripe orientation of the spectrogram, the
    linguistic bit selects the vocabulary of the transcript. Arousal follows
    the overall spectral level, valence follows the linguistic bit and
    dominance mixes both; all on a 1-7 scale.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    cfg = config
    rng = np.random.default_rng(seed)
    templates = stripe_templates(cfg)
    n = 4 * n_per_class
    cls = np.repeat(np.arange(4), n_per_class)
    l_bit, a_bit = cls // 2, cls % 2
    energy = rng.uniform(0.0, 1.0, size=n)
    records, features, vectors = [], {}, {}
    n_speakers = 2 * cfg.n_sessions
    ids = [f"utt{i:05d}" for i in range(n)]
    splits = assign_splits(ids, cfg.splits, groups=cls)
    for i in range(n):
        noise = rng.standard_normal((cfg.n_frames, cfg.n_mels))
        spec = templates[a_bit[i]] + cfg.level_gain * (2.0 * energy[i] - 1.0) + cfg.noise * noise
        vocab = NEGATIVE_WORDS if l_bit[i] == 0 else POSITIVE_WORDS
        words = list(rng.choice(vocab, size=cfg.words_per_utterance))
        transcript = " ".join(list(FRAME_WORDS) + words)
        arousal = 1.0 + 6.0 * (0.1 + 0.8 * energy[i]) + cfg.label_noise * rng.standard_normal()
        valence = 1.0 + 6.0 * (0.25 + 0.5 * l_bit[i]) + cfg.label_noise * rng.standard_normal()
        dominance = 0.5 * (arousal + valence) + cfg.label_noise * rng.standard_normal()
        spk = i % n_speakers
        session = spk // 2
        records.append(UtteranceRecord(
            id=ids[i],
            speaker_id=f"S{session + 1}_{'AB'[spk % 2]}",
            session_id=f"S{session + 1}",
            feature_path=f"features/{ids[i]}.bin",
            transcript=transcript,
            emotion=EMOTIONS[cls[i]],
            arousal=float(np.clip(arousal, 1.0, 7.0)),
            valence=float(np.clip(valence, 1.0, 7.0)),
            dominance=float(np.clip(dominance, 1.0, 7.0)),
            split=splits[i],
        ))
        features[ids[i]] = spec.astype(np.float32)
        vectors[ids[i]] = toy_embed(transcript, cfg.embedding_dim, seed=seed).vector
    store = EmbeddingStore.from_vectors(vectors, source="toy")
    return SynthDataset(records, features, store, cfg, a_bit, l_bit, energy)


def bayes_predictions(data: SynthDataset, stream: str) -> np.ndarray:
    """Class predictions of the Bayes rule for one stream or both.

    The stripe templates are zero-mean and of equal norm while the energy
    term is constant over the map, so the acoustic posterior depends only on
    the correlation with the template difference. The linguistic bit is read
    from the transcript vocabulary, which the embedding determines uniquely.
    A stream that is absent contributes a flat posterior; ties resolve to 0.
    """
    if stream not in ("audio", "text", "joint"):
        raise ValueError("stream must be 'audio', 'text' or 'joint'")
    t0, t1 = stripe_templates(data.config)
    diff = t1 - t0
    preds = []
    for r in data.records:
        a_hat = l_hat = 0
        if stream in ("audio", "joint"):
            a_hat = int(float((data.features[r.id] * diff).sum()) > 0)
        if stream in ("text", "joint"):
            words = set((r.transcript or "").split())
            l_hat = int(len(words & set(POSITIVE_WORDS)) > len(words & set(NEGATIVE_WORDS)))
        preds.append(2 * l_hat + a_hat)
    return np.asarray(preds, dtype=np.int64)
