"""Per-utterance linguistic embeddings.

The canonical source is a CSV of precomputed vectors
(``utterance_id,e_0,...,e_{D-1}``, no header). :func:`toy_embed` is a
deterministic stand-in for a language model, used by tests and the
synthetic experiments.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DIM = 768


class EmbeddingParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class LinguisticEmbedding:
    vector: np.ndarray
    source: str = "precomputed"  # or "toy"

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise ValueError("embedding contains non-finite values")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.size


@dataclass(frozen=True)
class EmbeddingStore:
    """Immutable id -> embedding map with a fixed dimension."""

    dim: int
    _entries: Mapping[str, LinguisticEmbedding] = field(default_factory=dict)

    def __post_init__(self):
        for key, emb in self._entries.items():
            if emb.dim != self.dim:
                raise ValueError(f"{key}: dimension {emb.dim} != store dimension {self.dim}")
        object.__setattr__(self, "_entries", MappingProxyType(dict(self._entries)))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def ids(self) -> list[str]:
        return list(self._entries)

    def get(self, utterance_id: str) -> LinguisticEmbedding:
        """Embedding for ``utterance_id``; a missing id maps to the zero vector."""
        emb = self._entries.get(utterance_id)
        if emb is None:
            logger.warning("no embedding for %s; using the zero vector", utterance_id)
            return LinguisticEmbedding(np.zeros(self.dim, dtype=np.float32), "zero")
        return emb

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(i).vector for i in ids]).astype(np.float32)

    @classmethod
    def from_vectors(cls, vectors: Mapping[str, np.ndarray], source: str = "precomputed") -> "EmbeddingStore":
        entries = {k: LinguisticEmbedding(v, source) for k, v in vectors.items()}
        if not entries:
            raise ValueError("cannot build an empty embedding store")
        dim = next(iter(entries.values())).dim
        return cls(dim, entries)


def average_token_embeddings(tokens: Sequence[np.ndarray], source: str = "precomputed") -> LinguisticEmbedding:
    """Elementwise mean of the token vectors of one utterance."""
    if len(tokens) == 0:
        raise ValueError("cannot average an empty token sequence")
    mat = np.asarray([np.asarray(t, dtype=np.float64).reshape(-1) for t in tokens])
    return LinguisticEmbedding(mat.mean(axis=0), source)


def load_store(path) -> EmbeddingStore:
    entries: dict[str, LinguisticEmbedding] = {}
    dim = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            key, values = row[0].strip(), row[1:]
            if not key:
                raise EmbeddingParseError("empty utterance id", lineno)
            if key in entries:
                raise EmbeddingParseError(f"duplicate utterance id {key!r}", lineno)
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise EmbeddingParseError("row has no embedding values", lineno)
            elif len(values) != dim:
                raise EmbeddingParseError(f"ragged row: {len(values)} values, expected {dim}", lineno)
            try:
                vec = np.array([float(v) for v in values], dtype=np.float32)
            except ValueError as exc:
                raise EmbeddingParseError(f"non-numeric field: {exc}", lineno) from exc
            try:
                entries[key] = LinguisticEmbedding(vec)
            except ValueError as exc:
                raise EmbeddingParseError(str(exc), lineno) from exc
    if dim is None:
        raise EmbeddingParseError(f"{path}: no rows")
    return EmbeddingStore(dim, entries)


def save_store(store: EmbeddingStore, path, ids: Iterable[str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for key in (ids if ids is not None else store.ids()):
            writer.writerow([key, *(repr(float(v)) for v in store.get(key).vector)])


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def toy_embed(transcript: str | None, dim: int = DEFAULT_DIM, seed: int = 0) -> LinguisticEmbedding:
    """Average of per-token pseudo-random unit vectors keyed by (token, seed)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    tokens = (transcript or "").split()
    if not tokens:
        logger.warning("empty transcript; using the zero embedding")
        return LinguisticEmbedding(np.zeros(dim, dtype=np.float32), "toy")
    return average_token_embeddings([_token_vector(t, dim, seed) for t in tokens], source="toy")
