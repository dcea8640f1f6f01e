"""Evaluation metrics and significance testing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .losses import DegenerateStatisticsError, ccc  # noqa: F401  (re-exported)
from .tensor import DimensionError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @classmethod
    def from_labels(cls, y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise DimensionError(f"{y_true.size} labels vs {y_pred.size} predictions")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)


def uar(confusion: ConfusionMatrix | np.ndarray) -> float:
    """Unweighted average recall: the mean of per-class recalls."""
    if not isinstance(confusion, ConfusionMatrix):
        confusion = ConfusionMatrix(confusion)
    support = confusion.support
    empty = np.flatnonzero(support == 0)
    if empty.size:
        raise ValueError(f"classes without support: {empty.tolist()}")
    recalls = np.diag(confusion.counts) / support
    return float(recalls.mean())


def pcc(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pcc needs at least two values")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateStatisticsError("pcc undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def mse(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")
    return float(((x - y) ** 2).mean())


@dataclass(frozen=True)
class ConfusionDelta:
    """Per-cell % change; ``defined`` is False where the baseline cell is 0."""

    percent: np.ndarray
    defined: np.ndarray

    def render(self, fmt: str = "{:+.0f}%") -> list[list[str]]:
        return [
            [fmt.format(v) if ok else "n/a" for v, ok in zip(row, mask)]
            for row, mask in zip(self.percent, self.defined)
        ]


def confusion_delta(model_cm: ConfusionMatrix, baseline_cm: ConfusionMatrix) -> ConfusionDelta:
    m = model_cm.counts if isinstance(model_cm, ConfusionMatrix) else np.asarray(model_cm)
    b = baseline_cm.counts if isinstance(baseline_cm, ConfusionMatrix) else np.asarray(baseline_cm)
    if m.shape != b.shape:
        raise DimensionError(f"confusion shapes differ: {m.shape} vs {b.shape}")
    if not np.array_equal(m.sum(axis=1), b.sum(axis=1)):
        raise ValueError("confusion matrices have different class supports (not the same test set)")
    defined = b != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = np.where(defined, 100.0 * (m - b) / np.where(defined, b, 1), np.nan)
    return ConfusionDelta(pct, defined)


# --------------------------------------------------------- incomplete beta

_BETA_EPS = 1e-16
_BETA_TINY = 1e-300
_BETA_MAXIT = 10000


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), evaluated with the modified Lentz method."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETA_TINY:
        d = _BETA_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _BETA_TINY if abs(d) < _BETA_TINY else d
        c = 1.0 + aa / c
        c = _BETA_TINY if abs(c) < _BETA_TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _BETA_TINY if abs(d) < _BETA_TINY else d
        c = 1.0 + aa / c
        c = _BETA_TINY if abs(c) < _BETA_TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float
    significant: bool
    zero_variance: bool = False


def ttest_independent(a: Sequence[float], b: Sequence[float], alpha: float = 0.05, equal_var: bool = True) -> TTestResult:
    """Two-sided independent two-sample t-test.

    Pooled-variance Student test by default; ``equal_var=False`` gives Welch.
    With zero variance in both groups, equal means give ``p = 1`` and unequal
    means give ``p = 0`` with ``zero_variance`` set.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("each group needs at least two values")
    diff = a.mean() - b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if equal_var:
        df = float(na + nb - 2)
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = pooled * (1.0 / na + 1.0 / nb)
    else:
        se2 = va / na + vb / nb
        if se2 > 0:
            df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
        else:
            df = float(na + nb - 2)
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 1.0, df, False, zero_variance=True)
        return TTestResult(math.copysign(math.inf, diff), 0.0, df, True, zero_variance=True)
    t = float(diff / math.sqrt(se2))
    p = t_two_sided_p(t, df)
    return TTestResult(t, p, df, p < alpha)


# ---------------------------------------------------------------- residuals


@dataclass(frozen=True)
class ResidualRecord:
    y_t: float
    y_p: float

    @property
    def e(self) -> float:
        return self.y_t - self.y_p


def residuals(y_true: Sequence[float], y_pred: Sequence[float]) -> list[ResidualRecord]:
    return [ResidualRecord(float(t), float(p)) for t, p in zip(y_true, y_pred)]


def residual_fit(records: Iterable[ResidualRecord] | None = None, y_true=None, y_pred=None) -> tuple[float, float]:
    """Least-squares line of residual ``e = y_t - y_p`` against ``y_t``.

    Returns ``(slope, intercept)``.
    """
    if records is not None:
        records = list(records)
        y_true = np.array([r.y_t for r in records], dtype=np.float64)
        e = np.array([r.e for r in records], dtype=np.float64)
    else:
        y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
        e = y_true - np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_true.size < 2:
        raise ValueError("residual_fit needs at least two records")
    dy = y_true - y_true.mean()
    sxx = float(dy @ dy)
    if sxx == 0.0:
        raise DegenerateStatisticsError("residual_fit needs at least two distinct gold values")
    slope = float(dy @ (e - e.mean())) / sxx
    intercept = float(e.mean() - slope * y_true.mean())
    return slope, intercept


def summarize(values: Sequence[float]) -> dict:
    """Mean and sample (n-1) standard deviation; a single value reports std 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to summarize")
    single = v.size == 1
    return {
        "mean": float(v.mean()),
        "std": 0.0 if single else float(v.std(ddof=1)),
        "n": int(v.size),
        "single_run": bool(single),
    }


def format_mean_std(summary: dict, percent: bool = False, digits: int = 3) -> str:
    scale = 100.0 if percent else 1.0
    d = 1 if percent else digits
    return f"{summary['mean'] * scale:.{d}f} ({summary['std'] * scale:.{d}f})"


def best_index(values: Sequence[float]) -> int:
    """Index of the first maximum, so ties keep the earliest entry."""
    values = list(values)
    if not values:
        raise ValueError("empty sequence")
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best
