"""Bootstrap intervals, Welch's t-test, classification metrics and ATE helpers."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from typing import Callable, Union

import numpy as np
from scipy import stats as sps

from .errors import DegenerateLabelError, DomainError, EmptyInputError, ShapeError

DEFAULT_SEED = 1987
DEFAULT_RESAMPLES = 1000


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lo: float
    hi: float
    n_resamples: int
    seed: int
    level: float = 0.95
    interval: str = "percentile"

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "lo": self.lo,
            "hi": self.hi,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "level": self.level,
            "interval": self.interval,
        }


@dataclass(frozen=True)
class AteRecord:
    kind: str
    value: Union[float, np.ndarray]
    treated_mean: Union[float, np.ndarray]
    control_mean: Union[float, np.ndarray]

    @property
    def mean(self) -> float:
        return float(np.mean(self.value))


_NAMED = {
    "mean": lambda x: float(np.mean(x)),
    "median": lambda x: float(np.median(x)),
    "std": lambda x: float(np.std(x, ddof=1)) if len(x) > 1 else 0.0,
}


def bootstrap_ci(
    values,
    statistic: Union[str, Callable] = "mean",
    n: int = DEFAULT_RESAMPLES,
    seed: int = DEFAULT_SEED,
    level: float = 0.95,
) -> BootstrapResult:
    """Percentile bootstrap interval of ``statistic`` over rows of ``values``.

    ``values`` may be 2-D (e.g. prediction/label pairs); rows are resampled
    together. Resamples where the statistic is NaN are ignored.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0 or arr.shape[0] == 0:
        raise EmptyInputError("bootstrap needs at least one value")
    if n < 1:
        raise DomainError("n must be >= 1")
    if not 0 < level < 1:
        raise DomainError("level must be in (0, 1)")
    m = arr.shape[0]
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, m, size=(n, m))

    if statistic == "mean" and arr.ndim == 1:
        point = float(np.mean(arr))
        boot = arr[idx].mean(axis=1)
    else:
        fn = _NAMED[statistic] if isinstance(statistic, str) else statistic
        point = float(fn(arr))
        boot = np.array([fn(arr[row]) for row in idx], dtype=float)

    alpha = (1.0 - level) / 2.0
    boot = boot[~np.isnan(boot)]
    if boot.size == 0:
        lo = hi = point
    else:
        lo, hi = (float(x) for x in np.percentile(boot, [100 * alpha, 100 * (1 - alpha)]))
    # a skewed resample distribution can leave the point estimate outside the percentiles
    lo, hi = min(lo, point), max(hi, point)
    return BootstrapResult(point=point, lo=lo, hi=hi, n_resamples=n, seed=seed, level=level)


def t_test(a, b) -> tuple[float, float]:
    """Welch two-sample t-test; returns ``(t, two-sided p)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise DomainError("each sample needs at least two points")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        return (float(np.copysign(np.inf, diff)), 0.0)
    t = diff / np.sqrt(se2)
    dof = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = 2.0 * sps.t.sf(abs(t), dof)
    return float(t), float(min(p, 1.0))


def _binary(x, name: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isin(x, (0, 1))):
        raise DomainError(f"{name} must be binary")
    return x.astype(int)


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    return float(np.mean(preds == labels))


def f1_score(preds, labels) -> float:
    """F1 on the positive (label 1) class; zero when nothing is predicted positive."""
    p = _binary(preds, "preds")
    y = _binary(labels, "labels")
    if not y.any():
        raise DegenerateLabelError("f1 needs at least one positive label")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=float)
    y = _binary(labels, "labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelError("AUC needs both positive and negative labels")
    ranks = sps.rankdata(s)  # midranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metrics(preds, labels, kind: str) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError(f"preds {preds.shape} and labels {labels.shape} differ")
    if kind == "accuracy":
        return accuracy(preds, labels)
    if kind == "f1":
        return f1_score(preds, labels)
    if kind == "auc":
        return roc_auc(preds, labels)
    raise DomainError(f"unknown metric {kind!r}")


def _exact_sub(a: float, b: float) -> float:
    # decimal subtraction keeps table values like 52.5 - 59.7 at -7.2
    return float(Decimal(repr(float(a))) - Decimal(repr(float(b))))


def ate_macro(acc_treated: float, acc_control: float, scale: float = 1.0) -> AteRecord:
    """``acc(treated) - acc(control)``; use ``scale=100`` for percentages."""
    for v in (acc_treated, acc_control):
        if not 0.0 <= v <= scale:
            raise DomainError(f"accuracy {v} outside [0, {scale}]")
    return AteRecord(
        kind="macro",
        value=_exact_sub(acc_treated, acc_control),
        treated_mean=float(acc_treated),
        control_mean=float(acc_control),
    )


def ate_micro(d_icl, d_zsl) -> AteRecord:
    d_icl = np.asarray(d_icl, dtype=float)
    d_zsl = np.asarray(d_zsl, dtype=float)
    if d_icl.shape != d_zsl.shape:
        raise ShapeError(f"d_icl {d_icl.shape} and d_zsl {d_zsl.shape} differ")
    return AteRecord(kind="micro", value=d_icl - d_zsl, treated_mean=d_icl, control_mean=d_zsl)
