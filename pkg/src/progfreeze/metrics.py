"""Binary classification metrics, aggregation and the paired repeat-mean t-test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

METRIC_NAMES = ("auroc", "balanced_accuracy", "raw_accuracy", "f1",
                "sensitivity", "specificity", "precision")


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    auroc: float
    balanced_accuracy: float
    raw_accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    precision: float
    counts: ConfusionCounts
    scores: list[tuple[float, int]] = field(default_factory=list, repr=False)
    flags: list[str] = field(default_factory=list)

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in METRIC_NAMES}
        row.update(asdict(self.counts))
        return row


def _split(scores):
    arr = np.asarray(scores, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1].astype(int)


def auroc(scores) -> float:
    """Mann-Whitney AUROC from (score, label) pairs; ties count one half.

    Uses midranks, so it is O(n log n) and equal to exhaustive pair counting.
    """
    s, y = _split(scores)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairs(scores) -> float:
    """Brute-force pair counting (reference implementation)."""
    s, y = _split(scores)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def confusion_counts(scores, threshold: float = 0.5) -> ConfusionCounts:
    s, y = _split(scores)
    pred = s >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & (y == 1))), fp=int(np.sum(pred & (y == 0))),
        tn=int(np.sum(~pred & (y == 0))), fn=int(np.sum(~pred & (y == 1))),
    )


def metrics_from_counts(c: ConfusionCounts) -> dict:
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(f"{name}_undefined")
            return 0.0
        return num / den

    sens = ratio(c.tp, c.tp + c.fn, "sensitivity")
    spec = ratio(c.tn, c.tn + c.fp, "specificity")
    prec = ratio(c.tp, c.tp + c.fp, "precision")
    f1 = 0.0 if prec + sens == 0 else 2 * prec * sens / (prec + sens)
    raw = (c.tp + c.tn) / c.total if c.total else 0.0
    return dict(sensitivity=sens, specificity=spec, precision=prec, f1=f1,
                balanced_accuracy=(sens + spec) / 2.0, raw_accuracy=raw, flags=flags)


def confusion_metrics(scores, threshold: float = 0.5) -> MetricsReport:
    """Everything except AUROC (reported as NaN); "accuracy" here is balanced accuracy."""
    scores = [(float(a), int(b)) for a, b in scores]
    counts = confusion_counts(scores, threshold)
    m = metrics_from_counts(counts)
    flags = m.pop("flags")
    return MetricsReport(auroc=math.nan, counts=counts, scores=scores, flags=flags, **m)


def evaluate(scores, threshold: float = 0.5) -> MetricsReport:
    """Full report; single-class inputs get AUROC NaN and a ``single_class`` flag."""
    report = confusion_metrics(scores, threshold)
    try:
        report.auroc = auroc(report.scores)
    except UndefinedMetricError:
        report.flags.append("single_class")
    return report


def aggregate(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation (n - 1) of every metric; NaNs are skipped."""
    if len(reports) < 2:
        raise ValueError("aggregate needs at least two reports")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if len(vals) == 0:
            out[name] = (math.nan, math.nan)
        elif len(vals) == 1:
            out[name] = (float(vals[0]), math.nan)
        else:
            out[name] = (float(vals.mean()), float(vals.std(ddof=1)))
    return out


def t_cdf(t: float, df: float) -> float:
    """Student-t CDF through the regularized incomplete beta function."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if t == 0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return 1.0 - tail if t > 0 else tail


@dataclass
class PairedTestResult:
    t_stat: float
    df: int
    p_two_sided: float
    differences: list[float]
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def paired_t_from_differences(d) -> PairedTestResult:
    d = np.asarray(d, dtype=np.float64)
    n = len(d)
    if n < 2:
        raise ValueError("paired t-test needs at least two groups")
    mean = d.mean()
    sd = d.std(ddof=1)
    diffs = [float(v) for v in d]
    if np.all(d == d[0]):
        # exact test: the floating-point sd of equal values need not be 0
        if mean == 0.0:
            return PairedTestResult(0.0, n - 1, 1.0, diffs, degenerate=True)
        return PairedTestResult(math.copysign(math.inf, mean), n - 1, 0.0, diffs, degenerate=True)
    t = float(mean / (sd / math.sqrt(n)))
    p = 2.0 * t_cdf(-abs(t), n - 1)
    return PairedTestResult(t, n - 1, min(1.0, p), diffs)


def repeat_means(rows, metric: str = "auroc") -> dict[int, float]:
    """Collapse per-fold rows (dicts or reports with ``repeat``) to one mean per repeat."""
    buckets: dict[int, list[float]] = {}
    for r in rows:
        rep = int(r["repeat"])
        v = float(r[metric])
        if math.isfinite(v):
            buckets.setdefault(rep, []).append(v)
    return {k: float(np.mean(v)) for k, v in sorted(buckets.items())}


def paired_t(rows_a, rows_b, metric: str = "auroc") -> PairedTestResult:
    """Paired t-test over per-repeat means of config A minus config B."""
    ma, mb = repeat_means(rows_a, metric), repeat_means(rows_b, metric)
    if set(ma) != set(mb):
        raise ValueError(f"mismatched repeats: {sorted(ma)} vs {sorted(mb)}")
    return paired_t_from_differences([ma[k] - mb[k] for k in sorted(ma)])
