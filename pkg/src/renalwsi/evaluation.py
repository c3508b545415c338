"""Slide-level metrics: confusion matrices, one-vs-rest scores, ROC/AUC and
percentile-bootstrap confidence intervals.

Resampling uses a counter-based SplitMix64 stream so that intervals are
reproducible bit-for-bit for a given seed, on any platform and for any
number of workers. Draw ``k`` (1-based) of the stream is::

    z = seed + k * 0x9E3779B97F4A7C15                     (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9              (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB              (mod 2**64)
    z =  z ^ (z >> 31)

which is exactly the sequential SplitMix64 generator. Bootstrap iteration
``i`` over ``n`` slides uses draws ``k = i*n + 1 ... i*n + n`` and maps each
draw to a slide index as ``floor((z >> 11) * 2**-53 * n)``.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive_int
from .labels import CLASSES, N_CLASSES, ClassLabel

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
MIX_2 = np.uint64(0x94D049BB133111EB)
_CHUNK = 500
METRICS = ("accuracy", "precision", "recall", "f1", "auc")


def splitmix64(seed, counters) -> np.ndarray:
    """SplitMix64 outputs for 1-based stream positions ``counters``."""
    seed = np.uint64(int(seed) % 2**64)
    k = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = seed + k * GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * MIX_1
        z = (z ^ (z >> np.uint64(27))) * MIX_2
    return z ^ (z >> np.uint64(31))


def resample_indices(seed, n, start, stop) -> np.ndarray:
    """``(stop - start, n)`` slide indices for bootstrap iterations [start, stop)."""
    it = np.arange(start, stop, dtype=np.uint64)[:, None]
    j = np.arange(n, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        k = it * np.uint64(n) + j + np.uint64(1)
    z = splitmix64(seed, k)
    u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.floor(u * n).astype(np.int64)


@dataclass(frozen=True)
class BootstrapConfig:
    iterations: int = 10_000
    seed: int = 0
    percentiles: tuple = (2.5, 97.5)

    def __post_init__(self):
        check_positive_int(self.iterations, "iterations")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")
        lo, hi = (float(p) for p in self.percentiles)
        if not 0 <= lo <= hi <= 100:
            raise ValueError(f"percentiles must satisfy 0 <= low <= high <= 100, got {self.percentiles}")
        object.__setattr__(self, "percentiles", (lo, hi))


def _interval(values, config):
    lo, hi = np.percentile(np.asarray(values, dtype=np.float64), config.percentiles)
    return float(lo), float(hi)


def bootstrap_ci(metric, sample, config=BootstrapConfig(), workers=1):
    """Percentile bootstrap interval of ``metric(resampled_sample)``.

    Slides are resampled with replacement at the original size. Percentiles
    use linear interpolation between order statistics.
    """
    sample = list(sample)
    if not sample:
        raise ValueError("bootstrap sample is empty")
    n = len(sample)

    def run(bounds):
        start, stop = bounds
        idx = resample_indices(config.seed, n, start, stop)
        return [metric([sample[i] for i in row]) for row in idx]

    chunks = [(s, min(s + _CHUNK, config.iterations)) for s in range(0, config.iterations, _CHUNK)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return _interval([v for part in parts for v in part], config)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = gold and columns = predicted, over ``classes``."""

    classes: tuple
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def outcomes(self, label):
        """(TP, FP, FN, TN) treating ``label`` as the positive class."""
        n = self.total
        if label not in self.classes:
            return 0, 0, 0, n
        i = self.classes.index(label)
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        return tp, fp, fn, n - tp - fp - fn

    def to_json(self) -> dict:
        return {"classes": [c.key for c in self.classes], "counts": self.counts.tolist()}


def confusion(golds, preds) -> ConfusionMatrix:
    golds = [ClassLabel.parse(g) for g in golds]
    preds = [ClassLabel.parse(p) for p in preds]
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} gold labels but {len(preds)} predictions")
    if not golds:
        raise ValueError("cannot build a confusion matrix from no slides")
    classes = tuple(sorted(set(golds) | set(preds)))
    pos = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for g, p in zip(golds, preds):
        counts[pos[g], pos[p]] += 1
    counts.setflags(write=False)
    return ConfusionMatrix(classes, counts)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, 0.0)


def _scores(tp, fp, fn, tn):
    """Vectorised one-vs-rest metrics; zero denominators give 0."""
    n = tp + fp + fn + tn
    accuracy = _ratio(tp + tn, n)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    return accuracy, precision, recall, f1


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    flagged: frozenset = field(default_factory=frozenset)


def per_class_metrics(cm: ConfusionMatrix, label) -> ClassMetrics:
    """One-vs-rest accuracy, precision, recall and F1 for ``label``.

    Metrics whose denominator is zero are reported as 0 and named in
    ``flagged``.
    """
    tp, fp, fn, tn = cm.outcomes(ClassLabel.parse(label))
    acc, prec, rec, f1 = (float(v) for v in _scores(tp, fp, fn, tn))
    flagged = set()
    if tp + fp == 0:
        flagged.add("precision")
    if tp + fn == 0:
        flagged.add("recall")
    if prec + rec == 0:
        flagged.add("f1")
    if tp + fp + fn + tn == 0:
        flagged.add("accuracy")
    return ClassMetrics(acc, prec, rec, f1, frozenset(flagged))


class UndefinedAUCError(ValueError):
    """AUC needs at least one positive and one negative."""


def _midranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # doubled ranks stay integral even for ties
    ranks2 = np.empty(len(values), dtype=np.int64)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks2[order[i : j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    return ranks2


def roc_auc(scores, positives) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied pairs) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if scores.shape != pos.shape or scores.ndim != 1:
        raise ValueError("scores and positives must be 1-D and of equal length")
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined without both positive and negative slides")
    rank_sum2 = int(_midranks(scores)[pos].sum())
    u2 = rank_sum2 - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def roc_curve(scores, positives):
    """(thresholds, fpr, tpr), thresholds descending and starting at +inf."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    thresholds = [math.inf] + sorted(set(scores.tolist()), reverse=True)
    fpr, tpr = [], []
    for t in thresholds:
        hit = scores >= t
        tpr.append(int((hit & pos).sum()) / n_pos if n_pos else 0.0)
        fpr.append(int((hit & ~pos).sum()) / n_neg if n_neg else 0.0)
    return np.array(thresholds), np.array(fpr), np.array(tpr)


@dataclass(frozen=True)
class MetricValue:
    value: float
    ci_low: float
    ci_high: float
    flagged: bool = False

    def to_json(self) -> dict:
        out = {"value": self.value, "ci_low": self.ci_low, "ci_high": self.ci_high}
        if self.flagged:
            out["flagged"] = True
        return out


@dataclass(frozen=True)
class MetricsReport:
    rows: dict  # ClassLabel -> {metric: MetricValue}
    average: dict  # metric -> MetricValue
    confusion: ConfusionMatrix
    n_slides: int
    bootstrap: BootstrapConfig

    def to_json(self) -> dict:
        return {
            "n_slides": self.n_slides,
            "bootstrap": {
                "iterations": self.bootstrap.iterations,
                "seed": self.bootstrap.seed,
                "percentiles": list(self.bootstrap.percentiles),
            },
            "rows": [
                {"class": c.key, **{m: v.to_json() for m, v in row.items()}} for c, row in self.rows.items()
            ],
            "average": {m: v.to_json() for m, v in self.average.items()},
            "confusion": self.confusion.to_json(),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


class _Table:
    """Per-slide arrays from which every metric is a function of the
    resample multiplicities ``w`` (shape ``(B, n)``)."""

    def __init__(self, golds, preds, scores, classes):
        self.g = np.array([int(c) for c in golds])
        self.p = np.array([int(c) for c in preds])
        self.s = np.asarray(scores, dtype=np.float64)
        self.classes = classes
        self.n = len(self.g)

    def evaluate(self, w):
        """{metric: (B, n_classes) array} for multiplicity matrix ``w``, plus
        ``"present"``: whether each class occurs among the resample's golds."""
        out = {m: np.zeros((w.shape[0], len(self.classes))) for m in METRICS}
        out["present"] = np.zeros((w.shape[0], len(self.classes)), dtype=bool)
        for k, c in enumerate(self.classes):
            gc, pc = self.g == int(c), self.p == int(c)
            out["present"][:, k] = (w @ gc.astype(np.float64)) > 0
            tp = w @ (gc & pc).astype(np.float64)
            fp = w @ (~gc & pc).astype(np.float64)
            fn = w @ (gc & ~pc).astype(np.float64)
            tn = w.sum(axis=1) - tp - fp - fn
            acc, prec, rec, f1 = _scores(tp, fp, fn, tn)
            out["accuracy"][:, k] = acc
            out["precision"][:, k] = prec
            out["recall"][:, k] = rec
            out["f1"][:, k] = f1
            out["auc"][:, k] = self._auc(w, gc, self.s[:, int(c)])
        return out

    @staticmethod
    def _auc(w, positive, score):
        # pairwise[a, b] = 1 if score_a > score_b, 0.5 on ties
        pairwise = (score[:, None] > score[None, :]) + 0.5 * (score[:, None] == score[None, :])
        wp = w * positive
        wn = w * ~positive
        num = np.einsum("ia,ab,ib->i", wp, pairwise, wn)
        return _ratio(num, wp.sum(axis=1) * wn.sum(axis=1))


def evaluate_dataset(pairs, bootstrap=BootstrapConfig(), workers=1) -> MetricsReport:
    """Full report for ``(SlideDecision, gold ClassLabel)`` pairs.

    Rows cover the classes present among gold labels and the average row is
    their unweighted mean. The continuous score for a class's ROC is the
    slide's filtered-pool fraction of that class. Bootstrap resamples whole
    slides.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no slides to evaluate")
    golds = [ClassLabel.parse(g) for _, g in pairs]
    preds = [d.label for d, _ in pairs]
    scores = np.array([d.fractions for d, _ in pairs], dtype=np.float64).reshape(len(pairs), N_CLASSES)
    cm = confusion(golds, preds)
    row_classes = tuple(c for c in CLASSES if c in set(golds))
    table = _Table(golds, preds, scores, row_classes)

    point = table.evaluate(np.ones((1, table.n)))
    flags = {m: np.zeros(len(row_classes), dtype=bool) for m in METRICS}
    for k, c in enumerate(row_classes):
        cmx = per_class_metrics(cm, c)
        for m in cmx.flagged:
            flags[m][k] = True
        try:
            point["auc"][0, k] = roc_auc(scores[:, int(c)], [g == c for g in golds])
        except UndefinedAUCError:
            point["auc"][0, k] = 0.0
            flags["auc"][k] = True

    def run(bounds):
        start, stop = bounds
        idx = resample_indices(bootstrap.seed, table.n, start, stop)
        w = np.zeros((stop - start, table.n))
        np.add.at(w, (np.repeat(np.arange(stop - start), table.n), idx.ravel()), 1.0)
        return table.evaluate(w)

    chunks = [(s, min(s + _CHUNK, bootstrap.iterations)) for s in range(0, bootstrap.iterations, _CHUNK)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    boot = {m: np.concatenate([p[m] for p in parts]) for m in METRICS + ("present",)}
    # each resample's macro average covers the classes among its own golds
    n_present = boot["present"].sum(axis=1)

    rows = {}
    for k, c in enumerate(row_classes):
        rows[c] = {
            m: MetricValue(float(point[m][0, k]), *_interval(boot[m][:, k], bootstrap), bool(flags[m][k]))
            for m in METRICS
        }
    average = {
        m: MetricValue(
            float(np.mean([rows[c][m].value for c in row_classes])),
            *_interval((boot[m] * boot["present"]).sum(axis=1) / n_present, bootstrap),
            bool(flags[m].any()),
        )
        for m in METRICS
    }
    return MetricsReport(rows, average, cm, len(pairs), bootstrap)


def macro_f1(golds, preds) -> float:
    """Unweighted mean F1 over the classes present among ``golds``."""
    cm = confusion(golds, preds)
    present = [c for c in CLASSES if c in set(ClassLabel.parse(g) for g in golds)]
    return float(np.mean([per_class_metrics(cm, c).f1 for c in present]))


def roc_rows(pairs):
    """Rows ``(class_key, threshold, fpr, tpr)`` for every class with both
    positive and negative slides."""
    golds = [ClassLabel.parse(g) for _, g in pairs]
    out = []
    for c in CLASSES:
        positives = [g == c for g in golds]
        if all(positives) or not any(positives):
            continue
        thr, fpr, tpr = roc_curve([d.fraction(c) for d, _ in pairs], positives)
        out.extend((c.key, t, f, r) for t, f, r in zip(thr, fpr, tpr))
    return out
