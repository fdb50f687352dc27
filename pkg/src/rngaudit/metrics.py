"""Multi-label confusion accounting and the four aggregate F1 scores.

Micro pools precision/recall over all labels; macro is the unweighted mean of
per-label F1; weighted is the support-weighted mean; sample computes one F1
per record and averages. Any zero-denominator F1, precision, or recall is
defined as 0 so the metrics stay total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rngaudit.sts import N_TESTS, TEST_ORDER

__all__ = [
    "ConfusionCounts",
    "accumulate",
    "micro_f1",
    "macro_f1",
    "weighted_f1",
    "sample_f1",
    "per_label_f1",
    "summarize",
    "dump_metrics",
    "report",
]


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    """Per-label tallies; width is 7 in normal use but any width works so the
    aggregate formulas can be exercised on restricted label sets."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("tp", "fp", "fn", "tn")
        )

    def __post_init__(self):
        shape = None
        for name in ("tp", "fp", "fn", "tn"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.ndim != 1 or arr.size == 0:
                raise ValueError(f"{name} must be a non-empty 1-D array")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError("tp, fp, fn, tn must share one shape")
            if (arr < 0).any():
                raise ValueError(f"{name} must be non-negative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_labels(self) -> int:
        return self.tp.size

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
        )


def _as_bool_matrix(vectors, n_labels: int = N_TESTS) -> np.ndarray:
    mat = np.asarray(vectors, dtype=bool)
    if mat.ndim == 1:
        mat = mat[np.newaxis, :]
    if mat.ndim != 2 or mat.shape[1] != n_labels:
        raise ValueError(f"expected (records, {n_labels}) label vectors")
    return mat


def accumulate(preds, truths, n_labels: int = N_TESTS) -> ConfusionCounts:
    p = _as_bool_matrix(preds, n_labels)
    t = _as_bool_matrix(truths, n_labels)
    if p.shape[0] != t.shape[0]:
        raise ValueError(f"{p.shape[0]} predictions vs {t.shape[0]} truths")
    return ConfusionCounts(
        tp=(p & t).sum(axis=0),
        fp=(p & ~t).sum(axis=0),
        fn=(~p & t).sum(axis=0),
        tn=(~p & ~t).sum(axis=0),
    )


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def per_label_f1(c: ConfusionCounts) -> np.ndarray:
    return np.array(
        [
            _safe_div(2.0 * tp, 2.0 * tp + fp + fn)
            for tp, fp, fn in zip(c.tp, c.fp, c.fn)
        ]
    )


def micro_f1(c: ConfusionCounts) -> float:
    precision = _safe_div(float(c.tp.sum()), float(c.tp.sum() + c.fp.sum()))
    recall = _safe_div(float(c.tp.sum()), float(c.tp.sum() + c.fn.sum()))
    return _safe_div(2.0 * precision * recall, precision + recall)


def macro_f1(c: ConfusionCounts) -> float:
    total = 0.0
    for tp, fp, fn in zip(c.tp, c.fp, c.fn):
        precision = _safe_div(float(tp), float(tp + fp))
        recall = _safe_div(float(tp), float(tp + fn))
        total += _safe_div(2.0 * precision * recall, precision + recall)
    return total / c.n_labels


def weighted_f1(c: ConfusionCounts) -> float:
    support = c.support.astype(np.float64)
    total = float(support.sum())
    if total == 0:
        return 0.0
    return float((support * per_label_f1(c)).sum() / total)


def sample_f1(preds, truths, n_labels: int = N_TESTS) -> float:
    p = _as_bool_matrix(preds, n_labels)
    t = _as_bool_matrix(truths, n_labels)
    if p.shape[0] != t.shape[0]:
        raise ValueError(f"{p.shape[0]} predictions vs {t.shape[0]} truths")
    tp = (p & t).sum(axis=1, dtype=np.float64)
    fp = (p & ~t).sum(axis=1, dtype=np.float64)
    fn = (~p & t).sum(axis=1, dtype=np.float64)
    den = 2.0 * tp + fp + fn
    scores = np.where(den > 0, 2.0 * tp / np.where(den > 0, den, 1.0), 0.0)
    # sequential sum, not numpy's pairwise, so the value is bit-identical to
    # a literal evaluation of the averaged-sum definition
    return sum(scores.tolist()) / p.shape[0]


def summarize(c: ConfusionCounts, preds, truths) -> dict:
    return {
        "micro_f1": micro_f1(c),
        "macro_f1": macro_f1(c),
        "weighted_f1": weighted_f1(c),
        "sample_f1": sample_f1(preds, truths),
        "per_label_f1": per_label_f1(c).tolist(),
    }


def dump_metrics(summary: dict) -> str:
    """Delimited `metric,value` lines."""
    lines = []
    for key in ("micro_f1", "macro_f1", "weighted_f1", "sample_f1"):
        lines.append(f"{key},{summary[key]:.6f}")
    for tid, value in zip(TEST_ORDER, summary["per_label_f1"]):
        lines.append(f"f1_{tid.value},{value:.6f}")
    return "\n".join(lines) + "\n"


def report(c: ConfusionCounts, preds, truths) -> str:
    """Aligned human-readable table of aggregates and per-label F1."""
    summary = summarize(c, preds, truths)
    width = max(len(t.value) for t in TEST_ORDER)
    lines = [
        f"{'metric':<{width}}  value",
        f"{'micro F1':<{width}}  {summary['micro_f1']:.4f}",
        f"{'macro F1':<{width}}  {summary['macro_f1']:.4f}",
        f"{'weighted F1':<{width}}  {summary['weighted_f1']:.4f}",
        f"{'sample F1':<{width}}  {summary['sample_f1']:.4f}",
    ]
    for tid, value, support in zip(TEST_ORDER, summary["per_label_f1"], c.support):
        lines.append(f"{tid.value:<{width}}  {value:.4f} (support {support})")
    return "\n".join(lines) + "\n"
