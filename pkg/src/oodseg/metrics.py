"""Streaming, mergeable pixel-level evaluation: AUPRC and FPR95.

Pixels stream in as (score, label) pairs; anomaly pixels count as
positives, inlier pixels as negatives, void pixels are skipped
entirely (a prediction on a void pixel is never a false positive).

Two accumulator modes:

* exact      -- buffers every valid pixel; metrics come from a single
                stable descending-score sweep with equal scores
                collapsed into atomic tie groups. Memory O(valid pixels).
* quantized  -- two fixed histograms over B bins with an affine
                score-to-bin mapping declared up front; out-of-range
                scores clamp to the boundary bins and are counted.
                Single pass, constant memory.

Average precision uses step interpolation, AP = sum_k (R_k - R_{k-1}) P_k,
the convention segmentation benchmarks use; it is exactly reproducible
and recorded in every report. FPR at target TPR takes the smallest
sweep prefix reaching TPR >= target, without interpolating between
thresholds; tie groups are atomic.

Accumulators are single-writer; parallel evaluation shards images
across accumulators and merges, which changes no metric value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, List, Optional, Tuple, Union

import numpy as np

from .raster import LABEL_ANOMALY, LABEL_INLIER, LABEL_VOID, ScoreMap, TriLabelMask

MODES = ("exact", "quantized")


class UndefinedMetricError(ValueError):
    """Metric has no defined value on this accumulator (e.g. no positives)."""


@dataclass(frozen=True)
class PRCurve:
    """Threshold sweep in descending-threshold order."""

    threshold: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    fpr: np.ndarray

    def __len__(self) -> int:
        return len(self.threshold)


class EvalAccumulator:
    """Mergeable statistic over (score, label) pixel pairs."""

    def __init__(
        self,
        mode: str = "exact",
        lo: Optional[float] = None,
        hi: Optional[float] = None,
        bins: Optional[int] = None,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.num_void = 0
        self.clamped = 0
        if mode == "exact":
            self._pos_chunks: List[np.ndarray] = []
            self._neg_chunks: List[np.ndarray] = []
            self.lo = self.hi = self.bins = None
        else:
            if lo is None or hi is None or bins is None:
                raise ValueError("quantized mode needs lo, hi, and bins")
            if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
                raise ValueError(f"need finite lo < hi, got ({lo}, {hi})")
            if bins < 2:
                raise ValueError(f"need at least 2 bins, got {bins}")
            self.lo = float(lo)
            self.hi = float(hi)
            self.bins = int(bins)
            self._pos_hist = np.zeros(self.bins, dtype=np.int64)
            self._neg_hist = np.zeros(self.bins, dtype=np.int64)

    @classmethod
    def exact(cls) -> "EvalAccumulator":
        return cls(mode="exact")

    @classmethod
    def quantized(cls, lo: float, hi: float, bins: int = 65536) -> "EvalAccumulator":
        return cls(mode="quantized", lo=lo, hi=hi, bins=bins)

    @property
    def num_pos(self) -> int:
        if self.mode == "exact":
            return sum(len(c) for c in self._pos_chunks)
        return int(self._pos_hist.sum())

    @property
    def num_neg(self) -> int:
        if self.mode == "exact":
            return sum(len(c) for c in self._neg_chunks)
        return int(self._neg_hist.sum())

    def add(self, scores, labels) -> "EvalAccumulator":
        """Accumulate one score map against its tri-label ground truth."""
        s = scores.data if isinstance(scores, ScoreMap) else np.asarray(scores)
        m = labels.data if isinstance(labels, TriLabelMask) else np.asarray(labels)
        if s.shape != m.shape:
            raise ValueError(f"score shape {s.shape} != label shape {m.shape}")
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        m = m.reshape(-1)
        if not np.isfinite(s).all():
            raise ValueError("scores contain NaN or Inf")
        known = np.isin(m, (LABEL_INLIER, LABEL_ANOMALY, LABEL_VOID))
        if not known.all():
            raise ValueError(f"unknown label code {int(m[~known][0])}")

        pos = s[m == LABEL_ANOMALY]
        neg = s[m == LABEL_INLIER]
        self.num_void += int((m == LABEL_VOID).sum())
        if self.mode == "exact":
            if len(pos):
                self._pos_chunks.append(pos.copy())
            if len(neg):
                self._neg_chunks.append(neg.copy())
        else:
            for vals, hist in ((pos, self._pos_hist), (neg, self._neg_hist)):
                if not len(vals):
                    continue
                self.clamped += int(((vals < self.lo) | (vals > self.hi)).sum())
                idx = np.floor(
                    (vals - self.lo) * (self.bins / (self.hi - self.lo))
                ).astype(np.int64)
                np.clip(idx, 0, self.bins - 1, out=idx)
                hist += np.bincount(idx, minlength=self.bins)
        return self

    def merge_with(self, other: "EvalAccumulator") -> "EvalAccumulator":
        """Pure merge: a new accumulator whose counts are the sums."""
        if self.mode != other.mode:
            raise ValueError(f"cannot merge modes {self.mode!r} and {other.mode!r}")
        if self.mode == "exact":
            out = EvalAccumulator.exact()
            out._pos_chunks = list(self._pos_chunks) + list(other._pos_chunks)
            out._neg_chunks = list(self._neg_chunks) + list(other._neg_chunks)
        else:
            if (self.lo, self.hi, self.bins) != (other.lo, other.hi, other.bins):
                raise ValueError(
                    "cannot merge quantized accumulators with different bin configs"
                )
            out = EvalAccumulator.quantized(self.lo, self.hi, self.bins)
            out._pos_hist = self._pos_hist + other._pos_hist
            out._neg_hist = self._neg_hist + other._neg_hist
        out.num_void = self.num_void + other.num_void
        out.clamped = self.clamped + other.clamped
        return out

    def _tie_groups(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Descending sweep groups: (thresholds, pos counts, neg counts)."""
        if self.mode == "exact":
            pos = (
                np.concatenate(self._pos_chunks)
                if self._pos_chunks
                else np.empty(0, dtype=np.float64)
            )
            neg = (
                np.concatenate(self._neg_chunks)
                if self._neg_chunks
                else np.empty(0, dtype=np.float64)
            )
            distinct = np.unique(np.concatenate((pos, neg)))
            pc = np.bincount(np.searchsorted(distinct, pos), minlength=len(distinct))
            nc = np.bincount(np.searchsorted(distinct, neg), minlength=len(distinct))
            return distinct[::-1], pc[::-1], nc[::-1]
        occupied = np.flatnonzero(self._pos_hist + self._neg_hist)[::-1]
        thresholds = self.lo + occupied * ((self.hi - self.lo) / self.bins)
        return thresholds, self._pos_hist[occupied], self._neg_hist[occupied]


def accumulate(acc: EvalAccumulator, scores, labels) -> EvalAccumulator:
    """Stream one (scores, labels) pair into the accumulator."""
    return acc.add(scores, labels)


def merge(a: EvalAccumulator, b: EvalAccumulator) -> EvalAccumulator:
    """Merge two compatible accumulators; metrics equal single-pass results."""
    return a.merge_with(b)


def _sweep(acc: EvalAccumulator):
    thresholds, pc, nc = acc._tie_groups()
    tp = np.cumsum(pc)
    fp = np.cumsum(nc)
    return thresholds, tp, fp


def auprc(acc: EvalAccumulator) -> float:
    """Area under the precision-recall curve (step interpolation)."""
    thresholds, tp, fp = _sweep(acc)
    if len(tp) == 0 or tp[-1] == 0:
        raise UndefinedMetricError("no positives")
    recall = tp / tp[-1]
    precision = tp / (tp + fp)
    delta = np.diff(recall, prepend=0.0)
    return float((delta * precision).sum())


def fpr_at_tpr(acc: EvalAccumulator, target: float = 0.95) -> float:
    """False-positive rate at the largest threshold whose TPR >= target."""
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target must be in [0,1], got {target}")
    thresholds, tp, fp = _sweep(acc)
    if len(tp) == 0 or tp[-1] == 0:
        raise UndefinedMetricError("no positives")
    if fp[-1] == 0:
        raise UndefinedMetricError("no negatives")
    tpr = tp / tp[-1]
    k = int(np.argmax(tpr >= target))
    return float(fp[k] / fp[-1])


def export_pr_curve(acc: EvalAccumulator) -> PRCurve:
    """Full sweep in threshold-descending order, one point per tie group."""
    thresholds, tp, fp = _sweep(acc)
    if len(tp) == 0:
        raise UndefinedMetricError("empty accumulator")
    if tp[-1] == 0:
        raise UndefinedMetricError("no positives")
    if fp[-1] == 0:
        raise UndefinedMetricError("no negatives")
    return PRCurve(
        threshold=thresholds,
        recall=tp / tp[-1],
        precision=tp / (tp + fp),
        fpr=fp / fp[-1],
    )


def write_pr_curve_csv(curve: PRCurve, fh: IO[str]) -> None:
    """CSV export: header threshold,recall,precision,fpr; 17 significant digits."""
    fh.write("threshold,recall,precision,fpr\n")
    for t, r, p, f in zip(curve.threshold, curve.recall, curve.precision, curve.fpr):
        fh.write(f"{t:.17g},{r:.17g},{p:.17g},{f:.17g}\n")


def metrics_summary(acc: EvalAccumulator) -> dict:
    """JSON-ready summary; metrics are null when undefined."""
    out: dict = {}
    try:
        out["auprc"] = auprc(acc)
    except UndefinedMetricError:
        out["auprc"] = None
    try:
        out["fpr95"] = fpr_at_tpr(acc, 0.95)
    except UndefinedMetricError:
        out["fpr95"] = None
    out["num_pos"] = acc.num_pos
    out["num_neg"] = acc.num_neg
    out["num_void"] = acc.num_void
    out["clamped"] = acc.clamped
    return out


def write_metrics_json(acc_or_summary: Union[EvalAccumulator, dict], fh: IO[str]) -> None:
    summary = (
        metrics_summary(acc_or_summary)
        if isinstance(acc_or_summary, EvalAccumulator)
        else acc_or_summary
    )
    json.dump(summary, fh, indent=2)
    fh.write("\n")
