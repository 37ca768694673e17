"""Anomaly-score functions over per-pixel class logits.

Five scores are provided: maximum-softmax-probability, energy
(logsumexp of the logits), softmax entropy, the combined
energy-entropy score `alpha * entropy - energy`, and the mask-wise
score for models that predict N region masks with per-mask class
scores.

Everything is computed with max-shifted exponentials so logit
magnitudes up to 1e6 stay finite. Natural logarithms throughout:
energy is natural-log based and the combined score adds entropy to
it, so the units must match. The `0 * log 0` limit is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import LogitMap, RasterError, ScoreMap


@dataclass(frozen=True)
class ScoreConfig:
    """Weights for the combined energy-entropy score."""

    alpha: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


@dataclass(frozen=True)
class MaskPrediction:
    """Region-mask model output: mask logits [N,H,W], class scores [N,C]."""

    mask_logits: np.ndarray
    class_scores: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.mask_logits, dtype=np.float64)
        c = np.ascontiguousarray(self.class_scores, dtype=np.float64)
        if m.ndim != 3:
            raise RasterError(f"mask logits must be [N,H,W], got {m.shape}")
        if c.ndim != 2:
            raise RasterError(f"class scores must be [N,C], got {c.shape}")
        if m.shape[0] != c.shape[0]:
            raise RasterError(
                f"mask count mismatch: {m.shape[0]} masks vs {c.shape[0]} score rows"
            )
        if m.shape[0] < 1:
            raise RasterError("need at least one mask")
        if not (np.isfinite(m).all() and np.isfinite(c).all()):
            raise RasterError("mask prediction contains NaN or Inf")
        object.__setattr__(self, "mask_logits", m)
        object.__setattr__(self, "class_scores", c)


def _as_class_first(logits) -> np.ndarray:
    """Accept a LogitMap or a raw array with the class axis first."""
    if isinstance(logits, LogitMap):
        return logits.data
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim < 1:
        raise RasterError("logits array must have a class axis")
    return arr


def softmax_channel(logits) -> np.ndarray:
    """Per-pixel softmax along the class axis, shape-preserving."""
    z = _as_class_first(logits)
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def log_softmax_channel(logits) -> np.ndarray:
    """Per-pixel log-softmax along the class axis."""
    z = _as_class_first(logits)
    shifted = z - z.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def energy_map(logits) -> np.ndarray:
    """Per-pixel energy: logsumexp of the class logits."""
    z = _as_class_first(logits)
    m = z.max(axis=0)
    return m + np.log(np.exp(z - m).sum(axis=0))


def entropy_map(logits) -> np.ndarray:
    """Per-pixel Shannon entropy of the softmax distribution (nats)."""
    logp = log_softmax_channel(logits)
    p = np.exp(logp)
    # p underflows to exactly 0 before logp overflows, so p*logp is finite
    return -(p * logp).sum(axis=0)


def msp_score(logits) -> ScoreMap:
    """1 - maximum softmax probability; range [0, 1 - 1/C]."""
    p = softmax_channel(logits)
    return ScoreMap(1.0 - p.max(axis=0))


def eel_score(logits, cfg: ScoreConfig = ScoreConfig()) -> ScoreMap:
    """Combined anomaly score `alpha * entropy - energy`."""
    return ScoreMap(cfg.alpha * entropy_map(logits) - energy_map(logits))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def maskwise_logits(pred: MaskPrediction) -> LogitMap:
    """Collapse mask predictions to per-pixel logits.

    Per pixel: logits[c] = sum_n class_scores[n,c] * sigmoid(mask[n]).
    """
    weights = sigmoid(pred.mask_logits)
    data = np.einsum("nc,nhw->chw", pred.class_scores, weights)
    return LogitMap(data)


def maskwise_score(pred: MaskPrediction) -> ScoreMap:
    """Mask-wise anomaly score.

    Per pixel: 1 - max_c sum_n softmax(class_scores)[n,c] * sigmoid(mask[n]).
    The softmax normalizes each mask's class scores independently (the class
    axis is the only one that yields a per-mask class distribution).
    """
    q = softmax_channel(pred.class_scores.T).T  # softmax along class axis
    agg = np.einsum("nc,nhw->chw", q, sigmoid(pred.mask_logits))
    return ScoreMap(1.0 - agg.max(axis=0))
