"""Training objectives with analytic gradients w.r.t. the logits.

The energy-entropy loss puts a binary cross-entropy on the anomaly
probability sigmoid(-energy), pooled as means over all anomaly and all
inlier pixels in the batch. The consistency loss keeps inlier
predictions close to a frozen reference via cross-entropy, KL, and a
squared entropy difference; it sums over inlier pixels without
normalization. A linear-energy difference-of-means baseline is kept
for comparison runs, and `compose_total` builds weighted combinations.

Gradients are exact. `-log(sigmoid(-E))` is evaluated as softplus(E)
through `logaddexp`, which linearizes for large arguments, so energies
of several hundred are safe. Void-labeled pixels contribute nothing
and receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from .raster import LABEL_ANOMALY, LABEL_INLIER, LogitMap, TriLabelMask
from .scoring import sigmoid

INLIER_ENTROPY_SIGNS = ("as_printed", "penalize")


@dataclass(frozen=True)
class HyperParams:
    """Loss weights: entropy weight alpha, anomaly-loss weight lam,
    cross-entropy weight lam_ce."""

    alpha: float = 1.0
    lam: float = 0.05
    lam_ce: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "lam", "lam_ce"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossResult:
    """Scalar loss value plus its gradient w.r.t. the input logits.

    Externally supplied scalar terms (no logits of their own) carry
    grad=None, which composes as a zero gradient.
    """

    value: float
    grad: Optional[np.ndarray]

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"loss value is not finite: {self.value}")
        if self.grad is not None and not np.isfinite(self.grad).all():
            raise ValueError("loss gradient contains NaN or Inf")


def _as_array(x) -> np.ndarray:
    if isinstance(x, LogitMap):
        return x.data
    if isinstance(x, TriLabelMask):
        return x.data
    return np.asarray(x)


def _flatten_batch(logits, mask) -> Tuple[np.ndarray, np.ndarray, tuple]:
    """Normalize ([B,]C,H,W) logits and ([B,]H,W) masks to columns.

    Returns (z [C,N], m [N], original logits shape).
    """
    z = np.asarray(_as_array(logits), dtype=np.float64)
    m = _as_array(mask)
    if z.ndim == 3:
        z4 = z[None]
    elif z.ndim == 4:
        z4 = z
    else:
        raise ValueError(f"logits must be [C,H,W] or [B,C,H,W], got {z.shape}")
    if m.ndim == 2:
        m3 = m[None]
    elif m.ndim == 3:
        m3 = m
    else:
        raise ValueError(f"mask must be [H,W] or [B,H,W], got {m.shape}")
    b, c, h, w = z4.shape
    if m3.shape != (b, h, w):
        raise ValueError(f"mask shape {m3.shape} does not match logits {z4.shape}")
    cols = np.moveaxis(z4, 1, 0).reshape(c, b * h * w)
    return cols, m3.reshape(-1), z.shape


def _softmax_stats(z: np.ndarray):
    """Columns [C,N] -> (p, logp, energy, entropy, d_entropy)."""
    m = z.max(axis=0)
    shifted = z - m
    sumexp = np.exp(shifted).sum(axis=0)
    energy = m + np.log(sumexp)
    logp = shifted - np.log(sumexp)
    p = np.exp(logp)
    entropy = -(p * logp).sum(axis=0)
    d_entropy = -p * (logp + entropy)  # dH/dz, [C,N]
    return p, logp, energy, entropy, d_entropy


def _unflatten(cols: np.ndarray, shape: tuple) -> np.ndarray:
    c = cols.shape[0]
    if len(shape) == 3:
        return cols.reshape(c, shape[1], shape[2])
    b = shape[0]
    return np.moveaxis(cols.reshape(c, b, shape[2], shape[3]), 0, 1)


def eel_loss(
    logits,
    mask,
    hp: HyperParams = HyperParams(),
    inlier_entropy_sign: str = "as_printed",
) -> LossResult:
    """Binary cross-entropy on the anomaly probability sigmoid(-energy).

    value = mean over anomaly pixels of [softplus(E) - alpha*H]
          + mean over inlier pixels of [softplus(-E) - alpha*H]

    pooled over the whole batch; an empty group contributes 0. The
    printed form rewards high inlier entropy when minimized;
    `inlier_entropy_sign="penalize"` flips that term's sign instead.
    """
    if inlier_entropy_sign not in INLIER_ENTROPY_SIGNS:
        raise ValueError(f"inlier_entropy_sign must be one of {INLIER_ENTROPY_SIGNS}")
    z, m, shape = _flatten_batch(logits, mask)
    anom = m == LABEL_ANOMALY
    inl = m == LABEL_INLIER
    n_a = int(anom.sum())
    n_i = int(inl.sum())
    if n_a + n_i == 0:
        raise ValueError("all pixels are void")

    p, _, energy, entropy, d_entropy = _softmax_stats(z)
    alpha = hp.alpha
    sign = -1.0 if inlier_entropy_sign == "as_printed" else 1.0

    value = 0.0
    grad = np.zeros_like(z)
    if n_a:
        # softplus(E) = -log(sigmoid(-E))
        terms = np.logaddexp(0.0, energy[anom]) - alpha * entropy[anom]
        value += terms.mean()
        g = sigmoid(energy[anom]) * p[:, anom] - alpha * d_entropy[:, anom]
        grad[:, anom] = g / n_a
    if n_i:
        terms = np.logaddexp(0.0, -energy[inl]) + sign * alpha * entropy[inl]
        value += terms.mean()
        g = -sigmoid(-energy[inl]) * p[:, inl] + sign * alpha * d_entropy[:, inl]
        grad[:, inl] = g / n_i
    return LossResult(float(value), _unflatten(grad, shape))


def consistency_loss(logits, reference, mask) -> LossResult:
    """Inlier-pixel consistency against a frozen reference prediction.

    value = sum over inlier pixels of
        CE(ref, pred) + KL(ref || pred) + (H(ref) - H(pred))^2

    where distributions are per-pixel softmaxes. The gradient flows only
    through `logits`; anomaly and void pixels contribute 0.
    """
    z, m, shape = _flatten_batch(logits, mask)
    z_ref, m_ref, _ = _flatten_batch(reference, mask)
    if z_ref.shape != z.shape:
        raise ValueError(
            f"reference shape {z_ref.shape} does not match logits {z.shape}"
        )
    del m_ref

    inl = m == LABEL_INLIER
    grad = np.zeros_like(z)
    if not inl.any():
        return LossResult(0.0, _unflatten(grad, shape))

    p_hat, logp_hat, _, h_hat, _ = _softmax_stats(z[:, inl])
    p_ref, logp_ref, _, h_ref, _ = _softmax_stats(z_ref[:, inl])

    ce = -(p_ref * logp_hat).sum(axis=0)
    kl = (p_ref * (logp_ref - logp_hat)).sum(axis=0)
    mse = (h_ref - h_hat) ** 2
    value = float((ce + kl + mse).sum())

    # d(CE + KL)/dz = 2 (p_hat - p_ref); dMSE/dz = 2 (h_ref - h_hat) * (-dH/dz)
    g = 2.0 * (p_hat - p_ref) + 2.0 * (h_ref - h_hat) * p_hat * (logp_hat + h_hat)
    grad[:, inl] = g
    return LossResult(value, _unflatten(grad, shape))


def linear_energy_loss(logits, mask) -> LossResult:
    """Difference-of-means energy baseline.

    value = mean over anomaly pixels of E - mean over inlier pixels of E;
    empty groups contribute 0.
    """
    z, m, shape = _flatten_batch(logits, mask)
    anom = m == LABEL_ANOMALY
    inl = m == LABEL_INLIER
    n_a = int(anom.sum())
    n_i = int(inl.sum())
    if n_a + n_i == 0:
        raise ValueError("all pixels are void")

    p, _, energy, _, _ = _softmax_stats(z)
    value = 0.0
    grad = np.zeros_like(z)
    if n_a:
        value += energy[anom].mean()
        grad[:, anom] = p[:, anom] / n_a
    if n_i:
        value -= energy[inl].mean()
        grad[:, inl] = -p[:, inl] / n_i
    return LossResult(float(value), _unflatten(grad, shape))


def compose_total(terms: Iterable[Tuple[LossResult, float]]) -> LossResult:
    """Weighted sum of loss terms: value and gradient combine linearly."""
    value = 0.0
    grad = None
    for result, weight in terms:
        value += weight * result.value
        if result.grad is None:
            continue
        if grad is None:
            grad = weight * np.asarray(result.grad, dtype=np.float64)
        else:
            if result.grad.shape != grad.shape:
                raise ValueError(
                    f"gradient shape mismatch: {result.grad.shape} vs {grad.shape}"
                )
            grad = grad + weight * result.grad
    return LossResult(float(value), grad)


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], LossResult],
    instance: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max relative error between the analytic and central-difference gradient.

    Relative error per element: |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    Raises if the loss is non-finite at any perturbed point.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x0 = np.array(instance, dtype=np.float64)
    analytic = loss_fn(x0).grad
    if analytic is None:
        raise ValueError("loss_fn returned no gradient")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise ValueError(
            f"gradient shape {analytic.shape} does not match instance {x0.shape}"
        )

    fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn(x0).value
        flat[i] = orig - step
        down = loss_fn(x0).value
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"non-finite loss at perturbed element {i}")
        fd_flat[i] = (up - down) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(fd))
    return float((np.abs(analytic - fd) / denom).max())
