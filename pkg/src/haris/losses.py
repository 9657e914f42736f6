"""Focal + dice training loss and IoU / Pr@X evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from haris.tensor import ContractError, DimensionError, Tensor, add, as_tensor, custom_op, stable_sigmoid

LOG_CLAMP = 1e-12
DICE_EPS = 1.0
PR_THRESHOLDS = (70, 80, 90)


@dataclass
class LossBreakdown:
    focal: float
    dice: float
    total: float


def _check_target(logits: Tensor, target) -> np.ndarray:
    t = np.asarray(target)
    if t.shape != logits.shape:
        raise DimensionError(f"loss: logits {logits.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("loss: target must be binary (0/1)")
    return t.astype(np.float64)


def _log_sigmoid(u: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -u)


def focal_loss(logits, target, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean over pixels of ``-alpha_t (1 - p_t)^gamma log p_t`` (log clamped at 1e-12)."""
    z = as_tensor(logits)
    t = _check_target(z, target)
    sgn = 2.0 * t - 1.0
    u = sgn * z.data
    p_t = stable_sigmoid(u)
    q_t = stable_sigmoid(-u)  # 1 - p_t without cancellation
    log_p = _log_sigmoid(u)
    clamped = log_p < np.log(LOG_CLAMP)
    log_p = np.where(clamped, np.log(LOG_CLAMP), log_p)
    alpha_t = np.where(t == 1, alpha, 1.0 - alpha)
    mod = q_t ** gamma
    per_pixel = -alpha_t * mod * log_p
    size = per_pixel.size

    def vjp(g, n):
        # d/du of -(1-p)^gamma log p, with log p frozen where clamped
        d = gamma * mod * p_t * log_p - np.where(clamped, 0.0, mod * q_t)
        return (float(g) * alpha_t * sgn * d / size,)

    return custom_op("focal_loss", per_pixel.mean(), (z,), vjp)


def dice_loss(logits, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``; a leading batch axis is averaged."""
    z = as_tensor(logits)
    t = _check_target(z, target)
    batched = z.ndim == 3
    zs = z.data if batched else z.data[None]
    ts = t if batched else t[None]
    p = stable_sigmoid(zs)
    axes = (1, 2)
    inter = (p * ts).sum(axis=axes)
    denom = p.sum(axis=axes) + ts.sum(axis=axes) + eps
    num = 2.0 * inter + eps
    per_sample = 1.0 - num / denom
    nb = per_sample.shape[0]

    def vjp(g, n):
        dp = -(2.0 * ts * denom[:, None, None] - num[:, None, None]) / (denom[:, None, None] ** 2)
        gz = float(g) / nb * dp * p * (1.0 - p)
        return (gz if batched else gz[0],)

    return custom_op("dice_loss", per_sample.mean(), (z,), vjp)


def total_loss(logits, target, gamma: float = 2.0, alpha: float = 0.25) -> tuple[Tensor, LossBreakdown]:
    f = focal_loss(logits, target, gamma, alpha)
    d = dice_loss(logits, target)
    tot = add(f, d)
    return tot, LossBreakdown(float(f.data), float(d.data), float(tot.data))


# ---------------------------------------------------------------- metrics


def binarize(logits) -> np.ndarray:
    """Foreground where logit >= 0 (probability >= 0.5); ties go to foreground."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data >= 0


def _counts(pred, gt) -> tuple[int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"iou: shapes {pred.shape} and {gt.shape} differ")
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt))


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    inter, union = _counts(pred, gt)
    return 1.0 if union == 0 else inter / union


@dataclass
class MetricsReport:
    mean_iou: float
    cumulative_iou: float
    pr_at: dict[int, float] = field(default_factory=dict)
    n_samples: int = 0

    CSV_HEADER = "n_samples,mean_iou,cumulative_iou,pr70,pr80,pr90"

    def csv_row(self) -> str:
        vals = [self.mean_iou, self.cumulative_iou] + [self.pr_at[x] for x in PR_THRESHOLDS]
        return ",".join([str(self.n_samples)] + [f"{v:.6f}" for v in vals])

    @classmethod
    def from_csv_row(cls, row: str) -> "MetricsReport":
        parts = row.strip().split(",")
        n, mean, cum, *prs = parts[-6:]
        return cls(float(mean), float(cum), dict(zip(PR_THRESHOLDS, map(float, prs))), int(n))


def aggregate_metrics(samples) -> MetricsReport:
    """Mean IoU, cumulative IoU and Pr@{70,80,90} (strictly exceeding) over (pred, gt) pairs."""
    samples = list(samples)
    if not samples:
        raise ContractError("aggregate_metrics needs at least one sample")
    ious = []
    total_inter = total_union = 0
    for pred, gt in samples:
        inter, union = _counts(pred, gt)
        total_inter += inter
        total_union += union
        ious.append(1.0 if union == 0 else inter / union)
    ious = np.asarray(ious)
    pr = {x: float(np.mean(ious > x / 100.0)) for x in PR_THRESHOLDS}
    cum = 1.0 if total_union == 0 else total_inter / total_union
    return MetricsReport(float(ious.mean()), cum, pr, len(samples))
