"""Classification BCE, distribution focal loss, CIoU, and the composed detector loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .detector import RawPrediction, Targets, make_anchors
from .tensor import Tensor

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w: float = 1.0  # BCE element weight
    box: float = 7.5
    cls: float = 0.5
    dfl: float = 1.5

    def __post_init__(self):
        if min(self.w, self.box, self.cls, self.dfl) < 0:
            raise ValueError("loss weights must be nonnegative")


def bce(x: Tensor, y, w: float = 1.0, eps: float = EPS) -> Tensor:
    """Mean of ``-w [y log x + (1 - y) log(1 - x)]`` over probabilities clamped to [eps, 1-eps]."""
    x = T.clamp(T.as_tensor(x), eps, 1 - eps)
    y = np.asarray(y, dtype=x.dtype)
    ll = T.log(x) * y + T.log(1 - x) * (1 - y)
    return (ll * -w).mean()


def bce_with_logits(logits: Tensor, y: np.ndarray, w: float = 1.0) -> Tensor:
    """Elementwise BCE of ``sigmoid(logits)`` against ``y``, computed stably."""
    z = logits.data
    y = np.asarray(y, dtype=z.dtype)
    out = w * (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return T.core._make(out, (logits,), lambda g: (g * w * (T.core._sigmoid_np(z) - y),), "bce_logits")


def two_hot(y: np.ndarray, reg_max: int) -> np.ndarray:
    """Split continuous targets between the two adjacent bins, [..., reg_max]."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(y > reg_max - 1):
        raise ValueError(f"DFL target outside [0, {reg_max - 1}]")
    left = np.minimum(np.floor(y), reg_max - 2).astype(np.int64)
    wr = y - left
    out = np.zeros(y.shape + (reg_max,))
    np.put_along_axis(out, left[..., None], (1 - wr)[..., None], axis=-1)
    np.put_along_axis(out, left[..., None] + 1, wr[..., None], axis=-1)
    return out


def dfl(bin_probs: Tensor, y, eps: float = EPS) -> Tensor:
    """Distribution focal loss from bin probabilities, averaged over targets.

    ``-[(n+1-y) log p_n + (y-n) log p_{n+1}]`` with ``n = floor(y)``.
    """
    p = T.as_tensor(bin_probs)
    th = two_hot(y, p.shape[-1])
    logp = T.log(T.clamp(p, eps, None))
    return -(logp * th.astype(p.dtype)).sum(axis=-1).mean()


def dfl_from_logits(logits: Tensor, y) -> Tensor:
    """Per-target DFL from raw bin logits (softmax taken internally), shape [...]."""
    th = two_hot(y, logits.shape[-1]).astype(logits.dtype)
    return -(T.log_softmax(logits, axis=-1) * th).sum(axis=-1)


def _validate_boxes(b: np.ndarray, what: str) -> None:
    if np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1]):
        raise ValueError(f"degenerate {what} box (non-positive width or height)")


def ciou(box_p, box_gt, validate: bool = True, eps: float = 1e-9) -> Tensor:
    """Per-box CIoU loss ``1 - IoU + d^2/c^2 + v^2 / ((1 - IoU) + v)`` for xyxy boxes [..., 4].

    ``eps`` only guards the aspect-ratio fraction and box heights, so identical
    boxes give exactly zero.
    """
    p = T.as_tensor(box_p, dtype=np.float64) if not isinstance(box_p, Tensor) else box_p
    g = T.as_tensor(box_gt, dtype=p.dtype)
    if validate:
        _validate_boxes(p.data, "predicted")
        _validate_boxes(g.data, "ground-truth")
    px1, py1, px2, py2 = (p[..., i] for i in range(4))
    gx1, gy1, gx2, gy2 = (g[..., i] for i in range(4))
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union
    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    chh = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c2 = cw * cw + chh * chh
    dx = ((px1 - gx1) + (px2 - gx2)) * 0.5
    dy = ((py1 - gy1) + (py2 - gy2)) * 0.5
    d2 = dx * dx + dy * dy
    dv = T.arctan(gw / (gh + eps)) - T.arctan(pw / (ph + eps))
    v = dv * dv * (4 / np.pi**2)
    return 1 - iou + d2 / c2 + v * v / ((1 - iou) + v + eps)


def total_loss(raw: RawPrediction, targets: Targets, weights: LossWeights = LossWeights(), reg_max: int | None = None):
    """Weighted sum of classification BCE over all cells and CIoU + DFL over positives.

    Each term is summed and divided by the positive count (at least 1).
    Returns ``(loss, {"box", "cls", "dfl"})`` with unweighted float terms.
    """
    reg_max = reg_max or raw.box[0].shape[1] // 4
    cls_t, box_t = raw.flat(reg_max)
    npos = max(targets.num_pos, 1)
    cls_loss = bce_with_logits(cls_t, targets.cls, weights.w).sum() / npos

    n_idx, a_idx = np.nonzero(targets.pos)
    if len(n_idx) == 0:
        zero = 0.0
        loss = cls_loss * weights.cls
        return loss, {"box": zero, "cls": cls_loss.item(), "dfl": zero}

    logits = box_t[n_idx, a_idx]  # [P, 4, reg_max]
    ltrb = targets.ltrb[n_idx, a_idx]
    dfl_loss = dfl_from_logits(logits, ltrb).mean(axis=1).sum() / npos

    input_size = raw.cls[0].shape[-1] * raw.strides[0]
    centers, st = make_anchors(input_size, raw.strides)
    s = st[a_idx][:, None]
    ctr = (centers[a_idx] / s).astype(logits.dtype)
    bins = Tensor(np.arange(reg_max, dtype=logits.dtype).reshape(1, 1, reg_max))
    dist = (T.softmax(logits, axis=-1) * bins).sum(axis=-1)  # [P, 4]
    cxy = Tensor(np.concatenate([ctr, ctr], axis=1))
    sign = Tensor(np.array([[-1.0, -1.0, 1.0, 1.0]], dtype=logits.dtype))
    pred = cxy + dist * sign
    gt = (targets.boxes[n_idx, a_idx] / s).astype(logits.dtype)
    box_loss = ciou(pred, gt, validate=False).sum() / npos

    loss = box_loss * weights.box + cls_loss * weights.cls + dfl_loss * weights.dfl
    return loss, {"box": box_loss.item(), "cls": cls_loss.item(), "dfl": dfl_loss.item()}
