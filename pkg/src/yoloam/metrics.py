"""Detection metrics: greedy matching, all-points AP, mAP over IoU thresholds, F1, PR curves.

Inputs per image are a :class:`~yoloam.detector.Detections` and an array of
ground truths ``[M, 5]`` as (class, x1, y1, x2, y2) in pixels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Detections, box_iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
CONVENTIONS = {
    "ap": "all-points interpolated area under the precision envelope",
    "matching": "greedy by descending score, highest-IoU unmatched ground truth of the same class",
    "flops": "2*MACs of weighted layers; normalization, activation, pooling and elementwise ops excluded",
    "f1": "mean over classes, at the confidence threshold maximizing it",
}


def iou(a, b) -> float:
    """IoU of two xyxy boxes."""
    return float(box_iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 0.0 if s <= 0 else 2 * precision * recall / s


def match_class(dets: Sequence[Detections], gts: Sequence[np.ndarray], cls: int, iou_thresh: float) -> tuple:
    """Greedy matching for one class over all images.

    Returns (scores sorted descending, tp flags aligned with them, number of GT).
    """
    recs = []
    for img, d in enumerate(dets):
        sel = np.flatnonzero(np.asarray(d.classes) == cls)
        recs.extend((float(d.scores[k]), img, int(k)) for k in sel)
    recs.sort(key=lambda r: -r[0])  # stable: ties keep image/detection order
    gt_boxes = []
    n_gt = 0
    for g in gts:
        g = np.asarray(g, dtype=np.float64).reshape(-1, 5)
        b = g[g[:, 0] == cls, 1:5]
        gt_boxes.append(b)
        n_gt += len(b)
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    pair_iou = [box_iou_matrix(d.boxes, b) if len(b) else None for d, b in zip(dets, gt_boxes)]
    scores = np.array([r[0] for r in recs])
    tp = np.zeros(len(recs), dtype=bool)
    for k, (_, img, j) in enumerate(recs):
        if pair_iou[img] is None:
            continue
        ious = pair_iou[img][j].copy()
        ious[used[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            tp[k] = True
            used[img][best] = True
    return scores, tp, n_gt


def ap_from_matches(tp: np.ndarray, n_gt: int) -> float:
    """All-points AP from score-ordered TP flags; NaN when there is nothing to score."""
    if n_gt == 0:
        return float("nan") if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def average_precision(dets, gts, cls: int, iou_thresh: float = 0.5) -> float:
    _, tp, n_gt = match_class(dets, gts, cls, iou_thresh)
    return ap_from_matches(tp, n_gt)


def pr_curve(dets, gts, cls: int, iou_thresh: float = 0.5) -> np.ndarray:
    """Points (score, recall, precision) at each detection rank."""
    scores, tp, n_gt = match_class(dets, gts, cls, iou_thresh)
    if len(tp) == 0:
        return np.zeros((0, 3))
    ctp = np.cumsum(tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.arange(1, len(tp) + 1)
    return np.stack([scores, recall, precision], axis=1)


def _classes_present(dets, gts, num_classes: int | None) -> list:
    seen = set()
    for d in dets:
        seen.update(int(c) for c in np.asarray(d.classes))
    for g in gts:
        seen.update(int(c) for c in np.asarray(g).reshape(-1, 5)[:, 0])
    if num_classes is not None:
        seen = {c for c in seen if c < num_classes}
    return sorted(seen)


def mean_ap(dets, gts, iou_thresh: float = 0.5, num_classes: int | None = None) -> tuple:
    """(mAP, {class: AP}) over classes with any GT or detection."""
    per = {}
    for c in _classes_present(dets, gts, num_classes):
        ap = average_precision(dets, gts, c, iou_thresh)
        if not np.isnan(ap):
            per[c] = ap
    return (float(np.mean(list(per.values()))) if per else float("nan")), per


def map50_95(dets, gts, num_classes: int | None = None) -> float:
    vals = [mean_ap(dets, gts, t, num_classes)[0] for t in IOU_THRESHOLDS]
    return float(np.mean(vals))


def best_f1(dets, gts, num_classes: int | None = None, iou_thresh: float = 0.5) -> tuple:
    """Sweep confidence thresholds; return (f1, precision, recall, threshold) maximizing mean-class F1."""
    classes = _classes_present(dets, gts, num_classes)
    if not classes:
        return 0.0, 0.0, 0.0, 0.0
    matched = {c: match_class(dets, gts, c, iou_thresh) for c in classes}
    thresholds = sorted({float(s) for sc, _, _ in matched.values() for s in sc}, reverse=True)
    best = (0.0, 0.0, 0.0, 0.0)
    for t in thresholds:
        f1s, ps, rs = [], [], []
        for scores, tp, n_gt in matched.values():
            k = int(np.sum(scores >= t))
            ntp = int(tp[:k].sum())
            p = ntp / k if k else 0.0
            r = ntp / n_gt if n_gt else 0.0
            f1s.append(f1_score(p, r))
            ps.append(p)
            rs.append(r)
        f = float(np.mean(f1s))
        if f > best[0]:
            best = (f, float(np.mean(ps)), float(np.mean(rs)), t)
    return best


@dataclass
class EvalReport:
    ap50: dict
    map50: float
    map50_95: float
    f1: float
    precision: float
    recall: float
    conf_threshold: float
    params: int = 0
    flops: int = 0
    input_size: int = 0
    inference_ms: float = float("nan")
    num_images: int = 0
    pr_curves: dict = field(default_factory=dict, repr=False)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def __post_init__(self):
        for name in ("map50", "map50_95", "f1"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("pr_curves")
        d["ap50"] = {str(k): v for k, v in self.ap50.items()}
        return d

    def to_text(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def write(self, path, curves_dir=None) -> None:
        Path(path).write_text(self.to_text())
        if curves_dir is not None:
            write_pr_curves(self.pr_curves, curves_dir)


def write_pr_curves(curves: dict, directory) -> None:
    """One CSV per class: score,recall,precision."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c, pts in curves.items():
        lines = ["score,recall,precision"] + [f"{s:.6f},{r:.6f},{p:.6f}" for s, r, p in np.asarray(pts)]
        (directory / f"pr_class{c}.csv").write_text("\n".join(lines) + "\n")


def evaluate(dets, gts, num_classes: int | None = None, **extra) -> EvalReport:
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} prediction sets for {len(gts)} images")
    m50, per = mean_ap(dets, gts, 0.5, num_classes)
    f1, p, r, t = best_f1(dets, gts, num_classes)
    curves = {c: pr_curve(dets, gts, c, 0.5) for c in _classes_present(dets, gts, num_classes)}
    return EvalReport(
        ap50=per,
        map50=0.0 if np.isnan(m50) else m50,
        map50_95=0.0 if np.isnan(m50) else map50_95(dets, gts, num_classes),
        f1=f1,
        precision=p,
        recall=r,
        conf_threshold=t,
        num_images=len(dets),
        pr_curves=curves,
        **extra,
    )
