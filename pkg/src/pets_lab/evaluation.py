"""PASCAL-style detection evaluation: greedy TP/FP flagging and all-points AP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from pets_lab.boxes import BoxRect, Detection, iou


@dataclass(frozen=True)
class EvalReport:
    per_class_ap: dict[int, float]
    map50: float

    def to_dict(self) -> dict:
        return {"per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())}, "map50": self.map50}

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls({int(k): float(v) for k, v in raw["per_class_ap"].items()}, float(raw["map50"]))


def _det_order(d: Detection) -> tuple[float, float]:
    return (-d.confidence, d.box.x1)


def flag_tp_fp(
    dets: Sequence[Detection], gts: Sequence[tuple[BoxRect, int]], iou_thresh: float = 0.5
) -> list[tuple[Detection, bool]]:
    """Flag each detection of one image as true or false positive.

    Detections are visited by confidence (ties by x1). Each one claims the
    unmatched same-class ground truth it overlaps most; it is a TP iff that
    overlap reaches ``iou_thresh``.
    """
    matched = [False] * len(gts)
    out = []
    for d in sorted(dets, key=_det_order):
        best, best_iou = -1, 0.0
        for k, (gbox, gcls) in enumerate(gts):
            if matched[k] or gcls != d.class_id:
                continue
            overlap = iou(d.box, gbox)
            if overlap > best_iou:
                best, best_iou = k, overlap
        hit = best >= 0 and best_iou >= iou_thresh
        if hit:
            matched[best] = True
        out.append((d, hit))
    return out


def average_precision(flags: Sequence[tuple[float, bool]], num_gt: int) -> float:
    """Area under the precision envelope of the confidence-ranked flags.

    Ties in confidence keep their input order.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0 or not flags:
        return 0.0
    order = sorted(range(len(flags)), key=lambda i: -flags[i][0])
    tp = np.array([1.0 if flags[i][1] else 0.0 for i in order])
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def evaluate(
    dets_by_image: Mapping[object, Sequence[Detection]],
    gts_by_image: Mapping[object, Sequence[tuple[BoxRect, int]]],
    iou_thresh: float = 0.5,
) -> EvalReport:
    """Per-class AP and their mean over classes present in the ground truth."""
    num_gt: dict[int, int] = {}
    for gts in gts_by_image.values():
        for _, cls in gts:
            num_gt[cls] = num_gt.get(cls, 0) + 1

    pooled: dict[int, list[tuple[Detection, bool]]] = {}
    for image_id, dets in dets_by_image.items():
        for d, hit in flag_tp_fp(dets, gts_by_image.get(image_id, ()), iou_thresh):
            pooled.setdefault(d.class_id, []).append((d, hit))

    per_class = {}
    for cls, n in sorted(num_gt.items()):
        flagged = sorted(pooled.get(cls, []), key=lambda item: _det_order(item[0]))
        per_class[cls] = average_precision([(d.confidence, hit) for d, hit in flagged], n)
    map50 = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(per_class, map50)
