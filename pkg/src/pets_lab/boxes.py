"""Box geometry and the two-teacher consensus used to build pseudo labels.

Boxes are corner-format ``(x1, y1, x2, y2)`` rectangles normalized to the unit
square. Everything here is a pure function over small Python lists; the
detector emits at most a few dozen boxes per image, so numpy buys nothing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class BoxRect:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def hflip(self) -> "BoxRect":
        return BoxRect(1.0 - self.x2, self.y1, 1.0 - self.x1, self.y2)


@dataclass(frozen=True)
class Detection:
    box: BoxRect
    class_id: int
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class PseudoLabel:
    box: BoxRect
    class_id: int
    fused_confidence: float


@dataclass(frozen=True)
class ConsensusConfig:
    delta: float = 0.5
    eta: float = 0.5
    beta: float = 0.5
    nms_iou: float = 0.5

    def __post_init__(self) -> None:
        for name in ("delta", "eta", "beta", "nms_iou"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")


def iou(a: BoxRect, b: BoxRect) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def confidence_filter(dets: Sequence[Detection], delta: float) -> list[Detection]:
    return [d for d in dets if d.confidence >= delta]


def _nms_key(d: Detection) -> tuple[float, float, float]:
    return (-d.confidence, d.box.x1, d.box.y1)


def nms(dets: Sequence[Detection], nms_iou: float = 0.5) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    A detection survives iff its IoU with every already kept detection of the
    same class is below ``nms_iou``. Output is ordered by
    (confidence desc, x1 asc, y1 asc).
    """
    kept: list[Detection] = []
    kept_by_class: dict[int, list[BoxRect]] = {}
    for d in sorted(dets, key=_nms_key):
        same = kept_by_class.setdefault(d.class_id, [])
        if all(iou(d.box, k) < nms_iou for k in same):
            kept.append(d)
            same.append(d.box)
    return kept


def match_pairs(
    st: Sequence[Detection], dt: Sequence[Detection], eta: float
) -> list[tuple[Detection, Detection]]:
    """One-to-one greedy matching of static-teacher to dynamic-teacher boxes.

    Candidates are same-class cross pairs with IoU >= eta. They are accepted in
    order of IoU desc, confidence sum desc, then (i, j) index order; each
    detection is used at most once. Unmatched detections are dropped.
    """
    candidates = []
    for i, a in enumerate(st):
        for j, b in enumerate(dt):
            if a.class_id != b.class_id:
                continue
            overlap = iou(a.box, b.box)
            if overlap >= eta:
                candidates.append((-overlap, -(a.confidence + b.confidence), i, j))
    candidates.sort()
    used_st: set[int] = set()
    used_dt: set[int] = set()
    pairs = []
    for _, _, i, j in candidates:
        if i in used_st or j in used_dt:
            continue
        used_st.add(i)
        used_dt.add(j)
        pairs.append((st[i], dt[j]))
    return pairs


def wbf_fuse(
    st_cluster: Sequence[Detection], dt_cluster: Sequence[Detection], beta: float
) -> PseudoLabel:
    """Fuse the boxes two teachers predicted for one object.

    The box is the confidence-weighted mean of every input box, independent of
    ``beta``. The confidence mixes the per-teacher mean confidences,
    ``beta * mean(st) + (1 - beta) * mean(dt)``. The class is taken from the
    static teacher.
    """
    if not st_cluster or not dt_cluster:
        raise ValueError("wbf_fuse needs a non-empty cluster from each teacher")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta={beta} outside [0, 1]")
    class_id = st_cluster[0].class_id
    members = list(st_cluster) + list(dt_cluster)
    if any(d.class_id != class_id for d in members):
        raise ValueError("wbf_fuse clusters must share a single class")

    total = sum(d.confidence for d in members)
    if total <= 0.0:
        raise ValueError("wbf_fuse needs a positive total confidence")
    coords = [sum(d.confidence * d.box.as_tuple()[k] for d in members) / total for k in range(4)]
    # Rounding can push a convex combination a hair outside its inputs.
    for k in range(4):
        lo = min(d.box.as_tuple()[k] for d in members)
        hi = max(d.box.as_tuple()[k] for d in members)
        coords[k] = min(max(coords[k], lo), hi)

    st_mean = sum(d.confidence for d in st_cluster) / len(st_cluster)
    dt_mean = sum(d.confidence for d in dt_cluster) / len(dt_cluster)
    fused = beta * st_mean + (1.0 - beta) * dt_mean
    return PseudoLabel(BoxRect(*coords), class_id, min(max(fused, 0.0), 1.0))


def consensus(
    st_raw: Sequence[Detection], dt_raw: Sequence[Detection], cfg: ConsensusConfig
) -> list[PseudoLabel]:
    st = confidence_filter(nms(st_raw, cfg.nms_iou), cfg.delta)
    dt = confidence_filter(nms(dt_raw, cfg.nms_iou), cfg.delta)
    return [wbf_fuse([a], [b], cfg.beta) for a, b in match_pairs(st, dt, cfg.eta)]


def single_teacher_labels(raw: Sequence[Detection], cfg: ConsensusConfig) -> list[PseudoLabel]:
    """Pseudo labels from one teacher only (consensus bypass for ablations)."""
    kept = confidence_filter(nms(raw, cfg.nms_iou), cfg.delta)
    return [PseudoLabel(d.box, d.class_id, d.confidence) for d in kept]


def to_record(image_id: int | str, item: Detection | PseudoLabel) -> dict:
    conf = item.confidence if isinstance(item, Detection) else item.fused_confidence
    x1, y1, x2, y2 = item.box.as_tuple()
    return {
        "image_id": image_id,
        "class_id": item.class_id,
        "x1": x1,
        "y1": y1,
        "x2": x2,
        "y2": y2,
        "confidence": conf,
    }


def from_record(record: dict) -> tuple[int | str, Detection]:
    box = BoxRect(record["x1"], record["y1"], record["x2"], record["y2"])
    return record["image_id"], Detection(box, int(record["class_id"]), float(record["confidence"]))


def dumps_jsonl(rows: Iterable[tuple[int | str, Detection | PseudoLabel]]) -> str:
    return "".join(json.dumps(to_record(image_id, item)) + "\n" for image_id, item in rows)


def loads_jsonl(text: str) -> list[tuple[int | str, Detection]]:
    return [from_record(json.loads(line)) for line in text.splitlines() if line.strip()]
