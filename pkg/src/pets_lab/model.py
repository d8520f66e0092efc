"""A two-head, shared-weight grid detector with a hand-written backward pass.

Every cell of a ``G x G`` feature map is processed independently by the same
small network::

    hidden  = relu(W0 f + b0)                       (skipped when H == 0)
    head A  = WA hidden + bA -> (o, dx, dy, dw, dh)  proposal analog
    head B  = WB [hidden, sigmoid(o)] + bB -> (z_0..z_{K-1}, rx, ry, rw, rh)

The loss has the four-term anatomy of a two-stage detector: objectness BCE and
coarse-box smooth-L1 for head A, class cross-entropy and refined-box smooth-L1
for head B. Offsets are expressed in cell units against the cell anchor:
``(cx*G - (j + .5), cy*G - (i + .5), log(w*G), log(h*G))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pets_lab.boxes import BoxRect, Detection

_MAX_LOG_SIZE = 5.0


@dataclass(frozen=True)
class Arch:
    G: int = 12
    C: int = 8
    K: int = 3
    H: int = 16

    @property
    def trunk_width(self) -> int:
        return self.H if self.H > 0 else self.C

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        D = self.trunk_width
        out: list[tuple[str, tuple[int, ...]]] = []
        if self.H > 0:
            out += [("W0", (self.H, self.C)), ("b0", (self.H,))]
        out += [
            ("WA", (5, D)),
            ("bA", (5,)),
            ("WB", (self.K + 4, D + 1)),
            ("bB", (self.K + 4,)),
        ]
        return out

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 1 or params.size != self.num_params:
            raise ValueError(
                f"parameter vector has shape {params.shape}, architecture {self} needs {self.num_params}"
            )
        views, offset = {}, 0
        for name, shape in self.shapes():
            n = int(np.prod(shape))
            views[name] = params[offset : offset + n].reshape(shape)
            offset += n
        return views

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[name], dtype=np.float64).ravel() for name, _ in self.shapes()])


def init_params(arch: Arch, rng: np.random.Generator, scale: float = 0.3) -> np.ndarray:
    """He-style random weights, zero biases."""
    parts = {}
    for name, shape in arch.shapes():
        if name.startswith("W"):
            parts[name] = rng.normal(0.0, scale * np.sqrt(2.0 / shape[1]), size=shape)
        else:
            parts[name] = np.zeros(shape)
    return arch.pack(parts)


@dataclass
class CellPredictions:
    """Head outputs with leading batch/grid axes ``(..., G, G)``."""

    objectness: np.ndarray  # (..., G, G)
    coarse: np.ndarray  # (..., G, G, 4)
    class_logits: np.ndarray  # (..., G, G, K)
    refine: np.ndarray  # (..., G, G, 4)

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.objectness.shape


@dataclass
class CellTargets:
    positive: np.ndarray  # (..., G, G) bool
    class_id: np.ndarray  # (..., G, G) int, -1 on negatives
    coarse: np.ndarray  # (..., G, G, 4), zero on negatives
    refine: np.ndarray  # (..., G, G, 4)


@dataclass(frozen=True)
class LossBreakdown:
    rpn_cls: float
    rpn_reg: float
    roi_cls: float
    roi_reg: float

    @property
    def total(self) -> float:
        return self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_fmap(arch: Arch, fmap: np.ndarray) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.shape[-3:] != (arch.G, arch.G, arch.C):
        raise ValueError(f"feature map shape {fmap.shape} does not end in {(arch.G, arch.G, arch.C)}")
    return fmap


def _forward_flat(p: dict[str, np.ndarray], x: np.ndarray, arch: Arch) -> dict[str, np.ndarray]:
    cache = {"x": x}
    if arch.H > 0:
        a0 = x @ p["W0"].T + p["b0"]
        cache["a0"] = a0
        h = np.maximum(a0, 0.0)
    else:
        h = x
    cache["h"] = h
    head_a = h @ p["WA"].T + p["bA"]
    s = sigmoid(head_a[:, 0])
    u = np.concatenate([h, s[:, None]], axis=1)
    head_b = u @ p["WB"].T + p["bB"]
    cache.update(head_a=head_a, s=s, u=u, head_b=head_b)
    return cache


def _to_predictions(cache: dict[str, np.ndarray], lead: tuple[int, ...], K: int) -> CellPredictions:
    a, b = cache["head_a"], cache["head_b"]
    return CellPredictions(
        objectness=a[:, 0].reshape(lead),
        coarse=a[:, 1:5].reshape(lead + (4,)),
        class_logits=b[:, :K].reshape(lead + (K,)),
        refine=b[:, K:].reshape(lead + (4,)),
    )


def forward(params: np.ndarray, fmap: np.ndarray, arch: Arch) -> CellPredictions:
    p = arch.unpack(params)
    fmap = _check_fmap(arch, fmap)
    lead = fmap.shape[:-1]
    cache = _forward_flat(p, fmap.reshape(-1, arch.C), arch)
    return _to_predictions(cache, lead, arch.K)


def encode_box(box: BoxRect, G: int) -> tuple[int, int, np.ndarray]:
    """Return (row, col, offsets) of the cell holding the box center."""
    cx, cy = box.center
    col = min(int(np.floor(cx * G)), G - 1)
    row = min(int(np.floor(cy * G)), G - 1)
    offsets = np.array(
        [
            cx * G - (col + 0.5),
            cy * G - (row + 0.5),
            np.log((box.x2 - box.x1) * G),
            np.log((box.y2 - box.y1) * G),
        ]
    )
    return row, col, offsets


def assign_targets(labels: Sequence[tuple[BoxRect, int]], G: int) -> CellTargets:
    """Mark the cell holding each box center as positive.

    When two boxes share a cell the first listed wins, so callers pass pseudo
    labels sorted by confidence.
    """
    positive = np.zeros((G, G), dtype=bool)
    class_id = np.full((G, G), -1, dtype=np.int64)
    offsets = np.zeros((G, G, 4))
    for box, cls in labels:
        row, col, off = encode_box(box, G)
        if positive[row, col]:
            continue
        positive[row, col] = True
        class_id[row, col] = cls
        offsets[row, col] = off
    return CellTargets(positive, class_id, offsets, offsets.copy())


def stack_targets(targets: Sequence[CellTargets]) -> CellTargets:
    return CellTargets(
        positive=np.stack([t.positive for t in targets]),
        class_id=np.stack([t.class_id for t in targets]),
        coarse=np.stack([t.coarse for t in targets]),
        refine=np.stack([t.refine for t in targets]),
    )


def _smooth_l1(d: np.ndarray) -> np.ndarray:
    ad = np.abs(d)
    return np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)


def _smooth_l1_grad(d: np.ndarray) -> np.ndarray:
    return np.clip(d, -1.0, 1.0)


def _bce_with_logits(o: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(o, 0.0) - o * y + np.log1p(np.exp(-np.abs(o)))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def _check_shapes(preds: CellPredictions, targets: CellTargets) -> None:
    if preds.objectness.shape != targets.positive.shape:
        raise ValueError(
            f"prediction grid {preds.objectness.shape} does not match targets {targets.positive.shape}"
        )


def detection_loss(preds: CellPredictions, targets: CellTargets) -> LossBreakdown:
    """Four-term detection loss.

    Objectness BCE is averaged over every cell; the other three terms are
    averaged over positive cells (smooth-L1 summed over the four offsets) and
    are zero when there are none.
    """
    _check_shapes(preds, targets)
    pos = targets.positive
    y = pos.astype(np.float64)
    rpn_cls = float(_bce_with_logits(preds.objectness, y).mean())
    npos = int(pos.sum())
    if npos == 0:
        return LossBreakdown(rpn_cls, 0.0, 0.0, 0.0)
    rpn_reg = float(_smooth_l1(preds.coarse[pos] - targets.coarse[pos]).sum() / npos)
    logp = _log_softmax(preds.class_logits[pos])
    roi_cls = float(-logp[np.arange(npos), targets.class_id[pos]].sum() / npos)
    roi_reg = float(_smooth_l1(preds.refine[pos] - targets.refine[pos]).sum() / npos)
    return LossBreakdown(rpn_cls, rpn_reg, roi_cls, roi_reg)


def loss_and_gradient(
    params: np.ndarray, fmap: np.ndarray, targets: CellTargets, arch: Arch
) -> tuple[LossBreakdown, np.ndarray]:
    p = arch.unpack(params)
    fmap = _check_fmap(arch, fmap)
    lead = fmap.shape[:-1]
    if targets.positive.shape != lead:
        raise ValueError(f"targets grid {targets.positive.shape} does not match feature map {lead}")
    x = fmap.reshape(-1, arch.C)
    cache = _forward_flat(p, x, arch)
    preds = _to_predictions(cache, lead, arch.K)
    loss = detection_loss(preds, targets)

    K, D = arch.K, arch.trunk_width
    n = x.shape[0]
    pos = targets.positive.reshape(-1)
    npos = int(pos.sum())
    head_a, head_b, s, u, h = cache["head_a"], cache["head_b"], cache["s"], cache["u"], cache["h"]

    d_head_a = np.zeros_like(head_a)
    d_head_b = np.zeros_like(head_b)
    d_head_a[:, 0] = (s - pos) / n
    if npos:
        cls = targets.class_id.reshape(-1)[pos]
        d_head_a[pos, 1:5] = _smooth_l1_grad(head_a[pos, 1:5] - targets.coarse.reshape(-1, 4)[pos]) / npos
        probs = softmax(head_b[pos, :K])
        probs[np.arange(npos), cls] -= 1.0
        d_head_b[pos, :K] = probs / npos
        d_head_b[pos, K:] = _smooth_l1_grad(head_b[pos, K:] - targets.refine.reshape(-1, 4)[pos]) / npos

    grads = {
        "WB": d_head_b.T @ u,
        "bB": d_head_b.sum(axis=0),
    }
    du = d_head_b @ p["WB"]
    # sigmoid(o) feeds head B, so ROI terms also reach the objectness logit.
    d_head_a[:, 0] += du[:, D] * s * (1.0 - s)
    grads["WA"] = d_head_a.T @ h
    grads["bA"] = d_head_a.sum(axis=0)
    dh = d_head_a @ p["WA"] + du[:, :D]
    if arch.H > 0:
        da0 = dh * (cache["a0"] > 0.0)
        grads["W0"] = da0.T @ x
        grads["b0"] = da0.sum(axis=0)
    return loss, arch.pack(grads)


def loss_gradient(params: np.ndarray, fmap: np.ndarray, targets: CellTargets, arch: Arch) -> np.ndarray:
    return loss_and_gradient(params, fmap, targets, arch)[1]


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"params {params.shape} and grad {grad.shape} differ")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return params - lr * grad


def decode(preds: CellPredictions, obj_thresh: float) -> list[Detection]:
    """Turn one image's cell predictions into detections (NMS left to the caller)."""
    G = preds.objectness.shape[-1]
    if preds.objectness.shape != (G, G):
        raise ValueError("decode expects predictions for a single image")
    obj = sigmoid(preds.objectness)
    rows, cols = np.nonzero(obj >= obj_thresh)
    if rows.size == 0:
        return []
    probs = softmax(preds.class_logits[rows, cols])
    cls = probs.argmax(axis=1)
    conf = obj[rows, cols] * probs.max(axis=1)
    r = preds.refine[rows, cols]
    cx = (cols + 0.5 + r[:, 0]) / G
    cy = (rows + 0.5 + r[:, 1]) / G
    w = np.exp(np.clip(r[:, 2], -_MAX_LOG_SIZE, _MAX_LOG_SIZE)) / G
    h = np.exp(np.clip(r[:, 3], -_MAX_LOG_SIZE, _MAX_LOG_SIZE)) / G
    x1 = np.clip(cx - 0.5 * w, 0.0, 1.0)
    x2 = np.clip(cx + 0.5 * w, 0.0, 1.0)
    y1 = np.clip(cy - 0.5 * h, 0.0, 1.0)
    y2 = np.clip(cy + 0.5 * h, 0.0, 1.0)
    out = []
    for k in range(rows.size):
        if x2[k] - x1[k] <= 1e-9 or y2[k] - y1[k] <= 1e-9:
            continue
        box = BoxRect(float(x1[k]), float(y1[k]), float(x2[k]), float(y2[k]))
        out.append(Detection(box, int(cls[k]), float(min(max(conf[k], 0.0), 1.0))))
    return out
