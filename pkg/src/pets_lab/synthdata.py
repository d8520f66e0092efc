"""Synthetic detection scenes, a parametric "fog" domain shift, and augmentations.

A scene is a handful of boxes whose centers sit close to cell centers of a
``G x G`` grid. Rendering stamps two things per object: its class prototype,
scaled by a broad separable raised-cosine bump that peaks at the object center
and reaches zero one cell beyond the box edge, and a shared center marker
scaled by a narrow bump that is non-negligible only in the center cell. Fog
blends the clean map towards a constant haze and adds sensor noise::

    fogged = (1 - fog_level) * clean + haze_bias + N(0, noise_sigma^2)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from pets_lab.boxes import BoxRect, iou

# (fog_level, haze_bias, noise_sigma)
FOG_PRESETS: dict[str, tuple[float, float, float]] = {
    "source": (0.0, 0.0, 0.0),
    "fog_0.3": (0.3, 0.05, 0.0625),
    "fog_0.45": (0.45, 0.075, 0.09375),
    "fog_0.6": (0.6, 0.1, 0.125),
}


@dataclass(frozen=True)
class Scene:
    """Ground truth of one image; ``contrast`` scales each object's signal."""

    objects: tuple[tuple[BoxRect, int], ...]
    image_id: int = 0
    contrast: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.contrast is not None and len(self.contrast) != len(self.objects):
            raise ValueError("need one contrast value per object")

    def object_contrast(self, k: int) -> float:
        return 1.0 if self.contrast is None else self.contrast[k]

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_id": self.image_id,
                "objects": [
                    {"class_id": c, "box": list(b.as_tuple()), "contrast": self.object_contrast(k)}
                    for k, (b, c) in enumerate(self.objects)
                ],
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Scene":
        raw = json.loads(line)
        objects = tuple((BoxRect(*o["box"]), int(o["class_id"])) for o in raw["objects"])
        contrast = tuple(float(o.get("contrast", 1.0)) for o in raw["objects"])
        return cls(objects, int(raw["image_id"]), contrast)

    def hflip(self) -> "Scene":
        return Scene(tuple((b.hflip(), c) for b, c in self.objects), self.image_id, self.contrast)


@dataclass(frozen=True)
class DomainConfig:
    fog_level: float = 0.0
    noise_sigma: float = 0.0
    haze_bias: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.fog_level <= 1.0:
            raise ValueError("fog_level must lie in [0, 1]")
        if self.noise_sigma < 0 or self.haze_bias < 0:
            raise ValueError("noise_sigma and haze_bias must be non-negative")

    @classmethod
    def preset(cls, name: str) -> "DomainConfig":
        try:
            fog, haze, sigma = FOG_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown fog preset {name!r}; choose from {sorted(FOG_PRESETS)}") from None
        return cls(fog_level=fog, noise_sigma=sigma, haze_bias=haze)


@dataclass(frozen=True)
class WeakAug:
    flip_prob: float = 0.5
    jitter_sigma: float = 0.02


@dataclass(frozen=True)
class StrongAug:
    erase_prob: float = 0.5
    erase_max_frac: float = 0.15
    erase_min_frac: float = 0.02
    erase_ratio: tuple[float, float] = (0.5, 2.0)
    noise_sigma: float = 0.05
    channel_scale_range: tuple[float, float] = (0.8, 1.2)


@dataclass(frozen=True)
class AugConfig:
    weak: WeakAug = field(default_factory=WeakAug)
    strong: StrongAug = field(default_factory=StrongAug)

    def __post_init__(self) -> None:
        for p in (self.weak.flip_prob, self.strong.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("augmentation probabilities must lie in [0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "AugConfig":
        strong = dict(raw.get("strong", {}))
        for key in ("erase_ratio", "channel_scale_range"):
            if key in strong:
                strong[key] = tuple(strong[key])
        return cls(WeakAug(**raw.get("weak", {})), StrongAug(**strong))

    def to_dict(self) -> dict:
        return asdict(self)


def make_prototypes(K: int, C: int, seed: int, norm: float = 1.0) -> np.ndarray:
    """Signatures in R^C, shape (K + 1, C): K class rows, then the center marker.

    Rows are orthonormal when C > K; otherwise they are random unit vectors.
    """
    rng = np.random.default_rng(seed)
    n = K + 1
    raw = rng.normal(size=(C, max(n, C)))
    if C >= n:
        q, _ = np.linalg.qr(raw[:, :n])
        protos = q.T.copy()
    else:
        protos = raw[:, :n].T.copy()
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return norm * protos


def generate_scene(
    rng: np.random.Generator,
    K: int,
    max_objects: int,
    G: int,
    image_id: int = 0,
    size_cells: tuple[float, float] = (2.5, 3.5),
    center_jitter: float = 0.15,
    contrast_range: tuple[float, float] = (1.0, 1.0),
    max_pair_iou: float = 0.3,
    budget: int = 200,
) -> Scene:
    """Sample 1..max_objects non-overlapping boxes.

    Box sides are drawn in cell units from ``size_cells``; centers are a cell
    center plus a uniform jitter of at most ``center_jitter`` cells. Each object
    owns a distinct center cell and every pair has IoU below ``max_pair_iou``.
    Object contrast is log-uniform over ``contrast_range``. If the rejection
    budget runs out the scene is retried with one object less.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if max_objects < 1:
        raise ValueError("max_objects must be >= 1")
    if min(size_cells) < 2.0:
        raise ValueError("box sides must span at least two cells")
    target = int(rng.integers(1, max_objects + 1))
    while target >= 1:
        objects: list[tuple[BoxRect, int]] = []
        cells: set[tuple[int, int]] = set()
        tries = 0
        while len(objects) < target and tries < budget:
            tries += 1
            w = rng.uniform(*size_cells) / G
            h = rng.uniform(*size_cells) / G
            cls = int(rng.integers(0, K))
            col = int(rng.integers(0, G))
            row = int(rng.integers(0, G))
            cx = (col + 0.5 + rng.uniform(-center_jitter, center_jitter)) / G
            cy = (row + 0.5 + rng.uniform(-center_jitter, center_jitter)) / G
            x1, x2, y1, y2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
            if x1 < 0 or y1 < 0 or x2 > 1 or y2 > 1 or (row, col) in cells:
                continue
            box = BoxRect(x1, y1, x2, y2)
            if any(iou(box, other) >= max_pair_iou for other, _ in objects):
                continue
            objects.append((box, cls))
            cells.add((row, col))
        if len(objects) == target:
            lo, hi = contrast_range
            contrast = tuple(float(c) for c in np.exp(rng.uniform(np.log(lo), np.log(hi), size=target)))
            return Scene(tuple(objects), image_id, contrast)
        target -= 1
    raise RuntimeError("could not place a single object; grid too small for the box sizes")


def _raised_cosine(t: np.ndarray) -> np.ndarray:
    return np.where(t < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(t, 1.0))), 0.0)


def _bump(box: BoxRect, G: int, reach_x: float, reach_y: float) -> np.ndarray:
    centers = (np.arange(G) + 0.5) / G
    cx, cy = box.center
    bx = _raised_cosine(np.abs(centers - cx) / reach_x)
    by = _raised_cosine(np.abs(centers - cy) / reach_y)
    return np.outer(by, bx)


def object_bump(box: BoxRect, G: int) -> np.ndarray:
    """Broad weight of one object at every cell center, shape (G, G)."""
    return _bump(box, G, 0.5 * (box.x2 - box.x1) + 1.0 / G, 0.5 * (box.y2 - box.y1) + 1.0 / G)


def center_bump(box: BoxRect, G: int) -> np.ndarray:
    """Narrow weight reaching zero one cell away from the object center."""
    return _bump(box, G, 1.0 / G, 1.0 / G)


def clean_features(scene: Scene, prototypes: np.ndarray, G: int) -> np.ndarray:
    fmap = np.zeros((G, G, prototypes.shape[1]))
    marker = prototypes[-1]
    for k, (box, cls) in enumerate(scene.objects):
        a = scene.object_contrast(k)
        fmap += (a * object_bump(box, G))[:, :, None] * prototypes[cls]
        fmap += (a * center_bump(box, G))[:, :, None] * marker
    return fmap


def apply_fog(clean: np.ndarray, domain: DomainConfig, rng: np.random.Generator | None) -> np.ndarray:
    out = (1.0 - domain.fog_level) * clean + domain.haze_bias
    if domain.noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy domains need an rng")
        out = out + rng.normal(0.0, domain.noise_sigma, size=out.shape)
    return out


def render_features(
    scene: Scene,
    domain: DomainConfig,
    rng: np.random.Generator | None,
    prototypes: np.ndarray,
    G: int,
) -> np.ndarray:
    return apply_fog(clean_features(scene, prototypes, G), domain, rng)


def weak_aug(
    fmap: np.ndarray,
    scene: Scene | None,
    rng: np.random.Generator,
    cfg: WeakAug,
) -> tuple[np.ndarray, Scene | None]:
    """Random horizontal flip plus Gaussian jitter; boxes follow the flip."""
    flip = rng.random() < cfg.flip_prob
    out = fmap[:, ::-1, :].copy() if flip else fmap.copy()
    if flip and scene is not None:
        scene = scene.hflip()
    if cfg.jitter_sigma > 0:
        out += rng.normal(0.0, cfg.jitter_sigma, size=out.shape)
    return out, scene


def strong_aug(fmap: np.ndarray, rng: np.random.Generator, cfg: StrongAug) -> np.ndarray:
    """Random erasing, additive noise and per-channel gain on top of a weak view.

    Label-preserving: the caller keeps the weak view's boxes.
    """
    out = fmap.copy()
    G_rows, G_cols = out.shape[:2]
    if rng.random() < cfg.erase_prob:
        frac = rng.uniform(cfg.erase_min_frac, cfg.erase_max_frac)
        ratio = np.exp(rng.uniform(np.log(cfg.erase_ratio[0]), np.log(cfg.erase_ratio[1])))
        area = frac * G_rows * G_cols
        eh = int(np.clip(round(np.sqrt(area * ratio)), 1, G_rows))
        # Width from the remaining area keeps the patch within the budget.
        ew = int(np.clip(np.floor(area / eh), 1, G_cols))
        r0 = int(rng.integers(0, G_rows - eh + 1))
        c0 = int(rng.integers(0, G_cols - ew + 1))
        out[r0 : r0 + eh, c0 : c0 + ew, :] = 0.0
    if cfg.noise_sigma > 0:
        out += rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    lo, hi = cfg.channel_scale_range
    if (lo, hi) != (1.0, 1.0):
        out *= rng.uniform(lo, hi, size=out.shape[-1])
    return out


def _seed_list(seed: int | Sequence[int]) -> list[int]:
    return [int(s) for s in np.atleast_1d(seed)]


def make_scenes(
    seed: int | Sequence[int], n: int, K: int, max_objects: int, G: int, start_id: int = 0, **kwargs
) -> list[Scene]:
    """Per-scene derived seeds keep each scene independent of the split size."""
    base = _seed_list(seed)
    return [
        generate_scene(
            np.random.default_rng(base + [start_id + i]), K, max_objects, G, image_id=start_id + i, **kwargs
        )
        for i in range(n)
    ]


def render_scenes(
    scenes: Sequence[Scene], domain: DomainConfig, seed: int | Sequence[int], prototypes: np.ndarray, G: int
) -> np.ndarray:
    """Render a stack of scenes, each with its own noise stream."""
    base = _seed_list(seed)
    return np.stack(
        [
            render_features(s, domain, np.random.default_rng(base + [s.image_id, 1]), prototypes, G)
            for s in scenes
        ]
    )


def write_manifest(scenes: Iterable[Scene], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(s.to_json() + "\n")


def read_manifest(path) -> list[Scene]:
    with open(path, encoding="utf-8") as fh:
        return [Scene.from_json(line) for line in fh if line.strip()]
