"""Synthetic weakly-labeled shape datasets with exact pixel ground truth.

Images carry 1-3 colored shapes from distinct classes over a noisy
background; the per-pixel mask is known by construction, so seed quality can
be scored without any manual annotation.  Each sample is a pure function of
its seed and the generator config.

The default four classes are disk, rectangle, triangle, and ring, chosen for
distinct low-order moments.  With ``discriminative_parts`` each shape gets a
small high-contrast marker so a classifier can succeed while attending to a
tiny sub-region; with ``distinct_colors`` off, all classes share one color
and only geometry separates them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cam import BACKGROUND, IGNORE, SeedMap
from .seeding import rng_from

SHAPE_NAMES = ("disk", "rectangle", "triangle", "ring")

_CLASS_COLORS = np.array([
    [0.85, 0.25, 0.25],   # disk
    [0.25, 0.75, 0.30],   # rectangle
    [0.30, 0.40, 0.85],   # triangle
    [0.80, 0.78, 0.25],   # ring
])
_SHARED_COLOR = np.array([0.70, 0.70, 0.70])
_MARKER_COLOR = np.array([1.0, 1.0, 1.0])


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 3
    min_radius: int = 7
    max_radius: int = 13
    bg_level: float = 0.25
    noise_sigma: float = 0.03
    discriminative_parts: bool = True
    distinct_colors: bool = True
    n_train: int = 500
    n_eval: int = 50

    def validate(self) -> None:
        if not 1 <= self.num_classes <= len(SHAPE_NAMES):
            raise ValueError(
                f"num_classes must be in [1, {len(SHAPE_NAMES)}], got {self.num_classes}")
        if not 1 <= self.min_objects <= self.max_objects <= self.num_classes:
            raise ValueError(
                f"objects per image must satisfy 1 <= min <= max <= num_classes, "
                f"got [{self.min_objects}, {self.max_objects}]")
        if 2 * self.max_radius + 4 >= self.image_size:
            raise ValueError(
                f"shapes with radius {self.max_radius} do not fit a "
                f"{self.image_size}x{self.image_size} canvas")
        if self.min_radius < 3 or self.min_radius > self.max_radius:
            raise ValueError(
                f"radius range [{self.min_radius}, {self.max_radius}] is invalid")


@dataclass
class GroundTruthMask:
    """Per-pixel class labels; BACKGROUND everywhere no shape sits."""

    labels: np.ndarray  # (H, W) int16

    def pixels_of(self, class_id: int) -> int:
        return int(np.count_nonzero(self.labels == class_id))

    def present_classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels) if c >= 0)


@dataclass
class SyntheticSample:
    image: np.ndarray          # (3, H, W) float64 in [0, 1]
    image_labels: np.ndarray   # (num_classes,) multi-hot float64
    gt_mask: GroundTruthMask
    gen_seed: int


def _shape_region(kind: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= int(0.75 * r) + 1)
    if kind == "triangle":
        depth = yy - (cy - r)
        return (depth >= 0) & (yy <= cy + r) & (np.abs(xx - cx) <= depth / 2.0)
    if kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        inner = max(2, int(0.55 * r))
        return (d2 <= r * r) & (d2 >= inner * inner)
    raise ValueError(f"unknown shape kind {kind!r}")


def _marker_region(kind: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    """Small high-contrast patch at a shape-dependent spot inside the shape."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disk":
        my, mx = cy, cx
    elif kind == "rectangle":
        my, mx = cy - max(1, r // 2), cx
    elif kind == "triangle":
        my, mx = cy + r // 2, cx
    else:  # ring: on the rim
        my, mx = cy - (max(2, int(0.55 * r)) + r) // 2, cx
    return (yy - my) ** 2 + (xx - mx) ** 2 <= 4


def _render(config: GeneratorConfig, rng: np.random.Generator
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    size = config.image_size
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    classes = rng.choice(config.num_classes, size=n_obj, replace=False)
    image = np.full((3, size, size), config.bg_level)
    labels = np.full((size, size), BACKGROUND, dtype=np.int16)
    margin = config.max_radius + 1
    for cls in classes:
        kind = SHAPE_NAMES[cls]
        r = int(rng.integers(config.min_radius, config.max_radius + 1))
        cy = int(rng.integers(margin, size - margin))
        cx = int(rng.integers(margin, size - margin))
        region = _shape_region(kind, size, cy, cx, r)
        color = _CLASS_COLORS[cls] if config.distinct_colors else _SHARED_COLOR
        jitter = rng.uniform(-0.05, 0.05, size=3)
        image[:, region] = np.clip(color + jitter, 0.0, 1.0)[:, None]
        labels[region] = cls
        if config.discriminative_parts:
            marker = _marker_region(kind, size, cy, cx, r) & region
            image[:, marker] = _MARKER_COLOR[:, None]
    # occlusion can erase a class; require every drawn class to stay visible
    min_pixels = max(1, int(0.01 * size * size))
    for cls in classes:
        if np.count_nonzero(labels == cls) < min_pixels:
            return None
    multi_hot = np.zeros(config.num_classes)
    multi_hot[classes] = 1.0
    noise = rng.normal(0.0, config.noise_sigma, size=image.shape)
    image = np.clip(image + noise, 0.0, 1.0)
    return image, multi_hot, labels


def generate_one(config: GeneratorConfig, gen_seed: int,
                 max_attempts: int = 100) -> SyntheticSample:
    config.validate()
    rng = rng_from(gen_seed)
    for _ in range(max_attempts):
        rendered = _render(config, rng)
        if rendered is not None:
            image, multi_hot, labels = rendered
            return SyntheticSample(image, multi_hot, GroundTruthMask(labels),
                                   int(gen_seed))
    raise RuntimeError(f"could not place shapes after {max_attempts} layouts")


def generate(config: GeneratorConfig, n: int, seed: int) -> list[SyntheticSample]:
    """n samples with per-sample seeds seed+1 .. seed+n."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    return [generate_one(config, int(seed) + i) for i in range(1, n + 1)]


# ---------------------------------------------------------------------------
# seed-map scoring


@dataclass
class ClassScore:
    precision: float
    recall: float
    iou: float
    defined: bool  # False when the class was never predicted (precision 0/0)


@dataclass
class SeedScore:
    per_class: dict[int, ClassScore]
    mean_precision: float
    mean_recall: float
    mean_iou: float


def upsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(labels, factor, axis=0), factor, axis=1)


def _confusion(pred: np.ndarray, gt: np.ndarray, class_id: int
               ) -> tuple[int, int, int]:
    p = pred == class_id
    g = gt == class_id
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def score_seeds(seed_map: SeedMap, gt: GroundTruthMask) -> SeedScore:
    """Precision/recall/IoU per foreground class after nearest-neighbor
    upsampling of the seed grid to the ground-truth resolution.

    Predicted IGNORE pixels never count toward any class, so they are
    excluded from every precision denominator; ground-truth pixels the seeds
    ignore still count as misses for recall.
    """
    gh, gw = gt.labels.shape
    sh, sw = seed_map.labels.shape
    if gh % sh != 0 or gw % sw != 0 or gh // sh != gw // sw:
        raise ValueError(
            f"seed grid {sh}x{sw} does not upsample to ground truth {gh}x{gw} "
            f"by an integer factor")
    pred = upsample_labels(seed_map.labels, gh // sh)
    classes = sorted(set(gt.present_classes())
                     | {int(c) for c in np.unique(seed_map.labels) if c >= 0})
    per_class: dict[int, ClassScore] = {}
    for c in classes:
        tp, fp, fn = _confusion(pred, gt.labels, c)
        defined = (tp + fp) > 0
        precision = tp / (tp + fp) if defined else 0.0
        recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        iou = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else 0.0
        per_class[c] = ClassScore(precision, recall, iou, defined)
    n = max(len(per_class), 1)
    return SeedScore(
        per_class,
        mean_precision=sum(s.precision for s in per_class.values()) / n,
        mean_recall=sum(s.recall for s in per_class.values()) / n,
        mean_iou=sum(s.iou for s in per_class.values()) / n,
    )


def pooled_foreground_score(pairs: list[tuple[SeedMap, GroundTruthMask]]
                            ) -> tuple[float, float, float]:
    """Micro-averaged foreground precision/recall/IoU over many images:
    confusion counts are pooled across images and classes before dividing."""
    tp_total = fp_total = fn_total = 0
    for seed_map, gt in pairs:
        gh, gw = gt.labels.shape
        sh, sw = seed_map.labels.shape
        pred = upsample_labels(seed_map.labels, gh // sh)
        classes = set(gt.present_classes()) | {
            int(c) for c in np.unique(seed_map.labels) if c >= 0}
        for c in classes:
            tp, fp, fn = _confusion(pred, gt.labels, c)
            tp_total += tp
            fp_total += fp
            fn_total += fn
    precision = tp_total / (tp_total + fp_total) if tp_total + fp_total else 0.0
    recall = tp_total / (tp_total + fn_total) if tp_total + fn_total else 0.0
    iou = tp_total / (tp_total + fp_total + fn_total) \
        if tp_total + fp_total + fn_total else 0.0
    return precision, recall, iou
