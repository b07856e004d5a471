"""Localization maps from class-score gradients, and their aggregation.

Each stochastic pass yields one map per class: the ReLU of the channel sum of
the feature map weighted by the gradient of that class score with respect to
the feature map.  N passes are aggregated into a per-pixel seed labeling with
an explicit ignore value for unassigned pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .layer import (ClassifierHead, forward_expanded, forward_logits_plain,
                    forward_logits_spatial)
from .masks import sample_masks, sample_spatial_mask
from .tensor import Tape, TapeError, Tensor, backward, pick, sigmoid

IGNORE = -1
BACKGROUND = -2

INFERENCE_MODES = ("stochastic", "general", "deterministic")


@dataclass
class LocalizationMap:
    """Nonnegative per-pixel activation scores for one class and one pass."""

    class_id: int
    scores: np.ndarray  # (h, w), all >= 0
    pass_seed: int
    normalized: bool = False


@dataclass
class SeedMap:
    """Per-pixel class assignment; IGNORE marks unassigned pixels and
    BACKGROUND marks pixels below the background threshold everywhere."""

    labels: np.ndarray  # (h, w) int16
    theta: float
    n_passes: int

    def foreground_fraction(self) -> float:
        return float(np.count_nonzero(self.labels >= 0)) / self.labels.size


def grad_cam(x: Tensor, score: Tensor, tape: Tape, class_id: int = 0,
             pass_seed: int = 0) -> LocalizationMap:
    """ReLU of the gradient-weighted channel sum of the feature map.

    ``score`` must be a scalar class score produced from ``x`` on ``tape``;
    the backward pass runs here, through whatever masks produced the score.
    """
    backward(tape, score)
    if x.grad is None:
        raise TapeError("no gradient reached the feature map; was the score "
                        "computed from this tensor on this tape?")
    scores = np.maximum((x.data * x.grad).sum(axis=0), 0.0)
    return LocalizationMap(class_id, scores, pass_seed, normalized=False)


def normalize_map(m: LocalizationMap) -> LocalizationMap:
    """Scale scores so the peak is 1; an identically zero map is unchanged."""
    peak = m.scores.max() if m.scores.size else 0.0
    scores = m.scores / peak if peak > 0.0 else m.scores.copy()
    return LocalizationMap(m.class_id, scores, m.pass_seed, normalized=True)


def aggregate(maps: Sequence[LocalizationMap], theta: float,
              present_classes: Iterable[int],
              theta_bg: float | None = None) -> SeedMap:
    """Combine per-pass maps into one seed labeling.

    A pixel is assigned to a class whose score exceeds ``theta`` in any pass;
    when several classes qualify, the one with the highest mean-over-passes
    score wins (ties break toward the lowest class id).  Pixels exceeding the
    threshold for no class are IGNORE, except that pixels whose mean score is
    below ``theta_bg`` for every present class become BACKGROUND.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("cannot aggregate an empty map list")
    present = sorted(set(int(c) for c in present_classes))
    if not present:
        raise ValueError("present_classes must not be empty")
    shape = maps[0].scores.shape
    by_class: dict[int, list[np.ndarray]] = {c: [] for c in present}
    for m in maps:
        if not m.normalized:
            raise ValueError("aggregate expects normalized maps")
        if m.scores.shape != shape:
            raise ValueError(
                f"map shape {m.scores.shape} does not match {shape}")
        if m.class_id in by_class:
            by_class[m.class_id].append(m.scores)
    classes = [c for c in present if by_class[c]]
    if not classes:
        raise ValueError("no maps for any present class")

    peak = np.stack([np.max(by_class[c], axis=0) for c in classes])   # (C,h,w)
    mean = np.stack([np.mean(by_class[c], axis=0) for c in classes])  # (C,h,w)

    exceeds = peak > theta
    n_exceed = exceeds.sum(axis=0)
    labels = np.full(shape, IGNORE, dtype=np.int16)

    single = n_exceed == 1
    if single.any():
        labels[single] = np.asarray(classes, dtype=np.int16)[
            np.argmax(exceeds[:, single], axis=0)]
    multi = n_exceed > 1
    if multi.any():
        # resolve among the qualifying classes by mean-map score
        masked_mean = np.where(exceeds[:, multi], mean[:, multi], -np.inf)
        labels[multi] = np.asarray(classes, dtype=np.int16)[
            np.argmax(masked_mean, axis=0)]
    if theta_bg is not None:
        bg = (n_exceed == 0) & np.all(mean < theta_bg, axis=0)
        labels[bg] = BACKGROUND
    return SeedMap(labels, float(theta), n_passes=_count_passes(maps))


def _count_passes(maps: Sequence[LocalizationMap]) -> int:
    return len({m.pass_seed for m in maps})


def run_stochastic_inference(x, head: ClassifierHead, p: float, s: int, n: int,
                             theta: float, present_classes: Iterable[int],
                             base_seed: int, theta_bg: float | None = None,
                             rescale: bool = False,
                             mode: str = "stochastic"
                             ) -> tuple[SeedMap, list[LocalizationMap]]:
    """Run ``n`` masked forward passes (seeds base_seed+1 .. base_seed+n),
    extract one normalized map per present class per pass, and aggregate.

    ``mode`` selects the unit-selection flavor: per-window masks
    ("stochastic"), one whole-map mask per pass ("general"), or none
    ("deterministic").
    """
    if n < 1:
        raise ValueError(f"need at least one pass, got {n}")
    if mode not in INFERENCE_MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    if s != head.kernel_size:
        raise ValueError(
            f"kernel size {s} does not match head kernel {head.kernel_size}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    _, h, w = data.shape
    present = sorted(set(int(c) for c in present_classes))
    maps: list[LocalizationMap] = []
    for i in range(1, n + 1):
        seed_i = int(base_seed) + i
        tape = Tape()
        xt = Tensor(data)
        if mode == "stochastic":
            masks = sample_masks(h, w, s, p, seed_i)
            scores = forward_expanded(xt, head, masks, rescale, tape)
        elif mode == "general":
            spatial = sample_spatial_mask(h, w, p, seed_i)
            scores = sigmoid(forward_logits_spatial(xt, head, spatial, tape), tape)
        else:
            scores = sigmoid(forward_logits_plain(xt, head, tape), tape)
        for c in present:
            sc = pick(scores, c, tape)
            m = grad_cam(xt, sc, tape, class_id=c, pass_seed=seed_i)
            maps.append(normalize_map(m))
        tape.clear()
    seed_map = aggregate(maps, theta, present, theta_bg)
    return seed_map, maps
