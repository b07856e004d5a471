"""Window-wise stochastic unit selection, realized two ways.

The fast path copies every (zero-padded) kernel window of the feature map
into its own non-overlapping block of an expanded map, applies the per-window
masks in one multiply, and convolves once with stride equal to the kernel
size.  The reference path loops over window positions, masking and convolving
each extracted window separately.  Both share the same ops and tape, so they
can be cross-checked on scores and gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .masks import DropoutMaskSet
from .seeding import rng_from
from .tensor import (ShapeError, Tape, Tensor, conv2d, global_average_pool,
                     sigmoid)


@dataclass
class ClassifierHead:
    """Per-class scoring kernel applied across window positions."""

    weight: Tensor  # (num_classes, in_channels, s, s)
    bias: Tensor    # (num_classes,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def parameter_count(self) -> int:
        return self.weight.size + self.bias.size

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


def init_head(num_classes: int, in_channels: int, kernel_size: int,
              seed: int) -> ClassifierHead:
    rng = rng_from(seed)
    fan_in = in_channels * kernel_size * kernel_size
    w = rng.standard_normal((num_classes, in_channels, kernel_size, kernel_size))
    w *= np.sqrt(2.0 / fan_in)
    return ClassifierHead(Tensor(w), Tensor(np.zeros(num_classes)))


def expanded_shape(k: int, h: int, w: int, s: int) -> tuple[int, int, int]:
    return (k, s * h, s * w)


def expand_feature_map(x: Tensor, s: int, tape: Tape | None = None) -> Tensor:
    """Copy each zero-padded s x s window into its own disjoint block.

    The input is padded to (k, h+s-1, w+s-1) so the window grid matches the
    feature grid; window (i, j) lands in output block (i, j), row-major both
    across windows and within each block.
    """
    if s < 1 or s % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {s}")
    if x.data.ndim != 3:
        raise ShapeError(f"expand_feature_map input must be k x h x w, got {x.shape}")
    k, h, w = x.shape
    pad = (s - 1) // 2
    hp, wp = h + s - 1, w + s - 1
    xp = np.zeros((k, hp, wp))
    xp[:, pad:pad + h, pad:pad + w] = x.data
    out = np.empty((k, h * s, w * s))
    out5 = out.reshape(k, h, s, w, s)
    row_windows = sliding_window_view(xp, s, axis=2)  # (k, hp, w, s)
    for a in range(s):
        out5[:, :, a, :, :] = row_windows[:, a:a + h, :, :]
    t = Tensor(out)

    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            d5 = g.reshape(k, h, s, w, s)
            tmp = np.zeros((k, h, s, wp))
            for j in range(w):
                tmp[:, :, :, j:j + s] += d5[:, :, :, j, :]
            dxp = np.zeros((k, hp, wp))
            for i in range(h):
                dxp[:, i:i + s, :] += tmp[:, i]
            x.add_grad(dxp[:, pad:pad + h, pad:pad + w], own=True)

        tape.record(t, (x,), bwd)
    return t


def _mask_mul(x: Tensor, multiplier: np.ndarray, tape: Tape | None) -> Tensor:
    """Multiply by a constant (non-differentiated) mask array."""
    out = Tensor(x.data * multiplier)
    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            x.add_grad(g * multiplier, own=True)

        tape.record(out, (x,), bwd)
    return out


def apply_masks_expanded(x_expand: Tensor, masks: DropoutMaskSet,
                         rescale: bool = False,
                         tape: Tape | None = None) -> Tensor:
    """Multiply each block of the expanded map by its window mask, the same
    mask across every channel."""
    h, w = masks.grid_shape
    s = masks.kernel_size
    expected = (x_expand.shape[0], h * s, w * s)
    if x_expand.shape != expected:
        raise ShapeError(
            f"expanded map shape {x_expand.shape} does not match mask grid "
            f"{h}x{w} with kernel {s} (expected {expected})")
    return _mask_mul(x_expand, masks.multiplier(rescale), tape)


def forward_logits(x: Tensor, head: ClassifierHead, masks: DropoutMaskSet,
                   rescale: bool = False, tape: Tape | None = None) -> Tensor:
    """Pre-sigmoid class scores via the expansion fast path."""
    _check_head(x, head, masks)
    s = head.kernel_size
    xe = expand_feature_map(x, s, tape)
    xm = apply_masks_expanded(xe, masks, rescale, tape)
    y = conv2d(xm, head.weight, head.bias, stride=s, padding=0, tape=tape)
    return global_average_pool(y, tape)


def forward_expanded(x: Tensor, head: ClassifierHead, masks: DropoutMaskSet,
                     rescale: bool = False, tape: Tape | None = None) -> Tensor:
    """Class scores in (0,1) via the expansion fast path."""
    return sigmoid(forward_logits(x, head, masks, rescale, tape), tape)


def _extract_window(x: Tensor, i: int, j: int, s: int, pad: int,
                    tape: Tape | None) -> Tensor:
    """One zero-padded s x s window centered on feature cell (i, j)."""
    k, h, w = x.shape
    r0, c0 = i - pad, j - pad
    rr0, cc0 = max(r0, 0), max(c0, 0)
    rr1, cc1 = min(r0 + s, h), min(c0 + s, w)
    win = np.zeros((k, s, s))
    win[:, rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0] = x.data[:, rr0:rr1, cc0:cc1]
    t = Tensor(win)

    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, rr0:rr1, cc0:cc1] += g[:, rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]

        tape.record(t, (x,), bwd)
    return t


def _assemble_grid(cells: list[Tensor], h: int, w: int,
                   tape: Tape | None) -> Tensor:
    """Stitch h*w per-window (c, 1, 1) scores into a (c, h, w) map."""
    c = cells[0].shape[0]
    out = np.empty((c, h, w))
    for idx, cell in enumerate(cells):
        out[:, idx // w, idx % w] = cell.data[:, 0, 0]
    t = Tensor(out)

    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            for idx, cell in enumerate(cells):
                cell.add_grad(g[:, idx // w, idx % w].reshape(c, 1, 1), own=True)

        tape.record(t, tuple(cells), bwd)
    return t


def forward_logits_naive(x: Tensor, head: ClassifierHead, masks: DropoutMaskSet,
                         rescale: bool = False,
                         tape: Tape | None = None) -> Tensor:
    """Pre-sigmoid class scores via per-window mask-and-convolve calls."""
    _check_head(x, head, masks)
    s = head.kernel_size
    _, h, w = x.shape
    pad = (s - 1) // 2
    cells: list[Tensor] = []
    for i in range(h):
        for j in range(w):
            win = _extract_window(x, i, j, s, pad, tape)
            wm = _mask_mul(win, masks.window_multiplier(i, j, rescale)[None, :, :], tape)
            cells.append(conv2d(wm, head.weight, head.bias, stride=1, padding=0,
                                tape=tape))
    y = _assemble_grid(cells, h, w, tape)
    return global_average_pool(y, tape)


def forward_naive(x: Tensor, head: ClassifierHead, masks: DropoutMaskSet,
                  rescale: bool = False, tape: Tape | None = None) -> Tensor:
    """Class scores in (0,1) via the per-window reference path."""
    return sigmoid(forward_logits_naive(x, head, masks, rescale, tape), tape)


def forward_logits_plain(x: Tensor, head: ClassifierHead,
                         tape: Tape | None = None) -> Tensor:
    """Deterministic scores: plain padded stride-1 convolution, no dropout.

    Numerically identical to the masked paths with an all-ones mask set.
    """
    s = head.kernel_size
    y = conv2d(x, head.weight, head.bias, stride=1, padding=(s - 1) // 2,
               tape=tape)
    return global_average_pool(y, tape)


def forward_logits_spatial(x: Tensor, head: ClassifierHead,
                           spatial_mask: np.ndarray,
                           tape: Tape | None = None) -> Tensor:
    """Whole-map spatial dropout then plain convolution (the one-mask-per-pass
    baseline: a dropped unit vanishes from every window)."""
    if spatial_mask.shape != x.shape[1:]:
        raise ShapeError(
            f"spatial mask shape {spatial_mask.shape} does not match "
            f"feature dims {x.shape[1:]}")
    xm = _mask_mul(x, spatial_mask[None, :, :], tape)
    return forward_logits_plain(xm, head, tape)


def _check_head(x: Tensor, head: ClassifierHead, masks: DropoutMaskSet) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"feature map must be k x h x w, got {x.shape}")
    k, h, w = x.shape
    if head.in_channels != k:
        raise ShapeError(
            f"head expects {head.in_channels} channels, feature map has {k}")
    if masks.kernel_size != head.kernel_size:
        raise ShapeError(
            f"mask kernel {masks.kernel_size} does not match head kernel "
            f"{head.kernel_size}")
    if masks.grid_shape != (h, w):
        raise ShapeError(
            f"mask grid {masks.grid_shape} does not match feature dims {(h, w)}")
