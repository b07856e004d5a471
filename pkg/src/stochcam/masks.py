"""Per-window binary keep/drop masks with the center unit always kept.

One mask grid covers every sliding-window position of an h x w feature map;
each window owns an s x s binary mask shared across all channels.  Mask sets
are pure functions of (seed, rate, kernel size, grid size), so any stochastic
pass can be replayed bit-for-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .seeding import rng_from

_MASK_MAGIC = b"SCMS"
_MASK_VERSION = 1


@dataclass(frozen=True)
class DropoutMaskSet:
    """Binary keep(1)/drop(0) masks, one s x s grid per window position."""

    window_masks: np.ndarray  # (h, w, s, s) uint8
    kernel_size: int
    rate: float
    rng_seed: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.window_masks.shape[:2]

    def window(self, i: int, j: int) -> np.ndarray:
        return self.window_masks[i, j]

    def multiplier(self, rescale: bool = False) -> np.ndarray:
        """Dense (s*h, s*w) float multiplier laid out block-per-window.

        With ``rescale`` the surviving units are scaled by 1/(1-rate), the
        inverted-dropout convention; off by default because the dropout is
        active at both training and inference time.
        """
        h, w = self.grid_shape
        s = self.kernel_size
        m = self.window_masks.transpose(0, 2, 1, 3).reshape(h * s, w * s)
        m = m.astype(np.float64)
        if rescale and self.rate > 0.0:
            m *= 1.0 / (1.0 - self.rate)
        return m

    def window_multiplier(self, i: int, j: int, rescale: bool = False) -> np.ndarray:
        m = self.window_masks[i, j].astype(np.float64)
        if rescale and self.rate > 0.0:
            m *= 1.0 / (1.0 - self.rate)
        return m


def _check_kernel(s: int) -> None:
    if s < 1 or s % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {s}")


def sample_masks(h: int, w: int, s: int, p: float, rng_seed: int) -> DropoutMaskSet:
    """Sample fresh window masks: every non-center unit independently drops
    with probability p, the center of every window is forced on."""
    _check_kernel(s)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if h < 1 or w < 1:
        raise ValueError(f"window grid must be nonempty, got {h}x{w}")
    rng = rng_from(rng_seed)
    if p == 0.0:
        masks = np.ones((h, w, s, s), dtype=np.uint8)
    else:
        masks = (rng.random((h, w, s, s)) >= p).astype(np.uint8)
        masks[:, :, s // 2, s // 2] = 1
    return DropoutMaskSet(masks, s, float(p), int(rng_seed))


def uniform_mask_set(window_mask: np.ndarray, h: int, w: int,
                     rate: float = 0.0, rng_seed: int = 0) -> DropoutMaskSet:
    """Repeat one window mask at every position (test/ablation helper)."""
    window_mask = np.asarray(window_mask, dtype=np.uint8)
    s = window_mask.shape[0]
    _check_kernel(s)
    if window_mask.shape != (s, s):
        raise ValueError(f"window mask must be square, got {window_mask.shape}")
    if window_mask[s // 2, s // 2] != 1:
        raise ValueError("window mask must keep the center unit")
    tiled = np.broadcast_to(window_mask, (h, w, s, s)).copy()
    return DropoutMaskSet(tiled, s, float(rate), int(rng_seed))


def dilated_kernel_mask(s: int, dilation_rate: int) -> np.ndarray:
    """Window mask keeping the 3x3 dilated-convolution tap pattern.

    The nine kept units sit at offsets {-d, 0, +d}^2 from the window center,
    showing that a dilated kernel is one realizable random selection.
    """
    _check_kernel(s)
    d = int(dilation_rate)
    if d < 1:
        raise ValueError(f"dilation rate must be positive, got {d}")
    if 2 * d > s - 1:
        raise ValueError(
            f"dilation rate {d} does not fit a 3x3 tap grid inside a {s}x{s} window")
    mask = np.zeros((s, s), dtype=np.uint8)
    c = s // 2
    for di in (-d, 0, d):
        for dj in (-d, 0, d):
            mask[c + di, c + dj] = 1
    return mask


def sample_spatial_mask(h: int, w: int, p: float, rng_seed: int) -> np.ndarray:
    """One whole-map spatial keep mask (the per-pass 'general dropout'
    baseline: units dropped here vanish from every window)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    rng = rng_from(rng_seed)
    return (rng.random((h, w)) >= p).astype(np.float64)


def save_mask_set(path, masks: DropoutMaskSet) -> None:
    """Compact binary: header (s, p, h, w, seed) + bit-packed mask body."""
    h, w = masks.grid_shape
    with open(path, "wb") as fh:
        fh.write(_MASK_MAGIC)
        fh.write(struct.pack("<HIdIIq", _MASK_VERSION, masks.kernel_size,
                             masks.rate, h, w, masks.rng_seed))
        fh.write(np.packbits(masks.window_masks.reshape(-1)).tobytes())


def load_mask_set(path) -> DropoutMaskSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MASK_MAGIC:
            raise ValueError(f"not a mask-set file (bad magic {magic!r})")
        version, s, p, h, w, seed = struct.unpack("<HIdIIq", fh.read(30))
        if version != _MASK_VERSION:
            raise ValueError(f"unsupported mask-set version {version}")
        nbits = h * w * s * s
        body = np.frombuffer(fh.read((nbits + 7) // 8), dtype=np.uint8)
    bits = np.unpackbits(body, count=nbits).reshape(h, w, s, s)
    return DropoutMaskSet(bits.astype(np.uint8), s, p, seed)
