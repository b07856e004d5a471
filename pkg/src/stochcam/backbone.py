"""Small fixed CNN producing the feature map the masked head scores.

Stands in for a large pretrained classifier trunk: a few conv+relu blocks,
config-driven so wider or deeper trunks can be slotted in.  Strided blocks
use even kernels so the exact-divisibility contract of conv2d holds on
power-of-two image sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import rng_from
from .tensor import Tape, Tensor, conv2d, relu


@dataclass(frozen=True)
class BackboneConfig:
    """Conv blocks as (out_channels, kernel_size, stride) triples."""

    blocks: tuple[tuple[int, int, int], ...] = ((16, 3, 1), (32, 4, 2), (64, 4, 2))
    in_channels: int = 3

    @property
    def out_channels(self) -> int:
        return self.blocks[-1][0]

    @property
    def stride(self) -> int:
        total = 1
        for _, _, st in self.blocks:
            total *= st
        return total

    def feature_shape(self, height: int, width: int) -> tuple[int, int, int]:
        h, w = height, width
        for _, kernel, st in self.blocks:
            pad = (kernel - 1) // 2
            for name, dim in (("height", h), ("width", w)):
                if (dim + 2 * pad - kernel) % st != 0:
                    raise ValueError(
                        f"backbone block kernel={kernel} stride={st} does not "
                        f"tile {name} {dim} exactly")
            h = (h + 2 * pad - kernel) // st + 1
            w = (w + 2 * pad - kernel) // st + 1
        return (self.out_channels, h, w)


def init_backbone(config: BackboneConfig, seed: int) -> list[Tensor]:
    """He-initialized weights and zero biases, ordered [w0, b0, w1, b1, ...]."""
    rng = rng_from(seed)
    params: list[Tensor] = []
    c_in = config.in_channels
    for c_out, kernel, _ in config.blocks:
        fan_in = c_in * kernel * kernel
        w = rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        params.append(Tensor(w))
        params.append(Tensor(np.zeros(c_out)))
        c_in = c_out
    return params


def backbone_forward(image: Tensor, params: list[Tensor], config: BackboneConfig,
                     tape: Tape | None = None) -> Tensor:
    x = image
    for idx, (_, kernel, stride) in enumerate(config.blocks):
        w = params[2 * idx]
        b = params[2 * idx + 1]
        x = conv2d(x, w, b, stride=stride, padding=(kernel - 1) // 2, tape=tape)
        x = relu(x, tape)
    return x
