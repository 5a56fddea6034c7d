"""Convolutional encoder: 3x128x128 image -> 4x4xC feature map.

Five stride-2 stages, each conv3x3 -> layer norm over channels -> GELU.
No batch statistics anywhere, so inference is deterministic and
batch-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .numeric import Tensor


@dataclass
class BackboneConfig:
    input_size: int = 128
    stage_channels: tuple = (32, 64, 128, 256, 128)

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        n = math.log2(self.input_size / 4)
        if n != int(n) or int(n) != len(self.stage_channels):
            raise ValueError(
                f"need log2(input_size/4)={n} stride-2 stages, "
                f"got {len(self.stage_channels)} channel entries")
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")

    @property
    def c_out(self):
        return self.stage_channels[-1]


def uniform_init(rng: np.random.Generator, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(nm.DTYPE),
                  requires_grad=True)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> dict:
    params = {}
    cin = 3
    for i, cout in enumerate(config.stage_channels):
        fan_in = cin * 9
        fan_out = cout * 9
        params[f"backbone.stage{i}.w"] = uniform_init(
            rng, (cout, cin, 3, 3), fan_in, fan_out)
        params[f"backbone.stage{i}.b"] = Tensor(
            np.zeros(cout, dtype=nm.DTYPE), requires_grad=True)
        params[f"backbone.stage{i}.ln_g"] = Tensor(
            np.ones(cout, dtype=nm.DTYPE), requires_grad=True)
        params[f"backbone.stage{i}.ln_b"] = Tensor(
            np.zeros(cout, dtype=nm.DTYPE), requires_grad=True)
        cin = cout
    return params


def encode(image, params: dict, config: BackboneConfig):
    """Image(s) -> channels-last feature map (B,4,4,C) or (4,4,C)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != config.input_size \
            or x.shape[3] != config.input_size:
        raise nm.ShapeError(
            f"encode: expected (B,3,{config.input_size},{config.input_size}), "
            f"got {x.shape}")
    for i in range(len(config.stage_channels)):
        x = nm.conv2d(x, params[f"backbone.stage{i}.w"],
                      bias=params[f"backbone.stage{i}.b"], stride=2)
        x = x.transpose(0, 2, 3, 1)  # channels-last for per-position norm
        x = nm.layer_norm(x, params[f"backbone.stage{i}.ln_g"],
                          params[f"backbone.stage{i}.ln_b"])
        x = nm.gelu(x)
        x = x.transpose(0, 3, 1, 2)
    x = x.transpose(0, 2, 3, 1)  # (B, 4, 4, C)
    if squeeze:
        x = x[0]
    return x
