"""Soft multi-attention spatial partitioning.

A value extractor and an attention extractor (both single 3x3 convolutions)
read the backbone feature map. The n attention logits are normalized per
location, each channel weights the value map, and spatial averaging yields one
vector per channel. The last channel plays the background role and its vector
is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autograd import ShapeError, Tensor, matmul
from .functional import ConfigError
from .nn import Conv3x3, Module

ACTIVATIONS = ("softmax", "sigmoid")


@dataclass
class PartitionOutput:
    """Result of :func:`soft_partition`; a leading batch axis is optional.

    attention: (..., h, w, n) post-activation weights, background included.
    value: (..., h, w, c).
    parts: (..., n-1, c) retained weighted vectors.
    area_ratios: (..., n-1) mean attention weight of each retained channel.
    all_parts / all_area_ratios: the same quantities including the background.
    """

    attention: Tensor
    value: Tensor
    parts: Tensor
    area_ratios: Tensor
    all_parts: Tensor
    all_area_ratios: Tensor


def soft_partition(value: Tensor, logits: Tensor, activation: str = "softmax") -> PartitionOutput:
    if activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    if value.shape[:-1] != logits.shape[:-1]:
        raise ShapeError(f"value {value.shape} and logits {logits.shape} differ spatially")
    n = logits.shape[-1]
    if n < 2:
        raise ConfigError("soft_partition: need n >= 2 attention channels (parts + background)")
    h, w, c = value.shape[-3:]
    lead = value.shape[:-3]
    weights = F.softmax(logits, axis=-1) if activation == "softmax" else F.sigmoid(logits)
    wflat = weights.reshape(lead + (h * w, n))
    vflat = value.reshape(lead + (h * w, c))
    # (..., n, hw) @ (..., hw, c) -> (..., n, c)
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    feats = matmul(wflat.transpose(*perm), vflat) * (1.0 / (h * w))
    ratios = wflat.mean(axis=-2)
    return PartitionOutput(
        attention=weights,
        value=value,
        parts=feats[..., : n - 1, :],
        area_ratios=ratios[..., : n - 1],
        all_parts=feats,
        all_area_ratios=ratios,
    )


class SpatialAttention(Module):
    def __init__(self, d: int, c: int, n: int, rng: np.random.Generator, activation: str = "softmax"):
        super().__init__()
        if n < 2:
            raise ConfigError("spatial attention: n must be >= 2")
        if c < 1:
            raise ConfigError("spatial attention: c must be >= 1")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.d, self.c, self.n, self.activation = d, c, n, activation
        self.value_extractor = self.add_child("value", Conv3x3(d, c, rng))
        self.attention_extractor = self.add_child("attention", Conv3x3(d, n, rng))

    def compute_value_map(self, m: Tensor) -> Tensor:
        return self.value_extractor(m)

    def compute_attention_logits(self, m: Tensor) -> Tensor:
        return self.attention_extractor(m)

    def __call__(self, m: Tensor) -> PartitionOutput:
        return soft_partition(
            self.compute_value_map(m), self.compute_attention_logits(m), self.activation
        )
