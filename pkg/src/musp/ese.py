"""Extended squeeze-and-excitation over the concatenated part vectors."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .autograd import ShapeError, Tensor
from .functional import ConfigError
from .nn import Linear, Module


def default_bottleneck(r: int) -> int:
    return max(1, r // 16)


class ESE(Module):
    """Gate ``parts`` (shape (..., n-1, c)) with sigmoid(MLP(flatten(parts))).

    Flattening is part-major: the c channels of part 1 come first.
    """

    def __init__(self, n_parts: int, c: int, rng: np.random.Generator, bottleneck: int | None = None):
        super().__init__()
        r = n_parts * c
        b = default_bottleneck(r) if bottleneck is None else bottleneck
        if b < 1:
            raise ConfigError("ESE: bottleneck width must be >= 1")
        if r > 1 and b >= r:
            raise ConfigError(f"ESE: bottleneck width {b} must be smaller than input width {r}")
        self.n_parts, self.c, self.r, self.b = n_parts, c, r, b
        self.first = self.add_child("first", Linear(r, b, rng))
        self.second = self.add_child("second", Linear(b, r, rng))

    def gate(self, flat: Tensor) -> Tensor:
        return F.sigmoid(self.second(F.relu(self.first(flat))))

    def recalibrate(self, parts: Tensor) -> Tensor:
        if parts.shape[-2:] != (self.n_parts, self.c):
            raise ShapeError(
                f"ESE: expected parts of shape (..., {self.n_parts}, {self.c}), got {parts.shape}"
            )
        lead = parts.shape[:-2]
        flat = parts.reshape(lead + (self.r,))
        return (flat * self.gate(flat)).reshape(parts.shape)

    __call__ = recalibrate
