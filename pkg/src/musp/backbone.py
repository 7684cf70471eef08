"""Small convolutional feature extractor producing an (h, w, d) feature map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autograd import DTYPE, ShapeError, Tensor
from .functional import ConfigError
from .nn import BatchNorm, Conv3x3, Module


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    channel_plan: tuple[int, ...] = (16, 24, 32)

    def __post_init__(self):
        if not self.channel_plan:
            raise ConfigError("backbone: channel_plan must list at least one stage")
        if self.input_size % (2 ** len(self.channel_plan)):
            raise ConfigError("backbone: input_size must be divisible by 2**stages")
        if self.output_spatial < 4:
            raise ConfigError(
                f"backbone: output grid {self.output_spatial}x{self.output_spatial} is below 4x4"
            )

    @property
    def output_channels(self) -> int:
        return self.channel_plan[-1]

    @property
    def output_spatial(self) -> int:
        return self.input_size // 2 ** len(self.channel_plan)


class Backbone(Module):
    """Stages of conv3x3 -> BN -> ReLU -> 2x2 average pool.

    Raw images in [0, 1] are standardized with the per-channel ``pixel_mean``
    and ``pixel_std`` buffers before the first stage.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.buffers["pixel_mean"] = np.full(3, 0.5, dtype=DTYPE)
        self.buffers["pixel_std"] = np.full(3, 0.25, dtype=DTYPE)
        self.stages = []
        c_in = 3
        for i, c_out in enumerate(config.channel_plan):
            conv = self.add_child(f"stage{i}_conv", Conv3x3(c_in, c_out, rng))
            bn = self.add_child(f"stage{i}_bn", BatchNorm(c_out))
            self.stages.append((conv, bn))
            c_in = c_out

    def set_pixel_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.buffers["pixel_mean"][...] = mean
        self.buffers["pixel_std"][...] = std

    def extract_features(self, images) -> Tensor:
        """Map a batch (N, s, s, 3) or a single (s, s, 3) image to the feature map."""
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=DTYPE)
        single = data.ndim == 3
        if single:
            data = data[None]
        s = self.config.input_size
        if data.ndim != 4 or data.shape[1:] != (s, s, 3):
            raise ShapeError(f"backbone: expected images of shape ({s}, {s}, 3), got {data.shape[-3:]}")
        x = Tensor((data - self.buffers["pixel_mean"]) / self.buffers["pixel_std"])
        for conv, bn in self.stages:
            x = F.avg_pool2d(F.relu(bn(conv(x))))
        return x[0] if single else x

    __call__ = extract_features
