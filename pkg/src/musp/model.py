"""The full re-identification network and its training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .attention import PartitionOutput, SpatialAttention
from .autograd import Tensor
from .backbone import Backbone, BackboneConfig
from .ese import ESE
from .functional import ConfigError
from .losses import BatchComposition, ClassifierHead, diversity_loss, id_loss, total_loss, triplet_loss
from .nn import Module


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    channel_plan: tuple[int, ...] = (16, 24, 32)
    n: int = 5
    c: int = 32
    activation: str = "softmax"
    use_ese: bool = True
    baseline: bool = False
    num_classes: int = 32
    bottleneck: int | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def d(self) -> int:
        return self.channel_plan[-1]

    @property
    def n_parts(self) -> int:
        return 0 if self.baseline else self.n - 1


@dataclass
class ForwardOutput:
    feature_map: Tensor
    global_vec: Tensor
    partition: PartitionOutput | None = None
    parts: Tensor | None = None  # post-ESE (or raw, with ESE off) retained part vectors

    def supervised(self) -> list[Tensor]:
        """Vectors that receive classifier and triplet supervision: parts, then global."""
        if self.parts is None:
            return [self.global_vec]
        return [self.parts[:, i, :] for i in range(self.parts.shape[1])] + [self.global_vec]


@dataclass
class LossBreakdown:
    total: Tensor
    id: float
    triplet: float
    diversity: float


class MUSPNet(Module):
    """Backbone plus attention head; ``baseline=True`` swaps the head for average pooling."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.backbone = self.add_child(
            "backbone", Backbone(BackboneConfig(config.input_size, config.channel_plan), rng)
        )
        self.attention = self.ese = None
        dims = [config.d]
        if not config.baseline:
            self.attention = self.add_child(
                "attention", SpatialAttention(config.d, config.c, config.n, rng, config.activation)
            )
            if config.use_ese:
                self.ese = self.add_child(
                    "ese", ESE(config.n - 1, config.c, rng, config.bottleneck)
                )
            dims = [config.c] * (config.n - 1) + [config.d]
        self.heads = [
            self.add_child(f"head{i}", ClassifierHead(dim, config.num_classes, rng))
            for i, dim in enumerate(dims)
        ]

    def forward(self, images) -> ForwardOutput:
        m = self.backbone.extract_features(images)
        if m.ndim == 3:
            raise ValueError("forward expects a batch of images (N, s, s, 3)")
        out = ForwardOutput(feature_map=m, global_vec=F.global_avg_pool(m))
        if self.attention is not None:
            part = self.attention(m)
            out.partition = part
            out.parts = self.ese(part.parts) if self.ese is not None else part.parts
        return out

    __call__ = forward

    def loss(self, images, labels, margin: float = 0.3, smoothing: float = 0.1) -> LossBreakdown:
        out = self.forward(images)
        feats = out.supervised()
        batch = BatchComposition.from_labels(labels)
        l_id = id_loss(feats, self.heads, labels, smoothing)
        l_tri = triplet_loss(feats, batch, margin)
        if out.partition is not None:
            l_div = diversity_loss(out.partition.attention)
        else:
            l_div = Tensor(0.0)
        total = total_loss(l_id, l_tri, l_div)
        return LossBreakdown(total, l_id.item(), l_tri.item(), l_div.item())

    def embed(self, images, batch_size: int = 64) -> dict[str, np.ndarray]:
        """Inference-mode embeddings as arrays: parts (N, n-1, c), global (N, d), area_ratios (N, n-1)."""
        was_training = self.training
        self.eval()
        parts, globs, ratios, attn = [], [], [], []
        images = np.asarray(images)
        try:
            for start in range(0, len(images), batch_size):
                out = self.forward(images[start:start + batch_size])
                globs.append(out.global_vec.data)
                if out.parts is not None:
                    parts.append(out.parts.data)
                    ratios.append(out.partition.area_ratios.data)
                    attn.append(out.partition.attention.data)
        finally:
            self.train(was_training)
        n = len(images)
        k = self.config.n_parts
        d = self.config.d
        return {
            "global": np.concatenate(globs) if globs else np.zeros((0, d)),
            "parts": np.concatenate(parts) if parts else np.zeros((n, k, self.config.c)),
            "area_ratios": np.concatenate(ratios) if ratios else np.zeros((n, k)),
            "attention": np.concatenate(attn) if attn else None,
        }
