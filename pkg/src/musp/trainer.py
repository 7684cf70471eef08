"""Training loop, average-pooling baseline and ablation harness."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cam import EmbeddingRecord, distance_matrix
from .functional import ConfigError
from .losses import diversity_loss
from .autograd import Tensor
from .metrics import RetrievalReport, evaluate
from .model import ModelConfig, MUSPNet
from .optim import AdamState, Schedule, adam_step, lr_at
from .synth import AugmentConfig, Corpus, augment, pk_sample

log = logging.getLogger(__name__)

ABLATION_AXES = ("attention-count", "ese", "activation")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class RunConfig:
    # head
    n: int = 5
    c: int = 32
    activation: str = "softmax"
    use_ese: bool = True
    baseline: bool = False
    # backbone
    input_size: int = 64
    channel_plan: tuple[int, ...] = (16, 24, 32)
    # objective
    margin: float = 0.3
    smoothing: float = 0.1
    # optimization
    P: int = 4
    Q: int = 4
    epochs: int = 30
    steps_per_epoch: int = 0  # 0: train-set size // (P * Q)
    base_lr: float = 3.5e-3
    warmup_epochs: int = 3
    warmup_start_lr: float = 3.5e-4
    decay_epochs: tuple[int, ...] = (10, 20)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    # augmentation
    erase_prob: float = 0.5
    max_translate: float = 0.1
    # evaluation
    eval_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if self.activation not in ("softmax", "sigmoid"):
            raise ConfigError(f"activation must be softmax or sigmoid, got {self.activation!r}")
        if self.P < 2 or self.Q < 2:
            raise ConfigError("P and Q must both be >= 2")

    @property
    def d(self) -> int:
        return self.channel_plan[-1]

    @property
    def h(self) -> int:
        return self.input_size // 2 ** len(self.channel_plan)

    w = h

    @property
    def schedule(self) -> Schedule:
        return Schedule(
            base_lr=self.base_lr,
            warmup_epochs=self.warmup_epochs,
            warmup_start_lr=self.warmup_start_lr,
            decay_epochs=tuple(self.decay_epochs),
            decay_factor=self.decay_factor,
            total_epochs=max(self.epochs, self.warmup_epochs + 1),
        )

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size,
            channel_plan=tuple(self.channel_plan),
            n=self.n,
            c=self.c,
            activation=self.activation,
            use_ese=self.use_ese,
            baseline=self.baseline,
            num_classes=num_classes,
        )


@dataclass
class StepLog:
    epoch: int
    step: int
    lr: float
    total: float
    id: float
    triplet: float
    diversity: float


@dataclass
class EvalLog:
    epoch: int  # number of completed epochs
    report: RetrievalReport
    heldout_diversity: float | None


@dataclass
class TrainResult:
    model: MUSPNet
    config: RunConfig
    steps: list[StepLog] = field(default_factory=list)
    evals: list[EvalLog] = field(default_factory=list)
    class_ids: list[int] = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for s in self.steps:
            by_epoch.setdefault(s.epoch, []).append(s.total)
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]

    @property
    def final(self) -> EvalLog | None:
        return self.evals[-1] if self.evals else None


def records_from_embeddings(emb: dict[str, np.ndarray], identities, cameras=None) -> list[EmbeddingRecord]:
    return [
        EmbeddingRecord(
            identity=str(identities[i]),
            parts=emb["parts"][i],
            global_vec=emb["global"][i],
            area_ratios=np.clip(emb["area_ratios"][i], 0.0, 1.0),
            camera=None if cameras is None else cameras[i],
        )
        for i in range(len(identities))
    ]


def heldout_diversity(model: MUSPNet, images: np.ndarray, batch_size: int = 64) -> float | None:
    """Diversity loss summed over ``images`` with the model in inference mode."""
    if model.attention is None:
        return None
    emb = model.embed(images, batch_size)
    return diversity_loss(Tensor(emb["attention"])).item()


def uniform_diversity(num_images: int, h: int, w: int, n: int) -> float:
    """Diversity loss of perfectly uniform softmax attention."""
    return num_images * h * w * (1.0 / n) ** (n - 1)


def evaluate_model(model: MUSPNet, corpus: Corpus) -> EvalLog:
    query, gallery = corpus.subset("query"), corpus.subset("gallery")
    q = records_from_embeddings(model.embed(query.images), query.identities)
    g = records_from_embeddings(model.embed(gallery.images), gallery.identities)
    report = evaluate(distance_matrix(q, g), query.identities, gallery.identities)
    test_images = corpus.subset(("query", "gallery")).images
    return EvalLog(epoch=-1, report=report, heldout_diversity=heldout_diversity(model, test_images))


def build_model(config: RunConfig, num_classes: int, seed: int) -> MUSPNet:
    return MUSPNet(config.model_config(num_classes), np.random.default_rng([seed, 0]))


def train(config: RunConfig, corpus: Corpus, seed: int | None = None, evaluate_heldout: bool = True) -> TrainResult:
    """Optimize the full objective on the corpus's train split."""
    seed = config.seed if seed is None else seed
    train_set = corpus.subset("train")
    class_ids = sorted(set(int(i) for i in train_set.identities))
    if len(class_ids) < config.P:
        raise ConfigError(f"train split has {len(class_ids)} identities, fewer than P={config.P}")
    to_class = {ident: k for k, ident in enumerate(class_ids)}
    labels = np.array([to_class[int(i)] for i in train_set.identities])

    model = build_model(config, len(class_ids), seed)
    mean = train_set.images.reshape(-1, 3).mean(axis=0)
    std = train_set.images.reshape(-1, 3).std(axis=0)
    model.backbone.set_pixel_stats(mean, std)
    aug = AugmentConfig(
        erase_prob=config.erase_prob,
        max_translate=config.max_translate,
        fill=tuple(float(v) for v in mean),
        output_size=config.input_size,
    )
    params = model.named_parameters()
    state = AdamState()
    result = TrainResult(model=model, config=config, class_ids=class_ids)
    steps_per_epoch = config.steps_per_epoch or max(1, len(labels) // (config.P * config.Q))
    schedule = config.schedule
    has_heldout = evaluate_heldout and np.any(corpus.splits == "query")

    global_step = 0
    for epoch in range(config.epochs):
        lr = lr_at(schedule, epoch)
        model.train()
        for step in range(steps_per_epoch):
            batch, index = pk_sample(labels, config.P, config.Q, seed=[seed, epoch, step])
            images = np.stack(
                [augment(train_set.images[i], [seed, epoch, step, j], aug) for j, i in enumerate(index)]
            )
            model.zero_grad()
            parts = model.loss(images, batch.labels, config.margin, config.smoothing)
            value = parts.total.item()
            if not math.isfinite(value):
                raise DivergenceError(global_step, value)
            parts.total.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr, config.weight_decay)
            result.steps.append(
                StepLog(epoch, global_step, lr, value, parts.id, parts.triplet, parts.diversity)
            )
            global_step += 1
        done = epoch + 1
        if has_heldout and (done % config.eval_every == 0 or done == config.epochs):
            ev = evaluate_model(model, corpus)
            ev.epoch = done
            result.evals.append(ev)
            log.info(
                "epoch %d loss %.4f mAP %.4f CMC@1 %.4f",
                done, result.epoch_losses()[-1], ev.report.mAP, ev.report.cmc1,
            )
    model.eval()
    return result


def run_baseline(config: RunConfig, corpus: Corpus, seed: int | None = None) -> TrainResult:
    """Same pipeline with the attention head replaced by global average pooling."""
    return train(dataclasses.replace(config, baseline=True), corpus, seed)


@dataclass
class AblationRow:
    label: str
    config: RunConfig
    per_seed: list[RetrievalReport]
    curves: list[list[tuple[int, float]]]  # per seed: (epoch, CMC@1)

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.per_seed]))


def ablation_settings(base: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    if axis == "attention-count":
        return [(f"n={n}", dataclasses.replace(base, n=n, baseline=False)) for n in (2, 3, 4, 5, 6)]
    if axis == "ese":
        return [
            ("with ESE", dataclasses.replace(base, use_ese=True, baseline=False)),
            ("without ESE", dataclasses.replace(base, use_ese=False, baseline=False)),
        ]
    if axis == "activation":
        # both keep five attention channels; the last is discarded, leaving four parts
        return [
            ("softmax (5 attentions)", dataclasses.replace(base, activation="softmax", n=5, baseline=False)),
            ("sigmoid (4 retained)", dataclasses.replace(base, activation="sigmoid", n=5, baseline=False)),
        ]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def run_ablation(base: RunConfig, axis: str, corpus: Corpus, seeds=(0, 1, 2)) -> list[AblationRow]:
    rows = []
    for label, cfg in ablation_settings(base, axis):
        reports, curves = [], []
        for s in seeds:
            res = train(cfg, corpus, s)
            reports.append(res.final.report)
            curves.append([(e.epoch, e.report.cmc1) for e in res.evals])
        rows.append(AblationRow(label, cfg, reports, curves))
    return rows


def format_ablation(axis: str, rows: list[AblationRow]) -> str:
    lines = [f"# ablation: {axis}", "setting\tmAP\tCMC@1\tCMC@5\tseeds"]
    for row in rows:
        lines.append(
            f"{row.label}\t{row.mean('mAP'):.4f}\t{row.mean('cmc1'):.4f}\t{row.mean('cmc5'):.4f}\t{len(row.per_seed)}"
        )
    lines.append("# per-epoch CMC@1 (mean over seeds)")
    for row in rows:
        epochs = [e for e, _ in row.curves[0]] if row.curves and row.curves[0] else []
        means = [np.mean([c[i][1] for c in row.curves]) for i in range(len(epochs))]
        lines.append(row.label + "\t" + " ".join(f"{e}:{m:.4f}" for e, m in zip(epochs, means)))
    return "\n".join(lines) + "\n"
