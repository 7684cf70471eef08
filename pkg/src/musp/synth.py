"""Procedural vehicle-like images with identity-defining parts, plus P x Q sampling.

Each identity is a body color plus colored parts (windshield, lamps, bumper,
badge) drawn from a shared palette. Body colors are shared by many identities,
so what separates two vehicles is which part carries which color. A sample
varies viewpoint (mirror + layout shift), illumination and pixel noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .functional import ConfigError
from .losses import BatchComposition

PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.75, 0.20],
        [0.15, 0.30, 0.90],
        [0.95, 0.85, 0.15],
        [0.85, 0.20, 0.85],
        [0.95, 0.95, 0.95],
    ]
)
BODY_COLORS = np.array(
    [
        [0.35, 0.35, 0.38],
        [0.55, 0.45, 0.35],
        [0.25, 0.30, 0.45],
        [0.45, 0.50, 0.40],
    ]
)
PART_KINDS = ("windshield", "lamps", "bumper", "badge")

# nominal boxes in unit coordinates (x0, y0, x1, y1), left-right symmetric except the badge
BODY_BOX = (0.16, 0.22, 0.84, 0.84)
PART_BOXES = {
    "windshield": [(0.26, 0.28, 0.74, 0.44)],
    "lamps": [(0.21, 0.52, 0.33, 0.61), (0.67, 0.52, 0.79, 0.61)],
    "bumper": [(0.22, 0.72, 0.78, 0.79)],
    "badge": [(0.24, 0.64, 0.36, 0.70)],
}


@dataclass(frozen=True)
class PartDescriptor:
    kind: str
    color: tuple[float, float, float]
    offset: tuple[float, float]  # identity-specific nudge (dx, dy) in unit coordinates


@dataclass(frozen=True)
class SyntheticIdentity:
    index: int
    body_color: tuple[float, float, float]
    parts: tuple[PartDescriptor, ...]


@dataclass(frozen=True)
class SampleSpec:
    identity: int
    mirrored: bool
    shift: tuple[float, float]  # layout shift (dx, dy) in unit coordinates
    illumination: float
    aug_seed: int
    scale: float = 1.0  # vehicle size relative to the nominal layout


def _combination(seed: int, index: int) -> tuple[int, ...]:
    # a seeded permutation of every (body, part colors...) combination keeps identities unique
    combos = len(BODY_COLORS) * len(PALETTE) ** len(PART_KINDS)
    key = np.random.default_rng([seed, 7919]).permutation(combos)[index % combos]
    digits = []
    for base in [len(PALETTE)] * len(PART_KINDS):
        key, digit = divmod(int(key), base)
        digits.append(digit)
    return (int(key) % len(BODY_COLORS), *digits)


def make_identity(index: int, seed: int = 0) -> SyntheticIdentity:
    body, *colors = _combination(seed, index)
    rng = np.random.default_rng([seed, index, 1])
    parts = []
    for kind, ci in zip(PART_KINDS, colors):
        offset = tuple(float(v) for v in rng.uniform(-0.03, 0.03, size=2))
        if kind == "badge":
            offset = (float(rng.uniform(-0.04, 0.10)), offset[1])
        parts.append(PartDescriptor(kind, tuple(float(v) for v in PALETTE[ci]), offset))
    return SyntheticIdentity(index, tuple(float(v) for v in BODY_COLORS[body]), tuple(parts))


def make_spec(identity: int, sample: int, seed: int = 0) -> SampleSpec:
    rng = np.random.default_rng([seed, identity, sample, 2])
    return SampleSpec(
        identity=identity,
        mirrored=bool(rng.integers(2)),
        shift=(float(rng.uniform(-0.06, 0.06)), float(rng.uniform(-0.05, 0.05))),
        illumination=float(rng.uniform(0.75, 1.25)),
        aug_seed=int(rng.integers(2**31)),
        scale=float(rng.uniform(0.85, 1.1)),
    )


def _place(box, mirrored: bool, shift, scale: float):
    x0, y0, x1, y1 = box
    if mirrored:
        x0, x1 = 1.0 - x1, 1.0 - x0
    # scale about the image center, then shift
    x0, x1 = 0.5 + (x0 - 0.5) * scale + shift[0], 0.5 + (x1 - 0.5) * scale + shift[0]
    y0, y1 = 0.5 + (y0 - 0.5) * scale + shift[1], 0.5 + (y1 - 0.5) * scale + shift[1]
    return x0, y0, x1, y1


def _fill(img: np.ndarray, box, color) -> None:
    size = img.shape[0]
    x0, y0, x1, y1 = box
    c0, c1 = int(round(x0 * size)), int(round(x1 * size))
    r0, r1 = int(round(y0 * size)), int(round(y1 * size))
    img[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = color


def _clutter(rng: np.random.Generator, count: int):
    """Distractor patches in palette colors, kept to the left/right margins."""
    patches = []
    for _ in range(count):
        w, h = rng.uniform(0.06, 0.14), rng.uniform(0.06, 0.25)
        x0 = rng.uniform(0.0, 0.12) if rng.integers(2) else rng.uniform(0.88 - w, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        patches.append(((x0, y0, x0 + w, y0 + h), PALETTE[rng.integers(len(PALETTE))]))
    return patches


def render(identity: SyntheticIdentity, spec: SampleSpec, size: int = 64) -> np.ndarray:
    """Deterministic (size, size, 3) image in [0, 1], quantized to 8-bit levels."""
    rng = np.random.default_rng([spec.aug_seed, 3])
    background = rng.uniform(0.35, 0.75) * np.ones(3) + rng.uniform(-0.08, 0.08, size=3)
    img = np.broadcast_to(background, (size, size, 3)).copy()
    for box, color in _clutter(rng, int(rng.integers(1, 4))):
        _fill(img, box, color * rng.uniform(0.7, 1.0))
    _fill(img, _place(BODY_BOX, spec.mirrored, spec.shift, spec.scale), identity.body_color)
    for part in identity.parts:
        # the nudge belongs to the vehicle, so it mirrors with it
        for box in PART_BOXES[part.kind]:
            nudged = (box[0] + part.offset[0], box[1] + part.offset[1],
                      box[2] + part.offset[0], box[3] + part.offset[1])
            _fill(img, _place(nudged, spec.mirrored, spec.shift, spec.scale), part.color)
    tint = rng.uniform(0.9, 1.1, size=3)
    img = img * (spec.illumination * tint) + rng.normal(0.0, 0.04, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass(frozen=True)
class AugmentConfig:
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: float = 0.3
    max_translate: float = 0.1
    fill: tuple[float, float, float] = (0.5, 0.5, 0.5)
    output_size: int | None = None


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return image
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return image[rows][:, cols]


def random_erase_box(rng: np.random.Generator, h: int, w: int, config: AugmentConfig):
    """Pick an erase rectangle (r0, c0, rh, cw), or None if no attempt fits."""
    lo, hi = config.erase_area
    for _ in range(100):
        target = rng.uniform(lo, hi) * h * w
        aspect = rng.uniform(config.erase_aspect, 1.0 / config.erase_aspect)
        rh = int(round(np.sqrt(target * aspect)))
        cw = int(round(np.sqrt(target / aspect)))
        if 0 < rh < h and 0 < cw < w and lo * h * w <= rh * cw <= hi * h * w:
            return int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - cw + 1)), rh, cw
    return None


def augment(image: np.ndarray, seed, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random translation (edge padding), random erasing (mean fill), then resize."""
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    out = image
    max_dy, max_dx = int(config.max_translate * h), int(config.max_translate * w)
    dy = int(rng.integers(-max_dy, max_dy + 1)) if max_dy else 0
    dx = int(rng.integers(-max_dx, max_dx + 1)) if max_dx else 0
    if dy or dx:
        padded = np.pad(image, ((max_dy, max_dy), (max_dx, max_dx), (0, 0)), mode="edge")
        out = padded[max_dy - dy:max_dy - dy + h, max_dx - dx:max_dx - dx + w]
    if config.erase_prob > 0 and rng.uniform() < config.erase_prob:
        box = random_erase_box(rng, h, w, config)
        if box is not None:
            out = out.copy()
            r0, c0, rh, cw = box
            out[r0:r0 + rh, c0:c0 + cw] = config.fill
    if config.output_size is not None:
        out = resize_nearest(out, config.output_size)
    return out


@dataclass
class Corpus:
    """Rendered images with identity labels and split tags ("train", "query", "gallery")."""

    images: np.ndarray
    identities: np.ndarray
    splits: np.ndarray
    specs: list[SampleSpec] = field(default_factory=list)

    def subset(self, split: str | tuple[str, ...]) -> Corpus:
        wanted = (split,) if isinstance(split, str) else split
        idx = np.flatnonzero(np.isin(self.splits, wanted))
        return Corpus(self.images[idx], self.identities[idx], self.splits[idx], [self.specs[i] for i in idx])

    def __len__(self) -> int:
        return len(self.identities)


@dataclass(frozen=True)
class DataConfig:
    train_identities: int = 32
    test_identities: int = 16
    images_per_identity: int = 20
    size: int = 64
    queries_per_identity: int = 4
    seed: int = 0

    @classmethod
    def from_total(cls, identities: int, **kwargs) -> DataConfig:
        """Split ``identities`` two to one between train and test."""
        test = identities // 3
        return cls(train_identities=identities - test, test_identities=test, **kwargs)


def split_tags(test_identity_index: int, images: int, queries: int, seed: int) -> list[str]:
    """Seeded choice of which test images serve as queries; the rest form the gallery."""
    rng = np.random.default_rng([seed, test_identity_index, 4])
    chosen = set(rng.choice(images, size=queries, replace=False).tolist())
    return ["query" if i in chosen else "gallery" for i in range(images)]


def manifest_entries(config: DataConfig) -> list[tuple[SampleSpec, str]]:
    entries = []
    total = config.train_identities + config.test_identities
    for ident in range(total):
        if ident < config.train_identities:
            tags = ["train"] * config.images_per_identity
        else:
            # at least one gallery image per test identity
            queries = min(config.queries_per_identity, config.images_per_identity - 1)
            tags = split_tags(ident, config.images_per_identity, queries, config.seed)
        for sample, tag in zip(range(config.images_per_identity), tags):
            entries.append((make_spec(ident, sample, config.seed), tag))
    return entries


def build_corpus(config: DataConfig = DataConfig()) -> Corpus:
    if config.images_per_identity < 1 or config.queries_per_identity < 0:
        raise ConfigError("images_per_identity must be >= 1 and queries_per_identity >= 0")
    entries = manifest_entries(config)
    cache: dict[int, SyntheticIdentity] = {}
    images = np.empty((len(entries), config.size, config.size, 3))
    for i, (spec, _) in enumerate(entries):
        ident = cache.setdefault(spec.identity, make_identity(spec.identity, config.seed))
        images[i] = render(ident, spec, config.size)
    return Corpus(
        images=images,
        identities=np.array([s.identity for s, _ in entries]),
        splits=np.array([t for _, t in entries]),
        specs=[s for s, _ in entries],
    )


def pk_sample(labels, P: int, Q: int, seed) -> tuple[BatchComposition, np.ndarray]:
    """Draw P distinct identities and Q distinct images of each; returns labels and indices."""
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    eligible = ids[counts >= Q]
    if P < 1 or Q < 1 or len(eligible) < P:
        raise ConfigError(
            f"pk_sample: need {P} identities with >= {Q} images, corpus has {len(eligible)}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(eligible, size=P, replace=False)
    index = np.concatenate([rng.choice(np.flatnonzero(labels == c), size=Q, replace=False) for c in chosen])
    return BatchComposition(P=P, Q=Q, labels=tuple(int(labels[i]) for i in index)), index


__all__ = [
    "AugmentConfig",
    "Corpus",
    "DataConfig",
    "PartDescriptor",
    "SampleSpec",
    "SyntheticIdentity",
    "augment",
    "build_corpus",
    "make_identity",
    "make_spec",
    "pk_sample",
    "render",
]
