"""Labeled image sets, synthetic label noise with a per-sample flip record, and two-view augmentation."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


# CIFAR-10 class ids
AIRPLANE, AUTOMOBILE, BIRD, CAT, DEER, DOG, FROG, HORSE, SHIP, TRUCK = range(10)

CIFAR10_PAIR_MAP = {
    TRUCK: AUTOMOBILE,
    BIRD: AIRPLANE,
    DEER: HORSE,
    CAT: DOG,
    DOG: CAT,
}

NOISE_KINDS = ("symmetric", "asymmetric_pairs", "asymmetric_next")
OVERLAY_HEADER = ["index", "clean_label", "noisy_label"]


class InvalidSpecError(ValueError):
    pass


class OverlayParseError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        _check_labels(self.labels, self.num_classes)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices)
        return LabeledImageSet(self.images[indices], self.labels[indices],
                               self.num_classes, self.split)


@dataclass
class NoiseSpec:
    """Parameters of a synthetic corruption.

    ``include_self`` lets symmetric draws land on the original class (all-K
    convention); ``exact_count`` corrupts exactly floor(rate * n_eligible)
    samples instead of independent Bernoulli draws.  ``pair_scope`` decides
    what the rate of an asymmetric pair corruption is a fraction of:
    ``"per_class"`` (each sample of a source class) or ``"all"`` (the whole
    set, with unmapped picks left unchanged).  The two only differ in
    exact-count mode.
    """

    kind: str = "symmetric"
    rate: float = 0.0
    pair_map: dict[int, int] | None = None
    include_self: bool = False
    exact_count: bool = False
    pair_scope: str = "per_class"

    def validate(self, num_classes: int):
        if self.kind not in NOISE_KINDS:
            raise InvalidSpecError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not 0.0 <= self.rate <= 1.0:
            raise InvalidSpecError(f"noise rate must lie in [0, 1], got {self.rate}")
        if num_classes < 2:
            raise InvalidSpecError(f"need at least 2 classes to inject noise, got K={num_classes}")
        if self.pair_scope not in ("per_class", "all"):
            raise InvalidSpecError(f"pair_scope must be 'per_class' or 'all', got {self.pair_scope!r}")
        if self.pair_map is not None:
            _check_pair_map(self.pair_map, num_classes)


@dataclass
class NoisyCorpus:
    base: LabeledImageSet
    noisy_labels: np.ndarray
    flip_mask: np.ndarray
    noise_spec: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        self.flip_mask = np.asarray(self.flip_mask, dtype=bool)
        if self.noisy_labels.shape != self.base.labels.shape:
            raise ValueError("noisy_labels length differs from the base set")
        _check_labels(self.noisy_labels, self.num_classes)
        if not np.array_equal(self.flip_mask, self.noisy_labels != self.base.labels):
            raise ValueError("flip_mask disagrees with noisy_labels != clean labels")

    def __len__(self):
        return len(self.noisy_labels)

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    @property
    def images(self) -> np.ndarray:
        return self.base.images

    @property
    def clean_labels(self) -> np.ndarray:
        return self.base.labels


@dataclass
class AugPolicy:
    crop_padding: int = 4
    hflip_prob: float = 0.5
    brightness_jitter: float = 0.0

    @classmethod
    def identity(cls) -> "AugPolicy":
        return cls(crop_padding=0, hflip_prob=0.0, brightness_jitter=0.0)


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source_index: int = -1


def _check_labels(labels: np.ndarray, num_classes: int):
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise ValueError(f"label {bad} outside [0, {num_classes})")


def _check_pair_map(pair_map: Mapping[int, int], num_classes: int):
    for src, dst in pair_map.items():
        if src == dst:
            raise InvalidSpecError(f"pair_map self-loop at class {src}")
        for c in (src, dst):
            if not 0 <= c < num_classes:
                raise InvalidSpecError(f"pair_map class {c} outside [0, {num_classes})")


def _select(eligible: np.ndarray, rate: float, exact_count: bool,
            rng: np.random.Generator) -> np.ndarray:
    """Boolean mask over all positions; only ``eligible`` ones can be chosen."""
    n = len(eligible)
    chosen = np.zeros(n, dtype=bool)
    if exact_count:
        pool = np.flatnonzero(eligible)
        k = int(np.floor(rate * len(pool)))
        chosen[rng.permutation(pool)[:k]] = True
    else:
        # draw for every position so the stream does not depend on eligibility
        chosen = (rng.random(n) < rate) & eligible
    return chosen


def _prepare(labels, rate, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= rate <= 1.0:
        raise InvalidSpecError(f"noise rate must lie in [0, 1], got {rate}")
    if num_classes < 2:
        raise InvalidSpecError(f"need at least 2 classes to inject noise, got K={num_classes}")
    _check_labels(labels, num_classes)
    return labels


def inject_symmetric(labels: Sequence[int], rate: float, num_classes: int, seed: int,
                     include_self: bool = False, exact_count: bool = False):
    labels = _prepare(labels, rate, num_classes)
    rng = np.random.default_rng(seed)
    chosen = _select(np.ones(len(labels), dtype=bool), rate, exact_count, rng)
    if include_self:
        replacement = rng.integers(0, num_classes, size=len(labels))
    else:
        # a uniform offset in 1..K-1 is a uniform draw over the other classes
        replacement = (labels + rng.integers(1, num_classes, size=len(labels))) % num_classes
    noisy = np.where(chosen, replacement, labels)
    return noisy, noisy != labels


def inject_asymmetric_pairs(labels: Sequence[int], rate: float, pair_map: Mapping[int, int] | None,
                            seed: int, num_classes: int = 10, exact_count: bool = False,
                            pair_scope: str = "per_class"):
    if pair_map is None:
        pair_map = CIFAR10_PAIR_MAP
    labels = _prepare(labels, rate, num_classes)
    _check_pair_map(pair_map, num_classes)
    rng = np.random.default_rng(seed)
    target = np.arange(num_classes)
    for src, dst in pair_map.items():
        target[src] = dst
    mapped = target[labels] != labels
    if pair_scope == "per_class":
        chosen = _select(mapped, rate, exact_count, rng)
    elif pair_scope == "all":
        chosen = _select(np.ones(len(labels), dtype=bool), rate, exact_count, rng) & mapped
    else:
        raise InvalidSpecError(f"pair_scope must be 'per_class' or 'all', got {pair_scope!r}")
    noisy = np.where(chosen, target[labels], labels)
    return noisy, noisy != labels


def inject_asymmetric_next(labels: Sequence[int], rate: float, num_classes: int, seed: int,
                           exact_count: bool = False):
    labels = _prepare(labels, rate, num_classes)
    rng = np.random.default_rng(seed)
    chosen = _select(np.ones(len(labels), dtype=bool), rate, exact_count, rng)
    noisy = np.where(chosen, (labels + 1) % num_classes, labels)
    return noisy, noisy != labels


def inject(labels: Sequence[int], spec: NoiseSpec, num_classes: int, seed: int):
    """Dispatch on ``spec.kind``; returns (noisy labels, flip mask)."""
    spec.validate(num_classes)
    if spec.kind == "symmetric":
        return inject_symmetric(labels, spec.rate, num_classes, seed,
                                include_self=spec.include_self, exact_count=spec.exact_count)
    if spec.kind == "asymmetric_pairs":
        return inject_asymmetric_pairs(labels, spec.rate, spec.pair_map, seed, num_classes,
                                       exact_count=spec.exact_count, pair_scope=spec.pair_scope)
    return inject_asymmetric_next(labels, spec.rate, num_classes, seed,
                                  exact_count=spec.exact_count)


def make_noisy_corpus(base: LabeledImageSet, spec: NoiseSpec, seed: int) -> NoisyCorpus:
    noisy, mask = inject(base.labels, spec, base.num_classes, seed)
    return NoisyCorpus(base, noisy, mask, spec, seed)


def empirical_noise_rate(corpus) -> float:
    mask = np.asarray(corpus.flip_mask if hasattr(corpus, "flip_mask") else corpus, dtype=bool)
    if mask.size == 0:
        raise ValueError("empirical noise rate of an empty corpus is undefined")
    return float(mask.mean())


# -- noise overlay file -----------------------------------------------------

@dataclass
class NoiseOverlay:
    clean_labels: np.ndarray
    noisy_labels: np.ndarray

    @property
    def flip_mask(self) -> np.ndarray:
        return self.noisy_labels != self.clean_labels

    def apply(self, base: LabeledImageSet, spec: NoiseSpec | None = None, seed: int = 0) -> NoisyCorpus:
        if not np.array_equal(base.labels, self.clean_labels):
            raise ValueError("overlay clean labels do not match the dataset labels")
        return NoisyCorpus(base, self.noisy_labels, self.flip_mask, spec or NoiseSpec(), seed)


def overlay_text(corpus) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(OVERLAY_HEADER)
    for i, (c, y) in enumerate(zip(corpus.clean_labels, corpus.noisy_labels)):
        writer.writerow([i, int(c), int(y)])
    return buf.getvalue()


def save_noise_file(corpus, path):
    """Write the (index, clean_label, noisy_label) table for a NoisyCorpus or NoiseOverlay."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(overlay_text(corpus))
    os.replace(tmp, path)


def load_noise_file(path, num_classes: int | None = None) -> NoiseOverlay:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise OverlayParseError(f"{path}: empty overlay file")
    if [h.strip() for h in rows[0]] != OVERLAY_HEADER:
        raise OverlayParseError(f"{path}: row 1: expected header {','.join(OVERLAY_HEADER)}, got {','.join(rows[0])}")
    if len(rows) == 1:
        raise OverlayParseError(f"{path}: overlay has a header but no rows")
    clean, noisy = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise OverlayParseError(f"{path}: row {lineno}: expected 3 columns, got {len(row)}")
        try:
            idx, c, y = (int(v) for v in row)
        except ValueError:
            raise OverlayParseError(f"{path}: row {lineno}: non-integer field in {row}") from None
        if idx != lineno - 2:
            raise OverlayParseError(f"{path}: row {lineno}: index {idx} out of order, expected {lineno - 2}")
        for v in (c, y):
            if v < 0 or (num_classes is not None and v >= num_classes):
                raise OverlayParseError(f"{path}: row {lineno}: label {v} outside [0, {num_classes})")
        clean.append(c)
        noisy.append(y)
    return NoiseOverlay(np.array(clean, dtype=np.int64), np.array(noisy, dtype=np.int64))


# -- augmentation -----------------------------------------------------------

def sample_stream(seed: int, index: int, epoch: int = 0, salt: int = 0) -> np.random.Generator:
    """Counter-style substream: depends only on (seed, epoch, index, salt), never on call order."""
    return np.random.default_rng([seed, salt, epoch, index])


def augment(image: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    # fixed number of draws per call keeps the stream layout stable
    off_y, off_x = rng.integers(0, 2 * policy.crop_padding + 1, size=2)
    flip = rng.random() < policy.hflip_prob
    scale = 1.0 + rng.uniform(-1.0, 1.0) * policy.brightness_jitter
    out = image
    p = policy.crop_padding
    if p > 0:
        h, w = image.shape[:2]
        padded = np.pad(image, ((p, p), (p, p), (0, 0)))
        out = padded[off_y:off_y + h, off_x:off_x + w]
    if flip:
        out = out[:, ::-1]
    if policy.brightness_jitter > 0:
        out = np.clip(out * scale, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def make_view_pair(image: np.ndarray, policy: AugPolicy, rng: np.random.Generator,
                   expected_shape: tuple | None = None, source_index: int = -1) -> ViewPair:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or (expected_shape is not None and tuple(image.shape) != tuple(expected_shape)):
        raise ValueError(f"image shape mismatch: expected {expected_shape or '(H, W, C)'}, got {image.shape}")
    return ViewPair(augment(image, policy, rng), augment(image, policy, rng), source_index)
