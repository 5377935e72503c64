"""Dataset adapters: CIFAR archives, labeled image folders, and a procedural shapes set."""

from __future__ import annotations

import os
import pickle
from pathlib import Path

import numpy as np

from .corpus import LabeledImageSet

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def _cifar_from_rows(raw: np.ndarray, labels, num_classes, split):
    images = raw.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return LabeledImageSet(images, np.asarray(labels, dtype=np.int64), num_classes, split)


def load_cifar(root, num_classes: int = 10, split: str = "train") -> LabeledImageSet:
    """Read CIFAR-10/100 from either the binary (``*.bin``) or the python (pickled) release."""
    root = Path(root)
    if num_classes not in (10, 100):
        raise ValueError(f"CIFAR has 10 or 100 classes, not {num_classes}")
    if num_classes == 10:
        bin_names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        py_names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    else:
        bin_names = ["train.bin" if split == "train" else "test.bin"]
        py_names = ["train" if split == "train" else "test"]

    if all((root / n).exists() for n in bin_names):
        # each record: label byte(s) followed by 3072 pixel bytes
        label_bytes = 1 if num_classes == 10 else 2
        chunks, labels = [], []
        for name in bin_names:
            buf = np.fromfile(root / name, dtype=np.uint8)
            rec = buf.reshape(-1, label_bytes + 3072)
            labels.append(rec[:, label_bytes - 1])  # CIFAR-100: (coarse, fine)
            chunks.append(rec[:, label_bytes:])
        return _cifar_from_rows(np.concatenate(chunks), np.concatenate(labels), num_classes, split)

    if all((root / n).exists() for n in py_names):
        key = b"labels" if num_classes == 10 else b"fine_labels"
        chunks, labels = [], []
        for name in py_names:
            with open(root / name, "rb") as f:
                d = pickle.load(f, encoding="bytes")
            chunks.append(np.asarray(d[b"data"], dtype=np.uint8))
            labels.extend(d[key])
        return _cifar_from_rows(np.concatenate(chunks), labels, num_classes, split)

    raise FileNotFoundError(f"no CIFAR-{num_classes} {split} files under {root}")


def load_image_folder(root, split: str = "train", size: tuple[int, int] | None = None) -> LabeledImageSet:
    """One subdirectory per class; classes are numbered in sorted directory-name order."""
    from PIL import Image

    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(path) as im:
                im = im.convert("RGB")
                if size is not None:
                    im = im.resize((size[1], size[0]))
                images.append(np.asarray(im, dtype=np.float32) / 255.0)
            labels.append(label)
    if not images:
        raise FileNotFoundError(f"no images found under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images under {root} differ in size {sorted(shapes)}; pass size=(H, W)")
    return LabeledImageSet(np.stack(images), np.array(labels), len(classes), split)


# -- procedural shapes ------------------------------------------------------

_PALETTE = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.85],
    [0.85, 0.75, 0.15],
    [0.65, 0.25, 0.75],
], dtype=np.float32)


def _shape_mask(kind: int, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == 0:  # disc
        return (u ** 2 + v ** 2) <= r ** 2
    if kind == 1:  # square
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == 2:  # ring
        d = np.sqrt(u ** 2 + v ** 2)
        return (d <= r) & (d >= r * 0.55)
    if kind == 3:  # cross
        return ((np.abs(u) <= r * 0.3) & (np.abs(v) <= r)) | ((np.abs(v) <= r * 0.3) & (np.abs(u) <= r))
    # triangle
    return (v <= r * 0.6) & (v >= -r + 1.6 * np.abs(u))


def make_shapes(n: int, num_classes: int = 10, size: int = 16, seed: int = 0,
                split: str = "train", clutter: float = 0.35, pixel_noise: float = 0.12) -> LabeledImageSet:
    """Procedural colored-shape images; class = (shape, color) pair, balanced.

    Each image has a jittered foreground shape over a textured background plus
    a distractor blob, so classes need both color and geometry to separate.
    """
    if num_classes > 5 * len(_PALETTE):
        raise ValueError(f"at most {5 * len(_PALETTE)} classes")
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, y in enumerate(labels):
        shape, color = y % 5, (y // 5 + y) % len(_PALETTE)
        freq = rng.uniform(0.3, 1.2)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        bg = 0.35 + 0.15 * np.sin(freq * xx[..., None] + freq * 0.7 * yy[..., None] + phase)
        img = bg + rng.normal(0, 0.05, size=3)
        # distractor: random color disc
        if rng.random() < clutter:
            m = _shape_mask(0, yy, xx, *rng.uniform(0, size, 2), rng.uniform(1.5, 3.0), 0.0)
            img[m] = rng.uniform(0, 1, 3)
        r = rng.uniform(0.22, 0.34) * size
        cy, cx = rng.uniform(r * 0.8, size - r * 0.8, 2)
        m = _shape_mask(shape, yy, xx, cy, cx, r, rng.uniform(0, np.pi / 2))
        tint = np.clip(_PALETTE[color] + rng.normal(0, 0.12, 3), 0, 1)
        img[m] = tint * rng.uniform(0.75, 1.1)
        img += rng.normal(0, pixel_noise, img.shape)
        images[i] = np.clip(img, 0, 1)
    return LabeledImageSet(images, labels, num_classes, split)


def load_dataset(name: str, path: str | os.PathLike | None = None, split: str = "train",
                 num_classes: int = 10, size: int = 16, n: int | None = None,
                 seed: int = 0) -> LabeledImageSet:
    if name == "shapes":
        if n is None:
            n = 5000 if split == "train" else 1000
        return make_shapes(n, num_classes, size, seed=seed, split=split)
    if path is None:
        raise ValueError(f"dataset {name!r} needs an explicit path")
    if name in ("cifar10", "cifar100"):
        ds = load_cifar(path, 10 if name == "cifar10" else 100, split)
    elif name == "folder":
        ds = load_image_folder(Path(path) / split if (Path(path) / split).is_dir() else path, split)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    if n is not None and n < len(ds):
        # fixed stratification-free prefix of a seeded permutation
        idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
        ds = ds.subset(idx)
    return ds
