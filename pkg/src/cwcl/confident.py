"""Confident-sample selection from two-view averaged predictions, and class-balanced batching."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .corpus import AugPolicy, augment, sample_stream

SELECTION_SALT = 7


@dataclass
class ConfidentSet:
    indices: np.ndarray
    scores: np.ndarray
    round: int = 0
    threshold: float = 0.9

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.indices.shape != self.scores.shape:
            raise ValueError("indices and scores differ in length")
        if len(self.indices) > 1 and not (np.diff(self.indices) > 0).all():
            raise ValueError("confident indices must be strictly increasing")

    def __len__(self):
        return len(self.indices)


def _model_device(model):
    try:
        return next(model.parameters()).device
    except (StopIteration, AttributeError):
        return torch.device("cpu")


def _logits(model, x):
    out = model(x)
    return out[0] if isinstance(out, tuple) else out


@torch.no_grad()
def predict_averaged(model, images, policy: AugPolicy, rngs) -> np.ndarray:
    """Mean of the softmax over two augmented views.

    ``images`` is one (H, W, C) image or an (n, H, W, C) stack; ``rngs`` is one
    generator shared by the stack or a list with one generator per image.
    Returns (K,) or (n, K).
    """
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs] * len(images)
    va, vb = [], []
    for img, rng in zip(images, rngs):
        va.append(augment(img, policy, rng))
        vb.append(augment(img, policy, rng))
    device = _model_device(model)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        x = torch.from_numpy(np.stack(va + vb)).permute(0, 3, 1, 2).to(device)
        logits = _logits(model, x).double()
    finally:
        if was_training:
            model.train()
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits during confident-sample scoring")
    p = torch.softmax(logits, dim=1)
    n = len(images)
    probs = ((p[:n] + p[n:]) / 2).cpu().numpy()
    return probs[0] if single else probs


def score_corpus(model, corpus, policy: AugPolicy, seed: int, round: int = 0,
                 batch_size: int = 256, indices=None) -> np.ndarray:
    """Averaged probabilities (n, K) for every (or the given) corpus index.

    Each sample's views come from its own (seed, round, index) substream, so
    scores do not depend on batch composition.
    """
    idx = np.arange(len(corpus)) if indices is None else np.asarray(indices)
    out = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        rngs = [sample_stream(seed, int(i), round, SELECTION_SALT) for i in chunk]
        out.append(predict_averaged(model, corpus.images[chunk], policy, rngs))
    k = corpus.num_classes
    return np.concatenate(out) if out else np.zeros((0, k))


def select_from_probs(probs: np.ndarray, labels: np.ndarray, gamma: float = 0.9, round: int = 0,
                      mode: str = "threshold", quantile: float = 0.5) -> ConfidentSet:
    """Pick indices whose probability of their assigned label clears ``gamma``.

    ``mode="quantile"`` instead keeps, per assigned class, the top ``quantile``
    fraction by score; the reported threshold is then the smallest kept score.
    """
    labels = np.asarray(labels)
    scores = probs[np.arange(len(labels)), labels]
    if mode == "threshold":
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        keep = np.flatnonzero(scores >= gamma)
        return ConfidentSet(keep, scores[keep], round, gamma)
    if mode == "quantile":
        if not 0.0 < quantile <= 1.0:
            raise ValueError(f"quantile must lie in (0, 1], got {quantile}")
        keep = []
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            k = max(1, int(np.ceil(quantile * len(members))))
            order = members[np.argsort(-scores[members], kind="stable")]
            keep.extend(order[:k])
        keep = np.sort(np.array(keep, dtype=np.int64))
        thr = float(scores[keep].min()) if len(keep) else 1.0
        return ConfidentSet(keep, scores[keep], round, thr)
    raise ValueError(f"unknown selection mode {mode!r}")


def select_confident(model, corpus, gamma: float = 0.9, round: int = 0, policy: AugPolicy | None = None,
                     seed: int = 0, mode: str = "threshold", quantile: float = 0.5,
                     batch_size: int = 256) -> ConfidentSet:
    if mode == "threshold" and not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    policy = policy or AugPolicy()
    probs = score_corpus(model, corpus, policy, seed, round, batch_size)
    return select_from_probs(probs, corpus.noisy_labels, gamma, round, mode, quantile)


def selection_noise_rate(sel: ConfidentSet, corpus) -> float:
    if len(sel) == 0:
        raise ValueError("noise rate of an empty selection is undefined")
    return float(np.asarray(corpus.flip_mask)[sel.indices].mean())


def class_balanced_batches(sel: ConfidentSet, labels, batch_size: int, rng: np.random.Generator,
                           num_batches: int | None = None) -> Iterator[np.ndarray]:
    """Yield index batches: class uniform over the classes present, then a uniform member.

    Draws are with replacement.  Runs forever unless ``num_batches`` is given.
    """
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if len(sel) == 0:
        raise ValueError("cannot sample from an empty selection")
    sel_labels = np.asarray(labels)[sel.indices]
    classes = np.unique(sel_labels)
    members = [sel.indices[sel_labels == c] for c in classes]
    sizes = np.array([len(m) for m in members])
    made = 0
    while num_batches is None or made < num_batches:
        cls = rng.integers(0, len(classes), size=batch_size)
        pick = (rng.random(batch_size) * sizes[cls]).astype(np.int64)
        yield np.array([members[c][j] for c, j in zip(cls, pick)], dtype=np.int64)
        made += 1


def selection_path(run_dir, round: int) -> Path:
    return Path(run_dir) / "confident" / f"round-{round}.csv"


def save_selection(sel: ConfidentSet, run_dir) -> Path:
    path = selection_path(run_dir, sel.round)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "score"])
        for i, s in zip(sel.indices, sel.scores):
            w.writerow([int(i), repr(float(s))])
    os.replace(tmp, path)
    return path


def load_selection(path, round: int = 0, threshold: float = float("nan")) -> ConfidentSet:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["index", "score"]:
        raise ValueError(f"{path}: missing 'index,score' header")
    idx = [int(r[0]) for r in rows[1:]]
    scores = [float(r[1]) for r in rows[1:]]
    return ConfidentSet(np.array(idx, dtype=np.int64), np.array(scores), round, threshold)
