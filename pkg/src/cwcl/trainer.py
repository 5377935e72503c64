"""Two-stage training: CE + channel-wise contrast, then progressive confident-sample finetuning."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .confident import (ConfidentSet, class_balanced_batches, load_selection, save_selection,
                        select_confident, selection_noise_rate, selection_path)
from .corpus import AugPolicy, augment, sample_stream
from .losses import ce_loss, cwcl_from_banks, stage1_total, stage2_total, supcon_loss
from .netcore import (EmaState, checkpoint_dir, ema_model, ema_update, load_checkpoint,
                      make_batch_channel_heads, make_channel_heads, make_instance_heads,
                      project_batch_channels, project_channels, save_checkpoint)

log = logging.getLogger(__name__)

# substream salts, one per consumer of randomness
_SHUFFLE, _VIEWS, _BALANCED = 1, 2, 3


@dataclass
class TrainPlan:
    lam: float = 0.6
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs_stage1: int = 100
    epochs_stage2: int = 200
    ema_decay: float = 0.999
    ema_warmup: bool = True
    gamma: float = 0.90
    round_length: int = 10
    tau_cwcl: float = 0.5
    tau_supcon: float = 0.1
    symmetrize: bool = False
    cwcl_reduction: str = "mean"  # "sum" is the literal per-sample total over channels
    cwcl_channels: str = "spatial"  # or "batch"
    seed: int = 0
    lr_floor: float = 1e-3  # final lr = lr0 * lr_floor
    stage2_restart_schedule: bool = False
    selection_mode: str = "threshold"
    selection_quantile: float = 0.5
    proj_hidden: int = 128
    proj_out: int = 64
    crop_padding: int = 4
    hflip_prob: float = 0.5
    brightness_jitter: float = 0.0
    eval_every: int = 1
    ckpt_every: int = 0  # 0: only at the end of each stage

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.batch_size <= 0 or self.round_length <= 0:
            raise ValueError("batch_size and round_length must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr0 <= 0 or self.tau_cwcl <= 0 or self.tau_supcon <= 0:
            raise ValueError("lr0 and temperatures must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        for name, allowed in (("cwcl_reduction", ("sum", "mean")), ("cwcl_channels", ("spatial", "batch")),
                              ("selection_mode", ("threshold", "quantile"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def policy(self) -> AugPolicy:
        return AugPolicy(self.crop_padding, self.hflip_prob, self.brightness_jitter)

    @property
    def total_epochs(self) -> int:
        return self.epochs_stage1 + self.epochs_stage2


def lr_at(plan: TrainPlan, epoch: int) -> float:
    """Cosine annealing from lr0 to lr0 * lr_floor over both stages (0-based epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if epoch >= plan.total_epochs:
        raise ValueError(f"epoch {epoch} beyond the {plan.total_epochs}-epoch schedule")
    start, span = 0, plan.total_epochs
    if plan.stage2_restart_schedule and epoch >= plan.epochs_stage1:
        start, span = plan.epochs_stage1, plan.epochs_stage2
    elif plan.stage2_restart_schedule:
        span = plan.epochs_stage1
    if span <= 1:
        return plan.lr0
    lo = plan.lr0 * plan.lr_floor
    t = (epoch - start) / (span - 1)
    return lo + (plan.lr0 - lo) * (1 + math.cos(math.pi * t)) / 2


# -- metrics -------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    stage: int
    lr: float
    ce: float
    contrastive_mean: float
    total: float
    train_acc_noisy: float
    test_acc_live: float = float("nan")
    test_acc_ema: float = float("nan")
    selection_size: int = -1
    selection_noise_rate: float = float("nan")


METRIC_FIELDS = [f.name for f in fields(EpochRecord)]


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def write_csv(self, path):
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(METRIC_FIELDS)
            for r in self.records:
                w.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])
        os.replace(tmp, path)

    @classmethod
    def read_csv(cls, path) -> "RunMetrics":
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != METRIC_FIELDS:
                raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
            recs = []
            for row in reader:
                kw = {}
                for fd in fields(EpochRecord):
                    kw[fd.name] = int(row[fd.name]) if fd.type in ("int", int) else float(row[fd.name])
                recs.append(EpochRecord(**kw))
        return cls(recs)

    def last_with(self, key: str):
        for r in reversed(self.records):
            v = getattr(r, key)
            if not (isinstance(v, float) and math.isnan(v)):
                return r
        return None


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


class TrainingAborted(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------------

def default_device() -> torch.device:
    return torch.device(os.environ.get("CWCL_DEVICE", "cpu"))


def _to_tensor(batch: np.ndarray, device) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 3, 1, 2).to(device)


def two_view_batch(images: np.ndarray, indices, policy: AugPolicy, seed: int, epoch: int, device="cpu"):
    """(2B, C, H, W) tensor laid out [view a; view b]; views depend only on (seed, epoch, index)."""
    va, vb = [], []
    for i in indices:
        rng = sample_stream(seed, int(i), epoch, _VIEWS)
        va.append(augment(images[i], policy, rng))
        vb.append(augment(images[i], policy, rng))
    return _to_tensor(np.stack(va + vb), device)


@torch.no_grad()
def predict_logits(model, images: np.ndarray, batch_size: int = 512, device=None) -> torch.Tensor:
    device = device or next(model.parameters()).device
    was_training = model.training
    model.eval()
    out = []
    for s in range(0, len(images), batch_size):
        logits = model(_to_tensor(images[s:s + batch_size], device))
        out.append((logits[0] if isinstance(logits, tuple) else logits).cpu())
    model.train(was_training)
    return torch.cat(out)


def accuracy_from_logits(logits, labels) -> float:
    labels = torch.as_tensor(np.asarray(labels))
    if len(labels) == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    return float((torch.as_tensor(logits).argmax(1) == labels).double().mean())


def evaluate(model, testset, batch_size: int = 512) -> float:
    if len(testset) == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    return accuracy_from_logits(predict_logits(model, testset.images, batch_size), testset.labels)


def _ema_decay(plan: TrainPlan, ema: EmaState) -> float:
    if not plan.ema_warmup:
        return plan.ema_decay
    n = ema.num_updates
    return min(plan.ema_decay, (1 + n) / (10 + n))


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _make_optimizer(plan, params):
    return torch.optim.SGD(params, lr=plan.lr0, momentum=plan.momentum, weight_decay=plan.weight_decay)


def _abort(run_dir, epoch, step, indices, parts=None):
    info = {"epoch": epoch, "step": step, "batch_indices": [int(i) for i in indices]}
    if parts is not None:
        info["ce"] = float(parts.ce)
        info["contrastive"] = [float(c) for c in parts.contrastive_per_layer]
    if run_dir is not None:
        Path(run_dir, "abort.json").write_text(json.dumps(info, indent=2))
    raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}; batch indices {info['batch_indices'][:16]}"
                          f"{'...' if len(indices) > 16 else ''}")


def _check_forward(run_dir, epoch, step, indices, logits, taps):
    if not (torch.isfinite(logits).all() and all(torch.isfinite(t).all() for t in taps)):
        _abort(run_dir, epoch, step, indices)


def _evaluate_pair(model, ema, testset, rec: EpochRecord):
    if testset is None:
        return
    rec.test_acc_live = evaluate(model, testset)
    rec.test_acc_ema = evaluate(ema_model(model, ema), testset)


def _manifest(plan, stage, epoch, extra):
    m = {"stage": stage, "epoch": epoch, "seed": plan.seed, "plan": asdict(plan)}
    m.update(extra or {})
    return m


def _resume_metrics(run_dir, upto_epoch) -> RunMetrics:
    p = Path(run_dir) / "metrics.csv"
    if not p.exists():
        return RunMetrics()
    return RunMetrics([r for r in RunMetrics.read_csv(p).records if r.epoch <= upto_epoch])


# -- stage 1 -----------------------------------------------------------------

def train_stage1(plan: TrainPlan, corpus, model, run_dir, testset=None, heads=None,
                 resume_from=None, manifest_extra: dict | None = None,
                 metrics: RunMetrics | None = None):
    """CE on noisy labels plus channel-wise contrast on every tapped layer.

    Returns (checkpoint path, RunMetrics).  ``model`` is trained in place.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    device = next(model.parameters()).device
    if heads is None:
        torch.manual_seed(plan.seed + 1)
        if plan.cwcl_channels == "batch":
            heads = make_batch_channel_heads(model, plan.proj_hidden)
        else:
            heads = make_channel_heads(model, plan.proj_hidden, plan.proj_out)
    heads = heads.to(device)
    ema = EmaState.from_model(model, plan.ema_decay)
    opt = _make_optimizer(plan, list(model.parameters()) + list(heads.parameters()))
    metrics = metrics if metrics is not None else RunMetrics()
    start = 0
    if resume_from is not None:
        manifest, _, ema, extras = load_checkpoint(resume_from, model)
        if manifest.get("stage") != 1:
            raise ValueError(f"{resume_from} is not a stage-1 checkpoint")
        heads.load_state_dict(extras["heads"])
        opt.load_state_dict(extras["optimizer"])
        start = manifest["epoch"]
        metrics = _resume_metrics(run_dir, start)

    images, labels = corpus.images, corpus.noisy_labels
    n = len(corpus)
    policy = plan.policy
    ckpt = Path(resume_from) if resume_from is not None else None
    for epoch in range(start, plan.epochs_stage1):
        lr = lr_at(plan, epoch)
        _set_lr(opt, lr)
        model.train()
        heads.train()
        order = sample_stream(plan.seed, 0, epoch, _SHUFFLE).permutation(n)
        sums = np.zeros(3)
        correct = 0
        steps = 0
        for step, s in enumerate(range(0, n, plan.batch_size)):
            idx = order[s:s + plan.batch_size]
            x = two_view_batch(images, idx, policy, plan.seed, epoch, device)
            y = torch.as_tensor(labels[idx], device=device)
            logits, taps = model(x)
            _check_forward(run_dir, epoch + 1, step, idx, logits, taps)
            ce = ce_loss(logits, y.repeat(2))
            b = len(idx)
            if plan.lam > 0:
                per_layer = []
                for l, (tap, head) in enumerate(zip(taps, heads)):
                    if plan.cwcl_channels == "batch":
                        bank_a = project_batch_channels(tap[:b], head).channels
                        bank_b = project_batch_channels(tap[b:], head).channels
                    else:
                        bank = project_channels(tap, head, l).channels
                        bank_a, bank_b = bank[:b], bank[b:]
                    per_layer.append(cwcl_from_banks(bank_a, bank_b, plan.tau_cwcl, plan.symmetrize,
                                                     plan.cwcl_reduction))
            else:
                per_layer = [torch.zeros((), device=device)] * len(taps)
            parts = stage1_total(ce, per_layer, plan.lam)
            if not torch.isfinite(parts.total):
                _abort(run_dir, epoch + 1, step, idx, parts)
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()
            ema_update(ema, model, _ema_decay(plan, ema))
            sums += [ce.item(), sum(p.item() for p in per_layer) / len(per_layer), parts.total.item()]
            correct += int((logits[:b].argmax(1) == y).sum())
            steps += 1

        ce_m, con_m, tot_m = sums / steps
        rec = EpochRecord(epoch + 1, 1, lr, float(ce_m), float(con_m), float(tot_m), correct / n)
        if testset is not None and ((epoch + 1) % plan.eval_every == 0 or epoch + 1 == plan.epochs_stage1):
            _evaluate_pair(model, ema, testset, rec)
        metrics.append(rec)
        metrics.write_csv(run_dir / "metrics.csv")
        log.info("stage1 epoch %d lr %.4g ce %.4f cwcl %.4f acc_ema %.4f", rec.epoch, lr, ce_m, con_m,
                 rec.test_acc_ema)
        last = epoch + 1 == plan.epochs_stage1
        if last or (plan.ckpt_every and (epoch + 1) % plan.ckpt_every == 0):
            ckpt = save_checkpoint(checkpoint_dir(run_dir, 1, epoch + 1), model, ema, opt, heads,
                                   _manifest(plan, 1, epoch + 1, manifest_extra))
    if ckpt is None:
        # zero-epoch stage: still hand stage 2 a starting point
        ckpt = save_checkpoint(checkpoint_dir(run_dir, 1, 0), model, ema, opt, heads,
                               _manifest(plan, 1, 0, manifest_extra))
    return ckpt, metrics


# -- stage 2 -----------------------------------------------------------------

def _select(plan, model, ema, corpus, r):
    scorer = ema_model(model, ema)
    return select_confident(scorer, corpus, plan.gamma, r, plan.policy, plan.seed,
                            plan.selection_mode, plan.selection_quantile)


def train_stage2(plan: TrainPlan, corpus, checkpoint, model, run_dir, testset=None,
                 metrics: RunMetrics | None = None, manifest_extra: dict | None = None,
                 batch_hook: Callable[[int, np.ndarray], None] | None = None):
    """Progressive finetuning on confident samples with CE + supervised contrast.

    ``checkpoint`` is a stage-1 checkpoint to start from, or a stage-2 one to
    resume.  ``model`` supplies the architecture and receives the weights.
    Every ``round_length`` epochs the EMA model re-selects the confident set.
    """
    run_dir = Path(run_dir)
    device = next(model.parameters()).device
    manifest, _, ema, extras = load_checkpoint(checkpoint, model)
    model.to(device)
    ema.decay = plan.ema_decay
    torch.manual_seed(plan.seed + 2)
    heads = make_instance_heads(model, plan.proj_hidden, plan.proj_out).to(device)
    opt = _make_optimizer(plan, list(model.parameters()) + list(heads.parameters()))

    e1 = plan.epochs_stage1
    start = e1
    sel: ConfidentSet | None = None
    if manifest.get("stage") == 2:
        heads.load_state_dict(extras["heads"])
        opt.load_state_dict(extras["optimizer"])
        start = manifest["epoch"]
        metrics = _resume_metrics(run_dir, start)
        # rebuild the selection in force at the resume point
        for r in range(-(-(start - e1) // plan.round_length)):
            sel = load_selection(selection_path(run_dir, r), r, plan.gamma)
    metrics = metrics if metrics is not None else _resume_metrics(run_dir, e1)

    images, labels = corpus.images, corpus.noisy_labels
    policy = plan.policy
    ckpt = Path(checkpoint)
    for epoch in range(start, plan.total_epochs):
        k = epoch - e1
        r = k // plan.round_length
        if k % plan.round_length == 0:
            new = _select(plan, model, ema, corpus, r)
            if len(new) == 0:
                if sel is None:
                    save_selection(new, run_dir)
                    raise TrainingAborted(
                        f"round {r}: no sample reaches gamma={plan.gamma} and there is no earlier "
                        "selection to fall back on; lower gamma")
                log.warning("round %d: empty selection, reusing round %d (%d samples)", r, sel.round, len(sel))
                # the round file always lists what this round trains on
                new = ConfidentSet(sel.indices, sel.scores, r, sel.threshold)
            sel = new
            save_selection(sel, run_dir)
        lr = lr_at(plan, epoch)
        _set_lr(opt, lr)
        model.train()
        heads.train()
        steps_per_epoch = max(1, math.ceil(len(sel) / plan.batch_size))
        rng = sample_stream(plan.seed, 0, epoch, _BALANCED)
        sums = np.zeros(3)
        correct = seen = 0
        for step, idx in enumerate(class_balanced_batches(sel, labels, plan.batch_size, rng, steps_per_epoch)):
            if batch_hook is not None:
                batch_hook(r, idx)
            x = two_view_batch(images, idx, policy, plan.seed, epoch, device)
            y = torch.as_tensor(labels[idx], device=device)
            logits, taps = model(x)
            _check_forward(run_dir, epoch + 1, step, idx, logits, taps)
            ce = ce_loss(logits, y.repeat(2))
            if plan.lam > 0:
                per_layer = [supcon_loss(head(tap), y, plan.tau_supcon) for tap, head in zip(taps, heads)]
            else:
                per_layer = [torch.zeros((), device=device)] * len(taps)
            parts = stage2_total(ce, per_layer, plan.lam)
            if not torch.isfinite(parts.total):
                _abort(run_dir, epoch + 1, step, idx, parts)
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()
            ema_update(ema, model, _ema_decay(plan, ema))
            sums += [ce.item(), sum(p.item() for p in per_layer) / len(per_layer), parts.total.item()]
            b = len(idx)
            correct += int((logits[:b].argmax(1) == y).sum())
            seen += b

        ce_m, con_m, tot_m = sums / steps_per_epoch
        rec = EpochRecord(epoch + 1, 2, lr, float(ce_m), float(con_m), float(tot_m), correct / seen,
                          selection_size=len(sel), selection_noise_rate=selection_noise_rate(sel, corpus))
        if testset is not None and ((epoch + 1) % plan.eval_every == 0 or epoch + 1 == plan.total_epochs):
            _evaluate_pair(model, ema, testset, rec)
        metrics.append(rec)
        metrics.write_csv(run_dir / "metrics.csv")
        log.info("stage2 epoch %d lr %.4g sel %d (noise %.3f) supcon %.4f acc_ema %.4f", rec.epoch, lr,
                 len(sel), rec.selection_noise_rate, con_m, rec.test_acc_ema)
        last = epoch + 1 == plan.total_epochs
        if last or (plan.ckpt_every and (epoch + 1) % plan.ckpt_every == 0):
            ckpt = save_checkpoint(checkpoint_dir(run_dir, 2, epoch + 1), model, ema, opt, heads,
                                   _manifest(plan, 2, epoch + 1, manifest_extra))
    return ckpt, metrics
