import json
import math
import shutil

import numpy as np
import pytest
import torch

from cwcl import trainer
from cwcl.confident import ConfidentSet, load_selection, selection_path
from cwcl.corpus import LabeledImageSet, NoiseSpec, make_noisy_corpus
from cwcl.datasets import make_shapes
from cwcl.netcore import build_backbone, load_checkpoint
from cwcl.trainer import (METRIC_FIELDS, EpochRecord, RunMetrics, TrainingAborted, TrainPlan,
                          accuracy_from_logits, evaluate, lr_at, train_stage1, train_stage2)

ARCH = "resnet-w4x1"
SIZE = 8


def _plan(**kw):
    base = dict(batch_size=16, epochs_stage1=2, epochs_stage2=2, round_length=1, gamma=0.05,
                proj_hidden=16, proj_out=8, crop_padding=1, cwcl_reduction="mean")
    base.update(kw)
    return TrainPlan(**base)


def _model(seed=0):
    torch.manual_seed(seed)
    return build_backbone(ARCH, 10, SIZE)


@pytest.fixture(scope="module")
def corpus():
    base = make_shapes(48, 10, SIZE, seed=0)
    return make_noisy_corpus(base, NoiseSpec("symmetric", 0.4), 0)


@pytest.fixture(scope="module")
def testset():
    return make_shapes(20, 10, SIZE, seed=0, split="test")


# -- schedule ----------------------------------------------------------------

def test_defaults_match_recipe():
    p = TrainPlan()
    assert (p.lam, p.batch_size, p.lr0, p.momentum, p.weight_decay) == (0.6, 128, 0.1, 0.9, 5e-4)
    assert (p.epochs_stage1, p.epochs_stage2, p.total_epochs) == (100, 200, 300)
    assert (p.ema_decay, p.gamma, p.round_length) == (0.999, 0.9, 10)


def test_lr_endpoints_and_midpoint():
    p = TrainPlan()
    assert lr_at(p, 0) == pytest.approx(0.1, rel=1e-12)
    assert lr_at(p, 299) == pytest.approx(1e-4, rel=1e-12)
    p = TrainPlan(epochs_stage1=2, epochs_stage2=1)  # t = 1/2 at epoch 1
    lo = 0.1 * 1e-3
    assert lr_at(p, 1) == pytest.approx(lo + (0.1 - lo) * (1 + math.cos(math.pi / 2)) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(p, -1)


def test_lr_continues_across_stage_boundary():
    p = TrainPlan(epochs_stage1=10, epochs_stage2=20)
    values = [lr_at(p, e) for e in range(30)]
    assert all(a > b for a, b in zip(values, values[1:]))
    restart = TrainPlan(epochs_stage1=10, epochs_stage2=20, stage2_restart_schedule=True)
    assert lr_at(restart, 10) == pytest.approx(0.1)


def test_plan_validation():
    with pytest.raises(ValueError):
        TrainPlan(lam=1.2)
    with pytest.raises(ValueError):
        TrainPlan(batch_size=0)
    with pytest.raises(ValueError, match="cwcl_channels"):
        TrainPlan(cwcl_channels="pixels")


# -- evaluation ---------------------------------------------------------------------

def test_accuracy_examples():
    labels = np.arange(10).repeat(3)
    perfect = torch.eye(10)[labels]
    assert accuracy_from_logits(perfect, labels) == 1.0
    constant = torch.zeros(30, 10)
    constant[:, 4] = 1.0
    assert accuracy_from_logits(constant, labels) == pytest.approx(0.1)
    logits = torch.randn(30, 10)
    assert accuracy_from_logits(3.5 * logits, labels) == accuracy_from_logits(logits, labels)
    with pytest.raises(ValueError):
        accuracy_from_logits(torch.zeros(0, 10), [])


def test_evaluate_empty_set():
    empty = LabeledImageSet(np.zeros((0, SIZE, SIZE, 3)), np.zeros(0, dtype=int), 10, "test")
    with pytest.raises(ValueError):
        evaluate(_model(), empty)


# -- stage 1 -----------------------------------------------------------------

def test_ten_samples_take_one_step(tmp_path):
    base = make_shapes(10, 10, SIZE, seed=1)
    c = make_noisy_corpus(base, NoiseSpec("symmetric", 0.0), 0)
    ckpt, metrics = train_stage1(TrainPlan(epochs_stage1=1, epochs_stage2=0, proj_hidden=8, proj_out=4),
                                 c, _model(), tmp_path)
    _, _, ema, _ = load_checkpoint(ckpt)
    assert ema.num_updates == 1
    assert len(metrics) == 1


def test_stage1_bookkeeping(tmp_path, corpus, testset):
    plan = _plan(epochs_stage1=3)
    ckpt, metrics = train_stage1(plan, corpus, _model(), tmp_path, testset)
    assert ckpt == tmp_path / "ckpt" / "1-3"
    assert [r.epoch for r in metrics] == [1, 2, 3]
    for r in metrics:
        assert r.total == pytest.approx((1 - plan.lam) * r.ce + plan.lam * r.contrastive_mean, abs=1e-6)
        assert r.contrastive_mean > 0
        assert 0 <= r.test_acc_ema <= 1
    on_disk = RunMetrics.read_csv(tmp_path / "metrics.csv")
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == ",".join(METRIC_FIELDS)
    assert [r.total for r in on_disk] == [r.total for r in metrics]


def test_lambda_zero_is_plain_ce(tmp_path, corpus):
    _, metrics = train_stage1(_plan(lam=0.0, epochs_stage1=1), corpus, _model(), tmp_path)
    assert metrics[0].contrastive_mean == 0.0
    assert metrics[0].total == pytest.approx(metrics[0].ce, rel=1e-12)


def test_batch_channel_mode_runs(tmp_path, corpus):
    _, metrics = train_stage1(_plan(epochs_stage1=1, cwcl_channels="batch"), corpus, _model(), tmp_path)
    assert math.isfinite(metrics[0].total) and metrics[0].contrastive_mean > 0


def test_stage1_resume_reproduces_tail(tmp_path, corpus):
    plan = _plan(epochs_stage1=4, ckpt_every=2)
    _, full = train_stage1(plan, corpus, _model(), tmp_path / "full")
    shutil.copytree(tmp_path / "full", tmp_path / "part")
    shutil.rmtree(tmp_path / "part" / "ckpt" / "1-4")
    _, resumed = train_stage1(plan, corpus, _model(), tmp_path / "part",
                              resume_from=tmp_path / "part" / "ckpt" / "1-2")
    assert [r.epoch for r in resumed] == [1, 2, 3, 4]
    for a, b in zip(full, resumed):
        assert a.total == pytest.approx(b.total, rel=1e-6)
        assert a.ce == pytest.approx(b.ce, rel=1e-6)


def test_non_finite_loss_aborts_with_dump(tmp_path):
    base = make_shapes(20, 10, SIZE, seed=2)
    images = base.images.copy()
    images[7] = np.nan
    c = make_noisy_corpus(LabeledImageSet(images, base.labels, 10), NoiseSpec("symmetric", 0.0), 0)
    with pytest.raises(TrainingAborted, match="non-finite"):
        train_stage1(_plan(epochs_stage1=1, batch_size=32), c, _model(), tmp_path)
    dump = json.loads((tmp_path / "abort.json").read_text())
    assert 7 in dump["batch_indices"]


# -- stage 2 -----------------------------------------------------------------

@pytest.fixture(scope="module")
def stage1(tmp_path_factory, corpus):
    run = tmp_path_factory.mktemp("s1")
    ckpt, metrics = train_stage1(_plan(), corpus, _model(), run)
    return run, ckpt


def test_stage2_trains_only_on_persisted_selection(tmp_path, corpus, testset, stage1):
    _, ckpt = stage1
    seen = {}
    ckpt2, metrics = train_stage2(_plan(epochs_stage2=3), corpus, ckpt, _model(), tmp_path, testset,
                                  batch_hook=lambda r, idx: seen.setdefault(r, set()).update(idx.tolist()))
    assert ckpt2 == tmp_path / "ckpt" / "2-5"
    assert sorted(seen) == [0, 1, 2]
    for r, idx in seen.items():
        persisted = set(load_selection(selection_path(tmp_path, r)).indices.tolist())
        assert idx <= persisted
    stage2 = [r for r in metrics if r.stage == 2]
    assert [r.epoch for r in stage2] == [3, 4, 5]
    for r in stage2:
        assert r.selection_size > 0 and 0 <= r.selection_noise_rate <= 1
        assert r.total == pytest.approx(0.4 * r.ce + 0.6 * r.contrastive_mean, abs=1e-6)


def test_single_round_when_round_length_covers_stage(tmp_path, corpus, stage1):
    _, ckpt = stage1
    train_stage2(_plan(epochs_stage2=2, round_length=2), corpus, ckpt, _model(), tmp_path)
    assert sorted(p.name for p in (tmp_path / "confident").iterdir()) == ["round-0.csv"]


def test_empty_first_round_aborts(tmp_path, corpus, stage1):
    _, ckpt = stage1
    with pytest.raises(TrainingAborted, match="lower gamma"):
        train_stage2(_plan(gamma=1.0), corpus, ckpt, _model(), tmp_path)


def test_empty_later_round_falls_back(tmp_path, corpus, stage1, monkeypatch, caplog):
    _, ckpt = stage1
    real = trainer._select

    def flaky(plan, model, ema, corpus, r):
        if r == 1:
            return ConfidentSet(np.array([], dtype=np.int64), np.array([]), r, plan.gamma)
        return real(plan, model, ema, corpus, r)

    monkeypatch.setattr(trainer, "_select", flaky)
    seen = {}
    train_stage2(_plan(), corpus, ckpt, _model(), tmp_path,
                 batch_hook=lambda r, idx: seen.setdefault(r, set()).update(idx.tolist()))
    r0 = load_selection(selection_path(tmp_path, 0)).indices
    r1 = load_selection(selection_path(tmp_path, 1)).indices
    np.testing.assert_array_equal(r0, r1)
    assert seen[1] <= set(r1.tolist())
    assert "empty selection" in caplog.text


def test_stage2_resume_reproduces_tail(tmp_path, corpus, stage1):
    _, ckpt = stage1
    plan = _plan(epochs_stage2=3, ckpt_every=1)
    _, full = train_stage2(plan, corpus, ckpt, _model(), tmp_path / "full")
    _, _ = train_stage2(_plan(epochs_stage2=3, ckpt_every=1), corpus, ckpt, _model(), tmp_path / "part")
    _, resumed = train_stage2(plan, corpus, tmp_path / "part" / "ckpt" / "2-4", _model(), tmp_path / "part")
    s2 = [r for r in resumed if r.stage == 2]
    assert [r.epoch for r in s2] == [3, 4, 5]
    for a, b in zip([r for r in full if r.stage == 2], s2):
        assert a.total == pytest.approx(b.total, rel=1e-6)
        assert a.selection_size == b.selection_size


def test_metrics_csv_round_trip(tmp_path):
    m = RunMetrics([EpochRecord(1, 1, 0.1, 2.0, 0.5, 1.1, 0.3), EpochRecord(2, 2, 0.05, 1.0, 0.2, 0.52, 0.6,
                                                                            0.7, 0.71, 40, 0.05)])
    m.write_csv(tmp_path / "m.csv")
    back = RunMetrics.read_csv(tmp_path / "m.csv")
    assert back[1] == m[1]
    assert math.isnan(back[0].test_acc_ema)
    assert back.last_with("test_acc_ema").epoch == 2
