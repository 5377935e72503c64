import copy

import numpy as np
import pytest
import torch

from cwcl.netcore import (ChannelProjector, CheckpointError, EmaState, build_backbone, checkpoint_dir,
                          ema_model, ema_update, forward_with_taps, load_checkpoint, make_batch_channel_heads,
                          make_channel_heads, project_batch_channels, project_channels, save_checkpoint,
                          snapshot_for_eval)


@pytest.fixture
def small():
    torch.manual_seed(0)
    return build_backbone("resnet-small", 10, 16)


def test_forward_shapes(small):
    logits, taps = forward_with_taps(small, torch.randn(2, 3, 16, 16))
    assert logits.shape == (2, 10)
    assert len(taps) == 4
    for tap, (m, h, w) in zip(taps, small.tap_shapes()):
        assert tap.shape == (2, m, h, w)
        assert m >= 1


def test_resnet18_has_four_taps():
    model = build_backbone("resnet18", 100, 32)
    assert [s[0] for s in model.tap_shapes()] == [64, 128, 256, 512]
    assert [s[1] for s in model.tap_shapes()] == [32, 16, 8, 4]


def test_shape_mismatch_names_both_shapes(small):
    with pytest.raises(ValueError, match=r"expected \(B, 3, 16, 16\).*got \(2, 3, 8, 8\)"):
        forward_with_taps(small, torch.randn(2, 3, 8, 8))


def test_zero_classifier_gives_zero_logits(small):
    with torch.no_grad():
        small.classifier.weight.zero_()
        small.classifier.bias.zero_()
    logits, _ = small(torch.randn(3, 3, 16, 16))
    assert torch.count_nonzero(logits) == 0


def test_eval_mode_is_deterministic(small):
    small.train()
    small(torch.randn(8, 3, 16, 16))  # move BN running stats off their init
    small.eval()
    x = torch.randn(4, 3, 16, 16)
    a, ta = small(x)
    b, tb = small(x)
    assert torch.equal(a, b)
    assert all(torch.equal(u, v) for u, v in zip(ta, tb))


def test_unknown_arch():
    with pytest.raises(ValueError):
        build_backbone("vgg", 10, 32)


# -- channel projection ------------------------------------------------------

def test_channel_cardinality_and_norm(small):
    heads = make_channel_heads(small)
    _, taps = small(torch.randn(2, 3, 16, 16))
    for l, (tap, head) in enumerate(zip(taps, heads)):
        bank = project_channels(tap, head, l)
        assert bank.channels.shape[:2] == (2, tap.shape[1])
        assert bank.layer_index == l
        norms = bank.channels.norm(dim=-1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)
        single = project_channels(tap[0], head, l)
        assert len(single) == tap.shape[1]


def test_three_channels_give_three_vectors():
    head = ChannelProjector(4 * 4, 16, 8)
    bank = project_channels(torch.randn(3, 4, 4), head)
    assert len(bank) == 3


def test_head_layer_mismatch(small):
    heads = make_channel_heads(small)
    _, taps = small(torch.randn(1, 3, 16, 16))
    with pytest.raises(ValueError, match="layer"):
        project_channels(taps[0], heads[1])


def test_positive_scaling_leaves_bank_unchanged():
    torch.manual_seed(1)
    head = ChannelProjector(36, 32, 16).double()
    tap = torch.randn(5, 6, 6, dtype=torch.float64)
    a = project_channels(tap, head).channels
    b = project_channels(2.0 * tap, head).channels
    assert torch.allclose(a, b, atol=1e-12)


def test_batch_channel_bank(small):
    heads = make_batch_channel_heads(small)
    _, taps = small(torch.randn(6, 3, 16, 16))
    bank = project_batch_channels(taps[2], heads[2])
    assert bank.channels.shape == (taps[2].shape[1], 6)
    assert torch.allclose(bank.channels.norm(dim=-1), torch.ones(taps[2].shape[1]), atol=1e-5)


# -- EMA ---------------------------------------------------------------------

def _const_state(value, dtype=torch.float64):
    return {"w": torch.full((3,), value, dtype=dtype), "steps": torch.tensor(value, dtype=torch.long)}


@pytest.mark.parametrize("decay,expected", [(1.0, 0.0), (0.0, 2.0), (0.5, 1.0)])
def test_ema_examples(decay, expected):
    ema = EmaState(_const_state(0.0), decay)
    ema_update(ema, _const_state(2.0))
    assert torch.allclose(ema.shadow["w"], torch.full((3,), expected, dtype=torch.float64))
    assert int(ema.shadow["steps"]) == 2  # integer buffers follow the live model


def test_ema_linearity():
    rng = np.random.default_rng(0)
    s0, l1, l2 = (torch.from_numpy(rng.normal(size=7)) for _ in range(3))
    d = 0.37
    ema = EmaState({"w": s0.clone()}, d)
    ema_update(ema, {"w": l1})
    ema_update(ema, {"w": l2})
    composed = d * d * s0 + d * (1 - d) * l1 + (1 - d) * l2
    assert torch.allclose(ema.shadow["w"], composed, rtol=0, atol=1e-10)


def test_ema_shape_mismatch():
    ema = EmaState({"w": torch.zeros(3)})
    with pytest.raises(ValueError, match="shape"):
        ema_update(ema, {"w": torch.zeros(4)})


def test_snapshot_requires_initialization():
    with pytest.raises(RuntimeError):
        snapshot_for_eval(EmaState())
    with pytest.raises(ValueError):
        EmaState(decay=1.5)


def test_snapshot_isolation_and_initial_copy(small):
    ema = EmaState.from_model(small)
    snap = snapshot_for_eval(ema)
    for k, v in small.state_dict().items():
        assert torch.equal(snap[k], v)
    opt = torch.optim.SGD(small.parameters(), lr=0.5)
    small(torch.randn(4, 3, 16, 16))[0].sum().backward()
    opt.step()
    w = "classifier.weight"
    assert not torch.equal(small.state_dict()[w], snap[w])
    assert torch.equal(snapshot_for_eval(ema)[w], snap[w])


def test_decay_zero_snapshot_equals_live(small):
    ema = EmaState.from_model(copy.deepcopy(small), 0.0)
    with torch.no_grad():
        for p in small.parameters():
            p.add_(1.0)
    ema_update(ema, small)
    for k, v in small.state_dict().items():
        assert torch.equal(snapshot_for_eval(ema)[k], v)
    evaluated = ema_model(small, ema)
    assert not evaluated.training


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small):
    ema = EmaState.from_model(small, 0.9)
    ema.num_updates = 5
    heads = make_channel_heads(small)
    opt = torch.optim.SGD(small.parameters(), lr=0.1, momentum=0.9)
    path = save_checkpoint(checkpoint_dir(tmp_path, 1, 3), small, ema, opt, heads, {"stage": 1, "epoch": 3})
    assert path == tmp_path / "ckpt" / "1-3"
    fresh = build_backbone("resnet-small", 10, 16)
    manifest, live, ema2, extras = load_checkpoint(path, fresh)
    assert manifest == {"stage": 1, "epoch": 3}
    assert ema2.decay == 0.9 and ema2.num_updates == 5
    for k, v in small.state_dict().items():
        assert torch.equal(fresh.state_dict()[k], v)
    assert set(extras) == {"heads", "optimizer"}


def test_checkpoint_errors(tmp_path, small):
    path = save_checkpoint(tmp_path / "c", small, EmaState.from_model(small))
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path, build_backbone("resnet-w4x1", 10, 16))
    (path / "live.pt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
