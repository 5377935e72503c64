"""Residual backbone with per-stage feature taps, channel projection heads, and EMA weights."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x, return_pre=False):
        out = F.relu(self.bn1(self.conv1(x)))
        pre = self.bn2(self.conv2(out)) + self.shortcut(x)
        return (F.relu(pre), pre) if return_pre else F.relu(pre)


class TappedResNet(nn.Module):
    """CIFAR-style ResNet (3x3 stem, no max-pool) exposing the output of every stage.

    ``blocks=(2, 2, 2, 2)`` with ``width=64`` is ResNet-18.  A tap is the stage's
    last residual sum before its ReLU: post-ReLU maps can be identically zero,
    which has no direction to contrast.
    """

    def __init__(self, num_classes=10, blocks=(2, 2, 2, 2), width=64, in_channels=3,
                 image_size=32, tap_points=None):
        super().__init__()
        self.num_classes = num_classes
        self.input_shape = (in_channels, image_size, image_size)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, 1, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_planes = width
        for i, n in enumerate(blocks):
            planes = width * 2 ** i
            stride = 1 if i == 0 else 2
            layers = []
            for j in range(n):
                layers.append(BasicBlock(in_planes, planes, stride if j == 0 else 1))
                in_planes = planes
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.classifier = nn.Linear(in_planes, num_classes)
        self.tap_points = tuple(range(len(blocks)) if tap_points is None else tap_points)

    def tap_shapes(self) -> list[tuple[int, int, int]]:
        """(M_l, H_l, W_l) of every tapped map, without running a forward pass."""
        c0, h, w = self.input_shape
        shapes = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                h, w = (h + 1) // 2, (w + 1) // 2
            m = stage[-1].bn2.num_features
            if i in self.tap_points:
                shapes.append((m, h, w))
        return shapes

    def forward(self, x):
        out = self.stem(x)
        taps = []
        for i, stage in enumerate(self.stages):
            for block in stage[:-1]:
                out = block(out)
            out, pre = stage[-1](out, return_pre=True)
            if i in self.tap_points:
                taps.append(pre)
        pooled = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.classifier(pooled), taps


def build_backbone(arch: str = "resnet18", num_classes: int = 10, image_size: int = 32,
                   in_channels: int = 3) -> TappedResNet:
    if arch == "resnet18":
        return TappedResNet(num_classes, (2, 2, 2, 2), 64, in_channels, image_size)
    if arch == "resnet-small":
        # desk-scale: 8-16-32-64 channels, one block per stage
        return TappedResNet(num_classes, (1, 1, 1, 1), 8, in_channels, image_size)
    if arch.startswith("resnet-w"):
        # resnet-w<width>x<blocks>, e.g. resnet-w16x1
        width, _, blocks = arch[len("resnet-w"):].partition("x")
        n = int(blocks or 1)
        return TappedResNet(num_classes, (n,) * 4, int(width), in_channels, image_size)
    raise ValueError(f"unknown backbone {arch!r}")


def forward_with_taps(model: TappedResNet, batch: torch.Tensor):
    expected = tuple(model.input_shape)
    if batch.dim() != 4 or tuple(batch.shape[1:]) != expected:
        raise ValueError(f"batch shape mismatch: expected (B, {', '.join(map(str, expected))}), "
                         f"got {tuple(batch.shape)}")
    return model(batch)


# -- projection heads -------------------------------------------------------

class ChannelProjector(nn.Module):
    """Shared per-layer map from one channel's flattened H*W map to a unit vector.

    Bias-free so the head is positively homogeneous; together with the final
    normalization a bank is invariant to positive rescaling of the tap.  Leaky
    rather than plain ReLU: a dead hidden layer would emit a zero vector.
    """

    def __init__(self, spatial: int, hidden: int = 128, out: int = 64, layer_index: int = 0):
        super().__init__()
        self.spatial = spatial
        self.layer_index = layer_index
        self.fc1 = nn.Linear(spatial, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, out, bias=False)

    def forward(self, tap):
        # tap: (B, M, H, W) -> (B, M, out)
        v = tap.flatten(2)
        return self.fc2(F.leaky_relu(self.fc1(v), 0.1))


@dataclass
class ChannelBank:
    layer_index: int
    channels: torch.Tensor  # (..., M, d), unit rows

    def __len__(self):
        return self.channels.shape[-2]


def project_channels(tap: torch.Tensor, head: ChannelProjector, layer_index: int | None = None) -> ChannelBank:
    """Accepts a single (M, H, W) map or a (B, M, H, W) batch."""
    single = tap.dim() == 3
    if single:
        tap = tap.unsqueeze(0)
    if tap.dim() != 4:
        raise ValueError(f"tap must be (M, H, W) or (B, M, H, W), got {tuple(tap.shape)}")
    spatial = tap.shape[2] * tap.shape[3]
    if spatial != head.spatial or (layer_index is not None and layer_index != head.layer_index):
        raise ValueError(f"projection head for layer {head.layer_index} (H*W={head.spatial}) "
                         f"applied to layer {layer_index} tap with H*W={spatial}")
    z = F.normalize(head(tap), dim=-1)
    return ChannelBank(head.layer_index, z[0] if single else z)


class BatchChannelProjector(nn.Module):
    """Pooled stage features (B, M) -> projected (B, M); channel i's vector is column i over the batch."""

    def __init__(self, channels: int, hidden: int = 128, layer_index: int = 0):
        super().__init__()
        self.channels = channels
        self.layer_index = layer_index
        self.net = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, channels))

    def forward(self, tap):
        return self.net(F.adaptive_avg_pool2d(tap, 1).flatten(1))


def project_batch_channels(tap: torch.Tensor, head: BatchChannelProjector) -> ChannelBank:
    """(B, M, H, W) batch -> bank of M unit vectors of dimension B (one per channel)."""
    if tap.dim() != 4 or tap.shape[1] != head.channels:
        raise ValueError(f"projection head for layer {head.layer_index} expects {head.channels} channels, "
                         f"got tap of shape {tuple(tap.shape)}")
    return ChannelBank(head.layer_index, F.normalize(head(tap).T, dim=-1))


class InstanceProjector(nn.Module):
    """Pooled stage features -> unit embedding, for supervised contrast on a tapped layer."""

    def __init__(self, channels: int, hidden: int = 128, out: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out))

    def forward(self, tap):
        return F.normalize(self.net(F.adaptive_avg_pool2d(tap, 1).flatten(1)), dim=-1)


def make_channel_heads(model: TappedResNet, hidden: int = 128, out: int = 64) -> nn.ModuleList:
    return nn.ModuleList(
        ChannelProjector(h * w, hidden, out, layer_index=l)
        for l, (m, h, w) in enumerate(model.tap_shapes())
    )


def make_batch_channel_heads(model: TappedResNet, hidden: int = 128) -> nn.ModuleList:
    return nn.ModuleList(BatchChannelProjector(m, hidden, l) for l, (m, h, w) in enumerate(model.tap_shapes()))


def make_instance_heads(model: TappedResNet, hidden: int = 128, out: int = 64) -> nn.ModuleList:
    return nn.ModuleList(InstanceProjector(m, hidden, out) for m, h, w in model.tap_shapes())


# -- EMA ---------------------------------------------------------------------

class EmaState:
    """Shadow copy of a model's floating-point state (parameters and BN statistics)."""

    def __init__(self, shadow: dict[str, torch.Tensor] | None = None, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
        self.shadow = shadow
        self.decay = decay
        self.num_updates = 0

    @classmethod
    def from_model(cls, model: nn.Module, decay: float = 0.999) -> "EmaState":
        return cls({k: v.detach().clone() for k, v in model.state_dict().items()}, decay)

    def state_dict(self):
        return {"shadow": self.shadow, "decay": self.decay, "num_updates": self.num_updates}

    def load_state_dict(self, state):
        self.shadow = {k: v.clone() for k, v in state["shadow"].items()}
        self.decay = state["decay"]
        self.num_updates = state.get("num_updates", 0)


def _live_state(live) -> dict[str, torch.Tensor]:
    return live.state_dict() if isinstance(live, nn.Module) else live


@torch.no_grad()
def ema_update(ema: EmaState, live, decay: float | None = None) -> EmaState:
    """shadow <- d * shadow + (1 - d) * live; integer buffers are copied."""
    if ema.shadow is None:
        raise RuntimeError("EMA state is not initialized")
    d = ema.decay if decay is None else decay
    live = _live_state(live)
    if live.keys() != ema.shadow.keys():
        raise ValueError(f"EMA key mismatch: {sorted(set(live) ^ set(ema.shadow))[:5]}")
    for k, s in ema.shadow.items():
        v = live[k].detach()
        if v.shape != s.shape:
            raise ValueError(f"EMA shape mismatch for {k}: shadow {tuple(s.shape)}, live {tuple(v.shape)}")
        if s.is_floating_point():
            s.mul_(d).add_(v.to(s.dtype), alpha=1.0 - d)
        else:
            s.copy_(v)
    ema.num_updates += 1
    return ema


def snapshot_for_eval(ema: EmaState) -> dict[str, torch.Tensor]:
    if ema.shadow is None:
        raise RuntimeError("EMA state is not initialized")
    return {k: v.clone() for k, v in ema.shadow.items()}


def ema_model(model: nn.Module, ema: EmaState) -> nn.Module:
    """Detached eval-mode copy of ``model`` carrying the shadow weights."""
    m = copy.deepcopy(model)
    m.load_state_dict(snapshot_for_eval(ema))
    return m.eval()


# -- checkpoints -------------------------------------------------------------

def checkpoint_dir(run_dir, stage: int, epoch: int) -> Path:
    return Path(run_dir) / "ckpt" / f"{stage}-{epoch}"


def save_checkpoint(path, model, ema: EmaState, optimizer=None, heads=None, manifest: dict | None = None):
    """Write live/EMA weights, optimizer state and manifest.json; manifest goes last."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "live.pt")
    torch.save(ema.state_dict(), path / "ema.pt")
    if heads is not None:
        torch.save(heads.state_dict(), path / "heads.pt")
    if optimizer is not None:
        torch.save(optimizer.state_dict(), path / "optimizer.pt")
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest or {}, indent=2, sort_keys=True))
    os.replace(tmp, path / "manifest.json")
    return path


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, model=None):
    """Returns (manifest, live state, EmaState, extras); loads into ``model`` if given."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        live = torch.load(path / "live.pt", map_location="cpu", weights_only=True)
        ema_state = torch.load(path / "ema.pt", map_location="cpu", weights_only=True)
        extras = {}
        for name in ("heads", "optimizer"):
            p = path / f"{name}.pt"
            if p.exists():
                extras[name] = torch.load(p, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or partial checkpoint
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ema = EmaState()
    ema.load_state_dict(ema_state)
    if model is not None:
        try:
            model.load_state_dict(live)
        except RuntimeError as exc:
            raise CheckpointError(f"architecture mismatch loading {path}: {exc}") from exc
    return manifest, live, ema, extras
