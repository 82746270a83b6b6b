"""Residual audio/visual feature extractors and the self-calibrated STIL encoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

OUT_DIMS = {"audio_resnet": 128, "visual_resnet": 128, "visual_scnet_stil": 512}
MIN_AUDIO_ROWS = 8


@dataclass(frozen=True)
class EncoderSpec:
    """Which extractor to build; ``width`` is the stem channel count."""

    kind: str
    width: int | None = None  # 16 for audio, 8 for visual encoders
    depth: int = 1  # residual blocks per stage

    def __post_init__(self):
        if self.kind not in OUT_DIMS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {sorted(OUT_DIMS)}")
        if self.width is None:
            object.__setattr__(self, "width", 16 if self.kind == "audio_resnet" else 8)
        if self.width < 2 or self.width % 2 or self.depth < 1:
            raise ValueError("width must be an even number >= 2 and depth >= 1")

    @property
    def out_dim(self) -> int:
        return OUT_DIMS[self.kind]


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def _stages(block, widths, strides, depth):
    layers = []
    cin = widths[0]
    for cout, stride in zip(widths, strides):
        for i in range(depth):
            layers.append(block(cin, cout, stride if i == 0 else 1))
            cin = cout
    return nn.Sequential(*layers)


class AudioResNet(nn.Module):
    """MFCC map [B, Ta, 13] treated as a 1-channel image -> [B, 128]."""

    def __init__(self, width=16, depth=1, out_dim=128, n_mfcc=13):
        super().__init__()
        widths = [width, 2 * width, 4 * width, 8 * width]
        self.n_mfcc = n_mfcc
        self.stem = nn.Sequential(nn.Conv2d(1, width, 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(width), nn.ReLU())
        self.stages = _stages(BasicBlock, widths, [1, 2, 2, 2], depth)
        self.proj = nn.Linear(widths[-1], out_dim)
        self.out_dim = out_dim

    def forward(self, mfcc):
        if mfcc.dim() != 3 or mfcc.shape[-1] != self.n_mfcc:
            raise ValueError(f"expected [B, Ta, {self.n_mfcc}] features, got {tuple(mfcc.shape)}")
        if mfcc.shape[1] < MIN_AUDIO_ROWS:
            raise ValueError(f"need at least {MIN_AUDIO_ROWS} audio rows, got {mfcc.shape[1]}")
        x = self.stages(self.stem(mfcc[:, None]))
        return self.proj(x.mean(dim=(2, 3)))


def _check_frames(frames):
    if frames.dim() != 5 or frames.shape[2] != 3:
        raise ValueError(f"expected [B, T, 3, H, W] frames, got {tuple(frames.shape)}")


class TemporalBlock(nn.Module):
    def __init__(self, dim, kernel=3):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, bias=False)
        self.bn = nn.BatchNorm1d(dim)

    def forward(self, x):  # [B, T, D]
        y = self.bn(self.conv(x.transpose(1, 2))).transpose(1, 2)
        return F.relu(x + y)


class VisualResNet(nn.Module):
    """3-D conv stem, per-frame residual stages, temporal conv, mean over T."""

    def __init__(self, width=8, depth=1, out_dim=128):
        super().__init__()
        widths = [width, 2 * width, 4 * width, 8 * width]
        self.stem = nn.Sequential(
            nn.Conv3d(3, width, kernel_size=(3, 5, 5), stride=(1, 2, 2), padding=(1, 2, 2), bias=False),
            nn.BatchNorm3d(width), nn.ReLU())
        self.stages = _stages(BasicBlock, widths, [2, 2, 2, 2], depth)
        self.proj = nn.Linear(widths[-1], out_dim)
        self.temporal = TemporalBlock(out_dim)
        self.out_dim = out_dim

    def frame_features(self, frames):
        _check_frames(frames)
        B, T = frames.shape[:2]
        x = self.stem(frames.transpose(1, 2))  # [B, C, T, h, w]
        x = x.transpose(1, 2).flatten(0, 1)  # [B*T, C, h, w]
        x = self.stages(x).mean(dim=(2, 3))
        return self.temporal(self.proj(x).view(B, T, -1))

    def forward(self, frames):
        return self.frame_features(frames).mean(dim=1)


class SCConv(nn.Module):
    """Self-calibrated conv: a pooled low-resolution path gates the full-resolution one."""

    def __init__(self, channels, pooling_r=4):
        super().__init__()
        self.pooling_r = pooling_r
        self.k2 = nn.Sequential(nn.Conv2d(channels, channels, 3, 1, 1, bias=False), nn.BatchNorm2d(channels))
        self.k3 = nn.Sequential(nn.Conv2d(channels, channels, 3, 1, 1, bias=False), nn.BatchNorm2d(channels))
        self.k4 = nn.Sequential(nn.Conv2d(channels, channels, 3, 1, 1, bias=False), nn.BatchNorm2d(channels))

    def forward(self, x):
        low = F.avg_pool2d(x, self.pooling_r, self.pooling_r, ceil_mode=True)
        low = F.interpolate(self.k2(low), size=x.shape[-2:], mode="nearest")
        gate = torch.sigmoid(x + low)
        return self.k4(self.k3(x) * gate)


class SCBlock(nn.Module):
    """Residual block whose channels split into a plain conv half and a self-calibrated half."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        half = cout // 2
        self.reduce_a = nn.Sequential(nn.Conv2d(cin, half, 1, bias=False), nn.BatchNorm2d(half), nn.ReLU())
        self.reduce_b = nn.Sequential(nn.Conv2d(cin, half, 1, bias=False), nn.BatchNorm2d(half), nn.ReLU())
        self.k1 = nn.Sequential(nn.Conv2d(half, half, 3, 1, 1, bias=False), nn.BatchNorm2d(half))
        self.scconv = SCConv(half)
        self.fuse = nn.Sequential(nn.Conv2d(2 * half, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout))
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        a = F.relu(self.k1(self.reduce_a(x)))
        b = F.relu(self.scconv(self.reduce_b(x)))
        out = self.fuse(torch.cat([a, b], dim=1))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def temporal_difference(feat, T):
    """Forward difference x[t+1] - x[t] within each clip; the last frame gets zero."""
    if feat.shape[0] % T:
        raise ValueError(f"batch dimension {feat.shape[0]} is not divisible by T={T}")
    x = feat.view(-1, T, *feat.shape[1:])
    diff = torch.zeros_like(x)
    diff[:, :-1] = x[:, 1:] - x[:, :-1]
    return diff.view_as(feat)


class STILBlock(nn.Module):
    """Residual unit summing a spatial stream and a temporal-difference stream.

    Channels are split in half: the first half feeds a spatial conv on the
    frames themselves, the second half feeds a conv on forward temporal
    differences of the same features. The difference conv has no
    normalization, so a static clip contributes exactly its bias.
    """

    def __init__(self, channels):
        super().__init__()
        if channels % 2:
            raise ValueError(f"STIL block needs an even channel count, got {channels}")
        half = channels // 2
        self.spatial = nn.Sequential(nn.Conv2d(half, channels, 3, 1, 1, bias=False), nn.BatchNorm2d(channels))
        self.difference = nn.Conv2d(half, channels, 3, 1, 1, bias=True)

    def difference_input(self, feat, T):
        return temporal_difference(feat[:, feat.shape[1] // 2:], T)

    def forward(self, feat, T):
        if feat.shape[1] % 2:
            raise ValueError(f"channel count {feat.shape[1]} is not divisible by 2")
        half = feat.shape[1] // 2
        spatial = self.spatial(feat[:, :half])
        motion = self.difference(self.difference_input(feat, T))
        return F.relu(feat + spatial + motion)


class SCNetSTIL(nn.Module):
    """Per-frame self-calibrated backbone with STIL blocks after each stage -> [B, 512]."""

    def __init__(self, width=8, depth=1, out_dim=512):
        super().__init__()
        widths = [width, 2 * width, 4 * width, 8 * width]
        self.stem = nn.Sequential(nn.Conv2d(3, width, 5, 4, 2, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.stages = nn.ModuleList()
        self.stils = nn.ModuleList()
        cin = width
        for cout, stride in zip(widths, [1, 2, 2, 2]):
            blocks = [SCBlock(cin, cout, stride)] + [SCBlock(cout, cout) for _ in range(depth - 1)]
            self.stages.append(nn.Sequential(*blocks))
            self.stils.append(STILBlock(cout))
            cin = cout
        self.proj = nn.Linear(widths[-1], out_dim)
        self.out_dim = out_dim

    def frame_features(self, frames):
        _check_frames(frames)
        B, T = frames.shape[:2]
        x = self.stem(frames.flatten(0, 1))
        for stage, stil in zip(self.stages, self.stils):
            x = stil(stage(x), T)
        return self.proj(x.mean(dim=(2, 3))).view(B, T, -1)

    def forward(self, frames):
        return self.frame_features(frames).mean(dim=1)


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.kind == "audio_resnet":
        return AudioResNet(width=spec.width, depth=spec.depth, out_dim=spec.out_dim)
    if spec.kind == "visual_resnet":
        return VisualResNet(width=spec.width, depth=spec.depth, out_dim=spec.out_dim)
    return SCNetSTIL(width=spec.width, depth=spec.depth, out_dim=spec.out_dim)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def dead_parameters(module: nn.Module, example: torch.Tensor, seed: int = 0) -> list[str]:
    """Names of parameters that get no gradient from one random-projection backward pass."""
    module.zero_grad(set_to_none=True)
    out = module(example)
    g = torch.Generator().manual_seed(seed)
    (out * torch.randn(out.shape, generator=g)).sum().backward()
    dead = [name for name, p in module.named_parameters()
            if p.grad is None or not bool(p.grad.abs().sum() > 0)]
    module.zero_grad(set_to_none=True)
    return dead
