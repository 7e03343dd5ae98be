"""Dual-resolution backbone: residual 3D CNN on the high-resolution stream,
3D transformer on the half-resolution stream, coupled per stage by BCIM."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention3d import AttentionConfig, TransformerBlock3D


@dataclass
class DRFormerConfig:
    stage_channels: list[int] = field(default_factory=lambda: [48, 96, 192])
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 2])
    attention: list[AttentionConfig] | AttentionConfig | None = None
    bcim_reduction: int = 4
    bcim_enabled: bool = True
    bcim_dense: bool = False
    num_classes: int | None = None
    in_channels: int = 1

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.blocks_per_stage = [int(b) for b in self.blocks_per_stage]
        n = len(self.stage_channels)
        if len(self.blocks_per_stage) != n:
            raise ValueError("stage_channels and blocks_per_stage differ in length")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage_channels must be strictly increasing")
        if self.attention is None:
            self.attention = [AttentionConfig(variant="gsa", heads=max(1, c // 16))
                              for c in self.stage_channels]
        elif isinstance(self.attention, (AttentionConfig, dict)):
            self.attention = [self.attention] * n
        self.attention = [a if isinstance(a, AttentionConfig) else AttentionConfig(**a)
                          for a in self.attention]
        if len(self.attention) != n:
            raise ValueError("need one AttentionConfig per stage")
        if self.bcim_reduction < 1 or any(c // self.bcim_reduction < 1 for c in self.stage_channels):
            raise ValueError("bcim_reduction leaves fewer than one hidden unit")

    def to_dict(self) -> dict:
        return asdict(self)


class DualResFeatures(NamedTuple):
    high: torch.Tensor
    low: torch.Tensor

    def check(self) -> "DualResFeatures":
        bh, ch, dh, hh, wh = self.high.shape
        bl, cl, dl, hl, wl = self.low.shape
        if (bh, ch, dh) != (bl, cl, dl) or (hh, wh) != (2 * hl, 2 * wl):
            raise ValueError(f"dual-resolution mismatch: high {tuple(self.high.shape)} "
                             f"vs low {tuple(self.low.shape)}")
        return self


class GroupedConv3d(nn.Conv3d):
    """Grouped Conv3d that runs as a dense conv with a block-diagonal kernel on CPU.

    The CPU backend's grouped/depthwise 3D kernels are several times slower than
    the dense one at these sizes; the result is the same convolution.
    """

    def _dense_weight(self):
        w = self.weight
        cout, cin_g = w.shape[:2]
        per_group = cout // self.groups
        dense = w.new_zeros(cout, self.groups, cin_g, *w.shape[2:])
        idx = torch.arange(cout, device=w.device)
        dense[idx, idx // per_group] = w
        return dense.flatten(1, 2)

    def forward(self, x):
        if self.groups == 1 or x.device.type != "cpu":
            return super().forward(x)
        return F.conv3d(x, self._dense_weight(), self.bias, self.stride, self.padding,
                        self.dilation, 1)


def conv_bn_relu(cin, cout, stride=1, groups=1):
    conv = nn.Conv3d if groups == 1 else GroupedConv3d
    return nn.Sequential(
        conv(cin, cout, 3, stride=stride, padding=1, bias=False, groups=groups),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualBlock3D(nn.Module):
    """conv-BN-ReLU, conv-BN, add shortcut, ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(channels)

    def forward(self, x):
        if x.shape[1] != self.conv1.in_channels:
            raise ValueError(f"expected {self.conv1.in_channels} channels, got {x.shape[1]}")
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(x + y)


class _ChannelGate(nn.Module):
    """GAP -> Linear(C, C/r) -> ReLU -> Linear(C/r, C) -> sigmoid."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        g = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(g))))


class _PairedRefine(nn.Module):
    """Two 3x3x3 conv-BN-ReLU layers mapping concat(original, exchanged) (2C) back to C.

    With ``dense=False`` the first conv only mixes each channel with its exchanged
    counterpart (groups=C over interleaved pairs) and the second is depthwise.
    """

    def __init__(self, channels: int, dense: bool = False):
        super().__init__()
        self.dense = dense
        groups = 1 if dense else channels
        self.conv1 = conv_bn_relu(2 * channels, channels, groups=groups)
        self.conv2 = conv_bn_relu(channels, channels, groups=groups)

    def forward(self, original, exchanged):
        if self.dense:
            x = torch.cat([original, exchanged], dim=1)
        else:
            x = torch.stack([original, exchanged], dim=2).flatten(1, 2)
        return self.conv2(self.conv1(x))


class BCIM(nn.Module):
    """Bilateral cross-resolution integration between the two streams.

    c = sigmoid(MLP(GAP(F_c))), v = sigmoid(MLP(GAP(F_v)));
    F_c' = W(concat(F_c, c * up(F_v))), F_v' = W(concat(F_v, v * down(F_c))).
    """

    def __init__(self, channels: int, reduction: int = 4, dense: bool = False):
        super().__init__()
        self.gate_high = _ChannelGate(channels, reduction)
        self.gate_low = _ChannelGate(channels, reduction)
        self.refine_high = _PairedRefine(channels, dense)
        self.refine_low = _PairedRefine(channels, dense)
        self.last_coefficients: tuple[torch.Tensor, torch.Tensor] | None = None

    def forward(self, f: DualResFeatures) -> DualResFeatures:
        f.check()
        fc, fv = f
        c = self.gate_high(fc)[:, :, None, None, None]
        v = self.gate_low(fv)[:, :, None, None, None]
        self.last_coefficients = (c.flatten(1).detach(), v.flatten(1).detach())
        down = F.avg_pool3d(fc, kernel_size=(1, 2, 2))
        up = F.interpolate(fv, size=fc.shape[-3:], mode="trilinear", align_corners=False)
        high = self.refine_high(fc, c * up)
        low = self.refine_low(fv, v * down)
        return DualResFeatures(high, low)


class _LayerNorm3d(nn.LayerNorm):
    def forward(self, x):
        return super().forward(x.movedim(1, -1)).movedim(-1, 1)


class DRFormer(nn.Module):
    """Backbone plus an optional standalone classification head.

    ``forward(high, low)`` returns the final-stage DualResFeatures; ``classify``
    pools high to the low size, concatenates (2C), applies GAP and the FC head.
    """

    def __init__(self, cfg: DRFormerConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        c0 = chans[0]
        self.stem_high = conv_bn_relu(cfg.in_channels, c0, stride=(1, 2, 2))
        self.stem_low = nn.Sequential(
            nn.Conv3d(cfg.in_channels, c0, 3, stride=(1, 2, 2), padding=1),
            _LayerNorm3d(c0),
        )
        self.cnn_stages = nn.ModuleList()
        self.vit_stages = nn.ModuleList()
        self.bcims = nn.ModuleList()
        self.cnn_down = nn.ModuleList()
        self.vit_down = nn.ModuleList()
        for s, (c, n_blocks, att) in enumerate(zip(chans, cfg.blocks_per_stage, cfg.attention)):
            self.cnn_stages.append(nn.Sequential(*[ResidualBlock3D(c) for _ in range(n_blocks)]))
            self.vit_stages.append(nn.Sequential(
                *[TransformerBlock3D(c, att, shifted=bool(i % 2)) for i in range(n_blocks)]))
            self.bcims.append(BCIM(c, cfg.bcim_reduction, cfg.bcim_dense)
                              if cfg.bcim_enabled else nn.Identity())
            if s + 1 < len(chans):
                self.cnn_down.append(conv_bn_relu(c, chans[s + 1], stride=(1, 2, 2)))
                self.vit_down.append(nn.Sequential(
                    nn.Conv3d(c, chans[s + 1], kernel_size=(1, 2, 2), stride=(1, 2, 2)),
                    _LayerNorm3d(chans[s + 1]),
                ))
        self.head = nn.Linear(2 * chans[-1], cfg.num_classes) if cfg.num_classes else None
        self.stage_hook = None  # callable(stage_index, DualResFeatures) -> DualResFeatures | None

    @property
    def out_channels(self) -> int:
        return self.cfg.stage_channels[-1]

    def check_input(self, high_in, low_in):
        n_down = len(self.cfg.stage_channels)  # stem + (stages - 1) downsamples
        factor = 2 ** (n_down + 1)
        _, _, d, h, w = high_in.shape
        if h % factor or w % factor:
            raise ValueError(f"H and W must be multiples of {factor}, got {h}x{w}")
        if tuple(low_in.shape) != (high_in.shape[0], high_in.shape[1], d, h // 2, w // 2):
            raise ValueError(f"low stream {tuple(low_in.shape)} is not the H,W-halved "
                             f"counterpart of {tuple(high_in.shape)}")

    def forward(self, high_in: torch.Tensor, low_in: torch.Tensor) -> DualResFeatures:
        self.check_input(high_in, low_in)
        high, low = self.stem_high(high_in), self.stem_low(low_in)
        for s in range(len(self.cnn_stages)):
            high = self.cnn_stages[s](high)
            low = self.vit_stages[s](low)
            feats = DualResFeatures(high, low)
            if self.cfg.bcim_enabled:
                feats = self.bcims[s](feats)
            if self.stage_hook is not None:
                feats = self.stage_hook(s, feats) or feats
            high, low = feats.check()
            if s < len(self.cnn_down):
                high, low = self.cnn_down[s](high), self.vit_down[s](low)
        return DualResFeatures(high, low)

    def pool_features(self, feats: DualResFeatures) -> torch.Tensor:
        """Merge the two streams into a (B, 2C) descriptor."""
        high = F.avg_pool3d(feats.high, kernel_size=(1, 2, 2))
        return torch.cat([high, feats.low], dim=1).mean(dim=(2, 3, 4))

    def classify_features(self, feats: DualResFeatures) -> torch.Tensor:
        if self.head is None:
            raise RuntimeError("DRFormer built without a classification head (num_classes unset)")
        return self.head(self.pool_features(feats))

    def classify(self, high_in: torch.Tensor, low_in: torch.Tensor) -> torch.Tensor:
        return self.classify_features(self(high_in, low_in))
