"""Siamese multi-phase classifier: one shared DR-Former per phase, APSM fusion
per resolution stream, and phase-count transfer surgery."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .drformer import DRFormer, DRFormerConfig, DualResFeatures, conv_bn_relu

FUSION_PREFIXES = ("fusion_high.", "fusion_low.", "fusion_merged.")
HEAD_PREFIX = "backbone.head."


@dataclass
class SDRFormerConfig:
    backbone: DRFormerConfig = field(default_factory=DRFormerConfig)
    n_phases: int = 3
    num_classes: int = 2
    apsm_enabled: bool = True
    bcim_enabled: bool = True
    apsm_mode: str = "dual"  # "dual": one APSM per stream; "merged": one after stream merge
    apsm_dense_branches: bool = False

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = DRFormerConfig(**self.backbone)
        if self.n_phases < 1:
            raise ValueError("n_phases must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.apsm_mode not in ("dual", "merged"):
            raise ValueError(f"unknown apsm_mode {self.apsm_mode!r}")

    def backbone_config(self) -> DRFormerConfig:
        cfg = copy.deepcopy(self.backbone)
        cfg.num_classes = self.num_classes
        cfg.bcim_enabled = self.bcim_enabled
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SDRFormerConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "backbone" in d and isinstance(d["backbone"], dict):
            bb = dict(d["backbone"])
            unknown = set(bb) - set(DRFormerConfig.__dataclass_fields__)
            if unknown:
                raise ValueError(f"unknown backbone config keys: {sorted(unknown)}")
            d["backbone"] = DRFormerConfig(**bb)
        return cls(**d)


@dataclass
class PhaseAttentionRecord:
    stream: str
    coefficients: np.ndarray  # (N, C), softmax over phases per channel
    sample_id: str = ""

    @property
    def phase_means(self) -> np.ndarray:
        return self.coefficients.mean(axis=1)


class APSM(nn.Module):
    """Adaptive phase selection: per-channel softmax weights over phases.

    The 1x1x1 descriptor conv is applied after GAP; both are linear so the
    order does not change the result, only the cost.
    """

    def __init__(self, channels: int, n_phases: int, dense_branches: bool = False):
        super().__init__()
        if n_phases < 2:
            raise ValueError("APSM needs at least two phases; bypass it for single-phase input")
        self.channels, self.n_phases = channels, n_phases
        self.descriptor = nn.Conv3d(n_phases * channels, channels, 1)
        groups = 1 if dense_branches else channels
        self.branches = nn.ModuleList(
            [nn.Conv3d(channels, channels, 1, groups=groups) for _ in range(n_phases)])

    def tie_branches(self) -> None:
        """Give every phase branch the parameters of branch 0."""
        with torch.no_grad():
            for b in self.branches[1:]:
                b.weight.copy_(self.branches[0].weight)
                b.bias.copy_(self.branches[0].bias)

    def phase_logits(self, stacked: torch.Tensor) -> torch.Tensor:
        """stacked: (B, N, C, D, H, W) -> per-phase descriptors M_k as (B, N, C)."""
        b = stacked.shape[0]
        pooled = stacked.flatten(1, 2).mean(dim=(2, 3, 4), keepdim=True)
        m = self.descriptor(pooled)
        return torch.stack([br(m) for br in self.branches], dim=1).reshape(b, self.n_phases, -1)

    def forward(self, stacked: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        p = self.phase_logits(stacked).softmax(dim=1)
        return stacked * p[..., None, None, None], p


class PhaseFusion(nn.Module):
    """Concatenate phase maps (optionally APSM-weighted) and refine with a 3x3x3 conv-BN-ReLU."""

    def __init__(self, channels: int, n_phases: int, apsm: bool = True,
                 dense_branches: bool = False):
        super().__init__()
        self.select = APSM(channels, n_phases, dense_branches) if apsm else None
        self.fuse = conv_bn_relu(n_phases * channels, channels)

    def forward(self, phase_maps: list[torch.Tensor] | torch.Tensor):
        stacked = torch.stack(list(phase_maps), dim=1) if isinstance(phase_maps, (list, tuple)) \
            else phase_maps
        shapes = {tuple(t.shape) for t in stacked.unbind(1)}
        if len(shapes) != 1:
            raise ValueError(f"phase maps differ in shape: {shapes}")
        p = None
        if self.select is not None:
            stacked, p = self.select(stacked)
        return self.fuse(stacked.flatten(1, 2)), p


def apsm(phase_maps: list[torch.Tensor], module: PhaseFusion):
    """Fuse N >= 2 same-shape maps; returns (V, coefficients of shape (B, N, C))."""
    if len(phase_maps) < 2:
        raise ValueError("APSM is not used with single-phase input")
    return module(phase_maps)


class SDRFormer(nn.Module):
    def __init__(self, cfg: SDRFormerConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = DRFormer(cfg.backbone_config())
        c, n = self.backbone.out_channels, cfg.n_phases
        if n >= 2:
            kw = dict(apsm=cfg.apsm_enabled, dense_branches=cfg.apsm_dense_branches)
            if cfg.apsm_mode == "dual":
                self.fusion_high = PhaseFusion(c, n, **kw)
                self.fusion_low = PhaseFusion(c, n, **kw)
            else:
                self.fusion_merged = PhaseFusion(2 * c, n, **kw)
        self.last_phase_attention: dict[str, torch.Tensor] = {}

    def phase_features(self, high_in: torch.Tensor, low_in: torch.Tensor):
        """Run the shared backbone on every phase; returns features shaped (B, N, C, ...)."""
        if high_in.ndim != 6 or high_in.shape[1] != self.cfg.n_phases:
            raise ValueError(f"expected (B, {self.cfg.n_phases}, 1, D, H, W) input, "
                             f"got {tuple(high_in.shape)}")
        b, n = high_in.shape[:2]
        feats = self.backbone(high_in.flatten(0, 1), low_in.flatten(0, 1))
        return DualResFeatures(feats.high.unflatten(0, (b, n)), feats.low.unflatten(0, (b, n)))

    def forward(self, high_in: torch.Tensor, low_in: torch.Tensor) -> torch.Tensor:
        return self.fuse_and_classify(self.phase_features(high_in, low_in))

    def fuse_and_classify(self, feats: DualResFeatures) -> torch.Tensor:
        self.last_phase_attention = {}
        if self.cfg.n_phases == 1:
            return self.backbone.classify_features(DualResFeatures(feats.high[:, 0], feats.low[:, 0]))
        if self.cfg.apsm_mode == "dual":
            v_high, p_high = self.fusion_high(feats.high)
            v_low, p_low = self.fusion_low(feats.low)
            if p_high is not None:
                self.last_phase_attention = {"high": p_high, "low": p_low}
            return self.backbone.classify_features(DualResFeatures(v_high, v_low))
        pooled = F.avg_pool3d(feats.high.flatten(0, 1), kernel_size=(1, 2, 2))
        merged = torch.cat([pooled.unflatten(0, feats.high.shape[:2]), feats.low], dim=2)
        v, p = self.fusion_merged(merged)
        if p is not None:
            self.last_phase_attention = {"merged": p}
        return self.backbone.head(v.mean(dim=(2, 3, 4)))

    def forward_with_records(self, high_in, low_in, sample_ids=None):
        logits = self(high_in, low_in)
        ids = list(sample_ids) if sample_ids is not None else [""] * logits.shape[0]
        records = [[PhaseAttentionRecord(stream, p[i].detach().cpu().numpy(), ids[i])
                    for stream, p in self.last_phase_attention.items()]
                   for i in range(logits.shape[0])]
        return logits, records

    def fusion_modules(self) -> list[PhaseFusion]:
        return [m for m in self.modules() if isinstance(m, PhaseFusion)]

    def tie_apsm_branches(self) -> None:
        for f in self.fusion_modules():
            if f.select is not None:
                f.select.tie_branches()


def n_dependent(name: str) -> bool:
    return name.startswith(FUSION_PREFIXES)


# ---------------------------------------------------------------------------
# Transfer surgery


def adapt_phase_count(ckpt, new_n: int, num_classes: int | None = None, seed: int = 0):
    """Rebuild a checkpoint for `new_n` phases (and optionally a new class count).

    Backbone tensors are copied; phase-fusion tensors (and the head when K
    changes) come from a fresh, seeded initialisation.  Returns (checkpoint, report).
    """
    from .checkpoint import Checkpoint

    if new_n < 1:
        raise ValueError("new phase count must be >= 1")
    old_cfg: SDRFormerConfig = ckpt.config
    new_cfg = copy.deepcopy(old_cfg)
    new_cfg.n_phases = int(new_n)
    if num_classes is not None:
        new_cfg.num_classes = int(num_classes)
    same_n = new_cfg.n_phases == old_cfg.n_phases
    same_k = new_cfg.num_classes == old_cfg.num_classes

    torch.manual_seed(seed)
    fresh = SDRFormer(new_cfg).state_dict()
    tensors, copied, reinit = {}, [], []
    for name, value in fresh.items():
        reset = (n_dependent(name) and not same_n) or (name.startswith(HEAD_PREFIX) and not same_k)
        if not reset:
            if name not in ckpt.tensors:
                raise ValueError(f"incompatible backbone: {name} missing from source checkpoint")
            src = ckpt.tensors[name]
            if tuple(src.shape) != tuple(value.shape):
                raise ValueError(f"incompatible backbone: {name} has shape {tuple(src.shape)}, "
                                 f"expected {tuple(value.shape)}")
            tensors[name] = src.clone()
            copied.append(name)
        else:
            tensors[name] = value.clone()
            reinit.append(name)
    dropped = sorted(set(ckpt.tensors) - set(fresh))
    report = {"from_phases": old_cfg.n_phases, "to_phases": new_cfg.n_phases,
              "from_classes": old_cfg.num_classes, "to_classes": new_cfg.num_classes,
              "copied": copied, "reinitialized": reinit, "dropped": dropped}
    meta = dict(ckpt.meta)
    meta["surgery"] = {k: report[k] for k in ("from_phases", "to_phases", "from_classes",
                                               "to_classes")}
    return Checkpoint(new_cfg, tensors, meta), report
