"""Complexity profiling, 3D Grad-CAM, APSM coefficient export and ROC export."""

from __future__ import annotations

import copy
import csv
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention3d import MultiHeadAttention3D
from .metrics import MetricsReport, trapezoid_auc
from .siamese import PhaseAttentionRecord, SDRFormer, SDRFormerConfig

_PARAM_FREE = (nn.ReLU, nn.GELU, nn.Identity, nn.Sequential, nn.ModuleList, nn.ModuleDict)
_NORMS = (nn.BatchNorm3d, nn.LayerNorm)


@dataclass
class ComplexityReport:
    flops_g: float
    params_m: float
    macs: int
    params: int
    breakdown: dict[str, dict] = field(default_factory=dict)
    unsupported: list[str] = field(default_factory=list)
    input_dims: tuple[int, int, int] = (14, 112, 112)
    n_phases: int = 1
    note: str = "FLOPs = 2 x MACs of conv, linear and attention arithmetic; norms/activations ignored"

    def to_dict(self) -> dict:
        return {"note": self.note, "input_dims": list(self.input_dims), "n_phases": self.n_phases,
                "flops_g": self.flops_g, "params_m": self.params_m, "macs": self.macs,
                "params": self.params, "breakdown": self.breakdown,
                "unsupported": self.unsupported}


def _group_name(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "backbone" and len(parts) > 1:
        if parts[1] in ("cnn_stages", "vit_stages", "bcims", "cnn_down", "vit_down"):
            return f"backbone.{parts[1]}.{parts[2]}" if len(parts) > 2 else f"backbone.{parts[1]}"
        return f"backbone.{parts[1]}"
    return parts[0]


def count_macs(model: nn.Module, *inputs) -> tuple[dict[str, int], list[str]]:
    """MACs per leaf module for one forward pass, plus parametrized modules not counted.

    Convs count k^3 * (C_in / groups) * C_out per output voxel; attention adds
    its QK^T and AV arithmetic on top of the projection layers.
    """
    macs: dict[str, int] = defaultdict(int)
    unsupported: set[str] = set()
    hooks = []

    def conv_hook(name):
        def fn(mod, inp, out):
            k = int(np.prod(mod.kernel_size))
            macs[name] += k * (mod.in_channels // mod.groups) * out.shape[1] * int(np.prod(out.shape[2:])) * out.shape[0]
        return fn

    def linear_hook(name):
        def fn(mod, inp, out):
            macs[name] += mod.in_features * mod.out_features * (out.numel() // mod.out_features)
        return fn

    def attn_hook(name):
        def fn(mod, inp, out):
            x = inp[0]
            macs[name] += x.shape[0] * mod.attention_macs(tuple(x.shape[1:]))
        return fn

    for name, mod in model.named_modules():
        if isinstance(mod, nn.Conv3d):
            hooks.append(mod.register_forward_hook(conv_hook(name)))
        elif isinstance(mod, nn.Linear):
            hooks.append(mod.register_forward_hook(linear_hook(name)))
        elif isinstance(mod, MultiHeadAttention3D):
            hooks.append(mod.register_forward_hook(attn_hook(name)))
        elif list(mod.parameters(recurse=False)) and not isinstance(mod, _NORMS):
            unsupported.add(name or type(mod).__name__)
    try:
        with torch.no_grad():
            model(*inputs)
    finally:
        for hk in hooks:
            hk.remove()
    return dict(macs), sorted(unsupported)


def profile(cfg: SDRFormerConfig, input_dims: Sequence[int] = (14, 112, 112),
            batch: int = 1) -> ComplexityReport:
    """Count MACs by shape propagation on the meta device; normalised to one sample."""
    model = SDRFormer(copy.deepcopy(cfg)).to("meta").eval()
    d, h, w = (int(x) for x in input_dims)
    n = cfg.n_phases
    high = torch.zeros(batch, n, 1, d, h, w, device="meta")
    low = torch.zeros(batch, n, 1, d, h // 2, w // 2, device="meta")
    macs, unsupported = count_macs(model, high, low)

    breakdown: dict[str, dict] = defaultdict(lambda: {"macs": 0, "params": 0})
    for name, m in macs.items():
        breakdown[_group_name(name)]["macs"] += m // batch
    for name, p in model.named_parameters():
        breakdown[_group_name(name)]["params"] += p.numel()
    total_macs = sum(v["macs"] for v in breakdown.values())
    total_params = sum(v["params"] for v in breakdown.values())
    return ComplexityReport(flops_g=2 * total_macs / 1e9, params_m=total_params / 1e6,
                            macs=total_macs, params=total_params,
                            breakdown=dict(sorted(breakdown.items())),
                            unsupported=unsupported, input_dims=(d, h, w), n_phases=n)


def overhead_table(cfg: SDRFormerConfig, input_dims=(14, 112, 112)) -> dict[str, dict]:
    """Baseline / w/ BCIM / w/ APSM / full rows with ratios relative to Baseline."""
    rows = {}
    for label, bcim, apsm in (("Baseline", False, False), ("w/ BCIM", True, False),
                              ("w/ APSM", False, True), ("SDR-Former", True, True)):
        c = copy.deepcopy(cfg)
        c.bcim_enabled, c.apsm_enabled = bcim, apsm
        r = profile(c, input_dims)
        rows[label] = {"flops_g": r.flops_g, "params_m": r.params_m}
    base = rows["Baseline"]
    for row in rows.values():
        row["flops_overhead"] = row["flops_g"] / base["flops_g"] - 1.0
        row["params_overhead"] = row["params_m"] / base["params_m"] - 1.0
    return rows


# ---------------------------------------------------------------------------
# Grad-CAM


@dataclass
class SaliencyVolume:
    heat: np.ndarray
    target_class: int
    stream: str
    stage: int
    phase: int = 0


def gradcam3d(model: SDRFormer, high_in: torch.Tensor, low_in: torch.Tensor,
              target_class: int | None = None, stream: str = "high",
              stage: int | None = None) -> list[SaliencyVolume]:
    """Grad-CAM on a backbone stage output, one saliency volume per phase.

    `high_in`/`low_in` hold a single sample, shaped (1, N, 1, D, H, W).
    Stages are numbered from 1; default is the last stage.
    """
    n_stages = len(model.backbone.cfg.stage_channels)
    stage = n_stages if stage is None else stage
    if stream not in ("high", "low"):
        raise ValueError(f"stream must be 'high' or 'low', got {stream!r}")
    if not 1 <= stage <= n_stages:
        raise ValueError(f"stage must be in [1, {n_stages}]")
    if high_in.shape[0] != 1:
        raise ValueError("gradcam3d takes one sample at a time")

    captured = {}

    def hook(s, feats):
        if s == stage - 1:
            t = feats.high if stream == "high" else feats.low
            t.retain_grad()
            captured["act"] = t
        return None

    was_training = model.training
    model.eval()
    model.backbone.stage_hook = hook
    try:
        with torch.enable_grad():
            logits = model(high_in, low_in)
            cls = int(logits.argmax(dim=1).item()) if target_class is None else int(target_class)
            model.zero_grad(set_to_none=True)
            logits[0, cls].backward()
    finally:
        model.backbone.stage_hook = None
        model.train(was_training)
    act = captured["act"].detach()
    grad = captured["act"].grad
    if grad is None or not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite or missing gradients for Grad-CAM")
    weights = grad.mean(dim=(2, 3, 4), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=tuple(high_in.shape[-3:]), mode="trilinear",
                        align_corners=False)[:, 0]
    out = []
    for p, heat in enumerate(cam):
        heat = heat.clamp_min(0).double().numpy()
        top = heat.max()
        heat = heat / top if top > 0 else np.zeros_like(heat)
        out.append(SaliencyVolume(heat, cls, stream, stage, p))
    return out


# ---------------------------------------------------------------------------
# Phase coefficients


def phase_coefficients(model: SDRFormer, high_in, low_in, sample_ids=None) -> list[list[PhaseAttentionRecord]]:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, records = model.forward_with_records(high_in, low_in, sample_ids)
    model.train(was_training)
    return records


def export_phase_coefficients(model: SDRFormer, high_in, low_in, out_dir: str | os.PathLike,
                              sample_ids: Sequence[str] | None = None,
                              phase_names: Sequence[str] | None = None,
                              render: bool = True) -> dict:
    """Write per-sample coefficient JSON (and a PPM heat strip); returns the JSON payload."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = model.cfg.n_phases
    names = list(phase_names) if phase_names else [f"phase{k}" for k in range(n)]
    if n == 1 or not model.cfg.apsm_enabled:
        payload = {"applicable": False,
                   "reason": "not applicable: APSM is not used for single-phase input"
                   if n == 1 else "not applicable: APSM disabled"}
        (out / "coefficients.json").write_text(json.dumps(payload, indent=1))
        return payload
    records = phase_coefficients(model, high_in, low_in, sample_ids)
    samples = []
    for recs in records:
        entry = {"sample_id": recs[0].sample_id, "streams": {}}
        for r in recs:
            entry["streams"][r.stream] = {"phase_means": dict(zip(names, r.phase_means.tolist())),
                                          "coefficients": r.coefficients.tolist()}
        samples.append(entry)
        if render:
            write_heat_strip(out / f"{entry['sample_id'] or 'sample'}_coeffs.ppm",
                             np.concatenate([r.coefficients for r in recs], axis=1))
    payload = {"applicable": True, "phase_names": names, "samples": samples}
    (out / "coefficients.json").write_text(json.dumps(payload, indent=1))
    return payload


def write_heat_strip(path: str | os.PathLike, grid: np.ndarray, cell: int = 8) -> None:
    """Render an (N, C) coefficient grid as a white-to-blue binary PPM."""
    g = np.asarray(grid, dtype=np.float64)
    top = g.max()
    g = g / top if top > 0 else g
    img = np.repeat(np.repeat(g, cell, axis=0), max(1, cell // 4), axis=1)
    rgb = np.stack([255 * (1 - img), 255 * (1 - 0.6 * img), np.full_like(img, 255)], axis=-1)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode())
        fh.write(rgb.round().astype(np.uint8).tobytes())


def save_saliency(path: str | os.PathLike, sal: SaliencyVolume) -> None:
    from .volforge import write_volume

    write_volume(path, sal.heat.astype(np.float32))


# ---------------------------------------------------------------------------
# ROC


def roc_export(report: MetricsReport, path: str | os.PathLike) -> Path:
    """CSV rows (class, threshold, fpr, tpr) for every class with a defined ROC."""
    if report.scores is None or report.labels is None or not report.roc:
        raise ValueError("report carries no scores to export")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "threshold", "fpr", "tpr"])
        for cls, curve in sorted(report.roc.items()):
            for t, f, r in zip(curve["threshold"], curve["fpr"], curve["tpr"]):
                writer.writerow([cls, t, repr(float(f)), repr(float(r))])
    return path


def read_roc_csv(path: str | os.PathLike) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    curves: dict[int, list] = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            curves[int(row["class"])].append((float(row["fpr"]), float(row["tpr"])))
    return {k: (np.array([p[0] for p in v]), np.array([p[1] for p in v]))
            for k, v in curves.items()}


def roc_auc_from_csv(path: str | os.PathLike, cls: int) -> float:
    fpr, tpr = read_roc_csv(path)[cls]
    return trapezoid_auc(fpr, tpr)
