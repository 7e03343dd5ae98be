"""3D multi-head self-attention: a dense reference and four sparse variants.

All modules take and return token fields shaped (B, C, D, H, W).  The sparse
variants differ only in which keys each query may see:

* ``swin``  - non-overlapping 3D windows, optionally cyclically shifted
* ``sra``   - keys/values from a strided reduction of the field (H, W only)
* ``psa``   - keys/values from several average-pooled copies of the field
* ``gsa``   - dispersed global grids: tokens sharing the same in-cell offset
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("dense", "swin", "sra", "psa", "gsa")
_MASKED = -1e9


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected three values, got {v}")
    return v


@dataclass
class AttentionConfig:
    variant: str = "gsa"
    heads: int = 1
    window: tuple[int, int, int] = (2, 7, 7)
    shift: tuple[int, int, int] = (1, 3, 3)
    reduction_ratio: int = 2
    pool_ratios: tuple[int, ...] = (1, 2, 4)
    grid: tuple[int, int, int] = (7, 7, 7)
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        self.window = _triple(self.window)
        self.shift = _triple(self.shift)
        self.grid = _triple(self.grid)
        self.pool_ratios = tuple(int(r) for r in self.pool_ratios)
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.variant == "swin":
            if min(self.window) < 1:
                raise ValueError("window components must be >= 1")
            if any(s < 0 or s >= w for s, w in zip(self.shift, self.window)):
                raise ValueError("swin shift must satisfy 0 <= shift < window")
        if self.variant == "sra" and self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")
        if self.variant == "psa":
            if not self.pool_ratios:
                raise ValueError("pool_ratios must not be empty")
            if min(self.pool_ratios) < 1:
                raise ValueError("pool ratios must be >= 1")
        if self.variant == "gsa" and min(self.grid) < 1:
            raise ValueError("grid components must be >= 1")


def scaled_dot_attention(q, k, v, bias=None):
    """q: (G, h, Lq, d), k/v: (G, h, Lk, d); bias broadcastable to (G, h, Lq, Lk)."""
    logits = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
    if bias is not None:
        logits = logits + bias
    weights = logits.softmax(dim=-1)
    return weights @ v, weights


def _pad_to(x: torch.Tensor, multiples: Sequence[int]) -> tuple[torch.Tensor, tuple[int, int, int]]:
    d, h, w = x.shape[-3:]
    pads = tuple((-n) % m for n, m in zip((d, h, w), multiples))
    if any(pads):
        x = F.pad(x, (0, pads[2], 0, pads[1], 0, pads[0]))
    return x, pads


class MultiHeadAttention3D(nn.Module):
    """Shared projections plus the dense path; subclasses choose token groups."""

    def __init__(self, dim: int, cfg: AttentionConfig):
        super().__init__()
        if dim % cfg.heads:
            raise ValueError(f"channels {dim} not divisible by {cfg.heads} heads")
        self.dim, self.cfg = dim, cfg
        self.heads = cfg.heads
        self.head_dim = dim // cfg.heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.record_weights = False
        self.last_weights: torch.Tensor | None = None

    def _split_heads(self, t: torch.Tensor) -> torch.Tensor:
        g, n, _ = t.shape
        return t.reshape(g, n, self.heads, self.head_dim).transpose(1, 2)

    def _attend(self, tokens_q, tokens_kv, bias=None):
        """tokens_*: (G, L, C) channel-last.  Returns (G, Lq, C) before the output projection."""
        q = self._split_heads(self.q(tokens_q))
        k, v = self.kv(tokens_kv).chunk(2, dim=-1)
        out, weights = scaled_dot_attention(q, self._split_heads(k), self._split_heads(v), bias)
        if self.record_weights:
            self.last_weights = weights.detach()
        g, _, lq, _ = out.shape
        return out.transpose(1, 2).reshape(g, lq, self.dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, d, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        out = self.proj(self._attend(tokens, tokens))
        return out.transpose(1, 2).reshape(b, c, d, h, w)

    def attention_macs(self, shape: Sequence[int]) -> int:
        """MACs of QK^T and AV for one (C, D, H, W) field, projections excluded."""
        _, d, h, w = shape
        n = d * h * w
        return 2 * n * n * self.dim


def dense_mhsa(dim: int, heads: int = 1) -> MultiHeadAttention3D:
    return MultiHeadAttention3D(dim, AttentionConfig(variant="dense", heads=heads))


class _GroupedAttention3D(MultiHeadAttention3D):
    """Attention restricted to equally sized 3D token groups.

    Subclasses provide `_layout(shape)` -> (group_shape, pad multiples) and
    `_to_groups` / `_from_groups` to move between the padded field and
    (B * n_groups, group_tokens, C).
    """

    def __init__(self, dim: int, cfg: AttentionConfig):
        super().__init__(dim, cfg)
        self.max_group = cfg.window if cfg.variant == "swin" else cfg.grid
        self.rel_bias = None
        if cfg.rel_pos_bias:
            size = math.prod(2 * s - 1 for s in self.max_group)
            self.rel_bias = nn.Parameter(torch.zeros(size, self.heads))

    def _relative_bias(self, group_shape, device, dtype):
        # groups clipped to a small field index into the full-size table
        coords = torch.stack(torch.meshgrid(*[torch.arange(s, device=device) for s in group_shape],
                                            indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        idx = torch.zeros_like(rel[0])
        for axis, s in enumerate(self.max_group):
            idx = idx * (2 * s - 1) + rel[axis] + s - 1
        bias = self.rel_bias[idx.flatten()].reshape(*idx.shape, self.heads)
        return bias.permute(2, 0, 1).unsqueeze(0).to(dtype)

    def _group_mask(self, valid: torch.Tensor, group_shape, extra=None):
        """valid: (1, 1, D', H', W') bool over the padded field."""
        vg = self._to_groups(valid, group_shape)[..., 0] > 0.5  # (G, L)
        allowed = vg[:, None, :].expand(-1, vg.shape[1], -1)
        if extra is not None:
            allowed = allowed & extra
        return torch.where(allowed, 0.0, _MASKED)[:, None]  # (G, 1, L, L)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, d, h, w = x.shape
        group_shape, multiples = self._layout((d, h, w))
        xp, pads = _pad_to(x, multiples)
        xp, region = self._pre(xp, group_shape)
        tokens = self._to_groups(xp, group_shape)
        bias = None
        if any(pads) or region is not None:
            valid = torch.ones(1, 1, d, h, w, device=x.device)
            valid, _ = _pad_to(valid, multiples)
            valid, _ = self._pre(valid, group_shape)
            bias = self._group_mask(valid, group_shape, region)
            n_groups = bias.shape[0]
            bias = bias.repeat(b, 1, 1, 1) if n_groups != tokens.shape[0] else bias
        if self.rel_bias is not None:
            rb = self._relative_bias(group_shape, x.device, x.dtype)
            bias = rb if bias is None else bias + rb
        out = self.proj(self._attend(tokens, tokens, bias))
        out = self._from_groups(out, group_shape, b, xp.shape[-3:])
        out = self._post(out, group_shape)
        return out[..., :d, :h, :w].contiguous()

    def _pre(self, x, group_shape):
        return x, None

    def _post(self, x, group_shape):
        return x

    def attention_macs(self, shape):
        _, d, h, w = shape
        group_shape, multiples = self._layout((d, h, w))
        padded = [n + (-n) % m for n, m in zip((d, h, w), multiples)]
        tokens = math.prod(padded)
        return 2 * tokens * math.prod(group_shape) * self.dim


def _window_partition(x, win):
    b, c, d, h, w = x.shape
    wd, wh, ww = win
    x = x.reshape(b, c, d // wd, wd, h // wh, wh, w // ww, ww)
    x = x.permute(0, 2, 4, 6, 3, 5, 7, 1)
    return x.reshape(-1, wd * wh * ww, c)


def _window_merge(t, win, b, padded):
    d, h, w = padded
    wd, wh, ww = win
    c = t.shape[-1]
    t = t.reshape(b, d // wd, h // wh, w // ww, wd, wh, ww, c)
    t = t.permute(0, 7, 1, 4, 2, 5, 3, 6)
    return t.reshape(b, c, d, h, w)


class SwinAttention3D(_GroupedAttention3D):
    """Shifted-window attention.  `shifted` selects the cfg.shift offsets."""

    def __init__(self, dim: int, cfg: AttentionConfig, shifted: bool = False):
        super().__init__(dim, cfg)
        self.shift = cfg.shift if shifted else (0, 0, 0)

    def _window(self, dhw):
        # windows never exceed the field; no shift is needed along such axes
        return tuple(min(wi, n) for wi, n in zip(self.cfg.window, dhw))

    def _shift(self, dhw):
        return tuple(s if wi < n else 0 for s, wi, n in zip(self.shift, self.cfg.window, dhw))

    def _layout(self, dhw):
        win = self._window(dhw)
        self._active_shift = self._shift(dhw)
        return win, win

    def _pre(self, x, win):
        s = self._active_shift
        if not any(s):
            return x, None
        x = torch.roll(x, shifts=tuple(-v for v in s), dims=(2, 3, 4))
        padded = x.shape[-3:]
        label = torch.zeros(1, 1, *padded, device=x.device)
        count = 0
        for sd in ((0, -win[0]), (-win[0], -s[0]), (-s[0], None)) if s[0] else ((0, None),):
            for sh in ((0, -win[1]), (-win[1], -s[1]), (-s[1], None)) if s[1] else ((0, None),):
                for sw in ((0, -win[2]), (-win[2], -s[2]), (-s[2], None)) if s[2] else ((0, None),):
                    label[..., slice(*sd), slice(*sh), slice(*sw)] = count
                    count += 1
        lab = _window_partition(label, win)[..., 0]
        region = lab[:, :, None] == lab[:, None, :]
        return x, region

    def _post(self, x, win):
        s = self._active_shift
        if any(s):
            x = torch.roll(x, shifts=s, dims=(2, 3, 4))
        return x

    def _to_groups(self, x, win):
        return _window_partition(x, win)

    def _from_groups(self, t, win, b, padded):
        return _window_merge(t, win, b, padded)


class GridAttention3D(_GroupedAttention3D):
    """Grid (dilated global) attention: each axis splits as (grid, cell).

    Tokens at position g * cell + o form the group for offset o, so every group
    spans the whole field with stride `cell`.
    """

    def _layout(self, dhw):
        grid = tuple(min(g, n) for g, n in zip(self.cfg.grid, dhw))
        return grid, grid

    def _to_groups(self, x, grid):
        b, c, d, h, w = x.shape
        gd, gh, gw = grid
        cd, ch, cw = d // gd, h // gh, w // gw
        x = x.reshape(b, c, gd, cd, gh, ch, gw, cw)
        x = x.permute(0, 3, 5, 7, 2, 4, 6, 1)
        return x.reshape(-1, gd * gh * gw, c)

    def _from_groups(self, t, grid, b, padded):
        d, h, w = padded
        gd, gh, gw = grid
        cd, ch, cw = d // gd, h // gh, w // gw
        c = t.shape[-1]
        t = t.reshape(b, cd, ch, cw, gd, gh, gw, c)
        t = t.permute(0, 7, 4, 1, 5, 2, 6, 3)
        return t.reshape(b, c, d, h, w)


class SpatialReductionAttention3D(MultiHeadAttention3D):
    """Keys/values from a (1, r, r) strided conv of the field; queries at full resolution."""

    def __init__(self, dim: int, cfg: AttentionConfig):
        super().__init__(dim, cfg)
        r = cfg.reduction_ratio
        self.ratio = r
        if r > 1:
            self.reduce = nn.Conv3d(dim, dim, kernel_size=(1, r, r), stride=(1, r, r))
            self.norm = nn.LayerNorm(dim)

    def reduced(self, x):
        if self.ratio == 1:
            return x
        x, _ = _pad_to(x, (1, self.ratio, self.ratio))
        return self.reduce(x)

    def forward(self, x):
        b, c, d, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        kv = self.reduced(x).flatten(2).transpose(1, 2)
        if self.ratio > 1:
            kv = self.norm(kv)
        out = self.proj(self._attend(tokens, kv))
        return out.transpose(1, 2).reshape(b, c, d, h, w)

    def kv_tokens(self, shape):
        _, d, h, w = shape
        r = self.ratio
        return d * math.ceil(h / r) * math.ceil(w / r)

    def attention_macs(self, shape):
        _, d, h, w = shape
        return 2 * d * h * w * self.kv_tokens(shape) * self.dim


class PyramidPoolingAttention3D(MultiHeadAttention3D):
    """Keys/values are the concatenated average pools of the field, one per ratio."""

    def __init__(self, dim: int, cfg: AttentionConfig):
        super().__init__(dim, cfg)
        self.ratios = cfg.pool_ratios

    def pooled(self, x):
        d, h, w = x.shape[-3:]
        fields = []
        for r in self.ratios:
            if r == 1:
                fields.append(x.flatten(2))
            else:
                size = (d, math.ceil(h / r), math.ceil(w / r))
                fields.append(F.adaptive_avg_pool3d(x, size).flatten(2))
        return torch.cat(fields, dim=2)

    def forward(self, x):
        b, c, d, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        kv = self.pooled(x).transpose(1, 2)
        out = self.proj(self._attend(tokens, kv))
        return out.transpose(1, 2).reshape(b, c, d, h, w)

    def kv_tokens(self, shape):
        _, d, h, w = shape
        return sum(d * math.ceil(h / r) * math.ceil(w / r) for r in self.ratios)

    def attention_macs(self, shape):
        _, d, h, w = shape
        return 2 * d * h * w * self.kv_tokens(shape) * self.dim


def build_attention(dim: int, cfg: AttentionConfig, shifted: bool = False) -> MultiHeadAttention3D:
    if cfg.variant == "dense":
        return MultiHeadAttention3D(dim, cfg)
    if cfg.variant == "swin":
        return SwinAttention3D(dim, cfg, shifted=shifted)
    if cfg.variant == "sra":
        return SpatialReductionAttention3D(dim, cfg)
    if cfg.variant == "psa":
        return PyramidPoolingAttention3D(dim, cfg)
    return GridAttention3D(dim, cfg)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock3D(nn.Module):
    """Pre-norm block: x + Attn(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, cfg: AttentionConfig, shifted: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = build_attention(dim, cfg, shifted=shifted)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, cfg.mlp_ratio)

    def forward(self, x):
        y = self.norm1(x.movedim(1, -1)).movedim(-1, 1)
        x = x + self.attn(y)
        t = x.movedim(1, -1)
        t = t + self.mlp(self.norm2(t))
        return t.movedim(-1, 1).contiguous()
