"""Hierarchical patch-based audio encoder with low-rank adapters.

A mel spectrogram is cut into time chunks laid side by side along the
frequency axis, split into square patches, linearly embedded, and passed
through four stages of windowed self-attention; patch merging between
stages quarters the token count and doubles the feature width. Every
attention projection (query/key/value/output) carries a low-rank adapter
so a frozen pretrained base can be fine-tuned cheaply.

Geometry conventions. For mel frames T, mel bins F, chunk count C and
patch stride P, the token grid has rows = T/(C*P) (time within chunk) and
cols = C*F/P (chunks side by side, each F/P patches wide). The flat patch
sequence enumerates time fastest, then frequency, then chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

# Mel power is log-compressed then shifted/scaled to roughly unit range
# before patch embedding.
MEL_LOG_EPS = 1e-8
MEL_LOG_SHIFT = 6.0
MEL_LOG_SCALE = 3.0

N_STAGES = 4


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry and capacity of the encoder.

    in_frames is the fixed (padded) mel frame grid the model operates on;
    shorter inputs are zero-padded up to it by the caller.
    """

    in_frames: int
    mel_bins: int
    patch_stride: int = 4
    base_dim: int = 32
    depths: tuple = (1, 1, 2, 1)
    heads: tuple = (2, 4, 8, 16)
    chunk_count: int = 4
    window: int = 4
    lora_rank: int = 4
    lora_scale: float = 1.0

    def __post_init__(self) -> None:
        if len(self.depths) != N_STAGES or len(self.heads) != N_STAGES:
            raise ValueError("depths and heads must have exactly 4 stages")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.in_frames % (self.chunk_count * self.patch_stride):
            raise ValueError("in_frames must divide by chunk_count * patch_stride")
        if self.mel_bins % self.patch_stride:
            raise ValueError("mel_bins must divide by patch_stride")
        rows, cols = self.grid(0)
        down = 2 ** (N_STAGES - 1)
        if rows % down or cols % down:
            raise ValueError(
                f"token grid {rows}x{cols} must divide by {down} for 3 patch merges"
            )
        for s in range(N_STAGES):
            (r, c), (wr, wc) = self.grid(s), self.stage_window(s)
            if r % wr or c % wc:
                raise ValueError(f"stage {s + 1} grid {r}x{c} not tileable by window {wr}x{wc}")

    def grid(self, stage: int) -> tuple[int, int]:
        """Token grid (rows, cols) at the input of the given stage (0-based)."""
        rows = self.in_frames // (self.chunk_count * self.patch_stride)
        cols = self.chunk_count * self.mel_bins // self.patch_stride
        return rows >> stage, cols >> stage

    def dim(self, stage: int) -> int:
        return self.base_dim << stage

    def stage_window(self, stage: int) -> tuple[int, int]:
        rows, cols = self.grid(stage)
        return min(self.window, rows), min(self.window, cols)


@dataclass
class PatchSequence:
    """Flat patch tokens plus the grid geometry to invert the ordering."""

    tokens: np.ndarray  # (n_tokens, patch*patch)
    grid: tuple[int, int]
    chunk_count: int
    patch_stride: int


def reshape_to_patches(mel_values: np.ndarray, chunk_count: int, patch_stride: int) -> PatchSequence:
    """Order a (T, F) mel matrix into the flat time->frequency->chunk patch sequence."""
    t, f = mel_values.shape
    c, p = chunk_count, patch_stride
    if t == 0 or f == 0:
        raise ValueError("mel spectrogram is empty")
    if t % (c * p) or f % p:
        raise ValueError(
            f"mel shape {t}x{f} does not divide into {c} chunks of {p}x{p} patches"
        )
    tp, fp = t // (c * p), f // p
    x = mel_values.reshape(c, tp, p, fp, p)  # (chunk, tpatch, dt, fpatch, df)
    x = x.transpose(0, 3, 1, 2, 4)  # (chunk, fpatch, tpatch, dt, df)
    tokens = x.reshape(c * fp * tp, p * p)
    return PatchSequence(tokens, (tp, c * fp), c, p)


def inverse_reshape(seq: PatchSequence, frames: int, bins: int) -> np.ndarray:
    """Invert :func:`reshape_to_patches` back to the (T, F) mel matrix."""
    c, p = seq.chunk_count, seq.patch_stride
    tp, fp = frames // (c * p), bins // p
    x = seq.tokens.reshape(c, fp, tp, p, p)
    x = x.transpose(0, 2, 3, 1, 4)  # (chunk, tpatch, dt, fpatch, df)
    return x.reshape(frames, bins)


@dataclass
class LoRAAdapter:
    """Low-rank weight update: delta_W = B @ A, B zero-initialized."""

    B: np.ndarray  # (out, rank)
    A: np.ndarray  # (rank, in)
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.B.shape[1] != self.A.shape[0]:
            raise ValueError(
                f"rank mismatch: B has {self.B.shape[1]} columns, A has {self.A.shape[0]} rows"
            )


def lora_forward(w0: np.ndarray, adapter: LoRAAdapter, h: np.ndarray) -> np.ndarray:
    """(W0 + scale*B@A) @ h computed without materializing the update."""
    if w0.shape[1] != h.shape[0]:
        raise ValueError(f"shape mismatch: W0 {w0.shape} vs h {h.shape}")
    if adapter.A.shape[1] != h.shape[0] or adapter.B.shape[0] != w0.shape[0]:
        raise ValueError("adapter shapes do not match W0")
    return w0 @ h + adapter.scale * (adapter.B @ (adapter.A @ h))


def lora_merge(w0: np.ndarray, adapter: LoRAAdapter) -> np.ndarray:
    """Fold the adapter into the base weight: W0 + scale*B@A."""
    return w0 + adapter.scale * (adapter.B @ adapter.A)


class LoRALinear(nn.Module):
    """Linear layer with a trainable low-rank bypass around a frozen base."""

    def __init__(self, in_features: int, out_features: int, rank: int, scale: float = 1.0):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.lora_A = nn.Parameter(torch.randn(rank, in_features) * 0.02)
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank))
        self.scale = scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.lora_A.T) @ self.lora_B.T)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.lora_B @ self.lora_A)


def window_partition(x: torch.Tensor, wr: int, wc: int) -> torch.Tensor:
    """(B, R, Co, D) -> (B*windows, wr*wc, D)."""
    b, r, c, d = x.shape
    x = x.view(b, r // wr, wr, c // wc, wc, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wr * wc, d)


def window_reverse(x: torch.Tensor, wr: int, wc: int, b: int, r: int, c: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    x = x.view(b, r // wr, c // wc, wr, wc, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, r, c, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within non-overlapping windows.

    rank > 0 puts a low-rank adapter on each of the q/k/v/o projections;
    rank == 0 uses plain linear layers (fully trainable modules).
    """

    def __init__(self, dim: int, heads: int, rank: int, scale: float):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads

        def proj():
            return LoRALinear(dim, dim, rank, scale) if rank else nn.Linear(dim, dim)

        self.q = proj()
        self.k = proj()
        self.v = proj()
        self.o = proj()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (n_windows, tokens, dim)
        n, t, d = x.shape
        q = self.q(x).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, d)
        return self.o(out)


class TransformerBlock(nn.Module):
    """Pre-norm windowed attention block with a 4x GELU MLP."""

    def __init__(self, dim: int, heads: int, window: tuple[int, int], rank: int, scale: float):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, rank, scale)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, r, c, _ = x.shape
        wr, wc = self.window
        h = window_partition(self.norm1(x), wr, wc)
        h = self.attn(h)
        x = x + window_reverse(h, wr, wc, b, r, c)
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """Halve both grid axes, doubling the channel width (tokens/4, dim*2)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, r, c, d = x.shape
        x = x.view(b, r // 2, 2, c // 2, 2, d)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, r // 2, c // 2, 4 * d)
        return self.reduce(self.norm(x))


class Encoder(nn.Module):
    """Mel power (B, T, F) -> four per-stage token grids H^1..H^4."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_stride
        self.patch_embed = nn.Linear(p * p, cfg.base_dim)
        rows, cols = cfg.grid(0)
        self.pos_embed = nn.Parameter(torch.randn(1, rows, cols, cfg.base_dim) * 0.02)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s in range(N_STAGES):
            self.merges.append(PatchMerge(cfg.dim(s - 1)) if s else nn.Identity())
            self.stages.append(
                nn.ModuleList(
                    TransformerBlock(
                        cfg.dim(s), cfg.heads[s], cfg.stage_window(s), cfg.lora_rank, cfg.lora_scale
                    )
                    for _ in range(cfg.depths[s])
                )
            )

    def featurize(self, mel: torch.Tensor) -> torch.Tensor:
        """Log-compress and normalize raw mel power."""
        return (torch.log(mel + MEL_LOG_EPS) + MEL_LOG_SHIFT) / MEL_LOG_SCALE

    def to_grid(self, mel_features: torch.Tensor) -> torch.Tensor:
        """(B, T, F) features -> patch grid (B, rows, cols, P*P)."""
        b, t, f = mel_features.shape
        c, p = self.cfg.chunk_count, self.cfg.patch_stride
        if t != self.cfg.in_frames or f != self.cfg.mel_bins:
            raise ValueError(
                f"expected mel {self.cfg.in_frames}x{self.cfg.mel_bins}, got {t}x{f}"
            )
        tp, fp = t // (c * p), f // p
        x = mel_features.view(b, c, tp, p, fp, p)
        # (b, tpatch, chunk, fpatch, dt, df): time rows, chunk-major columns
        x = x.permute(0, 2, 1, 4, 3, 5).reshape(b, tp, c * fp, p * p)
        return x

    def forward(self, mel: torch.Tensor) -> list[torch.Tensor]:
        """Returns [H^1, H^2, H^3, H^4], each (B, rows_l, cols_l, dim_l)."""
        x = self.patch_embed(self.to_grid(self.featurize(mel)))
        x = x + self.pos_embed
        outputs = []
        for merge, blocks in zip(self.merges, self.stages):
            x = merge(x)
            for block in blocks:
                x = block(x)
            outputs.append(x)
        return outputs

    def lora_parameters(self):
        for name, param in self.named_parameters():
            if "lora_" in name:
                yield param

    def base_parameters(self):
        for name, param in self.named_parameters():
            if "lora_" not in name:
                yield param

    def freeze_base(self) -> None:
        """Freeze everything except the low-rank adapters."""
        for p in self.base_parameters():
            p.requires_grad_(False)
        for p in self.lora_parameters():
            p.requires_grad_(True)
