"""Separation decoder and engine orchestration.

The conditional vector modulates each encoder stage output (FiLM); a
U-Net-style aggregator walks back up the hierarchy, adding the modulated
skip of the mirrored stage after each patch expansion; a transposed-conv
inverse patch embedding maps tokens back onto the mel frame grid; the
MaskNet concatenates those per-frame features with the log-compressed
linear magnitude and emits a (0,1) mask. The engine applies the mask to
the mixture magnitude, reuses the mixture phase untouched, and inverts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import dsp
from .config import DecoderConfig, EngineProfile
from .embedding import ConditionalEmbedding, EmbeddingBackend
from .encoder import Encoder, EncoderConfig, TransformerBlock
from .errors import ConfigurationError

log = logging.getLogger(__name__)

# Sigmoid saturates to exactly 0/1 in float32; clamping keeps the emitted
# mask strictly inside the open interval.
MASK_MIN = 1e-7


class FiLMLayer(nn.Module):
    """Per-channel affine modulation gamma(c) * h + beta(c).

    gamma's bias starts at one and beta's at zero, so a fresh layer is
    near-identity while still condition-sensitive through the weights.
    """

    def __init__(self, cond_dim: int, feature_dim: int):
        super().__init__()
        self.gamma = nn.Linear(cond_dim, feature_dim)
        self.beta = nn.Linear(cond_dim, feature_dim)
        with torch.no_grad():
            self.gamma.bias.fill_(1.0)
            self.beta.bias.zero_()

    def forward(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.gamma.out_features:
            raise ValueError(
                f"feature dim {h.shape[-1]} does not match FiLM dim {self.gamma.out_features}"
            )
        shape = (c.shape[0],) + (1,) * (h.dim() - 2) + (-1,)
        return self.gamma(c).view(shape) * h + self.beta(c).view(shape)


class PatchExpand(nn.Module):
    """Double both grid axes, halving the channel width (tokens*4, dim/2)."""

    def __init__(self, dim: int):
        super().__init__()
        self.expand = nn.Linear(dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, r, c, d = x.shape
        x = self.expand(x).view(b, r, c, 2, 2, d // 2)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * r, 2 * c, d // 2)
        return self.norm(x)


class MaskNet(nn.Module):
    """Per-frame transformer over [decoded features || log1p magnitude]."""

    def __init__(self, feature_dim: int, cfg: DecoderConfig):
        super().__init__()
        self.proj = nn.Linear(feature_dim + cfg.lin_bins, cfg.masknet_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.masknet_dim,
            nhead=cfg.masknet_heads,
            dim_feedforward=4 * cfg.masknet_dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=cfg.masknet_layers, enable_nested_tensor=False
        )
        self.head = nn.Linear(cfg.masknet_dim, cfg.lin_bins)

    def forward(self, features: torch.Tensor, magnitude: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != magnitude.shape[1]:
            raise ValueError(
                f"frame mismatch: {features.shape[1]} feature frames vs "
                f"{magnitude.shape[1]} magnitude frames"
            )
        x = torch.cat([features, torch.log1p(magnitude)], dim=-1)
        x = self.encoder(self.proj(x))
        return torch.clamp(torch.sigmoid(self.head(x)), MASK_MIN, 1.0 - MASK_MIN)


class Decoder(nn.Module):
    """FiLM + hierarchical aggregation + inverse patch embedding + MaskNet."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: DecoderConfig):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        dims = [enc_cfg.dim(s) for s in range(4)]
        self.films = nn.ModuleList(FiLMLayer(cfg.cond_dim, d) for d in dims)
        # Execution order walks the hierarchy deepest-first; the first
        # three steps expand (tokens*4, dim/2) and add the mirrored skip.
        self.stages = nn.ModuleList()
        self.expands = nn.ModuleList()
        for step in range(4):
            depth = cfg.aggr_depths[step]
            stage_idx = 3 - step  # encoder stage whose geometry this step runs at
            dim = dims[stage_idx]
            window = enc_cfg.stage_window(stage_idx)
            self.stages.append(
                nn.ModuleList(
                    TransformerBlock(dim, enc_cfg.heads[stage_idx], window, rank=0, scale=0.0)
                    for _ in range(depth)
                )
            )
            self.expands.append(PatchExpand(dim) if step < 3 else nn.Identity())
        self.inverse_patch = nn.ConvTranspose2d(
            dims[0], cfg.out_channels, kernel_size=enc_cfg.patch_stride, stride=enc_cfg.patch_stride
        )
        self.frame_feature_dim = enc_cfg.mel_bins * cfg.out_channels
        self.masknet = MaskNet(self.frame_feature_dim, cfg)

    def aggregate(self, features: list[torch.Tensor], c: torch.Tensor) -> torch.Tensor:
        """Modulated skip aggregation -> per-frame features (B, in_frames, F*out_ch)."""
        if len(features) != 4:
            raise ValueError(f"expected 4 encoder stages, got {len(features)}")
        modulated = [film(h, c) for film, h in zip(self.films, features)]
        x = modulated[3]
        for step in range(4):
            for block in self.stages[step]:
                x = block(x)
            if step < 3:
                x = self.expands[step](x)
                x = x + modulated[2 - step]
        b, rows, cols, d = x.shape
        image = self.inverse_patch(x.permute(0, 3, 1, 2))  # (B, ch, T/C, C*F)
        ch = self.cfg.out_channels
        t_chunk = image.shape[2]
        n_chunks = self.enc_cfg.chunk_count
        f = image.shape[3] // n_chunks
        # undo the chunk layout: frame t = chunk*t_chunk + tau
        image = image.view(b, ch, t_chunk, n_chunks, f)
        image = image.permute(0, 3, 2, 4, 1).reshape(b, n_chunks * t_chunk, f * ch)
        return image

    def forward(
        self, features: list[torch.Tensor], c: torch.Tensor, magnitude: torch.Tensor
    ) -> torch.Tensor:
        """Emit a (B, frames, lin_bins) mask for the given linear magnitude."""
        frame_features = self.aggregate(features, c)
        n_frames = magnitude.shape[1]
        if n_frames > frame_features.shape[1]:
            raise ValueError(
                f"magnitude has {n_frames} frames but the grid covers only "
                f"{frame_features.shape[1]}"
            )
        return self.masknet(frame_features[:, :n_frames], magnitude)


class SeparationEngine:
    """Encoder + decoder + embedding backend under one profile."""

    def __init__(self, profile: EngineProfile, backend: EmbeddingBackend):
        if backend.dimension != profile.embed_dim:
            raise ConfigurationError(
                f"backend dimension {backend.dimension} does not match "
                f"profile embed_dim {profile.embed_dim}"
            )
        self.profile = profile
        self.backend = backend
        self.encoder = Encoder(profile.encoder)
        self.decoder = Decoder(profile.encoder, profile.decoder)

    def eval_mode(self) -> "SeparationEngine":
        self.encoder.eval()
        self.decoder.eval()
        return self

    def train_mode(self) -> "SeparationEngine":
        self.encoder.train()
        self.decoder.train()
        return self

    def apply_freeze_policy(self) -> None:
        """Backend and encoder base frozen; adapters and decoder trainable."""
        self.encoder.freeze_base()
        for p in self.decoder.parameters():
            p.requires_grad_(True)
        frozen = getattr(self.backend, "parameters", None)
        if callable(frozen):
            for p in self.backend.parameters():
                p.requires_grad_(False)

    def trainable_parameters(self):
        yield from self.encoder.lora_parameters()
        yield from self.decoder.parameters()

    def _condition_tensor(self, condition: ConditionalEmbedding, dtype, device) -> torch.Tensor:
        if condition.vector.size != self.profile.decoder.cond_dim:
            raise ValueError(
                f"condition length {condition.vector.size} does not match "
                f"profile cond_dim {self.profile.decoder.cond_dim}"
            )
        return torch.from_numpy(condition.vector).to(dtype=dtype, device=device)[None]

    def mel_frontend(self, batch: torch.Tensor) -> torch.Tensor:
        """(B, samples) -> (B, in_frames, n_mels) mel power, zero-padded."""
        return dsp.mel_grid_torch(batch, self.profile.mel, self.profile.encoder.in_frames)

    def forward_mask(self, batch: torch.Tensor, conditions: torch.Tensor) -> torch.Tensor:
        """Differentiable mask estimation for (B, samples) at the profile rate."""
        spec = dsp.stft_torch(batch, self.profile.stft)
        magnitude = spec.abs()
        features = self.encoder(self.mel_frontend(batch))
        return self.decoder(features, conditions, magnitude)

    def forward_batch(self, batch: torch.Tensor, conditions: torch.Tensor) -> torch.Tensor:
        """Differentiable end-to-end estimate: mixture batch -> waveform batch."""
        spec = dsp.stft_torch(batch, self.profile.stft)
        magnitude = spec.abs()
        phase = torch.angle(spec)
        features = self.encoder(self.mel_frontend(batch))
        mask = self.decoder(features, conditions, magnitude)
        masked = torch.polar(mask * magnitude, phase)
        return dsp.istft_torch(masked, self.profile.stft, batch.shape[-1])

    def separate_detailed(self, mixture: dsp.Waveform, condition: ConditionalEmbedding):
        """Full-precision single-clip path; returns (waveform, mask, mixture mp, masked mp)."""
        if mixture.sample_rate != self.profile.sample_rate:
            mixture = dsp.resample(mixture, self.profile.sample_rate)
        if mixture.samples.size > self.profile.clip_samples:
            raise ValueError(
                f"mixture ({mixture.samples.size} samples) exceeds the "
                f"{self.profile.clip_samples}-sample segment; use segmented_inference"
            )
        mp = dsp.magphase(dsp.stft(mixture, self.profile.stft))
        batch = torch.from_numpy(mixture.samples).to(torch.float32)[None]
        cond = self._condition_tensor(condition, torch.float32, batch.device)
        with torch.no_grad():
            features = self.encoder(self.mel_frontend(batch))
            magnitude = torch.from_numpy(mp.magnitude).to(torch.float32)[None]
            mask = self.decoder(features, cond, magnitude)[0].double().numpy()
        masked = dsp.masked_magphase(mask, mp)
        out = dsp.istft(dsp.recompose(masked))
        return out, mask, mp, masked

    def separate(self, mixture: dsp.Waveform, condition: ConditionalEmbedding) -> dsp.Waveform:
        """Extract the conditioned source from a mixture of at most one segment."""
        return self.separate_detailed(mixture, condition)[0]


def segmented_inference(
    engine: SeparationEngine,
    mixture: dsp.Waveform,
    condition: ConditionalEmbedding,
    segment_s: float | None = None,
    overlap_s: float = 0.25,
) -> dsp.Waveform:
    """Separate long audio in overlapping segments with linear cross-fades.

    Segments are weighted with trapezoid windows whose ramps span the
    overlap; the weighted sum is normalized by the accumulated weight, so
    identical per-segment outputs reconstruct exactly.
    """
    rate = engine.profile.sample_rate
    if mixture.sample_rate != rate:
        mixture = dsp.resample(mixture, rate)
    segment = engine.profile.clip_samples if segment_s is None else int(round(segment_s * rate))
    overlap = int(round(overlap_s * rate))
    if overlap >= segment:
        raise ValueError(f"overlap ({overlap}) must be smaller than segment ({segment})")
    n = mixture.samples.size
    if n <= segment:
        return engine.separate(mixture, condition)
    hop = segment - overlap
    starts = list(range(0, n - segment, hop)) + [n - segment]
    out = np.zeros(n)
    weight = np.zeros(n)
    ramp = (np.arange(overlap) + 1.0) / (overlap + 1.0)
    for start in starts:
        piece = engine.separate(
            dsp.Waveform(mixture.samples[start : start + segment], rate), condition
        )
        w = np.ones(segment)
        if start > 0:
            w[:overlap] = ramp
        if start + segment < n:
            w[-overlap:] = 1.0 - ramp
        out[start : start + segment] += w * piece.samples
        weight[start : start + segment] += w
    return dsp.Waveform(out / weight, rate)
