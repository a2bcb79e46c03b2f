"""Run profiles: internally consistent geometry presets.

Three presets ship: "toy" (8 kHz, 1 s clips; the profile all CI training
and evaluation runs on), "paper" (32 kHz/48 kHz full-scale geometry;
constructible and validated but not trained here), and "micro" (a minimal
float64-friendly profile for gradient checks).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .dsp import MelConfig, StftConfig
from .encoder import EncoderConfig
from .errors import ConfigurationError


@dataclass(frozen=True)
class DecoderConfig:
    """Capacity of the aggregation/mask head (geometry comes from the encoder)."""

    cond_dim: int
    lin_bins: int
    aggr_depths: tuple = (1, 1, 1, 1)
    out_channels: int = 2
    masknet_layers: int = 3
    masknet_dim: int = 64
    masknet_heads: int = 4

    def __post_init__(self) -> None:
        if self.cond_dim <= 0 or self.cond_dim % 2:
            raise ValueError("cond_dim must be a positive even number (two blocks)")
        if len(self.aggr_depths) != 4:
            raise ValueError("aggregator needs exactly 4 stage depths")
        if self.masknet_layers < 1 or self.masknet_dim % self.masknet_heads:
            raise ValueError("bad masknet geometry")


@dataclass(frozen=True)
class EngineProfile:
    """Everything needed to build a separation engine of a given scale."""

    name: str
    sample_rate: int
    clip_samples: int
    embed_dim: int
    stft: StftConfig
    mel: MelConfig
    encoder: EncoderConfig
    decoder: DecoderConfig

    def __post_init__(self) -> None:
        if self.clip_samples <= 0:
            raise ConfigurationError("clip_samples must be positive")
        clip_frames = self.stft.frame_count(self.clip_samples)
        mel_rate_clip = self.clip_samples * self.mel.target_rate // self.sample_rate
        mel_frames = 1 + mel_rate_clip // self.mel.hop
        if mel_frames != clip_frames:
            raise ConfigurationError(
                f"mel frame rate mismatch: {mel_frames} mel frames vs "
                f"{clip_frames} linear frames per clip"
            )
        if self.encoder.in_frames < clip_frames:
            raise ConfigurationError(
                f"encoder grid ({self.encoder.in_frames} frames) smaller than "
                f"a clip ({clip_frames} frames)"
            )
        if self.encoder.mel_bins != self.mel.n_mels:
            raise ConfigurationError("encoder mel_bins must equal mel.n_mels")
        if self.decoder.cond_dim != 2 * self.embed_dim:
            raise ConfigurationError("decoder cond_dim must be 2 * embed_dim")
        if self.decoder.lin_bins != self.stft.bins:
            raise ConfigurationError("decoder lin_bins must equal stft bins")

    @property
    def clip_frames(self) -> int:
        return self.stft.frame_count(self.clip_samples)

    def to_dict(self) -> dict:
        """JSON-shaped snapshot (nested dicts and lists only)."""

        def undata(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                obj = dataclasses.asdict(obj)
            if isinstance(obj, dict):
                return {k: undata(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [undata(v) for v in obj]
            return obj

        return undata(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EngineProfile":
        def tup(d, *keys):
            for k in keys:
                d[k] = tuple(d[k])
            return d

        try:
            return cls(
                name=data["name"],
                sample_rate=data["sample_rate"],
                clip_samples=data["clip_samples"],
                embed_dim=data["embed_dim"],
                stft=StftConfig(**data["stft"]),
                mel=MelConfig(**data["mel"]),
                encoder=EncoderConfig(**tup(dict(data["encoder"]), "depths", "heads")),
                decoder=DecoderConfig(**tup(dict(data["decoder"]), "aggr_depths")),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed profile snapshot: {exc}") from exc


def toy_profile(embed_dim: int = 64, lora_rank: int = 4) -> EngineProfile:
    """Desk-scale: 8 kHz, 1 s clips, 101x129 linear grid, 128x64 mel grid."""
    return EngineProfile(
        name="toy",
        sample_rate=8000,
        clip_samples=8000,
        embed_dim=embed_dim,
        stft=StftConfig(window_length=256, hop=80, n_fft=256),
        mel=MelConfig(target_rate=8000, window_length=256, hop=80, n_mels=64),
        encoder=EncoderConfig(
            in_frames=128,
            mel_bins=64,
            patch_stride=4,
            base_dim=32,
            depths=(1, 1, 2, 1),
            heads=(2, 4, 8, 16),
            chunk_count=4,
            window=4,
            lora_rank=lora_rank,
        ),
        decoder=DecoderConfig(
            cond_dim=2 * embed_dim,
            lin_bins=129,
            out_channels=2,
            masknet_dim=64,
            masknet_heads=4,
        ),
    )


def paper_profile(embed_dim: int = 512) -> EngineProfile:
    """Full-scale geometry: 32 kHz audio, 48 kHz mel, 10 s clips, 1001x513."""
    return EngineProfile(
        name="paper",
        sample_rate=32000,
        clip_samples=320000,
        embed_dim=embed_dim,
        stft=StftConfig(window_length=1024, hop=320, n_fft=1024),
        mel=MelConfig(target_rate=48000, window_length=1024, hop=480, n_mels=64),
        encoder=EncoderConfig(
            in_frames=1024,
            mel_bins=64,
            patch_stride=4,
            base_dim=96,
            depths=(2, 2, 12, 2),
            heads=(4, 8, 16, 32),
            chunk_count=4,
            window=8,
            lora_rank=16,
        ),
        decoder=DecoderConfig(
            cond_dim=2 * embed_dim,
            lin_bins=513,
            out_channels=4,
            masknet_dim=256,
            masknet_heads=8,
        ),
    )


def micro_profile(embed_dim: int = 8) -> EngineProfile:
    """Minimal profile for finite-difference gradient checks (0.25 s clips)."""
    return EngineProfile(
        name="micro",
        sample_rate=8000,
        clip_samples=2016,  # 64 frames exactly at hop 32
        embed_dim=embed_dim,
        stft=StftConfig(window_length=64, hop=32, n_fft=64),
        mel=MelConfig(target_rate=8000, window_length=64, hop=32, n_mels=16),
        encoder=EncoderConfig(
            in_frames=64,
            mel_bins=16,
            patch_stride=2,
            base_dim=8,
            depths=(1, 1, 1, 1),
            heads=(1, 2, 4, 8),
            chunk_count=2,
            window=4,
            lora_rank=2,
        ),
        decoder=DecoderConfig(
            cond_dim=2 * embed_dim,
            lin_bins=33,
            out_channels=2,
            masknet_dim=16,
            masknet_heads=2,
        ),
    )


PROFILES = {"toy": toy_profile, "paper": paper_profile, "micro": micro_profile}


def get_profile(name: str, **kwargs) -> EngineProfile:
    if name not in PROFILES:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name](**kwargs)
