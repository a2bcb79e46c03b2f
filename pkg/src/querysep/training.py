"""Training: metrics, on-the-fly mixture synthesis, and the fit loop.

Each step draws pairs of distinct-class clips, mixes them at the
configured SNR, builds query embeddings from the constituents' captions
and augmented audio (with per-example modality interpolation and polarity
sampling), runs the engine end to end, and descends the negative
SDR/scale-invariant-SDR blend. Plateaus in validation SISDRi decay the
learning rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import dsp
from .decoder import SeparationEngine
from .embedding import (
    AugmentConfig,
    QueryPolarityMode,
    augment_query_audio,
    build_condition,
    interpolate,
    sample_polarity,
)
from .errors import DivergenceError, SkipExample

log = logging.getLogger(__name__)

# Residual energy is floored at this fraction of the reference energy,
# capping SDR-family scores at exactly 80 dB when est == ref.
EPS_RATIO = 1e-8
SILENT_REFERENCE_RMS = 1e-7
SILENT_CLIP_RMS = 1e-4


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, dsp.Waveform):
        x = x.samples
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def sdr_torch(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Signal-to-distortion ratio in dB over the last axis.

    The relative residual is floored at EPS_RATIO, which caps the score at
    exactly 80 dB (log10 of the floored ratio is exactly -8).
    """
    ref_energy = (ref**2).sum(dim=-1)
    residual = ((ref - est) ** 2).sum(dim=-1)
    return -10 * torch.log10(torch.clamp(residual / ref_energy, min=EPS_RATIO))


def sisdr_torch(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Scale-invariant SDR: project est onto ref, then SDR of the projection."""
    scale = (est * ref).sum(dim=-1, keepdim=True) / (ref**2).sum(dim=-1, keepdim=True)
    target = scale * ref
    target_energy = (target**2).sum(dim=-1)
    residual = ((target - est) ** 2).sum(dim=-1)
    return -10 * torch.log10(torch.clamp(residual / target_energy, min=EPS_RATIO))


def _check_reference(ref: torch.Tensor) -> None:
    rms = float((ref**2).mean(dim=-1).min().sqrt())
    if rms < SILENT_REFERENCE_RMS:
        raise ValueError("silent reference waveform")


def sdr(est, ref) -> float:
    est, ref = _as_tensor(est), _as_tensor(ref)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    _check_reference(ref)
    return float(sdr_torch(est, ref))


def sisdr(est, ref) -> float:
    est, ref = _as_tensor(est), _as_tensor(ref)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    _check_reference(ref)
    scale = float((est * ref).sum() / (ref**2).sum())
    if scale == 0.0:
        raise ValueError("estimate is orthogonal to the reference")
    return float(sisdr_torch(est, ref))


def loss_torch(est: torch.Tensor, ref: torch.Tensor, lam: float) -> torch.Tensor:
    """-lam*SDR - (1-lam)*SISDR, averaged over the batch."""
    return (-lam * sdr_torch(est, ref) - (1 - lam) * sisdr_torch(est, ref)).mean()


def loss(est, ref, lam: float = 0.9) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    return -lam * sdr(est, ref) - (1 - lam) * sisdr(est, ref)


def mix_at_snr(
    target: dsp.Waveform, noise: dsp.Waveform, snr_db: float
) -> tuple[dsp.Waveform, dsp.Waveform]:
    """Scale the noise so the target/noise energy ratio is snr_db, then add.

    The noise is cropped or zero-padded to the target length first. Silent
    inputs raise SkipExample so on-the-fly synthesis can redraw.
    """
    if target.sample_rate != noise.sample_rate:
        raise ValueError("sample rates differ")
    n = target.samples.size
    noise_samples = noise.samples[:n]
    if noise_samples.size < n:
        noise_samples = np.pad(noise_samples, (0, n - noise_samples.size))
    if target.rms() < SILENT_CLIP_RMS or dsp.Waveform(noise_samples, noise.sample_rate).rms() < SILENT_CLIP_RMS:
        raise SkipExample("silent clip in mixture synthesis")
    e_target = float(np.sum(target.samples**2))
    e_noise = float(np.sum(noise_samples**2))
    scale = np.sqrt(e_target / e_noise) * 10 ** (-snr_db / 20)
    scaled = dsp.Waveform(scale * noise_samples, target.sample_rate)
    mixture = dsp.Waveform(target.samples + scaled.samples, target.sample_rate)
    return mixture, scaled


@dataclass
class ClipRecord:
    """One labeled training clip with its caption."""

    waveform: dsp.Waveform
    label: str
    caption: str


@dataclass
class TrainExample:
    mixture: dsp.Waveform
    target: dsp.Waveform
    pos_text: str
    neg_text: str
    pos_audio: dsp.Waveform
    neg_audio: dsp.Waveform
    polarity: QueryPolarityMode
    alpha_pos: float
    alpha_neg: float
    snr_db: float


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.9
    snr_db: float | tuple = 0.0  # fixed value, or (lo, hi) for uniform draws
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    decay_factor: float = 0.3
    plateau_epochs: int = 5
    batch_size: int = 8
    epochs: int = 10
    steps_per_epoch: int = 200
    val_pairs: int = 24
    seed: int = 0
    augment: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.lr_end >= self.lr_start:
            raise ValueError("lr_end must be below lr_start")

    def draw_snr(self, rng: np.random.Generator) -> float:
        if isinstance(self.snr_db, tuple):
            lo, hi = self.snr_db
            return float(rng.uniform(lo, hi))
        return float(self.snr_db)


def make_training_example(
    clip_a: dsp.Waveform,
    clip_b: dsp.Waveform,
    caption_a: str,
    caption_b: str,
    cfg: TrainConfig,
    rng: np.random.Generator,
    augment_cfg: AugmentConfig,
) -> TrainExample:
    """clip_a is the target, clip_b the interference; queries come from both."""
    snr = cfg.draw_snr(rng)
    mixture, _ = mix_at_snr(clip_a, clip_b, snr)
    return TrainExample(
        mixture=mixture,
        target=clip_a,
        pos_text=caption_a,
        neg_text=caption_b,
        pos_audio=augment_query_audio(clip_a, rng, augment_cfg),
        neg_audio=augment_query_audio(clip_b, rng, augment_cfg),
        polarity=sample_polarity(rng),
        alpha_pos=float(rng.random()),
        alpha_neg=float(rng.random()),
        snr_db=snr,
    )


class PairSampler:
    """Draws distinct-class clip pairs from a pool of records."""

    def __init__(self, records: list[ClipRecord]):
        if len({r.label for r in records}) < 2:
            raise ValueError("need clips from at least 2 classes to build mixtures")
        self.records = records

    def sample_pair(self, rng: np.random.Generator) -> tuple[ClipRecord, ClipRecord]:
        for _ in range(100):
            i, j = rng.integers(0, len(self.records), size=2)
            a, b = self.records[int(i)], self.records[int(j)]
            if a.label != b.label:
                return a, b
        raise RuntimeError("could not draw a distinct-class pair")


def _example_condition(engine: SeparationEngine, ex: TrainExample) -> np.ndarray:
    backend = engine.backend
    pos = neg = None
    if ex.polarity in (QueryPolarityMode.POSITIVE_ONLY, QueryPolarityMode.BOTH):
        pos = interpolate(
            backend.encode_audio(ex.pos_audio), backend.encode_text(ex.pos_text), ex.alpha_pos
        )
    if ex.polarity in (QueryPolarityMode.NEGATIVE_ONLY, QueryPolarityMode.BOTH):
        neg = interpolate(
            backend.encode_audio(ex.neg_audio), backend.encode_text(ex.neg_text), ex.alpha_neg
        )
    return build_condition(pos, neg).vector


def synthesize_batch(
    engine: SeparationEngine,
    sampler: PairSampler,
    cfg: TrainConfig,
    rng: np.random.Generator,
    augment_cfg: AugmentConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(mixtures, targets, conditions) tensors for one optimizer step."""
    mixtures, targets, conditions = [], [], []
    while len(mixtures) < cfg.batch_size:
        a, b = sampler.sample_pair(rng)
        try:
            ex = make_training_example(
                a.waveform, b.waveform, a.caption, b.caption, cfg, rng, augment_cfg
            )
        except SkipExample:
            continue
        mixtures.append(ex.mixture.samples)
        targets.append(ex.target.samples)
        conditions.append(_example_condition(engine, ex))
    to32 = lambda arrs: torch.from_numpy(np.stack(arrs)).to(torch.float32)
    return to32(mixtures), to32(targets), to32(conditions)


def build_validation_set(
    engine: SeparationEngine, records: list[ClipRecord], n_pairs: int, seed: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Fixed positive-text-query mixtures for plateau detection."""
    sampler = PairSampler(records)
    rng = np.random.default_rng(seed)
    mixtures, targets, conditions = [], [], []
    while len(mixtures) < n_pairs:
        a, b = sampler.sample_pair(rng)
        try:
            mixture, _ = mix_at_snr(a.waveform, b.waveform, 0.0)
        except SkipExample:
            continue
        mixtures.append(mixture.samples)
        targets.append(a.waveform.samples)
        conditions.append(build_condition(engine.backend.encode_text(a.caption), None).vector)
    to32 = lambda arrs: torch.from_numpy(np.stack(arrs)).to(torch.float32)
    return to32(mixtures), to32(targets), to32(conditions)


def validate_sisdri(
    engine: SeparationEngine, val: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
) -> float:
    mixtures, targets, conditions = val
    engine.eval_mode()
    with torch.no_grad():
        est = engine.forward_batch(mixtures, conditions)
        score = (sisdr_torch(est, targets) - sisdr_torch(mixtures, targets)).mean()
    engine.train_mode()
    return float(score)


def fit(
    engine: SeparationEngine,
    train_records: list[ClipRecord],
    val_records: list[ClipRecord],
    cfg: TrainConfig,
) -> list[dict]:
    """Train in place; returns per-epoch history rows."""
    torch.manual_seed(cfg.seed)
    engine.apply_freeze_policy()
    engine.train_mode()
    params = [p for p in engine.trainable_parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(
        params, lr=cfg.lr_start, betas=(0.9, 0.999), weight_decay=1e-2
    )
    sampler = PairSampler(train_records)
    augment_cfg = AugmentConfig(engine.profile.stft, enabled=cfg.augment)
    val = build_validation_set(engine, val_records, cfg.val_pairs, cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.lr_start
    best = -np.inf
    stale = 0
    history = []
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(cfg.steps_per_epoch):
            mixtures, targets, conditions = synthesize_batch(
                engine, sampler, cfg, rng, augment_cfg
            )
            est = engine.forward_batch(mixtures, conditions)
            step_loss = loss_torch(est, targets, cfg.lam)
            if not torch.isfinite(step_loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}: {float(step_loss.detach())}"
                )
            optimizer.zero_grad()
            step_loss.backward()
            optimizer.step()
            epoch_loss += float(step_loss.detach())
        val_sisdri = validate_sisdri(engine, val)
        if val_sisdri > best:
            best = val_sisdri
            stale = 0
        else:
            stale += 1
            if stale >= cfg.plateau_epochs and lr > cfg.lr_end:
                lr = max(lr * cfg.decay_factor, cfg.lr_end)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                stale = 0
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss / cfg.steps_per_epoch,
                "val_sisdri": val_sisdri,
            }
        )
        log.info(
            "epoch %d lr %.2e train_loss %.3f val_sisdri %.2f",
            epoch, lr, history[-1]["train_loss"], val_sisdri,
        )
    engine.eval_mode()
    return history


def records_from_corpus(corpus, split: str) -> list[ClipRecord]:
    """Render a toy-corpus split into in-memory training records."""
    return [ClipRecord(c.render(), c.label, c.caption) for c in corpus.split(split)]
