"""Synthetic event corpus and a small contrastive audio-text backend.

Eight parametric sound classes live in disjoint frequency bands, so a
spectral oracle can verify their separability and ideal masks exist for
any mixture of two classes. A compact two-tower model (the hierarchical
encoder with a pooling head on the audio side, a word-embedding MLP on
the text side) is pretrained with a symmetric contrastive objective to
give both modalities a shared unit-norm embedding space.
"""

from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint, dsp
from .config import EngineProfile
from .embedding import EmbeddingBackend, Modality, QueryEmbedding, prompt_for
from .encoder import Encoder
from .errors import CheckpointError

log = logging.getLogger(__name__)

SYNTH_RATE = 8000
EVENT_RMS = 0.1


def _band_limit(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Zero every DFT bin outside [lo, hi] Hz.

    Envelope transients (attacks, exponential decays) spread a few percent
    of energy outside the nominal band; this makes band confinement exact
    up to the bin grid, which keeps the classes spectrally disjoint.
    """
    spectrum = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1.0 / SYNTH_RATE)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spectrum, x.size)


def _rms_normalize(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x**2))
    return x * (EVENT_RMS / rms)


def _synth_purr(t, rng):
    # low AM tone, energy within 80..160 Hz
    f0 = rng.uniform(100, 140)
    rate = rng.uniform(10, 20)
    depth = rng.uniform(0.5, 0.85)
    env = 1.0 - depth / 2 + (depth / 2) * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return env * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))


def _synth_tone(t, rng):
    # steady sine with slow vibrato, 230..320 Hz
    f = rng.uniform(230, 320)
    vib_rate = rng.uniform(2, 5)
    dev = f * rng.uniform(0.002, 0.008)
    phase = 2 * np.pi * f * t + (dev / vib_rate) * np.sin(2 * np.pi * vib_rate * t)
    return np.sin(phase + rng.uniform(0, 2 * np.pi))


def _synth_chime(t, rng):
    # re-struck decaying partials, 450..650 Hz
    f = rng.uniform(460, 480)
    out = np.zeros_like(t)
    strike = 0.0
    while strike < t[-1]:
        tau = rng.uniform(0.1, 0.2)
        local = np.clip(t - strike, 0, None)
        gate = (t >= strike).astype(float)
        attack = np.clip(local / 0.01, 0, 1)  # 10 ms ramp keeps the onset in-band
        for ratio, amp in ((1.0, 1.0), (1.21, 0.6), (1.35, 0.4)):
            out += gate * attack * amp * np.exp(-local / tau) * np.sin(
                2 * np.pi * f * ratio * local + rng.uniform(0, 2 * np.pi)
            )
        strike += rng.uniform(0.3, 0.5)
    return out


def _synth_chirp(t, rng):
    # repeating linear sweeps, 800..1150 Hz
    period = rng.uniform(0.2, 0.35)
    f_lo = rng.uniform(820, 900)
    f_hi = rng.uniform(1050, 1120)
    pos = (t / period) % 1.0
    freq = f_lo + (f_hi - f_lo) * pos
    phase = 2 * np.pi * np.cumsum(freq) / SYNTH_RATE
    return np.sin(phase + rng.uniform(0, 2 * np.pi))


def _synth_trill(t, rng):
    # smooth two-note alternation, 1300..1750 Hz
    f1 = rng.uniform(1350, 1430)
    f2 = rng.uniform(1620, 1700)
    rate = rng.uniform(8, 14)
    s = 0.5 * (1 + np.tanh(4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))))
    freq = f1 + (f2 - f1) * s
    phase = 2 * np.pi * np.cumsum(freq) / SYNTH_RATE
    return np.sin(phase)


def _synth_hiss(t, rng):
    # band-limited noise, 1950..2400 Hz
    n = t.size
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / SYNTH_RATE)
    lo = rng.uniform(1950, 2050)
    hi = rng.uniform(2300, 2400)
    spectrum[(freqs < lo) | (freqs > hi)] = 0
    return np.fft.irfft(spectrum, n)


def _synth_clicks(t, rng):
    # band-limited ping train, 2600..3050 Hz
    n = t.size
    fc = rng.uniform(2680, 2980)
    tau = rng.uniform(0.008, 0.014)
    ping_t = np.arange(int(0.08 * SYNTH_RATE)) / SYNTH_RATE
    attack = np.clip(ping_t / 0.004, 0, 1)  # 4 ms ramp keeps the onset in-band
    ping = attack * np.exp(-ping_t / tau) * np.sin(2 * np.pi * fc * ping_t)
    out = np.zeros(n)
    pos = rng.uniform(0, 0.1)
    while pos * SYNTH_RATE < n:
        i = int(pos * SYNTH_RATE)
        chunk = ping[: n - i]
        out[i : i + chunk.size] += chunk
        pos += rng.uniform(1 / 12, 1 / 6)
    return out


def _synth_buzz(t, rng):
    # narrowband FM, 3250..3700 Hz
    fc = rng.uniform(3380, 3570)
    fm = rng.uniform(45, 75)
    dev = rng.uniform(30, 55)
    phase = 2 * np.pi * fc * t + (dev / fm) * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
    return np.sin(phase)


@dataclass(frozen=True)
class EventClass:
    name: str
    band: tuple[float, float]  # Hz extent holding ~all of the energy
    synth: callable


CLASS_RECIPES = {
    "buzz": EventClass("buzz", (3250, 3700), _synth_buzz),
    "chime": EventClass("chime", (450, 650), _synth_chime),
    "chirp": EventClass("chirp", (800, 1150), _synth_chirp),
    "clicks": EventClass("clicks", (2600, 3050), _synth_clicks),
    "hiss": EventClass("hiss", (1950, 2400), _synth_hiss),
    "purr": EventClass("purr", (80, 160), _synth_purr),
    "tone": EventClass("tone", (230, 320), _synth_tone),
    "trill": EventClass("trill", (1300, 1750), _synth_trill),
}
DEFAULT_CLASSES = tuple(sorted(CLASS_RECIPES))


def synth_event(cls: str, duration_s: float, rng: np.random.Generator) -> dsp.Waveform:
    """Render one randomized clip of the named class, RMS-normalized to 0.1."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if cls not in CLASS_RECIPES:
        raise ValueError(f"unknown event class {cls!r}; choose from {sorted(CLASS_RECIPES)}")
    n = int(round(duration_s * SYNTH_RATE))
    t = np.arange(n) / SYNTH_RATE
    recipe = CLASS_RECIPES[cls]
    x = _band_limit(recipe.synth(t, rng), *recipe.band)
    return dsp.Waveform(_rms_normalize(x), SYNTH_RATE)


CAPTION_MODIFIERS = ("faint", "clear", "steady", "soft", "bright", "distant")
CAPTION_TEMPLATES = (
    "The sound of {label}",
    "{label}",
    "a {mod} {label} sound",
    "recording of {label}",
    "the {label} keeps going",
    "{mod} {label} in the background",
)


def make_caption(label: str, rng: np.random.Generator) -> str:
    template = CAPTION_TEMPLATES[int(rng.integers(0, len(CAPTION_TEMPLATES)))]
    mod = CAPTION_MODIFIERS[int(rng.integers(0, len(CAPTION_MODIFIERS)))]
    return template.format(label=label, mod=mod)


@dataclass
class ToyClip:
    """A corpus entry; audio is regenerated deterministically from the seed."""

    clip_id: str
    label: str
    caption: str
    seed: int
    duration: float
    split: str

    def render(self) -> dsp.Waveform:
        return synth_event(self.label, self.duration, np.random.default_rng(self.seed))


@dataclass
class ToyCorpus:
    classes: list[str]
    clips: list[ToyClip]

    def __post_init__(self) -> None:
        by_split = self.by_split()
        query_ids = {c.clip_id for c in by_split.get("query", [])}
        others = {c.clip_id for c in self.clips if c.split != "query"}
        if query_ids & others:
            raise ValueError("query split must be disjoint from all other splits")

    def by_split(self) -> dict[str, list[ToyClip]]:
        out: dict[str, list[ToyClip]] = {}
        for clip in self.clips:
            out.setdefault(clip.split, []).append(clip)
        return out

    def split(self, name: str) -> list[ToyClip]:
        return [c for c in self.clips if c.split == name]

    def save(self, path) -> None:
        data = {
            "classes": self.classes,
            "clips": [vars(c) for c in self.clips],
        }
        with open(path, "w") as f:
            json.dump(data, f, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "ToyCorpus":
        with open(path) as f:
            data = json.load(f)
        return cls(data["classes"], [ToyClip(**c) for c in data["clips"]])


SPLIT_FRACTIONS = (("train", 0.7), ("val", 0.1), ("test", 0.1), ("query", 0.1))


def make_corpus(
    classes: list[str] | None = None,
    per_class: int = 40,
    duration: float = 1.0,
    seed: int = 0,
) -> ToyCorpus:
    """Deterministic corpus: per-clip seeds derive from (seed, class, index)."""
    classes = sorted(classes or DEFAULT_CLASSES)
    if per_class < 10:
        raise ValueError("need at least 10 clips per class to populate all splits")
    root = np.random.default_rng(seed)
    clips = []
    for label in classes:
        if label not in CLASS_RECIPES:
            raise ValueError(f"unknown event class {label!r}")
        caption_rng = np.random.default_rng(root.integers(2**32))
        # round the cumulative fractions so the bounds always end at per_class
        cum = np.cumsum([f for _, f in SPLIT_FRACTIONS])
        bounds = [int(round(c * per_class)) for c in cum]
        for i in range(per_class):
            split = SPLIT_FRACTIONS[int(np.searchsorted(bounds, i, side="right"))][0]
            clips.append(
                ToyClip(
                    clip_id=f"{label}-{i:04d}",
                    label=label,
                    caption=make_caption(label, caption_rng),
                    seed=int(np.random.default_rng([seed, zlib.crc32(label.encode()), i]).integers(2**63)),
                    duration=duration,
                    split=split,
                )
            )
    return ToyCorpus(classes, clips)


def _tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z]+", text.lower())


def build_vocabulary(labels) -> list[str]:
    """All words the caption generator can emit, plus an unknown slot."""
    words = {"<unk>"}
    for template in CAPTION_TEMPLATES:
        words.update(_tokenize(template.format(label="x", mod="y")) )
    words.discard("x")
    words.discard("y")
    words.update(CAPTION_MODIFIERS)
    for label in labels:
        words.update(_tokenize(label))
    return sorted(words)


class ToyBackend(nn.Module, EmbeddingBackend):
    """Two-tower contrastive model emitting unit-norm embeddings.

    The audio tower reuses the separation encoder's architecture (so a
    trained backend can seed the separator's frozen base); the text tower
    is a mean-pooled word embedding followed by a small MLP.
    """

    def __init__(self, profile: EngineProfile, vocab: list[str]):
        super().__init__()
        self.profile = profile
        self.vocab = list(vocab)
        self._word_to_id = {w: i for i, w in enumerate(self.vocab)}
        if "<unk>" not in self._word_to_id:
            raise ValueError("vocabulary must contain the <unk> slot")
        dim = profile.embed_dim
        self.encoder = Encoder(profile.encoder)
        self.audio_head = nn.Linear(profile.encoder.dim(3), dim)
        self.text_embed = nn.Embedding(len(self.vocab), 64)
        self.text_mlp = nn.Sequential(nn.Linear(64, 128), nn.GELU(), nn.Linear(128, dim))
        self.logit_scale = nn.Parameter(torch.tensor(np.log(1 / 0.07), dtype=torch.float32))

    @property
    def dimension(self) -> int:
        return self.profile.embed_dim

    def embed_audio_batch(self, batch: torch.Tensor) -> torch.Tensor:
        """(B, samples) at the profile rate -> (B, D) unit-norm, differentiable."""
        mel = dsp.mel_grid_torch(batch, self.profile.mel, self.profile.encoder.in_frames, crop=True)
        tokens = self.encoder(mel)[-1]  # deepest stage
        pooled = tokens.reshape(tokens.shape[0], -1, tokens.shape[-1]).mean(dim=1)
        return F.normalize(self.audio_head(pooled), dim=-1)

    def embed_text_batch(self, texts: list[str]) -> torch.Tensor:
        unk = self._word_to_id["<unk>"]
        ids = [[self._word_to_id.get(w, unk) for w in _tokenize(t)] or [unk] for t in texts]
        width = max(len(seq) for seq in ids)
        padded = torch.zeros(len(ids), width, dtype=torch.long)
        mask = torch.zeros(len(ids), width)
        for i, seq in enumerate(ids):
            padded[i, : len(seq)] = torch.tensor(seq)
            mask[i, : len(seq)] = 1.0
        emb = self.text_embed(padded) * mask[..., None]
        pooled = emb.sum(dim=1) / mask.sum(dim=1, keepdim=True)
        return F.normalize(self.text_mlp(pooled), dim=-1)

    def encode_audio(self, w: dsp.Waveform) -> QueryEmbedding:
        if w.sample_rate != self.profile.sample_rate:
            w = dsp.resample(w, self.profile.sample_rate)
        batch = torch.from_numpy(w.samples).to(torch.float32)[None]
        with torch.no_grad():
            was_training = self.training
            self.eval()
            vec = self.embed_audio_batch(batch)[0].double().numpy()
            if was_training:
                self.train()
        return QueryEmbedding(vec, Modality.AUDIO)

    def encode_text(self, text: str) -> QueryEmbedding:
        with torch.no_grad():
            was_training = self.training
            self.eval()
            vec = self.embed_text_batch([text])[0].double().numpy()
            if was_training:
                self.train()
        return QueryEmbedding(vec, Modality.TEXT)

    def save(self, path) -> None:
        tensors = checkpoint.state_dict_to_tensors(self.state_dict())
        meta = {
            "kind": "toy-backend",
            "vocab": self.vocab,
            "profile": self.profile.to_dict(),
        }
        checkpoint.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "ToyBackend":
        tensors, meta = checkpoint.load_tensors(path)
        if meta.get("kind") != "toy-backend":
            raise CheckpointError(f"{path} is not a backend checkpoint")
        backend = cls(EngineProfile.from_dict(meta["profile"]), meta["vocab"])
        backend.load_state_dict(checkpoint.tensors_to_state_dict(tensors))
        backend.eval()
        return backend


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    lr: float = 2e-3
    seed: int = 0
    log_every: int = 100


def contrastive_pretrain(
    corpus: ToyCorpus, profile: EngineProfile, cfg: PretrainConfig
) -> tuple[ToyBackend, list[dict]]:
    """Symmetric in-batch contrastive pretraining (one clip per class per step)."""
    if len(corpus.classes) < 2:
        raise ValueError("contrastive pretraining needs at least 2 classes")
    torch.manual_seed(cfg.seed)
    backend = ToyBackend(profile, build_vocabulary(corpus.classes))
    backend.train()
    by_class: dict[str, list[ToyClip]] = {}
    for clip in corpus.split("train"):
        by_class.setdefault(clip.label, []).append(clip)
    missing = [c for c in corpus.classes if c not in by_class]
    if missing:
        raise ValueError(f"classes without training clips: {missing}")
    waves = {
        c.clip_id: torch.from_numpy(c.render().samples).to(torch.float32)
        for clips in by_class.values()
        for c in clips
    }
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(backend.parameters(), lr=cfg.lr)
    labels = torch.arange(len(corpus.classes))
    history = []
    for step in range(cfg.steps):
        chosen = [
            clips[int(rng.integers(0, len(clips)))] for clips in
            (by_class[c] for c in corpus.classes)
        ]
        batch = torch.stack([waves[c.clip_id] for c in chosen])
        audio = backend.embed_audio_batch(batch)
        text = backend.embed_text_batch([c.caption for c in chosen])
        logits = backend.logit_scale.exp() * audio @ text.T
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": float(loss.item())})
            log.info("pretrain step %d loss %.4f", step, loss.item())
    backend.eval()
    return backend, history


def zero_shot_classify(backend: EmbeddingBackend, w: dsp.Waveform, label_prompts: list[str]) -> str:
    """Nearest class prompt by cosine; ties broken lexicographically."""
    if not label_prompts:
        raise ValueError("label_prompts must be non-empty")
    audio = backend.encode_audio(w).vector
    scored = []
    for label in label_prompts:
        text = backend.encode_text(prompt_for(label)).vector
        cos = float(audio @ text / (np.linalg.norm(audio) * np.linalg.norm(text)))
        scored.append((-cos, label))
    return min(scored)[1]
