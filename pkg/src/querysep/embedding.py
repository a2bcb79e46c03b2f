"""Query network: embeddings, conditions, augmentation, negative generation.

Turns text/audio queries into the conditional vector that steers the
separator: backend encoding, stochastic modality interpolation, positive/
negative concatenation with zeroed missing blocks, multi-shot averaging,
query-audio augmentation, the class-embedding cache, and the automatic
negative-query generator that fakes the positive as a negative to pull
likely interference classes out of the cache.
"""

from __future__ import annotations

import abc
import enum
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from . import checkpoint
from .dsp import KAISER_BETA, StftConfig, Waveform, istft, magphase, recompose, stft

PROMPT_TEMPLATE = "The sound of {label}"


def prompt_for(label: str) -> str:
    return PROMPT_TEMPLATE.format(label=label)


class EmbeddingBackend(abc.ABC):
    """Joint audio-text embedding space: both encoders emit unit-norm R^D."""

    @property
    @abc.abstractmethod
    def dimension(self) -> int: ...

    @abc.abstractmethod
    def encode_text(self, text: str) -> "QueryEmbedding": ...

    @abc.abstractmethod
    def encode_audio(self, w: Waveform) -> "QueryEmbedding": ...


class Modality(str, enum.Enum):
    TEXT = "text"
    AUDIO = "audio"
    INTERPOLATED = "interpolated"


@dataclass
class QueryEmbedding:
    vector: np.ndarray
    modality: Modality

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("embedding must be a vector")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding contains NaN or Inf")


@dataclass
class ConditionalEmbedding:
    """[positive | negative] concatenation; absent blocks are exactly zero."""

    vector: np.ndarray
    has_positive: bool
    has_negative: bool

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.size % 2:
            raise ValueError("condition length must be even (two equal blocks)")
        if not (self.has_positive or self.has_negative):
            raise ValueError("condition needs at least one of positive/negative")
        d = self.vector.size // 2
        for flag, block, name in (
            (self.has_positive, self.vector[:d], "positive"),
            (self.has_negative, self.vector[d:], "negative"),
        ):
            if flag and not np.any(block):
                raise ValueError(f"{name} block marked present but is all zero")
            if not flag and np.any(block):
                raise ValueError(f"{name} block marked absent but is nonzero")


class QueryPolarityMode(str, enum.Enum):
    POSITIVE_ONLY = "positive_only"
    NEGATIVE_ONLY = "negative_only"
    BOTH = "both"


def interpolate(e_audio: QueryEmbedding, e_text: QueryEmbedding, alpha: float) -> QueryEmbedding:
    """alpha*audio + (1-alpha)*text; endpoints return the input vector itself.

    The result is deliberately NOT re-normalized, so mid-alpha vectors of two
    unit embeddings have norm < 1.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if e_audio.vector.size != e_text.vector.size:
        raise ValueError("embedding dimensions differ")
    if alpha == 0.0:
        return QueryEmbedding(e_text.vector, e_text.modality)
    if alpha == 1.0:
        return QueryEmbedding(e_audio.vector, e_audio.modality)
    return QueryEmbedding(
        alpha * e_audio.vector + (1.0 - alpha) * e_text.vector, Modality.INTERPOLATED
    )


def build_condition(
    pos: QueryEmbedding | None, neg: QueryEmbedding | None
) -> ConditionalEmbedding:
    """Concatenate [pos or 0, neg or 0]."""
    if pos is None and neg is None:
        raise ValueError("at least one of positive/negative query is required")
    d = (pos or neg).vector.size
    if pos is not None and neg is not None and pos.vector.size != neg.vector.size:
        raise ValueError("positive and negative dimensions differ")
    vec = np.zeros(2 * d)
    if pos is not None:
        vec[:d] = pos.vector
    if neg is not None:
        vec[d:] = neg.vector
    return ConditionalEmbedding(vec, pos is not None, neg is not None)


def sample_polarity(rng: np.random.Generator) -> QueryPolarityMode:
    """positive-only w.p. 0.25, negative-only w.p. 0.25, both w.p. 0.5."""
    u = rng.random()
    if u < 0.25:
        return QueryPolarityMode.POSITIVE_ONLY
    if u < 0.5:
        return QueryPolarityMode.NEGATIVE_ONLY
    return QueryPolarityMode.BOTH


def average_shots(embeddings: list[QueryEmbedding]) -> QueryEmbedding:
    """Arithmetic mean of several query embeddings, re-normalized to unit length."""
    if not embeddings:
        raise ValueError("cannot average an empty list of embeddings")
    dims = {e.vector.size for e in embeddings}
    if len(dims) != 1:
        raise ValueError("embedding dimensions differ")
    mean = np.mean([e.vector for e in embeddings], axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise ValueError("averaged embedding is zero; cannot normalize")
    return QueryEmbedding(mean / norm, embeddings[0].modality)


# Speed factors as exact up/down rational resampling ratios.
_SPEED_RATIOS = {0.9: (10, 9), 1.0: (1, 1), 1.1: (10, 11)}


@dataclass(frozen=True)
class AugmentConfig:
    """Query-audio augmentation: speed perturbation plus T/F masking.

    With enabled=False the augmenter is the identity. Mask widths are in
    STFT frames/bins; up to max_time_masks/max_freq_masks are applied.
    """

    stft: StftConfig
    speed_choices: tuple = (0.9, 1.0, 1.1)
    max_time_masks: int = 2
    max_freq_masks: int = 2
    max_time_width: int = 16
    max_freq_width: int = 16
    enabled: bool = True

    def __post_init__(self) -> None:
        for s in self.speed_choices:
            if s not in _SPEED_RATIOS:
                raise ValueError(f"unsupported speed factor {s}")


def sample_mask_regions(
    rng: np.random.Generator, n: int, max_masks: int, max_width: int
) -> list:
    regions = []
    for _ in range(int(rng.integers(0, max_masks + 1))):
        width = int(rng.integers(1, max(2, min(max_width, n // 2))))
        start = int(rng.integers(0, max(1, n - width)))
        regions.append((start, start + width))
    return regions


def augment_query_audio(w: Waveform, rng: np.random.Generator, cfg: AugmentConfig) -> Waveform:
    """Random speed perturbation then up to 2 time / 2 frequency STFT masks."""
    if not cfg.enabled:
        return w
    speed = cfg.speed_choices[int(rng.integers(0, len(cfg.speed_choices)))]
    up, down = _SPEED_RATIOS[speed]
    samples = w.samples
    if up != down:
        samples = resample_poly(samples, up, down, window=("kaiser", KAISER_BETA))
    spec = stft(Waveform(samples, w.sample_rate), cfg.stft)
    mp = magphase(spec)
    values = spec.values.copy()
    for t0, t1 in sample_mask_regions(rng, mp.magnitude.shape[0], cfg.max_time_masks, cfg.max_time_width):
        values[t0:t1, :] = 0
    for f0, f1 in sample_mask_regions(rng, mp.magnitude.shape[1], cfg.max_freq_masks, cfg.max_freq_width):
        values[:, f0:f1] = 0
    spec.values = values
    return istft(spec)


@dataclass
class EmbeddingCache:
    """Unit-norm class embeddings E (one row per label), for Top-k lookup."""

    matrix: np.ndarray  # (n_classes, D)
    labels: list[str]

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.labels):
            raise ValueError("cache matrix rows must match label count")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("cache labels must be unique")
        norms = np.linalg.norm(self.matrix, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("cache rows must be unit-norm")

    def save(self, path) -> None:
        checkpoint.save_tensors(
            path,
            {"matrix": self.matrix.astype(np.float32)},
            {"kind": "embedding-cache", "labels": self.labels},
        )

    @classmethod
    def load(cls, path) -> "EmbeddingCache":
        tensors, meta = checkpoint.load_tensors(path)
        return cls(tensors["matrix"].astype(np.float64), list(meta["labels"]))

    def export_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(
                {"labels": self.labels, "matrix": self.matrix.tolist()},
                f,
                sort_keys=True,
                indent=1,
            )


def build_cache(backend: EmbeddingBackend, labels: list[str]) -> EmbeddingCache:
    """One unit-norm row per class label, prompted as "The sound of <label>"."""
    if not labels:
        raise ValueError("cannot build a cache from zero labels")
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate labels in cache input")
    rows = [backend.encode_text(prompt_for(label)).vector for label in labels]
    return EmbeddingCache(np.stack(rows), list(labels))


def top_k_rows(cache: EmbeddingCache, query: np.ndarray, k: int) -> list[int]:
    """Indices of the k most similar rows; ties broken by ascending label."""
    sims = cache.matrix @ query
    order = sorted(range(len(cache.labels)), key=lambda i: (-sims[i], cache.labels[i]))
    return order[:k]


def generate_negative_embedding(
    e_pos: QueryEmbedding,
    mixture: Waveform,
    cache: EmbeddingCache,
    k: int,
    separator,
) -> QueryEmbedding:
    """Derive a negative query by faking the positive as a negative.

    Runs the separator with condition [0, e_pos] so it extracts everything
    except the described target, embeds that residual, picks the k most
    similar cache classes, and returns their normalized sum.
    """
    if not 1 <= k <= len(cache.labels):
        raise ValueError(f"k must be in [1, {len(cache.labels)}], got {k}")
    condition = build_condition(None, e_pos)
    residual = separator.separate(mixture, condition)
    e_res = separator.backend.encode_audio(residual)
    chosen = top_k_rows(cache, e_res.vector, k)
    summed = cache.matrix[chosen].sum(axis=0)
    norm = np.linalg.norm(summed)
    if norm == 0:
        raise ValueError("selected cache rows sum to zero; cannot normalize")
    return QueryEmbedding(summed / norm, Modality.AUDIO)
