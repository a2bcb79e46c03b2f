"""Shared test helpers: a deterministic embedding backend stub."""

import numpy as np

from querysep import dsp
from querysep.embedding import Modality, QueryEmbedding


class HashBackend:
    """Maps text and audio to fixed unit vectors; no learning involved.

    Text hashes by content; audio hashes by a rounded energy signature so
    the exact same clip always lands on the exact same vector.
    """

    def __init__(self, dim: int):
        self.dimension = dim

    def _vec(self, seed_key) -> np.ndarray:
        seed = abs(hash(seed_key)) % 2**32
        v = np.random.default_rng(seed).normal(size=self.dimension)
        return v / np.linalg.norm(v)

    def encode_text(self, text: str) -> QueryEmbedding:
        return QueryEmbedding(self._vec(("text", text)), Modality.TEXT)

    def encode_audio(self, w: dsp.Waveform) -> QueryEmbedding:
        key = ("audio", round(float(np.sum(w.samples**2)), 6), w.samples.size)
        return QueryEmbedding(self._vec(key), Modality.AUDIO)
