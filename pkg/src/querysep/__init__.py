"""Query-conditioned target sound extraction.

Given a sound mixture and positive/negative queries in text and/or audio
form, estimate a time-frequency mask over the mixture spectrogram and
reconstruct the described source. Ships a synthetic event corpus and a
small contrastive audio-text backend so the full train/evaluate loop runs
on a single CPU.
"""

__version__ = "0.1.0"
