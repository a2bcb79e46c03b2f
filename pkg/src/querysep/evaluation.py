"""Evaluation: frozen mixture benchmarks, improvement metrics, and reports.

A benchmark is a manifest of mixture specs. Each spec names a target clip,
an interferer clip, the mixing SNR, and the query material (canonical text
prompts plus query-split audio clips). Clips are stored as synthesis
descriptors, so the manifest is a few kilobytes of JSON yet regenerates
bit-identical audio anywhere.

evaluate() runs an engine over the manifest for every requested
polarity/modality pair and emits per-spec rows plus aggregate statistics.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import dsp
from .embedding import build_condition, interpolate, prompt_for
from .errors import SkipExample
from .toyclap import ToyCorpus, synth_event
from .training import mix_at_snr, sdr, sisdr

log = logging.getLogger(__name__)

POLARITIES = ("P", "N", "PN")
MODALITIES = ("text", "audio", "both")
# modality -> audio/text interpolation weight
MODALITY_ALPHA = {"text": 0.0, "audio": 1.0, "both": 0.5}


def sdri(est, mixture, ref) -> float:
    """SDR improvement of the estimate over just keeping the mixture."""
    return sdr(est, ref) - sdr(mixture, ref)


def sisdri(est, mixture, ref) -> float:
    return sisdr(est, ref) - sisdr(mixture, ref)


def clapscore(backend, w: dsp.Waveform, text: str) -> float:
    """Cosine similarity between the clip and the text in the joint space."""
    a = backend.encode_audio(w).vector
    t = backend.encode_text(text).vector
    return float(a @ t / (np.linalg.norm(a) * np.linalg.norm(t)))


def delta_clapscore(backend, w: dsp.Waveform, pos_text: str, neg_text: str) -> float:
    """clapscore against the positive prompt minus against the negative one."""
    return clapscore(backend, w, pos_text) - clapscore(backend, w, neg_text)


# -------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ClipSpec:
    """Synthesis descriptor: regenerates the exact clip from its seed."""

    clip_id: str
    label: str
    seed: int
    duration: float
    caption: str

    def render(self) -> dsp.Waveform:
        return synth_event(self.label, self.duration, np.random.default_rng(self.seed))


@dataclass(frozen=True)
class MixtureSpec:
    spec_id: str
    target: ClipSpec
    interferer: ClipSpec
    snr_db: float
    pos_query_audio: ClipSpec  # query-split clip of the target class
    neg_query_audio: ClipSpec  # query-split clip of the interferer class
    pos_text: str
    neg_text: str

    def render_mixture(self) -> tuple[dsp.Waveform, dsp.Waveform]:
        """(mixture, target) at the stored SNR."""
        target = self.target.render()
        mixture, _ = mix_at_snr(target, self.interferer.render(), self.snr_db)
        return mixture, target


@dataclass(frozen=True)
class Manifest:
    name: str
    seed: int
    snr_db: float
    mixtures_per_target: int
    specs: tuple

    def save(self, path) -> None:
        data = asdict(self)
        data["specs"] = [asdict(s) for s in self.specs]
        with open(path, "w") as f:
            json.dump(data, f, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path) as f:
            data = json.load(f)
        specs = []
        for s in data["specs"]:
            for key in ("target", "interferer", "pos_query_audio", "neg_query_audio"):
                s[key] = ClipSpec(**s[key])
            specs.append(MixtureSpec(**s))
        return cls(
            name=data["name"],
            seed=data["seed"],
            snr_db=data["snr_db"],
            mixtures_per_target=data["mixtures_per_target"],
            specs=tuple(specs),
        )


def _clip_spec(clip) -> ClipSpec:
    return ClipSpec(clip.clip_id, clip.label, clip.seed, clip.duration, clip.caption)


def build_eval_mixtures(
    corpus: ToyCorpus,
    mixtures_per_target: int = 5,
    snr_db: float = 0.0,
    seed: int = 0,
    name: str = "toy-benchmark",
    target_split: str = "test",
) -> Manifest:
    """One spec per (target, interferer) pair: every clip of the target
    split appears as the target of exactly mixtures_per_target specs, each
    with a distinct interferer of a different class. Query audio comes from
    the query split only, so it can never occur inside a mixture.
    """
    targets = corpus.split(target_split)
    if not targets:
        raise ValueError(f"corpus has no {target_split!r} clips")
    by_class: dict[str, list] = {}
    for clip in corpus.split(target_split):
        by_class.setdefault(clip.label, []).append(clip)
    query_by_class: dict[str, list] = {}
    for clip in corpus.split("query"):
        query_by_class.setdefault(clip.label, []).append(clip)
    missing = [c for c in by_class if c not in query_by_class]
    if missing:
        raise ValueError(f"classes without query clips: {missing}")
    rng = np.random.default_rng(seed)
    specs = []
    for target in targets:
        candidates = [c for c in targets if c.label != target.label]
        if len(candidates) < mixtures_per_target:
            raise ValueError(
                f"only {len(candidates)} cross-class interferer candidates for "
                f"{target.clip_id}; need {mixtures_per_target}"
            )
        chosen = rng.choice(len(candidates), size=mixtures_per_target, replace=False)
        for idx in sorted(int(i) for i in chosen):
            interferer = candidates[idx]
            pos_pool = query_by_class[target.label]
            neg_pool = query_by_class[interferer.label]
            pos_query = pos_pool[int(rng.integers(0, len(pos_pool)))]
            neg_query = neg_pool[int(rng.integers(0, len(neg_pool)))]
            specs.append(
                MixtureSpec(
                    spec_id=f"{target.clip_id}+{interferer.clip_id}",
                    target=_clip_spec(target),
                    interferer=_clip_spec(interferer),
                    snr_db=snr_db,
                    pos_query_audio=_clip_spec(pos_query),
                    neg_query_audio=_clip_spec(neg_query),
                    pos_text=prompt_for(target.label),
                    neg_text=prompt_for(interferer.label),
                )
            )
    ids = [s.spec_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate (target, interferer) pair in benchmark")
    return Manifest(
        name=name,
        seed=seed,
        snr_db=snr_db,
        mixtures_per_target=mixtures_per_target,
        specs=tuple(specs),
    )


def filter_corpus(corpus: ToyCorpus, classes) -> ToyCorpus:
    """Sub-corpus restricted to the given classes (order-insensitive)."""
    keep = set(classes)
    unknown = keep - set(corpus.classes)
    if unknown:
        raise ValueError(f"classes not in corpus: {sorted(unknown)}")
    return ToyCorpus(
        sorted(keep), [c for c in corpus.clips if c.label in keep]
    )


def split_classes(classes, n_holdout: int, seed: int = 0) -> tuple[list, list]:
    """Deterministic (seen, held-out) class partition for zero-shot runs."""
    classes = sorted(classes)
    if not 0 < n_holdout < len(classes):
        raise ValueError("holdout must leave at least one class on each side")
    rng = np.random.default_rng(seed)
    held = sorted(rng.choice(classes, size=n_holdout, replace=False).tolist())
    seen = [c for c in classes if c not in held]
    return seen, held


# -------------------------------------------------------------- evaluate


def query_condition(backend, spec: MixtureSpec, polarity: str, modality: str):
    """Build the conditional vector a given evaluation mode feeds the engine."""
    if polarity not in POLARITIES:
        raise ValueError(f"polarity must be one of {POLARITIES}, got {polarity!r}")
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
    alpha = MODALITY_ALPHA[modality]

    def embed(audio_spec: ClipSpec, text: str):
        return interpolate(
            backend.encode_audio(audio_spec.render()), backend.encode_text(text), alpha
        )

    pos = embed(spec.pos_query_audio, spec.pos_text) if "P" in polarity else None
    neg = embed(spec.neg_query_audio, spec.neg_text) if "N" in polarity else None
    return build_condition(pos, neg)


class IdentityEngine:
    """Reference no-op engine: the estimate is the mixture itself."""

    name = "identity"

    def __init__(self, profile, backend):
        self.profile = profile
        self.backend = backend

    def separate(self, mixture: dsp.Waveform, condition) -> dsp.Waveform:
        return mixture


def evaluate(
    engine,
    manifest: Manifest,
    polarities=POLARITIES,
    modalities=("text",),
    with_clap: bool = True,
) -> dict:
    """Run every (spec, polarity, modality) cell; returns the report dict."""
    rows = []
    for spec in manifest.specs:
        try:
            mixture, target = spec.render_mixture()
        except SkipExample as exc:  # silent constituents cannot be scored
            log.warning("skipping %s: %s", spec.spec_id, exc)
            continue
        for polarity in polarities:
            for modality in modalities:
                condition = query_condition(engine.backend, spec, polarity, modality)
                est = engine.separate(mixture, condition)
                row = {
                    "spec_id": spec.spec_id,
                    "target_label": spec.target.label,
                    "interferer_label": spec.interferer.label,
                    "polarity": polarity,
                    "modality": modality,
                    "snr_db": spec.snr_db,
                    "sdri": sdri(est, mixture, target),
                    "sisdri": sisdri(est, mixture, target),
                }
                if with_clap:
                    row["clap_pos"] = clapscore(engine.backend, est, spec.pos_text)
                    row["clap_neg"] = clapscore(engine.backend, est, spec.neg_text)
                    row["delta_clap"] = row["clap_pos"] - row["clap_neg"]
                rows.append(row)
    return {
        "engine": getattr(engine, "name", engine.__class__.__name__),
        "manifest": manifest.name,
        "polarities": list(polarities),
        "modalities": list(modalities),
        "rows": rows,
        "aggregates": aggregate_rows(rows),
    }


_AGG_METRICS = ("sdri", "sisdri", "delta_clap")


def aggregate_rows(rows: list[dict]) -> dict:
    """Per-mode mean/std/median/count; std is the population statistic."""
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(f"{row['polarity']}/{row['modality']}", []).append(row)
    out = {}
    for mode, members in sorted(groups.items()):
        stats = {"count": len(members)}
        for metric in _AGG_METRICS:
            values = np.array([m[metric] for m in members if metric in m])
            if values.size == 0:
                continue
            stats[f"{metric}_mean"] = float(values.mean())
            stats[f"{metric}_std"] = float(values.std())
            stats[f"{metric}_median"] = float(np.median(values))
        out[mode] = stats
    return out


CSV_COLUMNS = (
    "spec_id", "target_label", "interferer_label", "polarity", "modality",
    "snr_db", "sdri", "sisdri", "clap_pos", "clap_neg", "delta_clap",
)


def write_report_json(report: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)


def write_report_csv(report: dict, path) -> None:
    columns = [c for c in CSV_COLUMNS if report["rows"] and c in report["rows"][0]]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows({c: row[c] for c in columns} for row in report["rows"])
