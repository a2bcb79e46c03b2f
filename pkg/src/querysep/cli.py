"""Command-line interface.

Exit codes: 0 success, 2 usage error (from argparse), 3 bad configuration
or values, 4 I/O or checkpoint trouble, 5 numeric divergence.

Relative paths resolve under $QUERYSEP_WORKSPACE when it is set, so a
pipeline of subcommands can share one artifact directory without
repeating it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import dsp, evaluation, harness, plotting, training
from .config import get_profile
from .decoder import segmented_inference
from .embedding import build_cache, build_condition, interpolate
from .errors import CheckpointError, ConfigurationError, DivergenceError
from .evaluation import Manifest, build_eval_mixtures, evaluate
from .toyclap import (
    DEFAULT_CLASSES,
    PretrainConfig,
    ToyBackend,
    ToyCorpus,
    contrastive_pretrain,
    make_corpus,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5

CORPUS_FILE = "corpus.json"


def _path(p: str) -> Path:
    return harness.workspace_root() / p


def _parse_classes(value: str) -> list[str]:
    """Either a count of default classes ("8") or explicit names ("tone,hiss")."""
    if value.isdigit():
        n = int(value)
        if not 0 < n <= len(DEFAULT_CLASSES):
            raise ConfigurationError(
                f"class count must be in 1..{len(DEFAULT_CLASSES)}, got {n}"
            )
        return list(DEFAULT_CLASSES[:n])
    return [c.strip() for c in value.split(",") if c.strip()]


def _write_history(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# ------------------------------------------------------------ subcommands


def cmd_synth_data(args) -> int:
    out = _path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(
        classes=_parse_classes(args.classes),
        per_class=args.per_class,
        duration=args.duration,
        seed=args.seed,
    )
    corpus.save(out / CORPUS_FILE)
    print(f"wrote {len(corpus.clips)} clips across {len(corpus.classes)} classes "
          f"to {out / CORPUS_FILE}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    corpus = ToyCorpus.load(_path(args.data) / CORPUS_FILE)
    profile = get_profile(args.profile, embed_dim=args.embed_dim)
    cfg = PretrainConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    backend, history = contrastive_pretrain(corpus, profile, cfg)
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    backend.save(out)
    _write_history(out.with_suffix(out.suffix + ".history.jsonl"), history)
    print(f"pretrained backend ({cfg.steps} steps, final loss "
          f"{history[-1]['loss']:.4f}) -> {out}")
    return EXIT_OK


def cmd_cache_embeddings(args) -> int:
    labels = sorted(
        line.strip() for line in _path(args.classes).read_text().splitlines()
        if line.strip()
    )
    if not labels:
        raise ConfigurationError(f"{args.classes} lists no classes")
    backend = ToyBackend.load(_path(args.backend))
    cache = build_cache(backend, labels)
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cache.save(out)
    if args.export_json:
        cache.export_json(_path(args.export_json))
    print(f"cached {len(labels)} text embeddings -> {out}")
    return EXIT_OK


_TRAIN_KEYS = {
    "backend", "lora_rank", "lam", "snr_db", "lr_start", "lr_end",
    "decay_factor", "plateau_epochs", "batch_size", "epochs",
    "steps_per_epoch", "val_pairs", "seed", "augment",
}


def load_train_settings(path: Path) -> dict:
    try:
        with open(path) as f:
            settings = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(settings, dict):
        raise ConfigurationError(f"{path} must hold a JSON object")
    unknown = set(settings) - _TRAIN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown train settings: {sorted(unknown)}")
    if "backend" not in settings:
        raise ConfigurationError("train settings must name a 'backend' checkpoint")
    if isinstance(settings.get("snr_db"), list):
        settings["snr_db"] = tuple(settings["snr_db"])
    return settings


def cmd_train(args) -> int:
    settings = load_train_settings(_path(args.config))
    data = _path(args.data)
    corpus = ToyCorpus.load(data / CORPUS_FILE)
    backend_path = Path(settings.pop("backend"))
    if not backend_path.is_absolute():
        backend_path = data / backend_path
    backend = ToyBackend.load(backend_path)
    profile = backend.profile
    lora_rank = settings.pop("lora_rank", None)
    if lora_rank is not None:
        profile = dataclasses.replace(
            profile, encoder=dataclasses.replace(profile.encoder, lora_rank=lora_rank)
        )
    try:
        cfg = training.TrainConfig(**settings)
    except TypeError as exc:
        raise ConfigurationError(f"bad train settings: {exc}") from exc
    engine = harness.build_engine(profile, backend, init_seed=cfg.seed)
    history = training.fit(
        engine,
        training.records_from_corpus(corpus, "train"),
        training.records_from_corpus(corpus, "val"),
        cfg,
    )
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.save_engine(engine, out)
    _write_history(out.with_suffix(out.suffix + ".history.jsonl"), history)
    print(f"trained {cfg.epochs} epochs (last val SISDRi "
          f"{history[-1]['val_sisdri']:.2f} dB) -> {out}")
    return EXIT_OK


def _query_embedding(backend, text: str | None, audio_path: Path | None):
    """Text, audio, or their midpoint when both are given."""
    if text is None and audio_path is None:
        return None
    if audio_path is None:
        return backend.encode_text(text)
    e_audio = backend.encode_audio(dsp.read_wav(audio_path))
    if text is None:
        return e_audio
    return interpolate(e_audio, backend.encode_text(text), 0.5)


def cmd_separate(args) -> int:
    engine = harness.load_any(_path(args.ckpt))
    pos = _query_embedding(engine.backend, args.pos_text, args.pos_audio and _path(args.pos_audio))
    neg = _query_embedding(engine.backend, args.neg_text, args.neg_audio and _path(args.neg_audio))
    if pos is None and neg is None:
        raise ConfigurationError("provide at least one positive or negative query")
    condition = build_condition(pos, neg)
    mixture = dsp.read_wav(_path(args.mixture))
    rate = engine.profile.sample_rate
    resampled = mixture if mixture.sample_rate == rate else dsp.resample(mixture, rate)
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if resampled.samples.size <= engine.profile.clip_samples:
        estimate, mask, _, _ = engine.separate_detailed(resampled, condition)
        if args.mask_png:
            plotting.mask_image(mask, _path(args.mask_png), title=out.name)
    else:
        if args.mask_png:
            raise ConfigurationError("--mask-png only applies to single-segment inputs")
        estimate = segmented_inference(engine, resampled, condition)
    dsp.write_wav(out, estimate)
    print(f"wrote {estimate.samples.size} samples at {estimate.sample_rate} Hz -> {out}")
    return EXIT_OK


def cmd_make_benchmark(args) -> int:
    corpus = ToyCorpus.load(_path(args.data) / CORPUS_FILE)
    manifest = build_eval_mixtures(
        corpus,
        mixtures_per_target=args.per_target,
        snr_db=args.snr,
        seed=args.seed,
        name=args.name,
    )
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    print(f"wrote {len(manifest.specs)} mixture specs -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    engine = harness.load_any(_path(args.ckpt))
    manifest = Manifest.load(_path(args.manifest))
    polarities = tuple(p.strip() for p in args.modes.split(",") if p.strip())
    modalities = tuple(m.strip() for m in args.modalities.split(",") if m.strip())
    report = evaluate(
        engine, manifest,
        polarities=polarities,
        modalities=modalities,
        with_clap=not args.no_clap,
    )
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_json(report, out)
    csv_path = out.with_suffix(".csv")
    evaluation.write_report_csv(report, csv_path)
    written = [out, csv_path]
    if not args.no_figures:
        written += plotting.report_figures(report, out.parent)
    for mode, stats in report["aggregates"].items():
        print(f"{mode}: sdri mean {stats['sdri_mean']:.2f} dB "
              f"median {stats['sdri_median']:.2f} dB over {stats['count']} specs")
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_plot_spec(args) -> int:
    w = dsp.read_wav(_path(args.wav))
    out = _path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plotting.spectrogram_image(w, out, title=Path(args.wav).name)
    print(f"wrote {out}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querysep",
        description="Query-conditioned target sound extraction toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic labeled corpus")
    p.add_argument("--classes", default="8",
                   help="count of default classes, or comma-separated names")
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="contrastively pretrain the embedding backend")
    p.add_argument("--data", required=True, help="directory holding corpus.json")
    p.add_argument("--out", required=True, help="backend checkpoint path")
    p.add_argument("--profile", default="toy")
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("cache-embeddings", help="precompute text embeddings per class")
    p.add_argument("--classes", required=True, help="file with one label per line")
    p.add_argument("--backend", required=True, help="backend checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--export-json", default=None, help="also write a JSON copy")
    p.set_defaults(func=cmd_cache_embeddings)

    p = sub.add_parser("train", help="fine-tune a separation engine")
    p.add_argument("--config", required=True, help="JSON train settings")
    p.add_argument("--data", required=True, help="directory holding corpus.json")
    p.add_argument("--out", required=True, help="engine checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="extract a queried source from a wav")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--pos-text", default=None)
    p.add_argument("--pos-audio", default=None, help="wav exemplifying the target")
    p.add_argument("--neg-text", default=None)
    p.add_argument("--neg-audio", default=None, help="wav exemplifying the interference")
    p.add_argument("--out", required=True)
    p.add_argument("--mask-png", default=None, help="also render the mask image")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("make-benchmark", help="freeze an evaluation mixture manifest")
    p.add_argument("--data", required=True, help="directory holding corpus.json")
    p.add_argument("--per-target", type=int, default=5)
    p.add_argument("--snr", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="toy-benchmark")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_benchmark)

    p = sub.add_parser("evaluate", help="score an engine over a benchmark manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--modes", default="P,N,PN", help="polarities, comma-separated")
    p.add_argument("--modalities", default="text", help="text,audio,both")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--no-clap", action="store_true",
                   help="skip similarity scoring against the text prompts")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-spec", help="render a wav's spectrogram to PNG")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_spec)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)  # keeps runs reproducible on any box
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
