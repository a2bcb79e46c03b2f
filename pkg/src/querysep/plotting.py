"""Figure rendering for spectrograms and evaluation reports.

Everything draws through the Agg backend and writes PNG files; nothing
here opens a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import dsp

SPEC_FLOOR_DB = -80.0


def spectrogram_image(w: dsp.Waveform, path, cfg: dsp.StftConfig | None = None,
                      title: str | None = None) -> Path:
    """Write a log-magnitude spectrogram PNG; returns the written path."""
    if cfg is None:
        # 32 ms windows with 4x overlap at whatever rate the clip has
        n_fft = 1 << max(6, int(np.round(np.log2(0.032 * w.sample_rate))))
        cfg = dsp.StftConfig(window_length=n_fft, hop=n_fft // 4, n_fft=n_fft)
    mp = dsp.magphase(dsp.stft(w, cfg))
    db = 20 * np.log10(mp.magnitude + 1e-12)
    db = np.maximum(db - db.max(), SPEC_FLOOR_DB)
    duration = w.samples.size / w.sample_rate
    fig, ax = plt.subplots(figsize=(8, 4))
    art = ax.imshow(
        db.T,
        origin="lower",
        aspect="auto",
        extent=(0.0, duration, 0.0, w.sample_rate / 2),
        cmap="magma",
        vmin=SPEC_FLOOR_DB,
        vmax=0.0,
    )
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (Hz)")
    if title:
        ax.set_title(title)
    fig.colorbar(art, ax=ax, label="dB")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def mask_image(mask: np.ndarray, path, title: str | None = None) -> Path:
    """Write a (frames, bins) mask as an image on the [0, 1] scale."""
    fig, ax = plt.subplots(figsize=(8, 4))
    art = ax.imshow(mask.T, origin="lower", aspect="auto", cmap="viridis",
                    vmin=0.0, vmax=1.0)
    ax.set_xlabel("frame")
    ax.set_ylabel("bin")
    if title:
        ax.set_title(title)
    fig.colorbar(art, ax=ax, label="mask")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def report_figures(report: dict, out_dir) -> list[Path]:
    """Per-mode SDRi distributions and metric means for an evaluation report."""
    out_dir = Path(out_dir)
    rows = report.get("rows", [])
    if not rows:
        return []
    modes = sorted({f"{r['polarity']}/{r['modality']}" for r in rows})
    by_mode = {
        mode: [r for r in rows if f"{r['polarity']}/{r['modality']}" == mode]
        for mode in modes
    }
    written = []

    fig, ax = plt.subplots(figsize=(2 + 1.2 * len(modes), 4))
    ax.boxplot(
        [[r["sdri"] for r in by_mode[mode]] for mode in modes],
        tick_labels=modes,
    )
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_ylabel("SDRi (dB)")
    ax.set_title(f"{report.get('engine', 'engine')} on {report.get('manifest', '')}")
    fig.tight_layout()
    box_path = out_dir / "sdri_by_mode.png"
    fig.savefig(box_path, dpi=100)
    plt.close(fig)
    written.append(box_path)

    metrics = [m for m in ("sdri", "sisdri", "delta_clap") if m in rows[0]]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.6),
                             squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        means = [float(np.mean([r[metric] for r in by_mode[m]])) for m in modes]
        stds = [float(np.std([r[metric] for r in by_mode[m]])) for m in modes]
        ax.bar(range(len(modes)), means, yerr=stds, capsize=3)
        ax.set_xticks(range(len(modes)))
        ax.set_xticklabels(modes, rotation=45, ha="right")
        ax.set_title(metric)
        ax.axhline(0.0, color="gray", lw=0.8)
    fig.tight_layout()
    means_path = out_dir / "metric_means.png"
    fig.savefig(means_path, dpi=100)
    plt.close(fig)
    written.append(means_path)
    return written
