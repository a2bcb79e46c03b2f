"""Engine persistence and deterministic probing.

Two checkpoint layouts exist. A full engine checkpoint is self-contained:
encoder, decoder, profile snapshot, and (for the bundled contrastive
backend) the backend weights and vocabulary. An adapters-only checkpoint
stores just the trainable set (adapter matrices and decoder) plus a
reference to the full checkpoint holding the frozen base, at a fraction
of the size.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, dsp
from .config import EngineProfile
from .decoder import SeparationEngine
from .embedding import build_condition
from .encoder import Encoder, LoRALinear
from .errors import CheckpointError, ConfigurationError
from .toyclap import ToyBackend

WORKSPACE_ENV = "QUERYSEP_WORKSPACE"


def workspace_root() -> Path:
    """Directory for artifacts; honors the QUERYSEP_WORKSPACE variable."""
    return Path(os.environ.get(WORKSPACE_ENV, ".")).expanduser()


def fold_lora_state(encoder: Encoder) -> dict:
    """State dict with adapter products merged into base weights, adapters omitted.

    Loading this into a fresh encoder (strict=False) transplants the full
    learned transform while leaving the fresh adapters at their zero-effect
    initialization.
    """
    state = {k: v.clone() for k, v in encoder.state_dict().items() if "lora_" not in k}
    for name, module in encoder.named_modules():
        if isinstance(module, LoRALinear):
            state[f"{name}.base.weight"] = module.merged_weight().detach().clone()
    return state


def build_engine(
    profile: EngineProfile,
    backend,
    seed_from_backend: bool = True,
    init_seed: int = 0,
) -> SeparationEngine:
    """Assemble an engine; by default its base encoder starts as a copy of
    the backend's pretrained audio tower (with that tower's adapters folded
    in), so separation fine-tuning begins from the contrastive features.

    Construction is seeded (without disturbing the caller's RNG state) so the
    decoder and fresh adapters come out identical across processes.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        engine = SeparationEngine(profile, backend)
    if seed_from_backend and hasattr(backend, "encoder"):
        try:
            missing, unexpected = engine.encoder.load_state_dict(
                fold_lora_state(backend.encoder), strict=False
            )
        except RuntimeError as exc:
            raise ConfigurationError(
                f"backend encoder does not fit the engine profile: {exc}"
            ) from exc
        if unexpected or any("lora_" not in k for k in missing):
            raise ConfigurationError(
                f"backend encoder does not match the engine profile "
                f"(missing={missing}, unexpected={unexpected})"
            )
    return engine


def _prefixed(state: dict, prefix: str) -> dict:
    return {f"{prefix}.{name}": tensor for name, tensor in state.items()}


def _strip(tensors: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {name[plen:]: t for name, t in tensors.items() if name.startswith(prefix + ".")}


def save_engine(engine: SeparationEngine, path) -> None:
    """Self-contained engine checkpoint (encoder, decoder, backend if bundled)."""
    tensors = _prefixed(engine.encoder.state_dict(), "encoder")
    tensors.update(_prefixed(engine.decoder.state_dict(), "decoder"))
    meta = {"kind": "engine", "profile": engine.profile.to_dict()}
    if isinstance(engine.backend, ToyBackend):
        tensors.update(_prefixed(engine.backend.state_dict(), "backend"))
        meta["backend"] = {"type": "toy", "vocab": engine.backend.vocab}
    else:
        meta["backend"] = {"type": "external", "dimension": engine.backend.dimension}
    checkpoint.save_tensors(path, tensors, meta)


def load_engine(path, backend=None) -> SeparationEngine:
    """Rebuild an engine; external backends must be supplied by the caller."""
    tensors, meta = checkpoint.load_tensors(path)
    if meta.get("kind") != "engine":
        raise CheckpointError(f"{path} is not an engine checkpoint (kind={meta.get('kind')!r})")
    profile = EngineProfile.from_dict(meta["profile"])
    spec = meta["backend"]
    if spec["type"] == "toy":
        backend = ToyBackend(profile, spec["vocab"])
        backend.load_state_dict(checkpoint.tensors_to_state_dict(_strip(tensors, "backend")))
        backend.eval()
    elif backend is None:
        raise ConfigurationError(
            f"{path} references an external backend; pass one to load_engine"
        )
    elif backend.dimension != spec["dimension"]:
        raise ConfigurationError(
            f"backend dimension {backend.dimension} != checkpoint's {spec['dimension']}"
        )
    engine = SeparationEngine(profile, backend)
    engine.encoder.load_state_dict(checkpoint.tensors_to_state_dict(_strip(tensors, "encoder")))
    engine.decoder.load_state_dict(checkpoint.tensors_to_state_dict(_strip(tensors, "decoder")))
    return engine.eval_mode()


def _adapter_names(engine: SeparationEngine) -> list[str]:
    return [name for name in engine.encoder.state_dict() if "lora_" in name]


def save_adapters(engine: SeparationEngine, path, base_ref: str) -> None:
    """Trainable set only; base_ref names the full checkpoint with the rest."""
    enc_state = engine.encoder.state_dict()
    tensors = {f"encoder.{name}": enc_state[name] for name in _adapter_names(engine)}
    tensors.update(_prefixed(engine.decoder.state_dict(), "decoder"))
    meta = {
        "kind": "engine-adapters",
        "profile": engine.profile.to_dict(),
        "base_ref": str(base_ref),
    }
    checkpoint.save_tensors(path, tensors, meta)


def load_adapters(path, base_path=None, backend=None) -> SeparationEngine:
    """Rebuild the base engine from its reference, then graft the adapters.

    base_ref resolves relative to the adapters file unless base_path
    overrides it outright.
    """
    tensors, meta = checkpoint.load_tensors(path)
    if meta.get("kind") != "engine-adapters":
        raise CheckpointError(f"{path} is not an adapters checkpoint")
    if base_path is None:
        ref = Path(meta["base_ref"])
        base_path = ref if ref.is_absolute() else Path(path).parent / ref
    if not Path(base_path).exists():
        raise CheckpointError(f"base checkpoint {base_path} not found")
    engine = load_engine(base_path, backend=backend)
    if engine.profile.to_dict() != meta["profile"]:
        raise ConfigurationError("adapters were trained under a different profile")
    enc_state = engine.encoder.state_dict()
    enc_state.update(checkpoint.tensors_to_state_dict(_strip(tensors, "encoder")))
    engine.encoder.load_state_dict(enc_state)
    engine.decoder.load_state_dict(checkpoint.tensors_to_state_dict(_strip(tensors, "decoder")))
    return engine.eval_mode()


def load_any(path, backend=None) -> SeparationEngine:
    """Open either checkpoint layout, dispatching on its recorded kind."""
    _, meta = checkpoint.load_tensors(path)
    kind = meta.get("kind")
    if kind == "engine":
        return load_engine(path, backend=backend)
    if kind == "engine-adapters":
        return load_adapters(path, backend=backend)
    raise CheckpointError(f"{path} holds {kind!r}, not a separation engine")


def probe_engine(engine: SeparationEngine, seed: int = 0) -> np.ndarray:
    """Deterministic fingerprint: separate a fixed noise clip with a fixed query.

    Two engines with byte-identical weights produce byte-identical probes.
    """
    rng = np.random.default_rng(seed)
    mixture = dsp.Waveform(0.1 * rng.normal(size=engine.profile.clip_samples),
                           engine.profile.sample_rate)
    condition = build_condition(engine.backend.encode_text("probe signal"), None)
    engine.eval_mode()
    with torch.no_grad():
        out = engine.separate(mixture, condition)
    return out.samples
