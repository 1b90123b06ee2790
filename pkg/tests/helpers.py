"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np
import torch

from mpsignals.block_mask import MaskSpec
from mpsignals.signal_model import DISCRETE_KINDS, FrameSeries, Modality, SessionTimeline, default_modalities
from mpsignals.transformer import ModelConfig, MultiPartyTransformer

LATENT = 4


def tiny_model(
    T: int = 3,
    P: int = 2,
    modalities=("gaze", "speaker", "bite"),
    hidden: int = 16,
    layers: int = 2,
    heads: int = 2,
    seed: int = 0,
    dtype=torch.float32,
    **kwargs,
) -> MultiPartyTransformer:
    torch.manual_seed(seed)
    spec = MaskSpec(T, P, modalities)
    dims = {k: LATENT for k in modalities if k not in DISCRETE_KINDS}
    cfg = ModelConfig(spec, dims, hidden_dim=hidden, num_layers=layers, num_heads=heads, dropout=0.0, **kwargs)
    model = MultiPartyTransformer(cfg).to(dtype)
    model.eval()
    return model


def random_inputs(model: MultiPartyTransformer, batch: int, gen: torch.Generator, dtype=torch.float32) -> dict:
    spec = model.spec
    T, P = spec.num_segments, spec.num_persons
    out = {}
    for kind in spec.modalities:
        if kind in DISCRETE_KINDS:
            out[kind] = torch.randint(0, 2, (batch, T, P), generator=gen)
        else:
            out[kind] = torch.randn(batch, T, P, model.config.input_dims[kind], generator=gen, dtype=dtype)
    return out


def constant_session(
    session_id: str = "s0",
    persons=("a", "b"),
    duration_s: float = 36.0,
    fps: float = 5.0,
    speaking_fraction: float = 0.0,
    seed: int = 0,
) -> SessionTimeline:
    """Random continuous streams; speaker frames on for the first ``speaking_fraction`` of every 3 s."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fps))
    streams = {}
    mods = default_modalities(pose_keypoints=2, word_dim=3)
    per_seg = int(round(3 * fps))
    pattern = (np.arange(n) % per_seg) < speaking_fraction * per_seg
    for p in persons:
        for mod in mods:
            if mod.is_discrete:
                values = pattern.astype(float) if mod.kind == "speaker" else np.zeros(n)
            else:
                values = rng.normal(size=(n, mod.channel_count))
            streams[(p, mod.kind)] = FrameSeries(mod, fps, values)
    return SessionTimeline(session_id, tuple(persons), streams, n / fps)


def sinusoid_chunks(n: int, frames: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(frames)[None, :, None]
    freq = rng.uniform(0.05, 0.3, size=(n, 1, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 2))
    amp = rng.uniform(0.5, 2.0, size=(n, 1, 2))
    return (amp * np.sin(2 * np.pi * freq * t + phase)).astype(np.float32)


POSE2 = Modality("pose", 2)
