"""Planted-dependency experiment: does the mask decide what the model can learn?

Sessions are generated so that speaking(t, i) is (almost) a deterministic
function of whether anyone looks at person i during segment t, and nothing
from earlier segments carries information about it. A model that may attend
to other persons' concurrent tokens should approach the full-scope Bayes
oracle; the same model restricted to strictly earlier segments should fall to
the past-only oracle, which can do no better than the base rate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .data_io import SyntheticConfig, bayes_oracle, generate_latents, generate_synthetic, window_cells
from .pipeline import (
    ModelSettings,
    PipelineConfig,
    TokenizerSettings,
    TrainSettings,
    build_model,
    encode_windows,
    evaluate,
    tokenizer_dims,
    train_model,
    train_tokenizers,
)
from .signal_model import SegmentConfig, segment_sessions


@dataclass
class SeparationSettings:
    num_sessions: int = 14
    test_sessions: int = 3
    duration_s: float = 120.0
    persons: int = 3
    segments_per_window: int = 4
    fps: float = 5.0
    gaze_weight: float = 20.0  # speaking logit is ±gaze_weight/2 depending on being looked at
    seed: int = 0
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    epochs: int = 40
    patience: int = 10
    learning_rate: float = 1e-3
    tokenizer_epochs: int = 10
    mask_kinds: tuple[str, ...] = ("blockwise", "strict_past")

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            num_sessions=self.num_sessions,
            persons_per_session=self.persons,
            duration_s=self.duration_s,
            fps=self.fps,
            seed=self.seed,
            speak_bias=-self.gaze_weight / 2,
            a=0.0,
            b=self.gaze_weight,
            gaze_down_prob=0.0,
        )

    def pipeline(self, mask_kind: str) -> PipelineConfig:
        window = 3.0 * self.segments_per_window
        return PipelineConfig(
            segment=SegmentConfig(3.0, self.segments_per_window, window / 2, self.fps),
            tokenizer=TokenizerSettings(latent_dim=16, codebook_size=32, conv_channel_widths=(32,), epochs=self.tokenizer_epochs),
            model=ModelSettings(
                hidden_dim=self.hidden_dim,
                num_layers=self.num_layers,
                num_heads=self.num_heads,
                dropout=0.0,
                placeholder_inputs=True,
                placeholder_scope="person",
                mask_kind=mask_kind,
                head_tasks=("speaking",),
            ),
            train=TrainSettings(
                epochs=self.epochs,
                batch_size=16,
                learning_rate=self.learning_rate,
                patience=self.patience,
                class_weighting=False,
                val_sessions=1,
            ),
            modalities=("gaze", "speaker"),
            seed=self.seed,
        )


@dataclass
class SeparationResult:
    model_f1: dict[str, float]
    oracle_f1: dict[str, float]  # "full" and "past-only", on the same test cells
    base_rate: float
    elapsed_s: float
    epochs: dict[str, int] = field(default_factory=dict)

    def gaps(self) -> dict[str, float]:
        return {
            "blockwise": abs(self.model_f1["blockwise"] - self.oracle_f1["full"]),
            "strict_past": abs(self.model_f1["strict_past"] - self.oracle_f1["past-only"]),
        }


def run_separation(settings: SeparationSettings | None = None) -> SeparationResult:
    s = settings or SeparationSettings()
    start = time.monotonic()
    syn = s.synthetic()
    latents = generate_latents(syn)
    sessions = generate_synthetic(syn)
    train_sessions, test_sessions = sessions[: -s.test_sessions], sessions[-s.test_sessions :]
    fit, val = train_sessions[:-1], train_sessions[-1:]

    base = s.pipeline(s.mask_kinds[0])
    fit_grids = segment_sessions(fit, base.segment)
    val_grids = segment_sessions(val, base.segment)
    test_grids = segment_sessions(test_sessions, base.segment)
    tokenizers, _ = train_tokenizers(fit_grids, base)
    kinds = list(base.modalities)
    fit_data = encode_windows(fit_grids, tokenizers, kinds)
    val_data = encode_windows(val_grids, tokenizers, kinds)
    test_data = encode_windows(test_grids, tokenizers, kinds)

    model_f1, epochs = {}, {}
    for kind in s.mask_kinds:
        cfg = s.pipeline(kind)
        model = build_model(cfg, s.persons, tokenizer_dims(tokenizers))
        history = train_model(model, fit_data, val_data, cfg)
        model_f1[kind] = evaluate(model, test_data, cfg.model.placeholder_scope)["speaking"].f1
        epochs[kind] = history.epochs_run

    cells = window_cells(test_grids, 3.0)
    oracle = {scope: bayes_oracle(syn, scope, latents).cells_f1(cells)["speaking"] for scope in ("full", "past-only")}
    base_rate = float(test_data.labels["speaking"].mean())
    return SeparationResult(model_f1, oracle, base_rate, time.monotonic() - start, epochs)
