"""Configuration, tokenizer/transformer training, and evaluation on windows."""

from __future__ import annotations

import copy
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .block_mask import MaskSpec
from .data_io import DatasetManifest, load_sessions
from .metrics import MetricsEntry, confusion, metrics
from .signal_model import (
    DISCRETE_KINDS,
    MODALITY_ORDER,
    TASKS,
    Modality,
    SegmentConfig,
    SegmentGrid,
    SessionTimeline,
    class_weights,
    label_bite,
    label_speaking,
)
from .transformer import (
    ModelConfig,
    MultiPartyTransformer,
    pair_targets,
    person_targets,
    predict_logits,
    task_loss,
)
from .vq_tokenizer import (
    MeanPoolTokenizer,
    TokenizerConfig,
    TokenizerTrainSettings,
    TrainingDivergedError,
    train_tokenizer,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TokenizerSettings:
    latent_dim: int = 64
    codebook_size: int = 256
    conv_channel_widths: tuple[int, ...] = (64, 64)
    commitment_coefficient: float = 0.25
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    time_budget_s: float | None = None
    word_tokenization: str = "vq"  # or "mean_pool"


@dataclass
class ModelSettings:
    hidden_dim: int = 256
    num_layers: int = 4
    num_heads: int = 8
    dropout: float = 0.1
    placeholder_inputs: bool = False
    placeholder_scope: str = "person"  # or "pair"
    mask_kind: str = "blockwise"
    allow_own_modalities: bool = False
    time_encoding: str = "learned"
    head_tasks: tuple[str, ...] = TASKS


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    grad_clip: float = 1.0
    patience: int = 10
    class_weighting: bool = True
    val_sessions: int = 1
    time_budget_s: float | None = None


@dataclass
class PipelineConfig:
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    tokenizer: TokenizerSettings = field(default_factory=TokenizerSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    modalities: tuple[str, ...] = MODALITY_ORDER
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return _listify(d)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        parts = {
            "segment": SegmentConfig,
            "tokenizer": TokenizerSettings,
            "model": ModelSettings,
            "train": TrainSettings,
        }
        kwargs = {}
        for key, typ in parts.items():
            sub = dict(d.get(key, {}))
            bad = set(sub) - {f.name for f in fields(typ)}
            if bad:
                raise ValueError(f"unknown {key} keys: {sorted(bad)}")
            for name in ("conv_channel_widths", "head_tasks"):
                if name in sub:
                    sub[name] = tuple(sub[name])
            kwargs[key] = typ(**sub)
        if "modalities" in d:
            kwargs["modalities"] = tuple(d["modalities"])
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        bad = set(self.modalities) - set(MODALITY_ORDER)
        if bad:
            raise ValueError(f"unknown modalities {sorted(bad)}")
        if not {"speaker", "bite"} & set(self.modalities):
            raise ValueError("the layout needs a speaker or bite token to read predictions from")
        if self.model.placeholder_scope not in ("person", "pair"):
            raise ValueError("placeholder_scope must be 'person' or 'pair'")
        if self.tokenizer.word_tokenization not in ("vq", "mean_pool"):
            raise ValueError("word_tokenization must be 'vq' or 'mean_pool'")


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def default_config() -> PipelineConfig:
    return PipelineConfig()


def smoke_config() -> PipelineConfig:
    """Tiny profile for CI: 5 fps, 2-layer 32-wide transformer, few epochs."""
    return PipelineConfig(
        segment=SegmentConfig(segment_seconds=3.0, segments_per_window=12, window_stride_s=18.0, fps=5.0),
        tokenizer=TokenizerSettings(latent_dim=16, codebook_size=32, conv_channel_widths=(32,), epochs=8),
        model=ModelSettings(hidden_dim=32, num_layers=2, num_heads=4, dropout=0.0),
        train=TrainSettings(epochs=15, batch_size=8, learning_rate=1e-3, patience=5),
    )


def small_model(settings: ModelSettings) -> ModelSettings:
    """Reduced profile used for the temporal-context ablation."""
    return replace(settings, num_layers=2, hidden_dim=min(settings.hidden_dim, 128))


def derive_seed(root: int, *names: object) -> int:
    """Deterministic per-phase seed from the root seed and a phase name."""
    key = ":".join(str(n) for n in names).encode()
    return int(np.random.SeedSequence([root, zlib.crc32(key)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data access with a per-phase audit trail


class SessionSource:
    """Hands out sessions and records which ones each phase touched."""

    def __init__(self, sessions: Sequence[SessionTimeline] | DatasetManifest):
        self.access: dict[str, list[str]] = {}
        self.files: dict[str, list[str]] = {}
        if isinstance(sessions, DatasetManifest):
            self.manifest = sessions
            self._cache = None
            self.ids = list(sessions.sessions)
        else:
            self.manifest = None
            self._cache = {s.session_id: s for s in sessions}
            self.ids = [s.session_id for s in sessions]

    def get(self, ids: Iterable[str], phase: str) -> list[SessionTimeline]:
        ids = list(ids)
        self.access.setdefault(phase, []).extend(ids)
        if self._cache is not None:
            return [self._cache[i] for i in ids]
        opened: list[Path] = []
        out = load_sessions(self.manifest, ids, access_log=opened)
        self.files.setdefault(phase, []).extend(str(p) for p in opened)
        return out


# ---------------------------------------------------------------------------
# tokenizers


def collect_chunks(grids: Sequence[SegmentGrid], kind: str) -> np.ndarray:
    if not grids:
        raise ValueError("no windows to collect chunks from")
    arr = np.stack([g.chunks[kind] for g in grids])  # (N, T, P, m, C)
    return arr.reshape(-1, *arr.shape[-2:])


def modality_objects(grids: Sequence[SegmentGrid]) -> dict[str, Modality]:
    return {m.kind: m for m in grids[0].modalities}


def tokenizer_config(modality: Modality, segment: SegmentConfig, settings: TokenizerSettings) -> TokenizerConfig:
    return TokenizerConfig(
        modality=modality,
        latent_dim=settings.latent_dim,
        codebook_size=settings.codebook_size,
        frames_per_segment=segment.frames_per_segment,
        conv_channel_widths=settings.conv_channel_widths,
        commitment_coefficient=settings.commitment_coefficient,
    )


def train_modality_tokenizer(grids, kind: str, cfg: PipelineConfig):
    mods = modality_objects(grids)
    chunks = collect_chunks(grids, kind)
    if kind == "word" and cfg.tokenizer.word_tokenization == "mean_pool":
        tok = MeanPoolTokenizer(mods[kind], cfg.segment.frames_per_segment)
        flat = chunks.reshape(-1, chunks.shape[-1])
        std = flat.std(0)
        std[std < 1e-6] = 1.0
        tok.mean.copy_(torch.as_tensor(flat.mean(0), dtype=torch.float32))
        tok.std.copy_(torch.as_tensor(std, dtype=torch.float32))
        return tok, None
    t = cfg.tokenizer
    settings = TokenizerTrainSettings(
        epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
        seed=derive_seed(cfg.seed, "tokenizer", kind), time_budget_s=t.time_budget_s,
    )
    return train_tokenizer(chunks, tokenizer_config(mods[kind], cfg.segment, t), settings)


def train_tokenizers(grids: Sequence[SegmentGrid], cfg: PipelineConfig, kinds: Iterable[str] | None = None):
    kinds = [k for k in (kinds or cfg.modalities) if k not in DISCRETE_KINDS]
    tokenizers, reports = {}, {}
    for kind in kinds:
        tokenizers[kind], reports[kind] = train_modality_tokenizer(grids, kind, cfg)
    return tokenizers, reports


# ---------------------------------------------------------------------------
# window tensors


@dataclass
class WindowData:
    inputs: dict[str, torch.Tensor]
    labels: dict[str, torch.Tensor]  # task -> (N, T, P) float 0/1
    window_ids: list[str]
    session_ids: list[str]

    def __len__(self):
        return len(self.window_ids)

    def subset(self, index) -> "WindowData":
        index = torch.as_tensor(index, dtype=torch.long)
        return WindowData(
            {k: v[index] for k, v in self.inputs.items()},
            {k: v[index] for k, v in self.labels.items()},
            [self.window_ids[i] for i in index.tolist()],
            [self.session_ids[i] for i in index.tolist()],
        )


def encode_raw(raw: Mapping[str, np.ndarray], tokenizers: Mapping, kinds: Sequence[str], threshold: float = 0.30):
    """Raw (N, T, P, m, C) chunks -> model inputs (frozen tokenizers, segment labels)."""
    inputs = {}
    for kind in kinds:
        arr = np.asarray(raw[kind])
        N, T, P = arr.shape[:3]
        if kind == "speaker":
            flat = arr.reshape(N * T * P, -1)
            lab = np.array([label_speaking(f, threshold) for f in flat])
            inputs[kind] = torch.as_tensor(lab.reshape(N, T, P), dtype=torch.long)
        elif kind == "bite":
            flat = arr.reshape(N * T * P, -1)
            lab = np.array([label_bite(f) for f in flat])
            inputs[kind] = torch.as_tensor(lab.reshape(N, T, P), dtype=torch.long)
        else:
            tok = tokenizers[kind]
            z, _ = tok.encode_numpy(arr.reshape(N * T * P, *arr.shape[3:]))
            inputs[kind] = torch.as_tensor(z.reshape(N, T, P, -1))
    return inputs


def encode_windows(grids: Sequence[SegmentGrid], tokenizers: Mapping, kinds: Sequence[str]) -> WindowData:
    inputs = {}
    speaking = np.stack([g.speaking for g in grids]).astype(np.float32)
    biting = np.stack([g.biting for g in grids]).astype(np.float32)
    for kind in kinds:
        if kind == "speaker":
            inputs[kind] = torch.as_tensor(speaking, dtype=torch.long)
        elif kind == "bite":
            inputs[kind] = torch.as_tensor(biting, dtype=torch.long)
        else:
            raw = np.stack([g.chunks[kind] for g in grids])
            inputs.update(encode_raw({kind: raw}, tokenizers, [kind]))
    labels = {"speaking": torch.as_tensor(speaking), "bite": torch.as_tensor(biting)}
    return WindowData(inputs, labels, [g.window_id for g in grids], [g.session_id for g in grids])


def raw_windows(grids: Sequence[SegmentGrid], kinds: Sequence[str]) -> dict[str, np.ndarray]:
    return {kind: np.stack([g.chunks[kind] for g in grids]) for kind in kinds}


# ---------------------------------------------------------------------------
# transformer


def model_config(cfg: PipelineConfig, spec: MaskSpec, input_dims: Mapping[str, int]) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        spec=spec,
        input_dims={k: v for k, v in input_dims.items() if k in spec.modalities},
        hidden_dim=m.hidden_dim,
        num_layers=m.num_layers,
        num_heads=m.num_heads,
        dropout=m.dropout,
        placeholder_inputs=m.placeholder_inputs,
        head_tasks=m.head_tasks,
        mask_kind=m.mask_kind,
        allow_own_modalities=m.allow_own_modalities,
        time_encoding=m.time_encoding,
    )


def build_model(cfg: PipelineConfig, num_persons: int, input_dims: Mapping[str, int]) -> MultiPartyTransformer:
    spec = MaskSpec(cfg.segment.segments_per_window, num_persons, tuple(cfg.modalities))
    torch.manual_seed(derive_seed(cfg.seed, "transformer-init"))
    return MultiPartyTransformer(model_config(cfg, spec, input_dims))


def tokenizer_dims(tokenizers: Mapping) -> dict[str, int]:
    return {k: t.latent_dim for k, t in tokenizers.items()}


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    val_scores: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    class_weights: dict[str, tuple[float, float]] = field(default_factory=dict)


def _expand(model: MultiPartyTransformer, batch: WindowData, scope: str):
    """Inputs, targets, labels and loss-selection mask for one training step."""
    if not model.config.placeholder_inputs:
        return batch.inputs, None, batch.labels, None
    spec = model.spec
    expand = person_targets if scope == "person" else pair_targets
    rows, targets = expand(len(batch), spec.num_segments, spec.num_persons)
    inputs = {k: v[rows] for k, v in batch.inputs.items()}
    labels = {k: v[rows] for k, v in batch.labels.items()}
    return inputs, targets, labels, targets


def train_model(
    model: MultiPartyTransformer,
    train: WindowData,
    val: WindowData | None,
    cfg: PipelineConfig,
) -> TrainHistory:
    """Adam with gradient clipping; early stopping on mean validation F1."""
    s = cfg.train
    scope = cfg.model.placeholder_scope
    if len(train) == 0:
        raise ValueError("no training windows")
    history = TrainHistory()
    tasks = model.config.head_tasks
    for task in tasks:
        history.class_weights[task] = (
            class_weights(train.labels[task].numpy()) if s.class_weighting else (1.0, 1.0)
        )
    opt = torch.optim.Adam(model.parameters(), lr=s.learning_rate)
    rng = np.random.default_rng(derive_seed(cfg.seed, "transformer-batches"))
    torch.manual_seed(derive_seed(cfg.seed, "transformer-dropout"))
    best_score, best_state, stale = -np.inf, None, 0
    start = time.monotonic()
    for epoch in range(1, s.epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        total = 0.0
        for b in range(0, len(order), s.batch_size):
            batch = train.subset(order[b : b + s.batch_size])
            inputs, targets, labels, select = _expand(model, batch, scope)
            out = model(inputs, targets)
            loss, _ = task_loss(out.logits, labels, history.class_weights, select)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"transformer loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), s.grad_clip)
            opt.step()
            total += float(loss.detach()) * len(batch)
        history.losses.append(total / len(train))
        history.epochs_run = epoch
        if val is not None and len(val):
            score = float(np.mean([e.f1 for e in evaluate(model, val, scope).values()]))
            history.val_scores.append(score)
            if score > best_score:
                best_score, best_state, stale = score, copy.deepcopy(model.state_dict()), 0
                history.best_epoch = epoch
            else:
                stale += 1
                if stale >= s.patience:
                    break
        if s.time_budget_s is not None and time.monotonic() - start > s.time_budget_s:
            log.info("transformer: time budget reached after %d epochs", epoch)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = history.epochs_run
    model.eval()
    return history


@torch.no_grad()
def predict(model: MultiPartyTransformer, data: WindowData, scope: str = "person", batch_size: int = 64):
    model.eval()
    chunks = []
    for b in range(0, len(data), batch_size):
        idx = list(range(b, min(b + batch_size, len(data))))
        chunks.append(predict_logits(model, data.subset(idx).inputs, scope))
    return {task: torch.cat([c[task] for c in chunks]).numpy() for task in model.config.head_tasks}


def evaluate(model: MultiPartyTransformer, data: WindowData, scope: str = "person") -> dict[str, MetricsEntry]:
    logits = predict(model, data, scope)
    return {task: metrics(confusion(z, data.labels[task].numpy())) for task, z in logits.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: MultiPartyTransformer, path: str | Path, tokenizer_paths: Mapping[str, str], cfg: PipelineConfig):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "pipeline_config": cfg.to_dict(),
        "tokenizers": dict(tokenizer_paths),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, Path(path))


def load_model(path: str | Path):
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported model checkpoint version {payload.get('format_version')}")
    model = MultiPartyTransformer(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, PipelineConfig.from_dict(payload["pipeline_config"]), payload["tokenizers"]

