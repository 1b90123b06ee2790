"""Causal transformer over the (time, person, modality) token grid.

Each layer is pre-norm attention and feed-forward, but the residual branch is
right-shifted by one timestep block: position ``(t, i, k)`` receives the
residual of block ``t - 1`` and block 0 receives zeros. Combined with the
blockwise attention mask this keeps a person's own current-timestep tokens out
of the value path of their own predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .block_mask import AttentionMask, MaskSpec, build_mask
from .signal_model import DISCRETE_KINDS, TASKS

VQ_LATENT, DISCRETE_EMBEDDING, PLACEHOLDER = 0, 1, 2


class NumericalError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    spec: MaskSpec
    input_dims: dict[str, int] = field(default_factory=dict)  # continuous kind -> latent width
    hidden_dim: int = 256
    num_layers: int = 4
    num_heads: int = 8
    dropout: float = 0.1
    placeholder_inputs: bool = False
    head_tasks: tuple[str, ...] = TASKS
    mask_kind: str = "blockwise"
    allow_own_modalities: bool = False
    time_encoding: str = "learned"
    ffn_mult: int = 4

    def __post_init__(self):
        self.head_tasks = tuple(self.head_tasks)
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not set(self.head_tasks) <= set(TASKS):
            raise ValueError(f"head_tasks must be a subset of {TASKS}")
        if self.time_encoding not in ("learned", "sinusoidal"):
            raise ValueError("time_encoding must be 'learned' or 'sinusoidal'")
        for kind in self.spec.modalities:
            if kind not in DISCRETE_KINDS and kind not in self.input_dims:
                raise ValueError(f"no input width for continuous modality {kind!r}")
        for task in self.head_tasks:
            head_source(self.spec, task)

    def to_dict(self) -> dict:
        return {
            "spec": {
                "num_segments": self.spec.num_segments,
                "num_persons": self.spec.num_persons,
                "modalities": list(self.spec.modalities),
            },
            "input_dims": dict(self.input_dims),
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "dropout": self.dropout,
            "placeholder_inputs": self.placeholder_inputs,
            "head_tasks": list(self.head_tasks),
            "mask_kind": self.mask_kind,
            "allow_own_modalities": self.allow_own_modalities,
            "time_encoding": self.time_encoding,
            "ffn_mult": self.ffn_mult,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        s = d.pop("spec")
        return cls(spec=MaskSpec(s["num_segments"], s["num_persons"], tuple(s["modalities"])), **d)


def head_source(spec: MaskSpec, task: str) -> int:
    """Modality index whose hidden state feeds a task head.

    Speaking reads the speaker token and bite reads the bite token; when that
    modality is absent from the layout each falls back to the other.
    """
    order = ("speaker", "bite") if task == "speaking" else ("bite", "speaker")
    for kind in order:
        if kind in spec.modalities:
            return spec.modality_index(kind)
    raise ValueError(f"task {task!r} needs a speaker or bite token in the layout")


def right_shift_residual(features: torch.Tensor, spec: MaskSpec) -> torch.Tensor:
    """Shift (..., L, H) features one timestep block later; block 0 becomes zero."""
    L = spec.length
    if features.shape[-2] != L:
        raise ValueError(f"sequence length {features.shape[-2]} does not match L={L}")
    block = spec.block_size
    pad = torch.zeros_like(features[..., :block, :])
    return torch.cat([pad, features[..., : L - block, :]], dim=-2)


class MaskedSelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allow: torch.Tensor):
        B, L, H = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allow, torch.finfo(scores.dtype).min)
        weights = torch.softmax(scores, dim=-1)
        # exact zeros on blocked keys; rows with no allowed key become all-zero
        weights = torch.where(allow, weights, torch.zeros((), dtype=weights.dtype))
        context = self.dropout(weights) @ v
        context = context.transpose(1, 2).reshape(B, L, H)
        return self.out(context), weights


class ShiftedResidualBlock(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int, dropout: float, ffn_mult: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(hidden_dim)
        self.attn = MaskedSelfAttention(hidden_dim, num_heads, dropout)
        self.norm_ffn = nn.LayerNorm(hidden_dim)
        self.ffn = nn.Sequential(
            nn.Linear(hidden_dim, ffn_mult * hidden_dim),
            nn.GELU(),
            nn.Linear(ffn_mult * hidden_dim, hidden_dim),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allow: torch.Tensor, spec: MaskSpec):
        a, weights = self.attn(self.norm_attn(x), allow)
        res_attn = right_shift_residual(x, spec)
        h = res_attn + self.dropout(a)
        f = self.ffn(self.norm_ffn(h))
        res_ffn = right_shift_residual(h, spec)
        out = res_ffn + self.dropout(f)
        record = {
            "input": x, "attn_out": a, "attn_residual": res_attn,
            "ffn_out": f, "ffn_residual": res_ffn, "output": out,
        }
        return out, weights, record


@dataclass
class ModelOutput:
    logits: dict[str, torch.Tensor]  # task -> (B, T, P)
    hidden: torch.Tensor  # (B, L, H)
    provenance: torch.Tensor  # (B, L)
    attention: list[torch.Tensor] = field(default_factory=list)  # per layer (B, heads, L, L)
    layers: list[dict] = field(default_factory=list)


class MultiPartyTransformer(nn.Module):
    def __init__(self, config: ModelConfig, mask: AttentionMask | None = None):
        super().__init__()
        self.config = config
        spec = config.spec
        H = config.hidden_dim
        if mask is None:
            kwargs = {"allow_own_modalities": config.allow_own_modalities} if config.mask_kind == "blockwise" else {}
            mask = build_mask(spec, config.mask_kind, **kwargs)
        if mask.spec.length != spec.length:
            raise ValueError("mask does not match the model's token layout")
        self.register_buffer("allow", torch.tensor(mask.allow), persistent=False)

        self.lifts = nn.ModuleDict()
        for kind in spec.modalities:
            if kind in DISCRETE_KINDS:
                self.lifts[kind] = nn.Embedding(2, H)
            else:
                self.lifts[kind] = nn.Linear(config.input_dims[kind], H)
        self.placeholders = nn.Parameter(0.02 * torch.randn(spec.num_modalities, H))
        if config.time_encoding == "learned":
            self.time_table = nn.Parameter(0.02 * torch.randn(spec.num_segments, H))
        else:
            self.register_buffer("time_table", _cyclic_table(spec.num_segments, H))
        self.person_table = nn.Parameter(0.02 * torch.randn(spec.num_persons, H))
        self.modality_table = nn.Parameter(0.02 * torch.randn(spec.num_modalities, H))
        self.input_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            ShiftedResidualBlock(H, config.num_heads, config.dropout, config.ffn_mult)
            for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(H)
        self.heads = nn.ModuleDict({task: nn.Linear(H, 1) for task in config.head_tasks})

    @property
    def spec(self) -> MaskSpec:
        return self.config.spec

    def positional(self) -> torch.Tensor:
        """(T, P, M, H) sum of time, person and modality encodings."""
        spec = self.spec
        t = torch.arange(spec.num_segments) % self.time_table.shape[0]
        return (
            self.time_table[t][:, None, None, :]
            + self.person_table[None, :, None, :]
            + self.modality_table[None, None, :, :]
        )

    def embed(self, inputs: Mapping[str, torch.Tensor], targets: torch.Tensor | None = None):
        """Token embeddings (B, L, H) and per-position provenance codes (B, L).

        ``targets`` is a (B, T, P) boolean grid of predicted (segment, person)
        pairs; with ``placeholder_inputs`` their tokens are replaced by learned
        per-modality placeholders before the positional encodings are added.
        """
        spec = self.spec
        T, P, M = spec.num_segments, spec.num_persons, spec.num_modalities
        parts, prov = [], []
        for kind in spec.modalities:
            if kind not in inputs:
                raise ValueError(f"missing input for modality {kind!r}")
            x = inputs[kind]
            if kind in DISCRETE_KINDS:
                if x.shape[1:] != (T, P):
                    raise ValueError(f"{kind}: expected (B, {T}, {P}) labels, got {tuple(x.shape)}")
                parts.append(self.lifts[kind](x.long()))
                prov.append(DISCRETE_EMBEDDING)
            else:
                D = self.config.input_dims[kind]
                if x.shape[1:] != (T, P, D):
                    raise ValueError(f"{kind}: expected (B, {T}, {P}, {D}) latents, got {tuple(x.shape)}")
                parts.append(self.lifts[kind](x.to(self.lifts[kind].weight.dtype)))
                prov.append(VQ_LATENT)
        tokens = torch.stack(parts, dim=3)  # (B, T, P, M, H)
        B = tokens.shape[0]
        provenance = torch.tensor(prov).expand(B, T, P, M).clone()
        if self.config.placeholder_inputs and targets is not None:
            if targets.shape != (B, T, P):
                raise ValueError(f"targets must be (B, {T}, {P}), got {tuple(targets.shape)}")
            sel = targets.bool()[..., None, None]
            tokens = torch.where(sel, self.placeholders.expand_as(tokens), tokens)
            provenance[targets.bool()] = PLACEHOLDER
        tokens = tokens + self.positional()
        return tokens.reshape(B, spec.length, -1), provenance.reshape(B, spec.length)

    def encode(self, x: torch.Tensor, return_attention: bool = False, return_layers: bool = False):
        attention, layers = [], []
        h = self.input_dropout(x)
        for n, block in enumerate(self.blocks):
            h, weights, record = block(h, self.allow, self.spec)
            if not torch.isfinite(h).all():
                raise NumericalError(f"non-finite activations after layer {n}")
            if return_attention:
                attention.append(weights)
            if return_layers:
                layers.append(record)
        return self.final_norm(h), attention, layers

    def predict_heads(self, hidden: torch.Tensor) -> dict[str, torch.Tensor]:
        spec = self.spec
        grid = hidden.reshape(hidden.shape[0], spec.num_segments, spec.num_persons, spec.num_modalities, -1)
        return {
            task: self.heads[task](grid[:, :, :, head_source(spec, task)]).squeeze(-1)
            for task in self.config.head_tasks
        }

    def forward(
        self,
        inputs: Mapping[str, torch.Tensor],
        targets: torch.Tensor | None = None,
        return_attention: bool = False,
        return_layers: bool = False,
    ) -> ModelOutput:
        x, provenance = self.embed(inputs, targets)
        hidden, attention, layers = self.encode(x, return_attention, return_layers)
        return ModelOutput(self.predict_heads(hidden), hidden, provenance, attention, layers)


def _cyclic_table(T: int, H: int) -> torch.Tensor:
    t = torch.arange(T, dtype=torch.float32)[:, None]
    harmonics = torch.arange(1, H // 2 + 1, dtype=torch.float32)[None, :]
    angle = 2 * math.pi * t * harmonics / T
    table = torch.cat([torch.sin(angle), torch.cos(angle)], dim=1)
    return F.pad(table, (0, H - table.shape[1]))


def task_loss(
    logits: Mapping[str, torch.Tensor],
    labels: Mapping[str, torch.Tensor],
    weights: Mapping[str, tuple[float, float]] | None = None,
    select: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Class-weighted BCE per task, averaged over the selected (segment, person) pairs.

    Returns the sum over tasks and the per-task components.
    """
    components = {}
    for task, z in logits.items():
        y = labels[task].to(z.dtype)
        if not torch.all((y == 0) | (y == 1)):
            raise ValueError(f"{task} labels must be binary")
        w_neg, w_pos = (weights or {}).get(task, (1.0, 1.0))
        w = torch.where(y > 0.5, torch.as_tensor(w_pos, dtype=z.dtype), torch.as_tensor(w_neg, dtype=z.dtype))
        per = F.binary_cross_entropy_with_logits(z, y, reduction="none") * w
        if select is not None:
            sel = select.to(z.dtype)
            components[task] = (per * sel).sum() / sel.sum().clamp_min(1)
        else:
            components[task] = per.mean()
    total = sum(components.values()) if components else torch.zeros(())
    return total, components


def person_targets(batch: int, T: int, P: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Expand a batch into P copies, copy ``i`` predicting person i at every segment.

    Returns (copy -> source row index (B*P,), targets (B*P, T, P)).
    """
    rows = torch.arange(batch).repeat_interleave(P)
    person = torch.arange(P).repeat(batch)
    targets = torch.zeros(batch * P, T, P, dtype=torch.bool)
    targets[torch.arange(batch * P), :, person] = True
    return rows, targets


def pair_targets(batch: int, T: int, P: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Expand into T*P copies, each predicting a single (segment, person) pair."""
    rows = torch.arange(batch).repeat_interleave(T * P)
    targets = torch.eye(T * P, dtype=torch.bool).reshape(T * P, T, P).repeat(batch, 1, 1)
    return rows, targets


def predict_logits(
    model: MultiPartyTransformer,
    inputs: Mapping[str, torch.Tensor],
    scope: str = "person",
) -> dict[str, torch.Tensor]:
    """Per-(segment, person) logits (B, T, P) for every task.

    Without placeholders this is a single teacher-forced pass. With
    placeholders each prediction comes from a pass in which its own
    (segment, person) tokens were replaced, per ``scope``.
    """
    if not model.config.placeholder_inputs:
        return model(inputs).logits
    spec = model.spec
    B = next(iter(inputs.values())).shape[0]
    expand = person_targets if scope == "person" else pair_targets
    rows, targets = expand(B, spec.num_segments, spec.num_persons)
    out = model({k: v[rows] for k, v in inputs.items()}, targets).logits
    result = {}
    for task, z in out.items():
        z = torch.where(targets, z, torch.zeros((), dtype=z.dtype))
        result[task] = torch.zeros(B, spec.num_segments, spec.num_persons, dtype=z.dtype).index_add(0, rows, z)
    return result


@dataclass
class AuditResult:
    max_delta: float
    deltas: list[float]
    placeholder_inputs: bool


@torch.no_grad()
def leakage_audit(
    model: MultiPartyTransformer,
    encode: Callable[[dict[str, np.ndarray]], dict[str, torch.Tensor]],
    raw: dict[str, np.ndarray],
    watch: tuple[int, int],
    perturb: list[tuple[int, int]] | None = None,
    trials: int = 10,
    seed: int = 0,
    scope: str = "person",
) -> AuditResult:
    """Largest change of the ``watch`` (segment, person) logits when raw signals are resampled.

    ``raw`` maps modality -> (B, T, P, m, C) raw chunks; ``encode`` turns raw
    chunks into model inputs (frozen tokenizers, segment labels). ``perturb``
    lists the (segment, person) cells to resample; it defaults to ``watch``
    itself, the own-current-signal leakage check.
    """
    model.eval()
    rng = np.random.default_rng(seed)
    cells = perturb or [watch]
    t, i = watch

    def logits(batch):
        out = predict_logits(model, encode(batch), scope)
        return torch.stack([out[task][:, t, i] for task in sorted(out)])

    base = logits(raw)
    deltas = []
    for _ in range(trials):
        batch = {k: np.array(v, copy=True) for k, v in raw.items()}
        for kind, arr in batch.items():
            for (ts, ps) in cells:
                shape = arr[:, ts, ps].shape
                if kind in DISCRETE_KINDS:
                    arr[:, ts, ps] = rng.integers(0, 2, size=shape)
                else:
                    scale = float(np.std(arr)) or 1.0
                    arr[:, ts, ps] = float(np.mean(arr)) + scale * rng.standard_normal(shape)
        deltas.append(float((logits(batch) - base).abs().max()))
    return AuditResult(max(deltas) if deltas else 0.0, deltas, model.config.placeholder_inputs)
