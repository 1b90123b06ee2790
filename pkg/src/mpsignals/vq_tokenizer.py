"""Per-modality vector-quantized autoencoder for c-second segments.

Encoding: a 1-D CNN embeds every frame, each frame embedding is snapped to its
nearest codebook entry, and the m quantized embeddings are concatenated and
linearly projected to a single segment latent ``z``.

Decoding: ``z`` is linearly up-projected back to m embeddings, these are
re-quantized against the same codebook, and a 1-D transposed-CNN maps them to
frames. Both quantization passes contribute a selection loss; the objective is
``mse + 0.5 * (select_encode + select_decode)``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .signal_model import Modality

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    modality: Modality
    latent_dim: int = 64
    codebook_size: int = 256
    frames_per_segment: int = 45
    conv_channel_widths: tuple[int, ...] = (64, 64)
    commitment_coefficient: float = 0.25
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_channel_widths", tuple(self.conv_channel_widths))
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be at least 2")
        if self.latent_dim <= 0 or self.frames_per_segment <= 0:
            raise ValueError("latent_dim and frames_per_segment must be positive")
        if any(w <= 0 for w in self.conv_channel_widths):
            raise ValueError("conv widths must be positive")
        if self.commitment_coefficient < 0:
            raise ValueError("commitment_coefficient must be nonnegative")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd to preserve frame count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channel_widths"] = list(self.conv_channel_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        d = dict(d)
        d["modality"] = Modality(**d["modality"])
        d["conv_channel_widths"] = tuple(d["conv_channel_widths"])
        return cls(**d)


class Quantized(NamedTuple):
    index: torch.Tensor
    quantized: torch.Tensor  # straight-through: forward value q, gradient identity w.r.t. input
    codebook_loss: torch.Tensor  # ||sg(e) - q||^2
    commitment_loss: torch.Tensor  # beta * ||e - sg(q)||^2


def nearest_entry(embedding: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row under squared Euclidean distance.

    ``torch.argmin`` returns the first minimum, so ties go to the lowest index.
    """
    flat = embedding.reshape(-1, embedding.shape[-1])
    dist = (
        flat.pow(2).sum(-1, keepdim=True)
        - 2 * flat @ codebook.t()
        + codebook.pow(2).sum(-1)[None, :]
    )
    return dist.argmin(-1).reshape(embedding.shape[:-1])


def quantize(embedding: torch.Tensor, codebook: torch.Tensor, commitment: float = 0.25) -> Quantized:
    """Snap ``embedding`` (..., D) to the nearest rows of ``codebook`` (K, D).

    Loss terms are squared norms averaged over all quantized vectors.
    """
    if embedding.shape[-1] != codebook.shape[-1]:
        raise ValueError(f"embedding width {embedding.shape[-1]} != codebook width {codebook.shape[-1]}")
    if not torch.isfinite(embedding).all():
        raise ValueError("cannot quantize a non-finite embedding")
    with torch.no_grad():
        index = nearest_entry(embedding, codebook)
    q = codebook[index]
    codebook_loss = (embedding.detach() - q).pow(2).sum(-1).mean()
    commitment_loss = commitment * (embedding - q.detach()).pow(2).sum(-1).mean()
    straight = embedding + (q - embedding).detach()
    return Quantized(index, straight, codebook_loss, commitment_loss)


@dataclass
class SegmentLatent:
    z: np.ndarray  # (latent_dim,)
    frame_codes: np.ndarray  # (m,) codebook indices


@dataclass
class TokenizerLoss:
    reconstruction: float
    select_encode: float
    select_decode: float
    total: float


def tokenizer_loss(original, reconstruction, select_encode, select_decode):
    """MSE reconstruction plus the mean of the two selection losses.

    Works on tensors (returns a tensor total for backprop) and on numpy/floats
    (returns a :class:`TokenizerLoss`).
    """
    if isinstance(original, torch.Tensor):
        if original.shape != reconstruction.shape:
            raise ValueError(f"shape mismatch {tuple(original.shape)} vs {tuple(reconstruction.shape)}")
        recon = F.mse_loss(reconstruction, original)
        return recon + 0.5 * (select_encode + select_decode), recon
    original = np.asarray(original, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if original.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch {original.shape} vs {reconstruction.shape}")
    recon = float(np.mean((original - reconstruction) ** 2)) if original.size else 0.0
    total = recon + 0.5 * (float(select_encode) + float(select_decode))
    return TokenizerLoss(recon, float(select_encode), float(select_decode), total)


def _conv_stack(widths: list[int], kernel: int, transpose: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    conv = nn.ConvTranspose1d if transpose else nn.Conv1d
    for n, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(conv(a, b, kernel, padding=kernel // 2))
        if n < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class VQTokenizer(nn.Module):
    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        C = config.modality.channel_count
        D = config.latent_dim
        m = config.frames_per_segment
        widths = list(config.conv_channel_widths)
        self.encoder = _conv_stack([C, *widths, D], config.kernel_size, transpose=False)
        self.decoder = _conv_stack([D, *reversed(widths), C], config.kernel_size, transpose=True)
        self.codebook = nn.Parameter(torch.randn(config.codebook_size, D) / math.sqrt(D))
        self.aggregate = nn.Linear(m * D, D)
        self.upproject = nn.Linear(D, m * D)
        self.register_buffer("mean", torch.zeros(C))
        self.register_buffer("std", torch.ones(C))
        self.register_buffer("usage_counts", torch.zeros(config.codebook_size, dtype=torch.long))

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _check(self, x: torch.Tensor):
        m = self.config.frames_per_segment
        C = self.config.modality.channel_count
        if x.dim() != 3 or x.shape[1:] != (m, C):
            raise ValueError(f"expected chunks of shape (batch, {m}, {C}), got {tuple(x.shape)}")

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.std + self.mean

    def frame_embeddings(self, x_norm: torch.Tensor) -> torch.Tensor:
        # (B, m, C) -> (B, m, D)
        return self.encoder(x_norm.transpose(1, 2)).transpose(1, 2)

    def encode(self, x: torch.Tensor, normalized: bool = False):
        """Returns (z, frame_codes, select_encode)."""
        self._check(x)
        x_norm = x if normalized else self.normalize(x)
        e = self.frame_embeddings(x_norm)
        q = quantize(e, self.codebook, self.config.commitment_coefficient)
        z = self.aggregate(q.quantized.reshape(x.shape[0], -1))
        return z, q.index, q.codebook_loss + q.commitment_loss

    def decode(self, z: torch.Tensor):
        """Returns (normalized reconstruction (B, m, C), decode codes, select_decode)."""
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of shape (batch, {self.latent_dim}), got {tuple(z.shape)}")
        m = self.config.frames_per_segment
        up = self.upproject(z).reshape(z.shape[0], m, self.latent_dim)
        q = quantize(up, self.codebook, self.config.commitment_coefficient)
        recon = self.decoder(q.quantized.transpose(1, 2)).transpose(1, 2)
        return recon, q.index, q.codebook_loss + q.commitment_loss

    def forward(self, x: torch.Tensor):
        x_norm = self.normalize(x)
        z, codes, sel_enc = self.encode(x_norm, normalized=True)
        recon, _, sel_dec = self.decode(z)
        total, recon_loss = tokenizer_loss(x_norm, recon, sel_enc, sel_dec)
        parts = TokenizerLoss(*(float(v.detach()) for v in (recon_loss, sel_enc, sel_dec, total)))
        return recon, codes, total, parts

    @torch.no_grad()
    def encode_numpy(self, chunks: np.ndarray, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
        """Frozen encode of (N, m, C) chunks -> (z (N, D), codes (N, m))."""
        self.eval()
        zs, codes = [], []
        x = torch.as_tensor(np.asarray(chunks), dtype=torch.float32)
        for s in range(0, len(x), batch_size):
            z, c, _ = self.encode(x[s : s + batch_size])
            zs.append(z)
            codes.append(c)
        if not zs:
            return np.zeros((0, self.latent_dim), np.float32), np.zeros((0, self.config.frames_per_segment), np.int64)
        return torch.cat(zs).numpy(), torch.cat(codes).numpy()

    @torch.no_grad()
    def reconstruct_numpy(self, chunks: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Encode then decode (N, m, C) chunks, returned in the input scale."""
        self.eval()
        x = torch.as_tensor(np.asarray(chunks), dtype=torch.float32)
        out = [self.denormalize(self(x[s : s + batch_size])[0]) for s in range(0, len(x), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros_like(np.asarray(chunks, dtype=np.float32))


def encode_segment(chunk: np.ndarray, tokenizer: VQTokenizer) -> SegmentLatent:
    chunk = np.asarray(chunk, dtype=np.float32)
    z, codes = tokenizer.encode_numpy(chunk[None])
    return SegmentLatent(z[0], codes[0])


@torch.no_grad()
def decode_latent(latent: SegmentLatent, tokenizer: VQTokenizer) -> tuple[np.ndarray, float]:
    """Reconstruct (m, C) frames in the input scale; also returns the decode-side selection loss."""
    tokenizer.eval()
    z = torch.as_tensor(np.asarray(latent.z, dtype=np.float32)).reshape(1, -1)
    recon, _, sel = tokenizer.decode(z)
    return tokenizer.denormalize(recon)[0].numpy(), float(sel)


class MeanPoolTokenizer(nn.Module):
    """Parameter-free alternative for pre-embedded features: z = per-channel segment mean."""

    def __init__(self, modality: Modality, frames_per_segment: int):
        super().__init__()
        self.config = TokenizerConfig(
            modality, latent_dim=modality.channel_count, codebook_size=2,
            frames_per_segment=frames_per_segment, conv_channel_widths=(1,),
        )
        C = modality.channel_count
        self.register_buffer("mean", torch.zeros(C))
        self.register_buffer("std", torch.ones(C))

    @property
    def latent_dim(self) -> int:
        return self.config.modality.channel_count

    @torch.no_grad()
    def encode_numpy(self, chunks: np.ndarray, batch_size: int = 0):
        x = (torch.as_tensor(np.asarray(chunks), dtype=torch.float32) - self.mean) / self.std
        return x.mean(1).numpy(), np.zeros(x.shape[:2], dtype=np.int64)


@dataclass
class TokenizerTrainSettings:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    time_budget_s: float | None = None
    reseed_dead_codes: bool = True


@dataclass
class TokenizerTrainReport:
    final_loss: TokenizerLoss
    usage: np.ndarray
    epochs_run: int
    history: list[float] = field(default_factory=list)

    @property
    def active_codes(self) -> int:
        return int((self.usage > 0).sum())


def channel_stats(chunks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(chunks, dtype=np.float64).reshape(-1, chunks.shape[-1])
    mean = flat.mean(0)
    std = flat.std(0)
    std[std < 1e-6] = 1.0
    return mean, std


def train_tokenizer(
    chunks: np.ndarray,
    config: TokenizerConfig,
    settings: TokenizerTrainSettings | None = None,
) -> tuple[VQTokenizer, TokenizerTrainReport]:
    """Fit a tokenizer on (N, m, C) chunks and return it frozen (eval mode, no grad)."""
    settings = settings or TokenizerTrainSettings()
    chunks = np.asarray(chunks, dtype=np.float32)
    if chunks.ndim != 3 or len(chunks) == 0:
        raise ValueError("train_tokenizer needs a nonempty (N, m, C) array")
    torch.manual_seed(settings.seed)
    rng = np.random.default_rng(settings.seed)
    model = VQTokenizer(config)
    mean, std = channel_stats(chunks)
    model.mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
    model.std.copy_(torch.as_tensor(std, dtype=torch.float32))
    data = torch.as_tensor(chunks)
    K = config.codebook_size

    # data-dependent codebook init from encoder outputs
    with torch.no_grad():
        sample = data[rng.choice(len(data), size=min(len(data), 256), replace=False)]
        e = model.frame_embeddings(model.normalize(sample)).reshape(-1, config.latent_dim)
        pick = rng.choice(len(e), size=K, replace=len(e) < K)
        model.codebook.copy_(e[pick] + 1e-3 * torch.randn(K, config.latent_dim))

    opt = torch.optim.Adam(model.parameters(), lr=settings.learning_rate)
    start = time.monotonic()
    history = []
    usage = np.zeros(K, dtype=np.int64)
    epoch = 0
    for epoch in range(1, settings.epochs + 1):
        model.train()
        usage = np.zeros(K, dtype=np.int64)
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        last_e = None
        for s in range(0, len(order), settings.batch_size):
            batch = data[order[s : s + settings.batch_size]]
            try:
                _, codes, total, _ = model(batch)
            except ValueError as err:
                if "non-finite" not in str(err):
                    raise
                raise TrainingDivergedError(f"{config.modality.kind} tokenizer: {err} at epoch {epoch}") from err
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"{config.modality.kind} tokenizer loss became non-finite at epoch {epoch}"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            if not all(torch.isfinite(p).all() for p in model.parameters()):
                raise TrainingDivergedError(
                    f"{config.modality.kind} tokenizer parameters became non-finite at epoch {epoch}"
                )
            usage += np.bincount(codes.reshape(-1).numpy(), minlength=K)
            epoch_loss += float(total.detach()) * len(batch)
            last_e = batch
        history.append(epoch_loss / len(data))
        if settings.reseed_dead_codes:
            dead = np.flatnonzero(usage == 0)
            if len(dead) and last_e is not None:
                with torch.no_grad():
                    e = model.frame_embeddings(model.normalize(last_e)).reshape(-1, config.latent_dim)
                    pick = torch.as_tensor(rng.choice(len(e), size=len(dead), replace=len(e) < len(dead)))
                    model.codebook[torch.as_tensor(dead)] = e[pick] + 1e-3 * torch.randn(len(dead), config.latent_dim)
        if settings.time_budget_s is not None and time.monotonic() - start > settings.time_budget_s:
            log.info("tokenizer %s: time budget reached after %d epochs", config.modality.kind, epoch)
            break

    model.eval()
    with torch.no_grad():
        usage = np.zeros(K, dtype=np.int64)
        sums = np.zeros(4)
        for s in range(0, len(data), 1024):
            batch = data[s : s + 1024]
            _, codes, _, parts = model(batch)
            usage += np.bincount(codes.reshape(-1).numpy(), minlength=K)
            sums += len(batch) * np.array([parts.reconstruction, parts.select_encode, parts.select_decode, parts.total])
        final = TokenizerLoss(*(float(v) for v in sums / len(data)))
    model.usage_counts.copy_(torch.as_tensor(usage))
    for p in model.parameters():
        p.requires_grad_(False)
    log.info(
        "tokenizer %s: loss %.4f (recon %.4f), %d/%d codes active",
        config.modality.kind, final.total, final.reconstruction, int((usage > 0).sum()), K,
    )
    return model, TokenizerTrainReport(final, usage, epoch, history)


def save_tokenizer(tokenizer: VQTokenizer | MeanPoolTokenizer, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "mean_pool" if isinstance(tokenizer, MeanPoolTokenizer) else "vq",
        "config": tokenizer.config.to_dict(),
        "state_dict": tokenizer.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_tokenizer(path: str | Path) -> VQTokenizer | MeanPoolTokenizer:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported tokenizer checkpoint version {version}")
    config = TokenizerConfig.from_dict(payload["config"])
    if payload["kind"] == "mean_pool":
        model = MeanPoolTokenizer(config.modality, config.frames_per_segment)
    else:
        model = VQTokenizer(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
