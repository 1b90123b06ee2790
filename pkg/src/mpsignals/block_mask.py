"""Attention masks over the (time, person, modality) token grid.

Tokens are laid out timestep-major: ``position = t * (P * M) + i * M + k``.
``allow[q, key]`` is True when query ``q`` may attend to ``key``.

Three kinds are provided:

``blockwise``
    past timesteps, plus other persons at the current timestep. A token never
    sees its own person's current block, itself included.
``strict_past``
    past timesteps only.
``lower``
    the conventional lower-triangular causal mask over raw positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MASK_KINDS = ("blockwise", "strict_past", "lower")
DEFAULT_MEMORY_BUDGET = 256 * 2**20  # bytes of boolean matrix


class MaskTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    num_segments: int
    num_persons: int
    modalities: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if self.num_segments < 1 or self.num_persons < 1 or not self.modalities:
            raise ValueError("T, P and M must all be at least 1")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError("duplicate modality in layout")

    @classmethod
    def of_size(cls, T: int, P: int, M: int) -> "MaskSpec":
        return cls(T, P, tuple(f"m{k}" for k in range(M)))

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def block_size(self) -> int:
        return self.num_persons * self.num_modalities

    @property
    def length(self) -> int:
        return self.num_segments * self.block_size

    def position(self, t: int, i: int, k: int) -> int:
        self._check(t, i, k)
        return t * self.block_size + i * self.num_modalities + k

    def layout(self, position: int) -> tuple[int, int, int]:
        if not 0 <= position < self.length:
            raise IndexError(f"position {position} outside 0..{self.length - 1}")
        t, rest = divmod(position, self.block_size)
        i, k = divmod(rest, self.num_modalities)
        return t, i, k

    def layout_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = np.arange(self.length)
        t, rest = np.divmod(pos, self.block_size)
        i, k = np.divmod(rest, self.num_modalities)
        return t, i, k

    def modality_index(self, kind: str) -> int:
        return self.modalities.index(kind)

    def _check(self, t, i, k):
        if not (0 <= t < self.num_segments and 0 <= i < self.num_persons and 0 <= k < self.num_modalities):
            raise IndexError(f"token {(t, i, k)} outside grid {(self.num_segments, self.num_persons, self.num_modalities)}")


@dataclass(frozen=True)
class AttentionMask:
    spec: MaskSpec
    kind: str
    allow: np.ndarray

    def __post_init__(self):
        allow = np.asarray(self.allow, dtype=bool)
        L = self.spec.length
        if allow.shape != (L, L):
            raise ValueError(f"mask shape {allow.shape} does not match L={L}")
        allow = allow.copy()
        allow.flags.writeable = False
        object.__setattr__(self, "allow", allow)

    def fully_masked_rows(self) -> np.ndarray:
        return ~self.allow.any(axis=1)


def mask_predicate(
    spec: MaskSpec,
    query: tuple[int, int, int],
    key: tuple[int, int, int],
    allow_own_modalities: bool = False,
) -> bool:
    """Blockwise rule for a single (query, key) pair of (t, person, modality) tokens."""
    spec._check(*query)
    spec._check(*key)
    t, i, k = query
    t2, j, k2 = key
    if t2 < t:
        return True
    if t2 == t and j != i:
        return True
    return allow_own_modalities and t2 == t and j == i and k2 != k


def _check_budget(spec: MaskSpec, memory_budget: int):
    nbytes = spec.length**2
    if nbytes > memory_budget:
        raise MaskTooLargeError(
            f"a {spec.length}x{spec.length} mask needs {nbytes} bytes, over the "
            f"{memory_budget}-byte budget; build it in row chunks instead"
        )


def build_blockwise_mask(
    spec: MaskSpec,
    allow_own_modalities: bool = False,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> AttentionMask:
    _check_budget(spec, memory_budget)
    t, i, k = spec.layout_arrays()
    past = t[None, :] < t[:, None]
    same_t = t[None, :] == t[:, None]
    other = i[None, :] != i[:, None]
    allow = past | (same_t & other)
    if allow_own_modalities:
        allow |= same_t & ~other & (k[None, :] != k[:, None])
    return AttentionMask(spec, "blockwise", allow)


def build_strict_past_mask(spec: MaskSpec, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> AttentionMask:
    _check_budget(spec, memory_budget)
    t, _, _ = spec.layout_arrays()
    return AttentionMask(spec, "strict_past", t[None, :] < t[:, None])


def build_lower_triangular_mask(
    spec: MaskSpec, include_diagonal: bool = True, memory_budget: int = DEFAULT_MEMORY_BUDGET
) -> AttentionMask:
    _check_budget(spec, memory_budget)
    allow = np.tri(spec.length, k=0 if include_diagonal else -1, dtype=bool)
    return AttentionMask(spec, "lower", allow)


def build_mask(spec: MaskSpec, kind: str = "blockwise", **kwargs) -> AttentionMask:
    if kind == "blockwise":
        return build_blockwise_mask(spec, **kwargs)
    if kind == "strict_past":
        return build_strict_past_mask(spec, **kwargs)
    if kind == "lower":
        return build_lower_triangular_mask(spec, **kwargs)
    raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")


def export_mask_bitmap(mask: AttentionMask, path: str | Path) -> Path:
    """Write a plain PBM (P1); allowed cells white, blocked black, row 0 on top."""
    path = Path(path)
    allow = mask.allow
    rows = ["".join("0" if a else "1" for a in row) for row in allow]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P1\n{allow.shape[1]} {allow.shape[0]}\n")
        for row in rows:
            # PBM lines should stay under 70 characters
            for s in range(0, len(row), 64):
                fh.write(row[s : s + 64] + "\n")
    return path


def read_bitmap(path: str | Path) -> np.ndarray:
    """Parse a plain PBM back into an allow matrix (white = True)."""
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line)
    if tokens[0] != "P1":
        raise ValueError("not a plain PBM file")
    width, height = (int(v) for v in tokens[1].split())
    bits = "".join(tokens[2:]).replace(" ", "")
    if len(bits) != width * height:
        raise ValueError("pixel count does not match header")
    black = np.frombuffer(bits.encode("ascii"), dtype=np.uint8) == ord("1")
    return ~black.reshape(height, width)


def dump_mask_text(mask: AttentionMask) -> str:
    return "".join("".join("1" if a else "0" for a in row) + "\n" for row in mask.allow)


def parse_mask_text(text: str) -> np.ndarray:
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    return np.array([[c == "1" for c in row] for row in rows], dtype=bool)
