"""Domain vocabulary for multi-party signal streams and the windowing protocol.

A session holds one frame stream per (person, modality). Sessions are cut into
fixed-length windows, each window into ``T`` contiguous segments of ``c``
seconds, and every (segment, person) pair receives two binary labels:
speaking and biting.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

MODALITY_ORDER = ("gaze", "headpose", "pose", "word", "speaker", "bite")
DISCRETE_KINDS = frozenset({"speaker", "bite"})
TASKS = ("speaking", "bite")

DEFAULT_POSE_KEYPOINTS = 7
DEFAULT_WORD_DIM = 16


@dataclass(frozen=True)
class Modality:
    kind: str
    channel_count: int = 1
    is_discrete: bool = False

    def __post_init__(self):
        if self.kind not in MODALITY_ORDER:
            raise ValueError(f"unknown modality kind {self.kind!r}")
        if self.channel_count <= 0:
            raise ValueError(f"{self.kind}: channel_count must be positive")
        if self.kind in DISCRETE_KINDS and not self.is_discrete:
            raise ValueError(f"{self.kind} is a discrete modality")
        if self.is_discrete and self.channel_count != 1:
            raise ValueError(f"{self.kind}: discrete modalities carry one binary channel")


def default_modalities(
    pose_keypoints: int = DEFAULT_POSE_KEYPOINTS, word_dim: int = DEFAULT_WORD_DIM
) -> tuple[Modality, ...]:
    """The six modalities in canonical layout order."""
    return (
        Modality("gaze", 2),
        Modality("headpose", 3),
        Modality("pose", 2 * pose_keypoints),
        Modality("word", word_dim),
        Modality("speaker", 1, is_discrete=True),
        Modality("bite", 1, is_discrete=True),
    )


def modalities_from_channels(channels: Mapping[str, int]) -> tuple[Modality, ...]:
    """Build modalities from a ``kind -> channel_count`` map, in canonical order."""
    unknown = set(channels) - set(MODALITY_ORDER)
    if unknown:
        raise ValueError(f"unknown modality kinds: {sorted(unknown)}")
    return tuple(
        Modality(kind, int(channels[kind]), is_discrete=kind in DISCRETE_KINDS)
        for kind in MODALITY_ORDER
        if kind in channels
    )


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64, copy=True)
    values.flags.writeable = False
    return values


@dataclass(frozen=True)
class FrameSeries:
    """Frames of one modality sampled at ``fps``; frame ``j`` sits at ``j / fps`` seconds."""

    modality: Modality
    fps: float
    values: np.ndarray  # (n_frames, channel_count)

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[1] != self.modality.channel_count:
            raise ValueError(
                f"{self.modality.kind}: expected frames of width {self.modality.channel_count}, "
                f"got array of shape {values.shape}"
            )
        if self.modality.is_discrete:
            finite = values[np.isfinite(values)]
            if not np.isin(finite, (0.0, 1.0)).all():
                raise ValueError(f"{self.modality.kind}: discrete frames must be 0/1")
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self):
        return self.values.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.fps


@dataclass(frozen=True)
class SessionTimeline:
    session_id: str
    persons: tuple[str, ...]
    streams: Mapping[tuple[str, str], FrameSeries]
    duration_s: float
    flags: Mapping[tuple[str, str], str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "persons", tuple(self.persons))
        if len(self.persons) < 2:
            raise ValueError("a session needs at least two persons")
        if len(set(self.persons)) != len(self.persons):
            raise ValueError("person identifiers must be unique")
        kinds = {kind for (_, kind) in self.streams}
        for person in self.persons:
            for kind in kinds:
                if (person, kind) not in self.streams:
                    raise ValueError(f"missing stream for ({person}, {kind})")
        extra = {p for (p, _) in self.streams} - set(self.persons)
        if extra:
            raise ValueError(f"streams for unknown persons: {sorted(extra)}")
        for key, series in self.streams.items():
            if series.modality.kind != key[1]:
                raise ValueError(f"stream {key} holds modality {series.modality.kind}")
            if abs(series.duration_s - self.duration_s) > 1.0 / series.fps + 1e-9:
                raise ValueError(
                    f"stream {key} covers {series.duration_s:.3f}s, session is {self.duration_s:.3f}s"
                )
        object.__setattr__(self, "streams", dict(self.streams))
        object.__setattr__(self, "flags", dict(self.flags))

    @property
    def modalities(self) -> tuple[Modality, ...]:
        first = self.persons[0]
        found = {kind: s.modality for (p, kind), s in self.streams.items() if p == first}
        return tuple(found[k] for k in MODALITY_ORDER if k in found)


@dataclass(frozen=True)
class SegmentConfig:
    segment_seconds: float = 3.0
    segments_per_window: int = 12
    window_stride_s: float = 18.0
    fps: float = 15.0
    speaking_threshold: float = 0.30

    def __post_init__(self):
        if self.segment_seconds <= 0 or self.segments_per_window < 1 or self.window_stride_s <= 0:
            raise ValueError("segment length, count and stride must be positive")
        if not 0 <= self.speaking_threshold < 1:
            raise ValueError("speaking_threshold must lie in [0, 1)")
        if self.frames_per_segment < 1:
            raise ValueError("a segment must contain at least one frame")

    @property
    def window_seconds(self) -> float:
        return self.segment_seconds * self.segments_per_window

    @property
    def frames_per_segment(self) -> int:
        return int(round(self.segment_seconds * self.fps))


@dataclass(frozen=True)
class SegmentGrid:
    """One window: per-modality chunks of shape (T, P, m, C) plus (T, P) labels."""

    window_id: str
    session_id: str
    start_s: float
    persons: tuple[str, ...]
    modalities: tuple[Modality, ...]
    chunks: Mapping[str, np.ndarray]
    speaking: np.ndarray
    biting: np.ndarray

    @property
    def num_segments(self) -> int:
        return self.speaking.shape[0]

    @property
    def num_persons(self) -> int:
        return len(self.persons)


def downsample(series: FrameSeries, target_fps: float) -> FrameSeries:
    """Pick, for every output timestamp, the nearest source frame.

    Binary flags are selected, never interpolated.
    """
    if target_fps <= 0:
        raise ValueError("target_fps must be positive")
    if target_fps > series.fps + 1e-12:
        raise ValueError(
            f"upsampling is unsupported: target {target_fps} fps exceeds source {series.fps} fps"
        )
    n_out = int(math.floor(len(series) * target_fps / series.fps + 1e-9))
    ratio = series.fps / target_fps
    idx = np.floor(np.arange(n_out) * ratio + 0.5).astype(int)
    idx = np.minimum(idx, len(series) - 1)
    return FrameSeries(series.modality, target_fps, series.values[idx])


def fill_missing(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Forward-fill non-finite frames; returns (filled, fully_missing).

    Leading gaps take the first valid frame. A stream with no valid frame is
    zero-filled and reported as fully missing.
    """
    values = np.array(values, dtype=np.float64, copy=True)
    if values.ndim == 1:
        values = values[:, None]
    valid = np.isfinite(values).all(axis=1)
    if not valid.any():
        return np.zeros_like(values), True
    if valid.all():
        return values, False
    last = np.where(valid, np.arange(len(values)), -1)
    last = np.maximum.accumulate(last)
    first_valid = int(np.argmax(valid))
    last[last < 0] = first_valid
    return values[last], False


def label_speaking(frames: Sequence[float] | np.ndarray, threshold: float = 0.30) -> bool:
    """True iff the speaking-frame fraction strictly exceeds ``threshold``."""
    frames = np.asarray(frames, dtype=np.float64).reshape(-1)
    if frames.size == 0:
        raise ValueError("cannot label an empty segment")
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    # integer comparison avoids float error exactly at the boundary
    speaking = int(np.count_nonzero(frames > 0.5))
    return speaking > threshold * frames.size + 1e-9 * frames.size


def label_bite(frames: Sequence[float] | np.ndarray) -> bool:
    frames = np.asarray(frames, dtype=np.float64).reshape(-1)
    if frames.size == 0:
        raise ValueError("cannot label an empty segment")
    return bool(np.any(frames > 0.5))


def class_weights(labels: Sequence[bool] | np.ndarray) -> tuple[float, float]:
    """Inverse class frequency weights ``total / (2 * count_c)``.

    An absent class gets weight 0 and triggers a warning.
    """
    labels = np.asarray(labels).reshape(-1).astype(bool)
    total = labels.size
    if total == 0:
        raise ValueError("class_weights needs at least one label")
    n_pos = int(labels.sum())
    n_neg = total - n_pos
    if n_pos == 0 or n_neg == 0:
        missing = "positive" if n_pos == 0 else "negative"
        warnings.warn(f"no {missing} examples; its class weight is set to 0", RuntimeWarning)
    w_neg = total / (2 * n_neg) if n_neg else 0.0
    w_pos = total / (2 * n_pos) if n_pos else 0.0
    return w_neg, w_pos


def _window_starts(duration_s: float, config: SegmentConfig) -> list[float]:
    starts = []
    k = 0
    while True:
        start = k * config.window_stride_s
        if start + config.window_seconds > duration_s + 1e-9:
            return starts
        starts.append(start)
        k += 1


def segment_session(timeline: SessionTimeline, config: SegmentConfig) -> list[SegmentGrid]:
    """Cut a session into full windows; trailing partial windows are dropped."""
    modalities = timeline.modalities
    kinds = {m.kind for m in modalities}
    if not {"speaker", "bite"} <= kinds:
        raise ValueError("labels need both speaker and bite streams")
    streams = {}
    for key, series in timeline.streams.items():
        if abs(series.fps - config.fps) > 1e-9:
            series = downsample(series, config.fps)
        streams[key] = series.values

    m = config.frames_per_segment
    T = config.segments_per_window
    P = len(timeline.persons)
    n_frames = min(v.shape[0] for v in streams.values())
    grids = []
    for w, start in enumerate(_window_starts(timeline.duration_s, config)):
        seg_starts = [
            int(round((start + t * config.segment_seconds) * config.fps)) for t in range(T)
        ]
        if seg_starts[-1] + m > n_frames:
            continue
        chunks = {}
        for mod in modalities:
            arr = np.empty((T, P, m, mod.channel_count))
            for i, person in enumerate(timeline.persons):
                values = streams[(person, mod.kind)]
                for t, s in enumerate(seg_starts):
                    arr[t, i] = values[s : s + m]
            arr.flags.writeable = False
            chunks[mod.kind] = arr
        speaking = np.array(
            [
                [label_speaking(chunks["speaker"][t, i, :, 0], config.speaking_threshold) for i in range(P)]
                for t in range(T)
            ]
        )
        biting = np.array(
            [[label_bite(chunks["bite"][t, i, :, 0]) for i in range(P)] for t in range(T)]
        )
        grids.append(
            SegmentGrid(
                window_id=f"{timeline.session_id}/w{w:04d}",
                session_id=timeline.session_id,
                start_s=start,
                persons=timeline.persons,
                modalities=modalities,
                chunks=chunks,
                speaking=speaking,
                biting=biting,
            )
        )
    return grids


def segment_sessions(timelines: Sequence[SessionTimeline], config: SegmentConfig) -> list[SegmentGrid]:
    grids = []
    for timeline in timelines:
        grids.extend(segment_session(timeline, config))
    return grids
