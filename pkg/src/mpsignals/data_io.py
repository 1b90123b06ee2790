"""Session storage, synthetic multi-party sessions, their Bayes oracle, and folds.

On-disk layout of a dataset::

    root/manifest.json                  {"format_version", "fps", "channels", "sessions"}
    root/<session>/metadata.json        {"format_version", "session_id", "persons", "fps",
                                         "duration_s", "channels"}
    root/<session>/<person>__<kind>.csv header "timestamp,c0,c1,...", one row per frame

Empty or ``nan`` cells mark tracking dropout; they are forward-filled on load.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .signal_model import (
    FrameSeries,
    Modality,
    SegmentGrid,
    SessionTimeline,
    default_modalities,
    fill_missing,
    modalities_from_channels,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
METADATA_NAME = "metadata.json"
_LOGIT_CLAMP = 30.0


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifest and session files


@dataclass
class DatasetManifest:
    root: Path
    sessions: list[str]
    channels: dict[str, int]
    fps: float
    format_version: int = FORMAT_VERSION

    def session_dir(self, session_id: str) -> Path:
        return self.root / session_id

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "fps": self.fps,
            "channels": self.channels,
            "sessions": self.sessions,
        }


def stream_filename(person: str, kind: str) -> str:
    return f"{person}__{kind}.csv"


def _fmt(v: float) -> str:
    return repr(float(v))


def write_sessions(sessions: Sequence[SessionTimeline], root: str | Path) -> DatasetManifest:
    """Write sessions under ``root``; the inverse of :func:`load_sessions`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not sessions:
        raise ValueError("nothing to write")
    channels = {m.kind: m.channel_count for m in sessions[0].modalities}
    fps_values = {s.fps for s in sessions[0].streams.values()}
    if len(fps_values) != 1:
        raise ValueError("all streams must share one frame rate to be written")
    fps = fps_values.pop()
    for session in sessions:
        d = root / session.session_id
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": FORMAT_VERSION,
            "session_id": session.session_id,
            "persons": list(session.persons),
            "fps": fps,
            "duration_s": session.duration_s,
            "channels": {m.kind: m.channel_count for m in session.modalities},
        }
        (d / METADATA_NAME).write_text(json.dumps(meta, indent=2) + "\n")
        for (person, kind), series in sorted(session.streams.items()):
            if series.fps != fps:
                raise ValueError(f"stream ({person}, {kind}) is not at {fps} fps")
            C = series.modality.channel_count
            with open(d / stream_filename(person, kind), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["timestamp", *(f"c{c}" for c in range(C))])
                for j, row in enumerate(series.values):
                    writer.writerow([_fmt(j / fps), *(_fmt(v) for v in row)])
    manifest = DatasetManifest(root, [s.session_id for s in sessions], channels, fps)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return manifest


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("format_version", "fps", "channels", "sessions"):
        if key not in raw:
            raise SchemaError(f"{path}: missing key {key!r}")
    if raw["format_version"] != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported format_version {raw['format_version']}")
    manifest = DatasetManifest(path.parent, list(raw["sessions"]), dict(raw["channels"]), float(raw["fps"]))
    for sid in manifest.sessions:
        d = manifest.session_dir(sid)
        if not d.is_dir():
            raise SchemaError(f"{path}: session directory {d} does not exist")
        if not (d / METADATA_NAME).exists():
            raise SchemaError(f"{d}: missing {METADATA_NAME}")
    return manifest


def _read_stream(path: Path, modality: Modality) -> tuple[np.ndarray, np.ndarray]:
    C = modality.channel_count
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["timestamp", *(f"c{c}" for c in range(C))]
        if header != expected:
            raise SchemaError(f"{path}:1: expected header {','.join(expected)}, got {header}")
        times, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != C + 1:
                raise SchemaError(f"{path}:{lineno}: expected {C + 1} columns, got {len(row)}")
            try:
                times.append(float(row[0]))
                rows.append([float(v) if v.strip() else math.nan for v in row[1:]])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    times = np.array(times)
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        raise SchemaError(f"{path}: timestamps must be strictly increasing")
    return times, np.array(rows, dtype=np.float64).reshape(len(rows), C)


def _align(times: np.ndarray, values: np.ndarray, fps: float, n: int) -> np.ndarray:
    """Nearest-timestamp resampling onto the common clock j / fps."""
    grid = np.arange(n) / fps
    if len(times) == n and np.allclose(times, grid, rtol=0, atol=1e-9):
        return values
    if len(times) == 1:
        return np.repeat(values, n, axis=0)
    pos = np.clip(np.searchsorted(times, grid), 1, len(times) - 1)
    left = times[pos - 1]
    right = times[pos]
    idx = np.where(grid - left <= right - grid, pos - 1, pos)
    return values[idx]


def load_session(directory: str | Path, access_log: list[Path] | None = None) -> SessionTimeline:
    d = Path(directory)
    meta_path = d / METADATA_NAME
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{meta_path}: {exc}") from exc
    if access_log is not None:
        access_log.append(meta_path)
    for key in ("session_id", "persons", "fps", "duration_s", "channels"):
        if key not in meta:
            raise SchemaError(f"{meta_path}: missing key {key!r}")
    fps = float(meta["fps"])
    duration = float(meta["duration_s"])
    modalities = modalities_from_channels(meta["channels"])
    n = int(round(duration * fps))
    streams, flags = {}, {}
    for person in meta["persons"]:
        for mod in modalities:
            path = d / stream_filename(person, mod.kind)
            if not path.exists():
                raise SchemaError(f"{d}: missing stream for ({person}, {mod.kind})")
            if access_log is not None:
                access_log.append(path)
            times, values = _read_stream(path, mod)
            if len(times) == 0:
                values, missing = np.zeros((n, mod.channel_count)), True
            else:
                covered = times[-1] + 1.0 / fps
                if abs(covered - duration) > 1.0 / fps + 1e-9:
                    raise SchemaError(
                        f"{path}: stream covers {covered:.3f}s but session duration is {duration:.3f}s"
                    )
                values, missing = fill_missing(_align(times, values, fps, n))
            if missing:
                flags[(person, mod.kind)] = "zero-filled"
            streams[(person, mod.kind)] = FrameSeries(mod, fps, values)
    return SessionTimeline(meta["session_id"], tuple(meta["persons"]), streams, duration, flags)


def load_sessions(
    manifest: DatasetManifest | str | Path,
    session_ids: Sequence[str] | None = None,
    access_log: list[Path] | None = None,
) -> list[SessionTimeline]:
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    wanted = manifest.sessions if session_ids is None else list(session_ids)
    unknown = set(wanted) - set(manifest.sessions)
    if unknown:
        raise KeyError(f"sessions not in manifest: {sorted(unknown)}")
    return [load_session(manifest.session_dir(sid), access_log) for sid in wanted]


# ---------------------------------------------------------------------------
# synthetic sessions


@dataclass(frozen=True)
class SyntheticConfig:
    """Generative rules at segment granularity.

    speaking(t, i) ~ Bernoulli(sigmoid(speak_bias + a * sum_{j!=i} spoke(t-1, j)
                                       + b * #{k != i looking at i at t} + noise))
    biting(t, i)   ~ Bernoulli(sigmoid(bite_bias + c * [all others silent at t]
                                       + d * [i silent at t-1] + noise))

    Each person looks down with probability ``gaze_down_prob`` and otherwise at
    a uniformly chosen other person; noise is Gaussian on the logit.
    """

    num_sessions: int = 30
    persons_per_session: int = 3
    duration_s: float = 180.0
    fps: float = 15.0
    segment_seconds: float = 3.0
    seed: int = 0
    speak_bias: float = -2.0
    a: float = 1.0
    b: float = 2.0
    bite_bias: float = -2.5
    c: float = 1.5
    d: float = 0.5
    noise_scale: float = 0.0
    gaze_down_prob: float = 0.25
    pose_keypoints: int = 7
    word_dim: int = 16
    signal_noise: float = 0.05

    def __post_init__(self):
        if self.persons_per_session < 2:
            raise ValueError("need at least two persons per session")
        if self.num_sessions < 1 or self.duration_s < self.segment_seconds:
            raise ValueError("need at least one session of at least one segment")
        if not 0 <= self.gaze_down_prob <= 1:
            raise ValueError("gaze_down_prob must be a probability")
        if self.noise_scale < 0 or self.signal_noise < 0:
            raise ValueError("noise scales must be nonnegative")

    @property
    def num_segments(self) -> int:
        return int(math.ceil(self.duration_s / self.segment_seconds - 1e-9))

    @property
    def frames_per_segment(self) -> int:
        return int(round(self.segment_seconds * self.fps))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SessionLatents:
    session_id: str
    gaze: np.ndarray  # (n_seg, P) target person; own index = looking down
    speaking: np.ndarray  # (n_seg, P) bool
    biting: np.ndarray  # (n_seg, P) bool


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -_LOGIT_CLAMP, _LOGIT_CLAMP)))


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(48)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def expected_sigmoid(logit, noise_scale: float):
    """E[sigmoid(logit + noise_scale * N(0, 1))] by Gauss-Hermite quadrature."""
    logit = np.asarray(logit, dtype=np.float64)
    if noise_scale == 0:
        return _sigmoid(logit)
    return (_sigmoid(logit[..., None] + noise_scale * _GH_NODES) * _GH_WEIGHTS).sum(-1)


def _gaze_probs(cfg: SyntheticConfig, k: int) -> np.ndarray:
    P = cfg.persons_per_session
    p = np.full(P, (1 - cfg.gaze_down_prob) / (P - 1))
    p[k] = cfg.gaze_down_prob
    return p


def _session_rng(cfg: SyntheticConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))


def _looked_at(gaze: np.ndarray) -> np.ndarray:
    """(..., P) gaze targets -> (..., P) count of *other* persons looking at each person."""
    P = gaze.shape[-1]
    counts = np.zeros(gaze.shape, dtype=np.int64)
    for k in range(P):
        hit = gaze[..., k][..., None] == np.arange(P)
        hit[..., k] = False
        counts += hit
    return counts


def _speak_logit(cfg: SyntheticConfig, prev: np.ndarray, looked: np.ndarray) -> np.ndarray:
    prev = prev.astype(np.float64)
    others_prev = prev.sum(-1, keepdims=True) - prev
    return cfg.speak_bias + cfg.a * others_prev + cfg.b * looked


def _silent_others(speaking: np.ndarray) -> np.ndarray:
    s = speaking.astype(np.int64)
    return (s.sum(-1, keepdims=True) - s) == 0


def _bite_logit(cfg: SyntheticConfig, silent_others: np.ndarray, prev: np.ndarray) -> np.ndarray:
    return cfg.bite_bias + cfg.c * silent_others + cfg.d * (1 - prev.astype(np.float64))


def generate_latents(cfg: SyntheticConfig) -> list[SessionLatents]:
    """Segment-level gaze targets and labels, one record per session."""
    out = []
    P = cfg.persons_per_session
    n = cfg.num_segments
    for index in range(cfg.num_sessions):
        rng = _session_rng(cfg, index)
        gaze = np.empty((n, P), dtype=np.int64)
        speaking = np.zeros((n, P), dtype=bool)
        biting = np.zeros((n, P), dtype=bool)
        cdf = np.cumsum([_gaze_probs(cfg, k) for k in range(P)], axis=1)
        cdf[:, -1] = 1.0
        prev = np.zeros(P, dtype=bool)
        for t in range(n):
            # inverse-CDF draw of each person's gaze target
            gaze[t] = (rng.random(P)[:, None] >= cdf).sum(1)
            eta = _speak_logit(cfg, prev, _looked_at(gaze[t]))
            speaking[t] = rng.random(P) < _sigmoid(eta + cfg.noise_scale * rng.standard_normal(P))
            eta_b = _bite_logit(cfg, _silent_others(speaking[t]), prev)
            biting[t] = rng.random(P) < _sigmoid(eta_b + cfg.noise_scale * rng.standard_normal(P))
            prev = speaking[t]
        out.append(SessionLatents(f"syn{index:03d}", gaze, speaking, biting))
    return out


def _seat_angles(P: int) -> np.ndarray:
    return 2 * np.pi * np.arange(P) / P


def _gaze_direction(P: int, k: int, target: int) -> tuple[float, float]:
    """(yaw, pitch) for person k looking at ``target``; looking at self means down at the plate."""
    if target == k:
        return 0.0, -0.6
    ang = _seat_angles(P)
    pos = np.stack([np.cos(ang), np.sin(ang)], 1)
    facing = -pos[k]
    to = pos[target] - pos[k]
    yaw = math.atan2(facing[0] * to[1] - facing[1] * to[0], float(facing @ to))
    return yaw, 0.0


def _ou(mean: np.ndarray, noise: float, rng: np.random.Generator, theta: float = 0.3) -> np.ndarray:
    """AR(1) smoothing toward a time-varying mean (discretized Ornstein-Uhlenbeck), per column."""
    drive = theta * mean + noise * rng.standard_normal(mean.shape)
    zi = ((1 - theta) * mean[0])[None, :]
    return lfilter([1.0], [1.0, -(1 - theta)], drive, axis=0, zi=zi)[0]


def _session_frames(cfg: SyntheticConfig, lat: SessionLatents, index: int) -> SessionTimeline:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, 1]))
    P = cfg.persons_per_session
    m = cfg.frames_per_segment
    n_frames = int(round(cfg.duration_s * cfg.fps))
    seg_of = np.minimum(np.arange(n_frames) // m, cfg.num_segments - 1)
    mods = {mod.kind: mod for mod in default_modalities(cfg.pose_keypoints, cfg.word_dim)}
    K = cfg.pose_keypoints
    persons = tuple(f"p{i}" for i in range(P))
    template = rng.normal(0, 0.3, size=(K, 2))
    streams = {}
    for i, person in enumerate(persons):
        speak = np.zeros(n_frames)
        bite = np.zeros(n_frames)
        for t in range(cfg.num_segments):
            lo = t * m
            hi = min(lo + m, n_frames)
            width = hi - lo
            if width <= 0:
                break
            if lat.speaking[t, i]:
                run = int(rng.integers(int(math.ceil(0.5 * width)), width + 1))
            else:
                run = int(rng.integers(0, int(math.floor(0.2 * width)) + 1))
            if run:
                s = int(rng.integers(0, width - run + 1))
                speak[lo + s : lo + s + run] = 1
            if lat.biting[t, i]:
                hits = rng.choice(width, size=min(width, int(rng.integers(1, 4))), replace=False)
                bite[lo + hits] = 1

        directions = np.array([_gaze_direction(P, i, int(g)) for g in lat.gaze[:, i]])
        gaze_mean = directions[seg_of]
        near_bite = np.convolve(bite, np.ones(5), mode="same") > 0
        head_mean = np.stack(
            [0.7 * gaze_mean[:, 0], 0.5 * gaze_mean[:, 1] - 0.3 * near_bite, np.zeros(n_frames)], 1
        )
        pose_mean = np.repeat((template + rng.normal(0, 0.05, size=(K, 2))).reshape(1, -1), n_frames, 0)
        # wrist (keypoint 0) to mouth (keypoint 1) around bites; keypoint 2 gestures while speaking
        pose_mean[:, 0:2] += near_bite[:, None] * (template[1] - template[0])
        if K > 2:
            pose_mean[:, 4:6] += 0.2 * speak[:, None] * np.sin(np.arange(n_frames) / 2.0)[:, None]
        voice = rng.normal(0, 1, size=cfg.word_dim)
        voice /= np.linalg.norm(voice)
        word_mean = speak[:, None] * voice[None, :]

        for kind, mean in (("gaze", gaze_mean), ("headpose", head_mean), ("pose", pose_mean), ("word", word_mean)):
            streams[(person, kind)] = FrameSeries(mods[kind], cfg.fps, _ou(mean, cfg.signal_noise, rng))
        streams[(person, "speaker")] = FrameSeries(mods["speaker"], cfg.fps, speak)
        streams[(person, "bite")] = FrameSeries(mods["bite"], cfg.fps, bite)
    return SessionTimeline(lat.session_id, persons, streams, n_frames / cfg.fps)


def generate_synthetic(cfg: SyntheticConfig) -> list[SessionTimeline]:
    """Synthetic sessions; a deterministic function of ``cfg`` (including its seed)."""
    return [_session_frames(cfg, lat, n) for n, lat in enumerate(generate_latents(cfg))]


# ---------------------------------------------------------------------------
# exact posteriors for the synthetic family


def _gaze_configs(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """All joint gaze assignments (G, P) and their probabilities (G,)."""
    P = cfg.persons_per_session
    configs = np.array(list(product(range(P), repeat=P)), dtype=np.int64)
    probs = np.ones(len(configs))
    for k in range(P):
        probs *= _gaze_probs(cfg, k)[configs[:, k]]
    keep = probs > 0
    return configs[keep], probs[keep]


def _prev_states(P: int) -> np.ndarray:
    return np.array(list(product((0, 1), repeat=P)), dtype=bool)


def _state_index(states: np.ndarray) -> np.ndarray:
    P = states.shape[-1]
    weights = 2 ** np.arange(P - 1, -1, -1)
    return (states.astype(np.int64) * weights).sum(-1)


def _past_only_tables(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """(2^P, P) tables of P(speaking=1 | past) and P(biting=1 | past), indexed by the previous state."""
    configs, gprob = _gaze_configs(cfg)
    looked = _looked_at(configs)  # (G, P)
    states = _prev_states(cfg.persons_per_session)
    speak = np.empty(states.shape)
    bite = np.empty(states.shape)
    for n, prev in enumerate(states):
        p = expected_sigmoid(_speak_logit(cfg, prev[None, :], looked), cfg.noise_scale)  # (G, P)
        speak[n] = gprob @ p
        silent = _all_others_silent(p)
        f1 = expected_sigmoid(_bite_logit(cfg, np.ones_like(prev), prev), cfg.noise_scale)
        f0 = expected_sigmoid(_bite_logit(cfg, np.zeros_like(prev), prev), cfg.noise_scale)
        bite[n] = gprob @ (silent * f1 + (1 - silent) * f0)
    return speak, bite


def _all_others_silent(p: np.ndarray) -> np.ndarray:
    """(G, P) speaking probabilities -> P(every other person silent), per person."""
    P = p.shape[1]
    out = np.empty_like(p)
    for i in range(P):
        out[:, i] = np.prod(np.delete(1 - p, i, axis=1), axis=1)
    return out


@dataclass
class OraclePosteriors:
    session_id: str
    speaking: np.ndarray  # (n_seg, P) posterior P(label = 1)
    bite: np.ndarray
    speaking_labels: np.ndarray
    bite_labels: np.ndarray


@dataclass
class OracleReport:
    scope: str
    sessions: list[OraclePosteriors]
    f1: dict[str, float] = field(default_factory=dict)

    def cells_f1(self, cells: Sequence[tuple[str, int, int]]) -> dict[str, float]:
        """F1 of the thresholded posterior restricted to (session, segment, person) cells."""
        by_id = {s.session_id: s for s in self.sessions}
        out = {}
        for task in ("speaking", "bite"):
            preds, labels = [], []
            for sid, t, i in cells:
                s = by_id[sid]
                preds.append(getattr(s, task)[t, i] > 0.5)
                labels.append(getattr(s, f"{task}_labels")[t, i])
            out[task] = _f1(np.array(preds), np.array(labels))
        return out


def _f1(preds: np.ndarray, labels: np.ndarray) -> float:
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    fn = int(np.sum(~preds & labels))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def bayes_oracle(cfg: SyntheticConfig, scope: str = "full", latents: list[SessionLatents] | None = None) -> OracleReport:
    """Exact label posteriors under the generative rules.

    ``full`` conditions on every signal from earlier segments and on the
    concurrent signals of the other persons; ``past-only`` conditions on
    earlier segments alone. Achievable F1 thresholds the posterior at 0.5.
    """
    if scope not in ("full", "past-only"):
        raise ValueError("scope must be 'full' or 'past-only'")
    latents = latents if latents is not None else generate_latents(cfg)
    P = cfg.persons_per_session
    results = []
    if scope == "past-only":
        speak_table, bite_table = _past_only_tables(cfg)
    for lat in latents:
        prev = np.vstack([np.zeros((1, P), dtype=bool), lat.speaking[:-1]])
        if scope == "past-only":
            idx = _state_index(prev)
            sp, bp = speak_table[idx], bite_table[idx]
        else:
            sp, bp = _full_posteriors(cfg, lat, prev)
        results.append(OraclePosteriors(lat.session_id, sp, bp, lat.speaking.copy(), lat.biting.copy()))
    report = OracleReport(scope, results)
    for task in ("speaking", "bite"):
        preds = np.concatenate([getattr(r, task).ravel() > 0.5 for r in results])
        labels = np.concatenate([getattr(r, f"{task}_labels").ravel() for r in results])
        report.f1[task] = _f1(preds, labels)
    return report


def _full_posteriors(cfg: SyntheticConfig, lat: SessionLatents, prev: np.ndarray):
    P = cfg.persons_per_session
    looked = _looked_at(lat.gaze)  # own gaze never counts toward oneself
    prior = expected_sigmoid(_speak_logit(cfg, prev, looked), cfg.noise_scale)  # (n, P)
    speak_post = np.empty_like(prior)
    for i in range(P):
        like = {}
        for s_i in (0, 1):
            s = lat.speaking.copy()
            s[:, i] = bool(s_i)
            pb = expected_sigmoid(_bite_logit(cfg, _silent_others(s), prev), cfg.noise_scale)
            obs = np.where(lat.biting, pb, 1 - pb)
            obs[:, i] = 1.0  # own concurrent bite is not observed
            like[s_i] = np.prod(obs, axis=1)
        num = prior[:, i] * like[1]
        speak_post[:, i] = num / (num + (1 - prior[:, i]) * like[0])
    bite_post = expected_sigmoid(_bite_logit(cfg, _silent_others(lat.speaking), prev), cfg.noise_scale)
    return speak_post, bite_post


def analytic_base_rates(cfg: SyntheticConfig) -> dict[str, float]:
    """Stationary positive rates of the speaking and biting labels."""
    P = cfg.persons_per_session
    configs, gprob = _gaze_configs(cfg)
    looked = _looked_at(configs)
    states = _prev_states(P)
    S = len(states)
    trans = np.zeros((S, S))
    bite_given = np.zeros((S, S))  # mean bite prob over persons for (prev, next)
    for a, prev in enumerate(states):
        p = expected_sigmoid(_speak_logit(cfg, prev[None, :], looked), cfg.noise_scale)  # (G, P)
        for b, nxt in enumerate(states):
            lik = np.prod(np.where(nxt, p, 1 - p), axis=1)
            trans[a, b] = gprob @ lik
            bite_given[a, b] = expected_sigmoid(_bite_logit(cfg, _silent_others(nxt), prev), cfg.noise_scale).mean()
    evals, evecs = np.linalg.eig(trans.T)
    pi = np.real(evecs[:, np.argmin(np.abs(evals - 1))])
    pi = pi / pi.sum()
    speak_rate = float(pi @ states.mean(axis=1))
    bite_rate = float(np.sum(pi[:, None] * trans * bite_given))
    return {"speaking": speak_rate, "bite": bite_rate}


def window_cells(grids: Sequence[SegmentGrid], segment_seconds: float) -> list[tuple[str, int, int]]:
    """(session, session-level segment, person) for every labelled cell of the windows."""
    cells = []
    for g in grids:
        base = int(round(g.start_s / segment_seconds))
        for t in range(g.num_segments):
            for i in range(g.num_persons):
                cells.append((g.session_id, base + t, i))
    return cells


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train: tuple[str, ...]
    test: tuple[str, ...]


def make_folds(session_ids: Sequence[str], num_folds: int, seed: int = 0) -> list[FoldSplit]:
    """Hold out one distinct, seeded-random session per fold; train on all others."""
    ids = list(session_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("session ids must be unique")
    if num_folds < 1:
        raise ValueError("num_folds must be positive")
    if num_folds > len(ids):
        raise ValueError(f"cannot make {num_folds} folds from {len(ids)} sessions")
    rng = np.random.default_rng(seed)
    held = rng.choice(len(ids), size=num_folds, replace=False)
    return [
        FoldSplit(n, tuple(s for s in ids if s != ids[h]), (ids[h],))
        for n, h in enumerate(held)
    ]
