"""Leave-one-session-out folds and the three ablation axes.

Each ablation cell retrains tokenizers (when the segment length changes) and
the transformer on every fold, then reports ``mean ± std`` over folds.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Sequence

from .data_io import FoldSplit
from .metrics import METRIC_NAMES, AggregateMetrics, MetricsEntry, aggregate
from .pipeline import (
    PipelineConfig,
    SessionSource,
    build_model,
    encode_windows,
    evaluate,
    small_model,
    tokenizer_dims,
    train_model,
    train_tokenizers,
)
from .signal_model import DISCRETE_KINDS, MODALITY_ORDER, TASKS, segment_sessions
from .transformer import NumericalError
from .vq_tokenizer import TrainingDivergedError

log = logging.getLogger(__name__)

ABLATION_KINDS = ("drop_modality", "temporal_context", "segment_length")
TEMPORAL_CONTEXT_SEGMENTS = (2, 3, 6, 12)
SEGMENT_LENGTH_GRID = ((2, 18.0), (4, 9.0), (6, 6.0), (12, 3.0))

_HEADERS = {"accuracy": "Accuracy", "f1": "F1", "precision": "Precision", "recall": "Recall", "nmcc": "nMCC"}
_PRETTY = {"gaze": "Gaze", "headpose": "Headpose", "pose": "Pose", "word": "Word", "speaker": "Speaker", "bite": "Bite"}


@dataclass(frozen=True)
class AblationCell:
    label: str
    modalities: tuple[str, ...] = MODALITY_ORDER
    segments: int = 12
    segment_seconds: float = 3.0


@dataclass(frozen=True)
class AblationSpec:
    kind: str
    model_profile: str = "default"  # or "small"

    def __post_init__(self):
        if self.kind not in ABLATION_KINDS:
            raise ValueError(f"unknown ablation kind {self.kind!r}; expected one of {ABLATION_KINDS}")
        if self.model_profile not in ("default", "small"):
            raise ValueError("model_profile must be 'default' or 'small'")

    def cells(self) -> list[AblationCell]:
        if self.kind == "drop_modality":
            out = [AblationCell("All Features")]
            for kind in ("gaze", "headpose", "pose", "word", "speaker", "bite"):
                out.append(AblationCell(f"No {_PRETTY[kind]}", tuple(k for k in MODALITY_ORDER if k != kind)))
            out.append(AblationCell("Bite Only", ("bite",)))
            out.append(AblationCell("Speaker Only", ("speaker",)))
            return out
        if self.kind == "temporal_context":
            return [AblationCell(f"{n}×3s", segments=n, segment_seconds=3.0) for n in TEMPORAL_CONTEXT_SEGMENTS]
        return [AblationCell(f"{n}×{c:g}s", segments=n, segment_seconds=c) for n, c in SEGMENT_LENGTH_GRID]

    def rows(self, task: str) -> list[str]:
        """Row labels of the published table for ``task``."""
        labels = [c.label for c in self.cells()]
        if self.kind != "drop_modality":
            return labels
        # bite table omits "No Bite"/"Speaker Only"; speaking table omits "No Speaker"/"Bite Only"
        skip = {"No Bite", "Speaker Only"} if task == "bite" else {"No Speaker", "Bite Only"}
        return [lab for lab in labels if lab not in skip]


def cell_config(base: PipelineConfig, spec: AblationSpec, cell: AblationCell) -> PipelineConfig:
    window = cell.segments * cell.segment_seconds
    stride = base.segment.window_stride_s if spec.kind == "drop_modality" else window / 2
    segment = replace(
        base.segment,
        segment_seconds=cell.segment_seconds,
        segments_per_window=cell.segments,
        window_stride_s=stride,
    )
    model = small_model(base.model) if spec.model_profile == "small" else base.model
    return replace(base, segment=segment, model=model, modalities=cell.modalities)


@dataclass
class FoldResult:
    fold: FoldSplit
    metrics: dict[str, MetricsEntry] | None
    degenerate: dict[str, bool] = field(default_factory=dict)
    error: str | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.metrics is not None


def _split_validation(train_ids: Sequence[str], n_val: int) -> tuple[list[str], list[str]]:
    train_ids = list(train_ids)
    if n_val <= 0 or len(train_ids) <= n_val:
        return train_ids, []
    return train_ids[:-n_val], train_ids[-n_val:]


def run_fold(
    fold: FoldSplit,
    source: SessionSource,
    cfg: PipelineConfig,
    tokenizers: dict | None = None,
) -> FoldResult:
    """Train tokenizers and transformer on the fold's training sessions, test on the held-out one.

    Passing ``tokenizers`` reuses frozen tokenizers already fitted on this
    fold's training sessions.
    """
    started = datetime.now(timezone.utc).isoformat()
    seen = {phase: len(ids) for phase, ids in source.access.items()}
    fit_ids, val_ids = _split_validation(fold.train, cfg.train.val_sessions)
    manifest = {
        "fold_id": fold.fold_id,
        "train_sessions": list(fold.train),
        "validation_sessions": val_ids,
        "test_sessions": list(fold.test),
        "config": cfg.to_dict(),
        "started": started,
    }
    try:
        train_grids = segment_sessions(source.get(fit_ids, "tokenizer+transformer-train"), cfg.segment)
        val_grids = segment_sessions(source.get(val_ids, "transformer-validation"), cfg.segment) if val_ids else []
        if not train_grids:
            raise ValueError("training sessions are shorter than one window")
        if tokenizers is None:
            tokenizers, reports = train_tokenizers(train_grids, cfg)
            manifest["tokenizers"] = {
                k: None if r is None else {"final_loss": r.final_loss.total, "active_codes": r.active_codes}
                for k, r in reports.items()
            }
        kinds = list(cfg.modalities)
        train_data = encode_windows(train_grids, tokenizers, kinds)
        val_data = encode_windows(val_grids, tokenizers, kinds) if val_grids else None
        model = build_model(cfg, train_grids[0].num_persons, tokenizer_dims(tokenizers))
        history = train_model(model, train_data, val_data, cfg)
        test_grids = segment_sessions(source.get(fold.test, "evaluation"), cfg.segment)
        if not test_grids:
            raise ValueError("test session is shorter than one window")
        test_data = encode_windows(test_grids, tokenizers, kinds)
        result = evaluate(model, test_data, cfg.model.placeholder_scope)
    except (TrainingDivergedError, NumericalError) as exc:
        warnings.warn(f"fold {fold.fold_id} failed: {exc}", RuntimeWarning)
        manifest["error"] = str(exc)
        return FoldResult(fold, None, error=str(exc), manifest=manifest)
    degenerate = {task: not bool(test_data.labels[task].sum()) for task in result}
    for task, flag in degenerate.items():
        if flag:
            warnings.warn(f"fold {fold.fold_id}: test session has no positive {task} labels", RuntimeWarning)
    manifest.update(
        finished=datetime.now(timezone.utc).isoformat(),
        epochs_run=history.epochs_run,
        best_epoch=history.best_epoch,
        final_train_loss=history.losses[-1] if history.losses else None,
        class_weights={k: list(v) for k, v in history.class_weights.items()},
        metrics={task: e.as_dict() for task, e in result.items()},
        degenerate=degenerate,
        data_access={p: ids[seen.get(p, 0):] for p, ids in source.access.items() if ids[seen.get(p, 0):]},
    )
    return FoldResult(fold, result, degenerate, None, manifest)


def run_folds(folds: Sequence[FoldSplit], source: SessionSource, cfg: PipelineConfig) -> tuple[list[FoldResult], dict[str, AggregateMetrics]]:
    results = [run_fold(f, source, cfg) for f in folds]
    return results, aggregate_results(results)


def aggregate_results(results: Sequence[FoldResult]) -> dict[str, AggregateMetrics]:
    ok = [r for r in results if r.ok]
    if not ok:
        raise ValueError("no successful folds to aggregate")
    if len(ok) < len(results):
        warnings.warn(f"{len(results) - len(ok)} fold(s) failed and are excluded", RuntimeWarning)
    tasks = sorted({t for r in ok for t in r.metrics})
    return {task: aggregate([r.metrics.get(task) for r in ok]) for task in tasks}


@dataclass
class AblationTable:
    spec: AblationSpec
    cells: dict[str, dict[str, AggregateMetrics]]  # label -> task -> aggregate
    failed_folds: int = 0
    fold_manifests: list[dict] = field(default_factory=list)

    def format(self, task: str, include_accuracy: bool = False) -> str:
        names = ["f1", "precision", "recall", "nmcc"]
        if include_accuracy:
            names = ["accuracy", *names]
        rows = self.spec.rows(task)
        width = max(len("Features"), *(len(r) for r in rows)) + 2
        header = "Features".ljust(width) + "".join(_HEADERS[n].ljust(14) for n in names)
        lines = [f"[{task}]", header]
        for label in rows:
            agg = self.cells.get(label, {}).get(task)
            cells = [agg.formatted(n) if agg else "failed" for n in names]
            lines.append(label.ljust(width) + "".join(c.ljust(14) for c in cells))
        return "\n".join(lines)

    def to_record(self) -> dict:
        return {
            "kind": self.spec.kind,
            "model_profile": self.spec.model_profile,
            "rows": {
                task: {
                    label: (
                        {"mean": self.cells[label][task].mean, "std": self.cells[label][task].std, "folds": self.cells[label][task].num_folds}
                        if task in self.cells.get(label, {}) else None
                    )
                    for label in self.spec.rows(task)
                }
                for task in TASKS
            },
            "failed_folds": self.failed_folds,
            "folds": self.fold_manifests,
        }


def ablation_fold(
    spec: AblationSpec,
    source: SessionSource,
    fold: FoldSplit,
    base: PipelineConfig,
) -> dict[str, FoldResult]:
    """Every cell of ``spec`` on one fold; tokenizers are shared by cells with equal segmentation."""
    out = {}
    tokenizer_cache: dict[tuple, dict] = {}
    for cell in spec.cells():
        cfg = cell_config(base, spec, cell)
        start = time.monotonic()
        key = (cfg.segment.segment_seconds, cfg.segment.fps)
        needed = [k for k in cfg.modalities if k not in DISCRETE_KINDS]
        toks = tokenizer_cache.get(key, {})
        if any(k not in toks for k in needed):
            fit_ids, _ = _split_validation(fold.train, cfg.train.val_sessions)
            grids = segment_sessions(source.get(fit_ids, "tokenizer-train"), cfg.segment)
            toks, _ = train_tokenizers(grids, replace(cfg, modalities=MODALITY_ORDER))
            tokenizer_cache[key] = toks
        res = run_fold(fold, source, cfg, tokenizers=toks)
        res.manifest["cell"] = cell.label
        out[cell.label] = res
        log.info("fold %d, %s / %s: %.1fs", fold.fold_id, spec.kind, cell.label, time.monotonic() - start)
    return out


def ablation_table(spec: AblationSpec, per_fold: Sequence[dict[str, FoldResult]]) -> AblationTable:
    """Aggregate the output of :func:`ablation_fold` over folds."""
    cells, failed, manifests = {}, 0, []
    for cell in spec.cells():
        results = [f[cell.label] for f in per_fold if cell.label in f]
        manifests.extend(r.manifest for r in results)
        failed += sum(not r.ok for r in results)
        if any(r.ok for r in results):
            cells[cell.label] = aggregate_results(results)
    return AblationTable(spec, cells, failed, manifests)


def run_ablation(
    spec: AblationSpec,
    source: SessionSource,
    folds: Sequence[FoldSplit],
    base: PipelineConfig,
) -> AblationTable:
    """Train and evaluate every cell of ``spec`` on every fold."""
    return ablation_table(spec, [ablation_fold(spec, source, f, base) for f in folds])


def format_fold_table(aggregates: dict[str, AggregateMetrics], include_accuracy: bool = False) -> str:
    names = [n for n in METRIC_NAMES if n != "mcc" and (include_accuracy or n != "accuracy")]
    lines = ["Task      " + "".join(n.ljust(14) for n in names)]
    for task, agg in aggregates.items():
        lines.append(task.ljust(10) + "".join(agg.formatted(n).ljust(14) for n in names))
    return "\n".join(lines)

