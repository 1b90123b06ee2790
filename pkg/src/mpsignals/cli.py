"""``mpsignals`` command line.

Exit codes: 0 success, 1 I/O failure, 2 usage/config/missing prerequisite,
3 numerical failure (diverged training, non-finite activations).

Environment: ``MPSIGNALS_OUT_ROOT`` prefixes relative ``--out`` paths and
``MPSIGNALS_JOBS`` sets the default for ``--jobs``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .block_mask import MASK_KINDS, MaskSpec, MaskTooLargeError, build_mask, dump_mask_text, export_mask_bitmap
from .data_io import (
    SchemaError,
    SyntheticConfig,
    analytic_base_rates,
    generate_latents,
    generate_synthetic,
    make_folds,
    read_manifest,
    write_sessions,
)
from .eval_harness import (
    ABLATION_KINDS,
    AblationSpec,
    ablation_fold,
    ablation_table,
    format_fold_table,
)
from .metrics import aggregate
from .pipeline import (
    PipelineConfig,
    SessionSource,
    build_model,
    default_config,
    encode_windows,
    evaluate,
    load_model,
    save_model,
    smoke_config,
    tokenizer_dims,
    train_model,
    train_modality_tokenizer,
)
from .signal_model import DISCRETE_KINDS, MODALITY_ORDER, segment_sessions
from .transformer import NumericalError
from .vq_tokenizer import TrainingDivergedError, load_tokenizer, save_tokenizer

RUN_MANIFEST_VERSION = 1
OUT_ROOT_ENV = "MPSIGNALS_OUT_ROOT"
JOBS_ENV = "MPSIGNALS_JOBS"

log = logging.getLogger("mpsignals")


class UsageError(Exception):
    """Bad flags, bad config, output collision or missing prerequisite (exit 2)."""


class NumericalFailure(Exception):
    """Exit 3."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    num_folds: int | None = None  # None: one fold per session
    fold_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "synthetic": self.synthetic.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "evaluation": {"num_folds": self.num_folds, "fold_seed": self.fold_seed},
        }


def profile_config(name: str) -> RunConfig:
    if name == "smoke":
        return RunConfig(SyntheticConfig(num_sessions=6, fps=5.0), smoke_config(), num_folds=2)
    return RunConfig(SyntheticConfig(), default_config())


def _merge(base: dict, override: Mapping) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_run_config(path: str | None, profile: str, seed: int | None) -> RunConfig:
    """Profile defaults, overridden by a YAML/JSON file, overridden by ``--seed``."""
    cfg = profile_config(profile)
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"{path}: not valid YAML/JSON: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise UsageError(f"{path}: top level must be a mapping")
        unknown = set(raw) - {"synthetic", "pipeline", "evaluation"}
        if unknown:
            raise UsageError(f"{path}: unknown sections {sorted(unknown)}")
        try:
            syn = _merge(cfg.synthetic.to_dict(), raw.get("synthetic") or {})
            bad = set(syn) - {f.name for f in fields(SyntheticConfig)}
            if bad:
                raise ValueError(f"unknown synthetic keys {sorted(bad)}")
            pipe = PipelineConfig.from_dict(_merge(cfg.pipeline.to_dict(), raw.get("pipeline") or {}))
            ev = raw.get("evaluation") or {}
            bad = set(ev) - {"num_folds", "fold_seed"}
            if bad:
                raise ValueError(f"unknown evaluation keys {sorted(bad)}")
            cfg = RunConfig(
                SyntheticConfig(**syn),
                pipe,
                ev.get("num_folds", cfg.num_folds),
                int(ev.get("fold_seed", cfg.fold_seed)),
            )
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{path}: {exc}") from exc
    if seed is not None:
        cfg = replace(cfg, synthetic=replace(cfg.synthetic, seed=seed), pipeline=replace(cfg.pipeline, seed=seed), fold_seed=seed)
    return cfg


# ---------------------------------------------------------------------------
# run manifests and artifact plumbing


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_tree(root: Path, skip: Sequence[str] = ()) -> str:
    """Hash of every file under ``root`` (relative names and contents)."""
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name not in skip):
        h.update(str(path.relative_to(root)).encode())
        h.update(sha256_file(path).encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: str | None = None
    results: dict = field(default_factory=dict)
    format_version: int = RUN_MANIFEST_VERSION

    def write(self, path: Path):
        self.finished = datetime.now(timezone.utc).isoformat()
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        payload["package_version"] = __version__
        path.write_text(json.dumps(payload, indent=2, default=str) + "\n")


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def claim_outputs(paths: Sequence[Path], force: bool):
    """Refuse to overwrite existing artifacts unless ``force``."""
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    for p in paths:
        p.parent.mkdir(parents=True, exist_ok=True)


def open_dataset(path: str):
    try:
        return read_manifest(path)
    except FileNotFoundError as exc:
        raise UsageError(f"missing dataset: {exc}") from exc


def select_fold(ids: Sequence[str], cfg: RunConfig, fold: int):
    n = cfg.num_folds or len(ids)
    if n > len(ids):
        raise UsageError(f"{n} folds requested but the dataset has {len(ids)} sessions")
    folds = make_folds(ids, n, cfg.fold_seed)
    if not 0 <= fold < len(folds):
        raise UsageError(f"--fold must be in [0, {len(folds)})")
    return folds[fold], folds


def fit_and_validation(fold, cfg: PipelineConfig) -> tuple[list[str], list[str]]:
    train = list(fold.train)
    n = cfg.train.val_sessions
    if n <= 0 or len(train) <= n:
        return train, []
    return train[:-n], train[-n:]


def run_manifest_path(out: Path, name: str) -> Path:
    return out / f"{name}.run.json"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, args.profile, args.seed)
    syn = cfg.synthetic
    if args.sessions is not None:
        syn = replace(syn, num_sessions=args.sessions)
    out = resolve_out(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"refusing to overwrite non-empty {out} (use --force)")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    manifest = RunManifest("synth", {"synthetic": syn.to_dict()}, {"root": syn.seed})
    sessions = generate_synthetic(syn)
    write_sessions(sessions, out)
    latents = generate_latents(syn)
    rates = {
        "speaking": float(np.mean([lat.speaking.mean() for lat in latents])),
        "bite": float(np.mean([lat.biting.mean() for lat in latents])),
    }
    manifest.artifacts = {"dataset": str(out), "sha256": sha256_tree(out, skip=("synth.run.json",))}
    manifest.results = {"sessions": len(sessions), "base_rates": rates, "analytic_base_rates": analytic_base_rates(syn)}
    manifest.write(run_manifest_path(out, "synth"))
    print(
        f"{len(sessions)} sessions x {syn.persons_per_session} persons written to {out}; "
        f"speaking rate {rates['speaking']:.3f}, bite rate {rates['bite']:.3f}"
    )
    return 0


def cmd_train_vqvae(args) -> int:
    cfg = load_run_config(args.config, args.profile, args.seed)
    if args.modality in DISCRETE_KINDS:
        raise UsageError(f"{args.modality} is a discrete stream and is embedded directly; no tokenizer to train")
    dataset = open_dataset(args.data)
    fold, _ = select_fold(dataset.sessions, cfg, args.fold)
    fit_ids, _ = fit_and_validation(fold, cfg.pipeline)
    out = resolve_out(args.out)
    artifact = out / f"{args.modality}.pt"
    record = run_manifest_path(out, f"vqvae-{args.modality}")
    claim_outputs([artifact, record], args.force)
    manifest = RunManifest(
        "train-vqvae",
        cfg.to_dict(),
        {"root": cfg.pipeline.seed, "fold": cfg.fold_seed},
        inputs={"dataset": str(dataset.root), "dataset_sha256": sha256_tree(dataset.root, skip=("synth.run.json",))},
    )
    source = SessionSource(dataset)
    grids = segment_sessions(source.get(fit_ids, "tokenizer-train"), cfg.pipeline.segment)
    if not grids:
        raise UsageError("training sessions are shorter than one window")
    try:
        tokenizer, report = train_modality_tokenizer(grids, args.modality, cfg.pipeline)
    except TrainingDivergedError as exc:
        raise NumericalFailure(str(exc)) from exc
    save_tokenizer(tokenizer, artifact)
    manifest.artifacts = {"tokenizer": str(artifact.resolve()), "sha256": sha256_file(artifact)}
    manifest.results = {
        "fold": fold.fold_id,
        "train_sessions": fit_ids,
        "held_out": list(fold.test),
        "data_access": source.access,
    }
    if report is not None:
        manifest.results.update(final_loss=report.final_loss.total, active_codes=report.active_codes, epochs_run=report.epochs_run)
        summary = f"final loss {report.final_loss.total:.4f}, {report.active_codes} active codes"
    else:
        summary = "mean-pool tokenizer (no training)"
    manifest.write(record)
    print(f"{args.modality} tokenizer -> {artifact}: {summary}")
    return 0


def _load_tokenizers(directory: Path, kinds: Sequence[str], held_out: Sequence[str]):
    tokenizers, paths = {}, {}
    for kind in kinds:
        if kind in DISCRETE_KINDS:
            continue
        path = directory / f"{kind}.pt"
        if not path.exists():
            raise UsageError(f"missing prerequisite: frozen {kind} tokenizer {path} (run train-vqvae --modality {kind})")
        record = run_manifest_path(directory, f"vqvae-{kind}")
        if record.exists():
            seen = json.loads(record.read_text()).get("results", {}).get("train_sessions", [])
            leaked = set(seen) & set(held_out)
            if leaked:
                raise UsageError(f"{kind} tokenizer was fit on held-out session(s) {sorted(leaked)}")
        tokenizers[kind] = load_tokenizer(path)
        paths[kind] = str(path.resolve())
    return tokenizers, paths


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.profile, args.seed)
    dataset = open_dataset(args.data)
    fold, _ = select_fold(dataset.sessions, cfg, args.fold)
    fit_ids, val_ids = fit_and_validation(fold, cfg.pipeline)
    tok_dir = resolve_out(args.tokenizers)
    tokenizers, tok_paths = _load_tokenizers(tok_dir, cfg.pipeline.modalities, fold.test)
    out = resolve_out(args.out)
    artifact = out / "model.pt"
    record = run_manifest_path(out, "train")
    claim_outputs([artifact, record], args.force)
    manifest = RunManifest(
        "train",
        cfg.to_dict(),
        {"root": cfg.pipeline.seed, "fold": cfg.fold_seed},
        inputs={
            "dataset": str(dataset.root),
            "dataset_sha256": sha256_tree(dataset.root, skip=("synth.run.json",)),
            "tokenizers": {k: {"path": p, "sha256": sha256_file(Path(p))} for k, p in tok_paths.items()},
        },
    )
    source = SessionSource(dataset)
    seg = cfg.pipeline.segment
    kinds = list(cfg.pipeline.modalities)
    train_grids = segment_sessions(source.get(fit_ids, "transformer-train"), seg)
    val_grids = segment_sessions(source.get(val_ids, "transformer-validation"), seg) if val_ids else []
    if not train_grids:
        raise UsageError("training sessions are shorter than one window")
    train_data = encode_windows(train_grids, tokenizers, kinds)
    val_data = encode_windows(val_grids, tokenizers, kinds) if val_grids else None
    model = build_model(cfg.pipeline, train_grids[0].num_persons, tokenizer_dims(tokenizers))
    try:
        history = train_model(model, train_data, val_data, cfg.pipeline)
    except (TrainingDivergedError, NumericalError) as exc:
        raise NumericalFailure(str(exc)) from exc
    save_model(model, artifact, tok_paths, cfg.pipeline)
    final = history.losses[-1] if history.losses else float("nan")
    manifest.artifacts = {"model": str(artifact.resolve()), "sha256": sha256_file(artifact)}
    manifest.results = {
        "fold": fold.fold_id,
        "train_sessions": fit_ids,
        "validation_sessions": val_ids,
        "held_out": list(fold.test),
        "epochs_run": history.epochs_run,
        "best_epoch": history.best_epoch,
        "losses": history.losses,
        "val_scores": history.val_scores,
        "class_weights": history.class_weights,
        "data_access": source.access,
    }
    manifest.write(record)
    print(f"model -> {artifact}: {history.epochs_run} epochs, final loss {final:.4f}, best epoch {history.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = resolve_out(args.checkpoint)
    if not checkpoint.exists():
        raise UsageError(f"missing prerequisite: checkpoint {checkpoint} (run train first)")
    model, pipe, tok_paths = load_model(checkpoint)
    cfg = replace(load_run_config(args.config, args.profile, args.seed), pipeline=pipe)
    dataset = open_dataset(args.data)
    fold, _ = select_fold(dataset.sessions, cfg, args.fold)
    record = run_manifest_path(checkpoint.parent, "train")
    if record.exists():
        seen = json.loads(record.read_text()).get("results", {})
        leaked = set(seen.get("train_sessions", []) + seen.get("validation_sessions", [])) & set(fold.test)
        if leaked:
            raise UsageError(f"checkpoint was trained on the evaluation session(s) {sorted(leaked)}")
    tokenizers = {}
    for kind, path in tok_paths.items():
        if not Path(path).exists():
            raise UsageError(f"missing prerequisite: tokenizer {path} referenced by the checkpoint")
        tokenizers[kind] = load_tokenizer(path)
    out = resolve_out(args.out) if args.out else checkpoint.parent
    result_path = run_manifest_path(out, f"eval-fold{fold.fold_id}")
    claim_outputs([result_path], args.force)
    manifest = RunManifest(
        "eval",
        cfg.to_dict(),
        {"root": pipe.seed, "fold": cfg.fold_seed},
        inputs={"checkpoint": str(checkpoint.resolve()), "checkpoint_sha256": sha256_file(checkpoint), "dataset": str(dataset.root)},
    )
    source = SessionSource(dataset)
    grids = segment_sessions(source.get(fold.test, "evaluation"), pipe.segment)
    if not grids:
        raise UsageError("evaluation session is shorter than one window")
    data = encode_windows(grids, tokenizers, list(pipe.modalities))
    try:
        result = evaluate(model, data, pipe.model.placeholder_scope)
    except NumericalError as exc:
        raise NumericalFailure(str(exc)) from exc
    manifest.results = {"fold": fold.fold_id, "test_sessions": list(fold.test), "metrics": {k: e.as_dict() for k, e in result.items()}}
    manifest.artifacts = {"results": str(result_path)}
    manifest.write(result_path)
    print(format_fold_table({k: aggregate([e]) for k, e in result.items()}, include_accuracy=args.accuracy))
    return 0


def _ablation_job(job_id: int, spec: AblationSpec, data_root: str, fold, cfg: PipelineConfig, out_dir: str):
    """One fold of an ablation in a separate process; owns ``out_dir`` exclusively."""
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter(f"[job {job_id}] %(message)s"))
    root = logging.getLogger("mpsignals")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False
    source = SessionSource(read_manifest(data_root))
    results = ablation_fold(spec, source, fold, cfg)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    Path(out_dir, "folds.json").write_text(
        json.dumps({label: r.manifest for label, r in results.items()}, indent=2, default=str) + "\n"
    )
    print(f"[job {job_id}] fold {fold.fold_id} done", flush=True)
    return results


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.profile, args.seed)
    dataset = open_dataset(args.data)
    spec = AblationSpec(args.kind, "small" if args.kind == "temporal_context" else args.model_profile)
    n = args.num_folds or cfg.num_folds or len(dataset.sessions)
    if n > len(dataset.sessions):
        raise UsageError(f"{n} folds requested but the dataset has {len(dataset.sessions)} sessions")
    folds = make_folds(dataset.sessions, n, cfg.fold_seed)
    out = resolve_out(args.out)
    tables = out / f"ablate-{args.kind}.txt"
    record = run_manifest_path(out, f"ablate-{args.kind}")
    job_dirs = [out / f"ablate-{args.kind}-jobs" / f"fold{f.fold_id}" for f in folds]
    claim_outputs([tables, record, *job_dirs], args.force)
    manifest = RunManifest(
        "ablate",
        {**cfg.to_dict(), "ablation": {"kind": spec.kind, "model_profile": spec.model_profile, "num_folds": n}},
        {"root": cfg.pipeline.seed, "fold": cfg.fold_seed},
        inputs={"dataset": str(dataset.root), "dataset_sha256": sha256_tree(dataset.root, skip=("synth.run.json",))},
    )
    jobs = max(1, args.jobs)
    job_args = [(i, spec, str(dataset.root), f, cfg.pipeline, str(d)) for i, (f, d) in enumerate(zip(folds, job_dirs))]
    if jobs == 1:
        per_fold = [_ablation_job(*a) for a in job_args]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            per_fold = list(pool.map(_ablation_job, *zip(*job_args)))
    table = ablation_table(spec, per_fold)
    if not table.cells:
        raise NumericalFailure("every fold of every ablation cell failed")
    text = "\n\n".join(table.format(task, include_accuracy=args.accuracy) for task in ("bite", "speaking"))
    tables.write_text(text + "\n")
    manifest.results = table.to_record()
    manifest.artifacts = {"tables": str(tables), "jobs": [str(d) for d in job_dirs]}
    manifest.write(record)
    print(text)
    if table.failed_folds:
        print(f"error: {table.failed_folds} fold run(s) failed; see {record}", file=sys.stderr)
        return 3
    return 0


def cmd_mask_dump(args) -> int:
    if min(args.T, args.P, args.M) < 1:
        raise UsageError("--T, --P and --M must be positive")
    spec = MaskSpec.of_size(args.T, args.P, args.M)
    try:
        mask = build_mask(spec, args.kind)
    except MaskTooLargeError as exc:
        raise UsageError(str(exc)) from exc
    out = resolve_out(args.out)
    stem = f"mask-{args.kind}-T{args.T}-P{args.P}-M{args.M}"
    bitmap, text = out / f"{stem}.pbm", out / f"{stem}.txt"
    record = run_manifest_path(out, stem)
    claim_outputs([bitmap, text, record], args.force)
    export_mask_bitmap(mask, bitmap)
    text.write_text(dump_mask_text(mask))
    manifest = RunManifest("mask-dump", {"T": args.T, "P": args.P, "M": args.M, "kind": args.kind}, {})
    manifest.artifacts = {"bitmap": str(bitmap), "text": str(text), "sha256": {"bitmap": sha256_file(bitmap), "text": sha256_file(text)}}
    manifest.results = {"length": spec.length}
    manifest.write(record)
    print(spec.length)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, out: bool = True, fold: bool = False):
    p.add_argument("--config", help="YAML or JSON file with synthetic/pipeline/evaluation sections")
    p.add_argument("--profile", choices=("default", "smoke"), default="default", help="base configuration profile")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    if out:
        p.add_argument("--out", required=True, help=f"output directory (relative paths go under ${OUT_ROOT_ENV} if set)")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    if fold:
        p.add_argument("--fold", type=int, default=0, help="index of the held-out fold")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="mpsignals", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic sessions", formatter_class=fmt)
    _common(p)
    p.add_argument("--sessions", type=int, default=None, help="override the number of sessions")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-vqvae", help="train one modality tokenizer on a fold's training sessions", formatter_class=fmt)
    _common(p, fold=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--modality", required=True, choices=[k for k in MODALITY_ORDER if k not in DISCRETE_KINDS])
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("train", help="train the transformer on frozen tokenizers", formatter_class=fmt)
    _common(p, fold=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--tokenizers", required=True, help="directory holding <modality>.pt from train-vqvae")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fold's held-out session", formatter_class=fmt)
    _common(p, out=False, fold=True)
    p.add_argument("--checkpoint", required=True, help="model.pt written by train")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", default=None, help="where to write the result manifest (default: next to the checkpoint)")
    p.add_argument("--force", action="store_true", help="overwrite an existing result manifest")
    p.add_argument("--accuracy", action="store_true", help="include accuracy in the table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis over folds", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--kind", required=True, choices=ABLATION_KINDS)
    p.add_argument("--num-folds", type=int, default=None, help="folds to run (default: config, else one per session)")
    p.add_argument("--model-profile", choices=("default", "small"), default="default",
                   help="transformer size; temporal_context always uses small")
    p.add_argument("--jobs", type=int, default=int(os.environ.get(JOBS_ENV, "1")),
                   help=f"parallel fold jobs (env {JOBS_ENV})")
    p.add_argument("--accuracy", action="store_true", help="include accuracy in the tables")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("mask-dump", help="render an attention mask as PBM and text", formatter_class=fmt)
    p.add_argument("--T", type=int, default=12, help="segments per window")
    p.add_argument("--P", type=int, default=3, help="persons")
    p.add_argument("--M", type=int, default=6, help="modalities")
    p.add_argument("--kind", choices=MASK_KINDS, default="blockwise", help="mask family")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing dumps")
    p.set_defaults(func=cmd_mask_dump)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, SchemaError, MaskTooLargeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, TrainingDivergedError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
