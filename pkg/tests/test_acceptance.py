"""Headline acceptance checks; each prints one PASS/FAIL line at its tolerance."""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from helpers import POSE2, constant_session, random_inputs, sinusoid_chunks, tiny_model
from mpsignals.block_mask import MASK_KINDS, MaskSpec, build_mask
from mpsignals.data_io import SyntheticConfig, generate_synthetic, make_folds
from mpsignals.eval_harness import AblationSpec, ablation_table, FoldResult
from mpsignals.metrics import ConfusionCounts, confusion, metrics
from mpsignals.pipeline import build_model, encode_raw, raw_windows, smoke_config, tokenizer_dims, train_tokenizers
from mpsignals.separation import SeparationSettings, run_separation
from mpsignals.signal_model import SegmentConfig, label_speaking, segment_session, segment_sessions
from mpsignals.transformer import leakage_audit, predict_logits
from mpsignals.vq_tokenizer import TokenizerConfig, TokenizerTrainSettings, VQTokenizer, quantize, train_tokenizer
from oracles import all_confusions, brute_mask, reference_metrics

SIX = ("gaze", "headpose", "pose", "word", "speaker", "bite")


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, detail

    return emit


def test_mask_oracle_equivalence(verdict):
    start = time.monotonic()
    mismatches = []
    for T, P, M in itertools.product(range(1, 6), range(1, 5), range(1, 5)):
        spec = MaskSpec.of_size(T, P, M)
        for kind in MASK_KINDS:
            if not np.array_equal(build_mask(spec, kind).allow, brute_mask(T, P, M, kind)):
                mismatches.append((T, P, M, kind))
    elapsed = time.monotonic() - start
    verdict(
        "mask oracle equivalence",
        not mismatches and elapsed < 10,
        f"{80 * len(MASK_KINDS)} (T,P,M,kind) cases, {len(mismatches)} mismatches, {elapsed:.2f}s (limit 10s)",
    )


def test_attention_zero(verdict):
    model = tiny_model(T=12, P=3, modalities=SIX, hidden=32, layers=4, heads=4, dtype=torch.float64)
    allow = model.allow
    live = allow.any(-1)
    gen = torch.Generator().manual_seed(0)
    worst_blocked, worst_sum, n = 0.0, 0.0, 0
    for _ in range(5):
        with torch.no_grad():
            out = model(random_inputs(model, 20, gen, torch.float64), return_attention=True)
        n += 20
        for w in out.attention:
            worst_blocked = max(worst_blocked, float(w[..., ~allow].abs().max()))
            sums = w.sum(-1)
            worst_sum = max(worst_sum, float((sums[..., live] - 1).abs().max()))
            if (~live).any():
                worst_blocked = max(worst_blocked, float(sums[..., ~live].abs().max()))
    verdict(
        "attention-zero",
        n == 100 and worst_blocked == 0.0 and worst_sum <= 1e-6,
        f"{n} inputs x 4 layers at L=216: max blocked weight {worst_blocked:.1e}, max |row sum - 1| {worst_sum:.1e}",
    )


@torch.no_grad()
def test_causality_sweep(verdict):
    start = time.monotonic()
    cfg = smoke_config()
    worst = 0.0
    for placeholders in (False, True):
        model = tiny_model(
            T=12, P=3, modalities=SIX, hidden=cfg.model.hidden_dim, layers=cfg.model.num_layers,
            heads=cfg.model.num_heads, dtype=torch.float64, placeholder_inputs=placeholders,
        )
        gen = torch.Generator().manual_seed(1)
        inputs = random_inputs(model, 4, gen, torch.float64)
        base = predict_logits(model, inputs)
        for t_future in range(1, 12):
            for _ in range(3):
                other = random_inputs(model, 4, gen, torch.float64)
                moved = {k: v.clone() for k, v in inputs.items()}
                for k in moved:
                    moved[k][:, t_future:] = other[k][:, t_future:]
                out = predict_logits(model, moved)
                for task in base:
                    worst = max(worst, float((out[task][:, :t_future] - base[task][:, :t_future]).abs().max()))
    elapsed = time.monotonic() - start
    verdict(
        "causality sweep",
        worst <= 1e-6 and elapsed < 120,
        f"every (t,i) under changes at all t' > t, teacher-forced and placeholder: max delta {worst:.1e}, {elapsed:.1f}s",
    )


def test_value_path_isolation(verdict):
    base = smoke_config()
    cfg = replace(
        base,
        tokenizer=replace(base.tokenizer, epochs=1),
        model=replace(base.model, placeholder_inputs=True),
    )
    sessions = generate_synthetic(SyntheticConfig(num_sessions=1, duration_s=36.0, fps=5.0, seed=3))
    grids = segment_sessions(sessions, cfg.segment)
    tokenizers, _ = train_tokenizers(grids, cfg)
    kinds = list(cfg.modalities)
    torch.manual_seed(0)
    model = build_model(cfg, 3, tokenizer_dims(tokenizers)).eval()
    raw = raw_windows(grids, kinds)

    def encode(batch):
        return encode_raw(batch, tokenizers, kinds)

    worst, cells = 0.0, 0
    for t, i in [(0, 0), (5, 1), (11, 2), (7, 0)]:
        result = leakage_audit(model, encode, raw, watch=(t, i), trials=50, seed=t * 3 + i)
        worst = max(worst, result.max_delta)
        cells += 1
    verdict(
        "value-path isolation",
        worst == 0.0,
        f"{cells} predicted cells x 50 resamplings of own current raw signals: max logit delta {worst!r}",
    )


@torch.no_grad()
def test_right_shift_residual(verdict):
    model = tiny_model(T=12, P=3, modalities=SIX, hidden=32, layers=4, heads=4, dtype=torch.float64)
    with torch.no_grad():
        for block in model.blocks:
            block.attn.out.weight.zero_()
            block.attn.out.bias.zero_()
    out = model(random_inputs(model, 3, torch.Generator().manual_seed(2), torch.float64), return_layers=True)
    B = model.spec.block_size
    worst = 0.0
    for rec in out.layers:
        for x, res in ((rec["input"], rec["attn_residual"]), (rec["attn_residual"] + rec["attn_out"], rec["ffn_residual"])):
            expected = torch.cat([torch.zeros_like(x[:, :B]), x[:, :-B]], dim=1)
            worst = max(worst, float((res - expected).abs().max()))
    verdict(
        "right-shift residual",
        worst <= 1e-7,
        f"4 layers, both residual adds, attention output zeroed: max deviation {worst:.1e} (limit 1e-7)",
    )


def _straight_through_error(seed: int) -> float:
    torch.manual_seed(seed)
    cfg = TokenizerConfig(POSE2, frames_per_segment=12)
    tok = VQTokenizer(cfg).double()
    x = torch.randn(2, 12, 2, dtype=torch.float64)
    target = torch.randn(2, cfg.latent_dim, dtype=torch.float64)
    e = tok.frame_embeddings(x).detach().requires_grad_(True)
    q = quantize(e, tok.codebook.detach())
    d = torch.cdist(e.detach().reshape(-1, cfg.latent_dim), tok.codebook.detach()).sort(-1).values
    assert float((d[:, 1] - d[:, 0]).min()) > 1e-6  # away from Voronoi boundaries

    def downstream(v):
        return (tok.aggregate(v.reshape(2, -1)) - target).pow(2).sum()

    downstream(q.quantized).backward()
    q0 = tok.codebook.detach()[q.index]
    numeric = torch.zeros_like(q0)
    h = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*q0.shape):
            bump = torch.zeros_like(q0)
            bump[idx] = h
            numeric[idx] = (downstream(q0 + bump) - downstream(q0 - bump)) / (2 * h)
    return float((e.grad - numeric).norm() / numeric.norm())


@pytest.mark.slow
def test_vq_tokenizer(verdict):
    grad_err = max(_straight_through_error(s) for s in range(3))
    start = time.monotonic()
    train = sinusoid_chunks(4000, 45, 0)
    test = sinusoid_chunks(200, 45, 1)
    cfg = TokenizerConfig(POSE2, frames_per_segment=45)
    tok, report = train_tokenizer(train, cfg, TokenizerTrainSettings(epochs=40, seed=0, time_budget_s=280.0))
    elapsed = time.monotonic() - start
    recon = tok.reconstruct_numpy(test)
    nmse = float(np.mean((recon - test) ** 2) / np.var(test))
    verdict(
        "VQ-VAE tokenizer",
        grad_err <= 1e-3 and nmse < 0.05 and report.active_codes >= 2 and elapsed <= 300,
        f"straight-through rel. error {grad_err:.1e}; held-out NMSE {nmse:.4f} with {report.active_codes} active codes "
        f"after {report.epochs_run} epochs in {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_planted_dependency_separation(verdict):
    result = run_separation(SeparationSettings())
    gaps = result.gaps()
    verdict(
        "planted-dependency separation",
        max(gaps.values()) <= 0.05 and result.elapsed_s < 600,
        f"blockwise F1 {result.model_f1['blockwise']:.3f} vs full oracle {result.oracle_f1['full']:.3f}; "
        f"strict_past F1 {result.model_f1['strict_past']:.3f} vs past-only oracle {result.oracle_f1['past-only']:.3f}; "
        f"{result.elapsed_s:.0f}s",
    )


def test_metrics_correctness(verdict):
    bad = 0
    cases = 0
    for counts in all_confusions(6):
        cases += 1
        got = metrics(ConfusionCounts(*counts)).as_dict()
        ref = reference_metrics(*counts)
        bad += any(got[k] != v for k, v in ref.items())
    perfect = metrics(confusion([1, 0, 1, 1, 0], [1, 0, 1, 1, 0])).nmcc
    constant = metrics(confusion([1] * 6, [1, 0, 0, 1, 1, 0])).nmcc
    verdict(
        "metrics correctness",
        bad == 0 and cases == 7**4 - 1 and perfect == 1.0 and constant == 0.5,
        f"{cases} nonempty matrices of the 7^4 grid, {bad} mismatches; perfect nMCC {perfect}, constant nMCC {constant}",
    )


def test_protocol_fidelity(verdict):
    grids = segment_session(constant_session(duration_s=36.0), SegmentConfig(fps=5.0))
    segs = grids[0].num_segments if len(grids) == 1 else -1
    seconds = grids[0].chunks["gaze"].shape[2] / 5.0
    strict = not label_speaking([1] * 30 + [0] * 70) and label_speaking([1] * 31 + [0] * 69)
    folds = make_folds([f"s{i}" for i in range(30)], 3)
    splits = {(len(f.train), len(f.test)) for f in folds}
    verdict(
        "protocol fidelity",
        segs == 12 and seconds == 3.0 and strict and splits == {(29, 1)},
        f"36 s session -> {segs} segments of {seconds:g} s; 30% boundary strict: {strict}; fold splits {sorted(splits)}",
    )


def test_ablation_plumbing(verdict):
    expected = {
        ("drop_modality", "bite"): ["All Features", "No Gaze", "No Headpose", "No Pose", "No Word", "No Speaker", "Bite Only"],
        ("drop_modality", "speaking"): ["All Features", "No Gaze", "No Headpose", "No Pose", "No Word", "No Bite", "Speaker Only"],
        ("temporal_context", "bite"): ["2×3s", "3×3s", "6×3s", "12×3s"],
        ("segment_length", "bite"): ["2×18s", "4×9s", "6×6s", "12×3s"],
    }
    entry = metrics(ConfusionCounts(2, 1, 3, 1))
    fold = make_folds(["a", "b"], 1)[0]
    wrong = []
    for (kind, task), rows in expected.items():
        spec = AblationSpec(kind)
        table = ablation_table(spec, [{c.label: FoldResult(fold, {"speaking": entry, "bite": entry}) for c in spec.cells()}])
        printed = [line.split()[0] if "×" in line else line[: line.index("  ")] for line in table.format(task).splitlines()[2:]]
        if printed != rows:
            wrong.append((kind, task, printed))
    only = {c.label: c.modalities for c in AblationSpec("drop_modality").cells()}
    layout_ok = only["Speaker Only"] == ("speaker",) and only["Bite Only"] == ("bite",)
    spec_lengths = {
        label: build_model(replace(smoke_config(), modalities=mods), 3, {k: 4 for k in mods if k not in ("speaker", "bite")}).spec.length
        for label, mods in only.items()
    }
    verdict(
        "ablation plumbing",
        not wrong and layout_ok and spec_lengths["Speaker Only"] == 36,
        f"row sets of {len(expected)} tables match; single-modality layouts have L = {spec_lengths['Speaker Only']}",
    )
