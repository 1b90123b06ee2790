import json
import time

import numpy as np
import pytest
import yaml

from mpsignals.block_mask import read_bitmap
from mpsignals.cli import build_parser, load_run_config, main

COMMANDS = ("synth", "train-vqvae", "train", "eval", "ablate", "mask-dump")
CONTINUOUS = ("gaze", "headpose", "pose", "word")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(path, **sections):
    path.write_text(yaml.safe_dump(sections))
    return path


@pytest.mark.parametrize("command", COMMANDS)
def test_help_lists_flags(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "--out" in text
    if command != "mask-dump":
        assert "--seed" in text and "--config" in text


def test_help_shows_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["mask-dump", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    assert "default: 12" in text and "default: blockwise" in text


class TestConfig:
    def test_profile_and_override(self, tmp_path):
        path = write_config(tmp_path / "c.yaml", synthetic={"num_sessions": 4}, pipeline={"train": {"epochs": 2}})
        cfg = load_run_config(str(path), "smoke", seed=9)
        assert cfg.synthetic.num_sessions == 4 and cfg.synthetic.seed == 9
        assert cfg.pipeline.train.epochs == 2 and cfg.pipeline.seed == 9
        assert cfg.pipeline.model.hidden_dim == 32

    def test_default_is_thirty_triads(self):
        cfg = load_run_config(None, "default", None)
        assert cfg.synthetic.num_sessions == 30 and cfg.synthetic.persons_per_session == 3

    def test_bad_config_exit_2(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.yaml", pipeline={"train": {"epochz": 2}})
        code, _, err = run(capsys, "synth", "--config", path, "--out", tmp_path / "d")
        assert code == 2 and "epochz" in err
        path = write_config(tmp_path / "d.yaml", extra={"a": 1})
        assert run(capsys, "synth", "--config", path, "--out", tmp_path / "e")[0] == 2


class TestSynth:
    def test_seed_repeatable(self, tmp_path, capsys):
        hashes = []
        for name in ("a", "b"):
            code, out, _ = run(capsys, "synth", "--profile", "smoke", "--sessions", 2, "--seed", 7, "--out", tmp_path / name)
            assert code == 0 and "2 sessions x 3 persons" in out
            record = json.loads((tmp_path / name / "synth.run.json").read_text())
            hashes.append(record["artifacts"]["sha256"])
        assert hashes[0] == hashes[1]

    def test_collision_and_force(self, tmp_path, capsys):
        args = ("synth", "--profile", "smoke", "--sessions", 1, "--out", tmp_path / "d")
        assert run(capsys, *args)[0] == 0
        code, _, err = run(capsys, *args)
        assert code == 2 and "--force" in err
        assert run(capsys, *args, "--force")[0] == 0

    def test_unwritable_exit_1(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(capsys, "synth", "--profile", "smoke", "--sessions", 1, "--out", blocker / "sub")
        assert code == 1 and err

    def test_out_root_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("MPSIGNALS_OUT_ROOT", str(tmp_path))
        assert run(capsys, "synth", "--profile", "smoke", "--sessions", 1, "--out", "rel")[0] == 0
        assert (tmp_path / "rel" / "manifest.json").exists()


class TestMaskDump:
    def test_default_size(self, tmp_path, capsys):
        code, out, _ = run(capsys, "mask-dump", "--T", 12, "--P", 3, "--M", 6, "--out", tmp_path)
        assert code == 0 and out.strip() == "216"
        bits = read_bitmap(tmp_path / "mask-blockwise-T12-P3-M6.pbm")
        assert bits.shape == (216, 216)
        assert json.loads((tmp_path / "mask-blockwise-T12-P3-M6.run.json").read_text())["results"]["length"] == 216

    def test_lower_differs_on_own_current_cells(self, tmp_path, capsys):
        for kind in ("lower", "blockwise"):
            assert run(capsys, "mask-dump", "--T", 2, "--P", 2, "--M", 2, "--kind", kind, "--out", tmp_path / kind)[0] == 0
        lower = read_bitmap(tmp_path / "lower" / "mask-lower-T2-P2-M2.pbm")
        block = read_bitmap(tmp_path / "blockwise" / "mask-blockwise-T2-P2-M2.pbm")
        q, k = np.nonzero(lower & ~block)
        assert len(q) and all(a // 2 == b // 2 for a, b in zip(q, k))

    def test_single_black_pixel(self, tmp_path, capsys):
        assert run(capsys, "mask-dump", "--T", 1, "--P", 1, "--M", 1, "--out", tmp_path)[0] == 0
        assert (tmp_path / "mask-blockwise-T1-P1-M1.pbm").read_text().split() == ["P1", "1", "1", "1"]

    def test_oversize_exit_2(self, tmp_path, capsys):
        code, _, err = run(capsys, "mask-dump", "--T", 1000, "--P", 3, "--M", 6, "--out", tmp_path)
        assert code == 2 and "budget" in err.lower()

    def test_collision(self, tmp_path, capsys):
        assert run(capsys, "mask-dump", "--T", 1, "--P", 1, "--M", 1, "--out", tmp_path)[0] == 0
        assert run(capsys, "mask-dump", "--T", 1, "--P", 1, "--M", 1, "--out", tmp_path)[0] == 2


class TestPrerequisites:
    def test_missing_checkpoint(self, tmp_path, capsys):
        run(capsys, "synth", "--profile", "smoke", "--sessions", 2, "--out", tmp_path / "data")
        code, _, err = run(capsys, "eval", "--profile", "smoke", "--checkpoint", tmp_path / "none.pt", "--data", tmp_path / "data")
        assert code == 2 and "none.pt" in err

    def test_missing_tokenizer_named(self, tmp_path, capsys):
        run(capsys, "synth", "--profile", "smoke", "--sessions", 2, "--out", tmp_path / "data")
        (tmp_path / "tok").mkdir()
        code, _, err = run(capsys, "train", "--profile", "smoke", "--data", tmp_path / "data", "--tokenizers", tmp_path / "tok", "--out", tmp_path / "m")
        assert code == 2 and "gaze" in err

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, _ = run(capsys, "train-vqvae", "--profile", "smoke", "--data", tmp_path / "nowhere", "--modality", "gaze", "--out", tmp_path / "t")
        assert code == 2

    def test_discrete_modality_rejected(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["train-vqvae", "--data", "x", "--modality", "speaker", "--out", "y"])
        assert exc.value.code == 2


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """synth, one tokenizer per continuous modality, transformer training, all on the smoke profile."""
    root = tmp_path_factory.mktemp("smoke")
    start = time.monotonic()
    assert main(["synth", "--profile", "smoke", "--out", str(root / "data")]) == 0
    for kind in CONTINUOUS:
        assert main(["train-vqvae", "--profile", "smoke", "--data", str(root / "data"), "--modality", kind, "--out", str(root / "tok")]) == 0
    assert main(["train", "--profile", "smoke", "--data", str(root / "data"), "--tokenizers", str(root / "tok"), "--out", str(root / "model")]) == 0
    return root, start


@pytest.mark.slow
def test_smoke_pipeline_end_to_end(smoke_run, capsys):
    root, start = smoke_run
    code, out, _ = run(capsys, "eval", "--profile", "smoke", "--checkpoint", root / "model" / "model.pt", "--data", root / "data")
    assert code == 0
    assert "speaking" in out and "bite" in out
    assert time.monotonic() - start < 600
    record = json.loads((root / "model" / "eval-fold0.run.json").read_text())
    assert set(record["results"]["metrics"]) == {"speaking", "bite"}
    train = json.loads((root / "model" / "train.run.json").read_text())
    held = set(record["results"]["test_sessions"])
    assert len(held) == 1 and not held & set(train["results"]["train_sessions"])
    for kind in CONTINUOUS:
        assert (root / "tok" / f"{kind}.pt").exists() and (root / "tok" / f"vqvae-{kind}.run.json").exists()


@pytest.mark.slow
def test_untrained_checkpoint_is_chance(smoke_run, tmp_path, capsys):
    root, _ = smoke_run
    cfg = write_config(tmp_path / "c.yaml", pipeline={"train": {"epochs": 0}})
    code, _, _ = run(capsys, "train", "--profile", "smoke", "--config", cfg, "--data", root / "data", "--tokenizers", root / "tok", "--out", tmp_path / "m")
    assert code == 0
    code, _, _ = run(capsys, "eval", "--profile", "smoke", "--config", cfg, "--checkpoint", tmp_path / "m" / "model.pt", "--data", root / "data")
    assert code == 0
    record = json.loads((tmp_path / "m" / "eval-fold0.run.json").read_text())
    for task, values in record["results"]["metrics"].items():
        assert abs(values["nmcc"] - 0.5) < 0.15, task


@pytest.mark.slow
def test_ablate_segment_length_rows(smoke_run, tmp_path, capsys):
    root, _ = smoke_run
    cfg = write_config(tmp_path / "c.yaml", pipeline={"train": {"epochs": 2}, "tokenizer": {"epochs": 2}})
    code, _, _ = run(
        capsys, "ablate", "--profile", "smoke", "--config", cfg, "--data", root / "data",
        "--kind", "segment_length", "--num-folds", 1, "--out", tmp_path / "ab",
    )
    assert code == 0
    labels = ["2×18s", "4×9s", "6×6s", "12×3s"]
    tables = (tmp_path / "ab" / "ablate-segment_length.txt").read_text().strip()
    for block in tables.split("\n\n"):
        rows = block.splitlines()[2:]
        assert [r.split()[0] for r in rows] == labels
    record = json.loads((tmp_path / "ab" / "ablate-segment_length.run.json").read_text())
    assert list(record["results"]["rows"]["bite"]) == labels
