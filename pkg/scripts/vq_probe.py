"""Train a tokenizer on sinusoidal 2-channel keypoints and report round-trip error."""

import argparse

import numpy as np

from mpsignals.signal_model import Modality
from mpsignals.vq_tokenizer import TokenizerConfig, TokenizerTrainSettings, train_tokenizer


def sinusoid_chunks(n: int, frames: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(frames)[None, :]
    freq = rng.uniform(0.05, 0.3, size=(n, 1, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 2))
    amp = rng.uniform(0.5, 2.0, size=(n, 1, 2))
    return (amp * np.sin(2 * np.pi * freq * t[..., None] + phase)).astype(np.float32)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--chunks", type=int, default=4000)
    parser.add_argument("--frames", type=int, default=45)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--budget", type=float, default=280.0, help="training time budget in seconds")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    train = sinusoid_chunks(args.chunks, args.frames, args.seed)
    test = sinusoid_chunks(200, args.frames, args.seed + 1)
    cfg = TokenizerConfig(Modality("pose", 2, False), frames_per_segment=args.frames)
    tok, report = train_tokenizer(
        train, cfg, TokenizerTrainSettings(epochs=args.epochs, seed=args.seed, time_budget_s=args.budget)
    )
    recon = tok.reconstruct_numpy(test)
    nmse = float(np.mean((recon - test) ** 2) / np.var(test))
    print(f"epochs {report.epochs_run}, active codes {report.active_codes}, held-out NMSE {nmse:.4f}")


if __name__ == "__main__":
    main()
