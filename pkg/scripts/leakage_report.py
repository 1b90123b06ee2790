"""Own-signal leakage of a trained model, with teacher-forced inputs and with placeholders.

With teacher forcing, the query at a predicted position is computed from the
true label embedding, so resampling the person's own signals can move the
logits even though the mask hides their values. Placeholders remove that path.
"""

import argparse
from dataclasses import replace

from mpsignals.data_io import SyntheticConfig, generate_synthetic
from mpsignals.pipeline import build_model, encode_raw, encode_windows, raw_windows, smoke_config, tokenizer_dims, train_model, train_tokenizers
from mpsignals.signal_model import segment_sessions
from mpsignals.transformer import leakage_audit


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--sessions", type=int, default=4)
    parser.add_argument("--trials", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    base = smoke_config()
    sessions = generate_synthetic(SyntheticConfig(num_sessions=args.sessions, fps=base.segment.fps, seed=args.seed))
    grids = segment_sessions(sessions, base.segment)
    tokenizers, _ = train_tokenizers(grids, base)
    kinds = list(base.modalities)
    data = encode_windows(grids, tokenizers, kinds)
    raw = raw_windows(grids[:2], kinds)
    T, P = base.segment.segments_per_window, sessions[0].num_persons

    def encode(batch):
        return encode_raw(batch, tokenizers, kinds)

    for placeholders in (False, True):
        cfg = replace(base, model=replace(base.model, placeholder_inputs=placeholders))
        model = build_model(cfg, P, tokenizer_dims(tokenizers))
        train_model(model, data, None, cfg)
        worst = max(
            leakage_audit(model, encode, raw, (t, i), trials=args.trials, seed=args.seed).max_delta
            for t in (0, T // 2, T - 1)
            for i in range(P)
        )
        mode = "placeholders " if placeholders else "teacher-forced"
        print(f"{mode}  max |delta logit| over own-signal resamples: {worst:.3g}")


if __name__ == "__main__":
    main()
