"""Blockwise vs strict-past masks on sessions where speaking depends only on concurrent gaze."""

import argparse
import json

from mpsignals.separation import SeparationSettings, run_separation


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--sessions", type=int, default=14)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--json", action="store_true", help="print one JSON record per seed")
    args = parser.parse_args()
    for seed in args.seeds:
        r = run_separation(SeparationSettings(num_sessions=args.sessions, epochs=args.epochs, seed=seed))
        if args.json:
            print(json.dumps({"seed": seed, "model_f1": r.model_f1, "oracle_f1": r.oracle_f1, "elapsed_s": r.elapsed_s}))
            continue
        print(f"seed {seed} (speaking base rate {r.base_rate:.3f}, {r.elapsed_s:.0f}s)")
        print(f"  blockwise    F1 {r.model_f1['blockwise']:.3f}   full-scope oracle {r.oracle_f1['full']:.3f}")
        print(f"  strict_past  F1 {r.model_f1['strict_past']:.3f}   past-only oracle  {r.oracle_f1['past-only']:.3f}")


if __name__ == "__main__":
    main()
