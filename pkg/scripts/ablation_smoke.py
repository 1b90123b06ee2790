"""All three ablation axes on the smoke profile; prints the tables."""

import argparse

from mpsignals.data_io import SyntheticConfig, generate_synthetic, make_folds
from mpsignals.eval_harness import ABLATION_KINDS, AblationSpec, run_ablation
from mpsignals.pipeline import SessionSource, smoke_config


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--kinds", nargs="+", choices=ABLATION_KINDS, default=list(ABLATION_KINDS))
    parser.add_argument("--sessions", type=int, default=6)
    parser.add_argument("--folds", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--accuracy", action="store_true")
    args = parser.parse_args()

    cfg = smoke_config()
    sessions = generate_synthetic(SyntheticConfig(num_sessions=args.sessions, fps=cfg.segment.fps, seed=args.seed))
    source = SessionSource(sessions)
    folds = make_folds(source.ids, args.folds, args.seed)
    for kind in args.kinds:
        spec = AblationSpec(kind, "small" if kind == "temporal_context" else "default")
        table = run_ablation(spec, source, folds, cfg)
        print(f"== {kind} ({len(folds)} folds, {table.failed_folds} failed)")
        for task in ("bite", "speaking"):
            print(table.format(task, include_accuracy=args.accuracy))
            print()


if __name__ == "__main__":
    main()
