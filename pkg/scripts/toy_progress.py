"""Train the toy preset for several seeds and report the loss ratio per seed.

    python3 scripts/toy_progress.py --work /tmp/segloc_toy --seeds 0 1 2 3 4
"""
import argparse
from pathlib import Path

from segloc.experiments import PROGRESS_FACTOR, progress_run, toy_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", type=Path, default=Path("toy_work"), help="corpus and run directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    args = ap.parse_args()
    fores, backs = toy_corpus(args.work / "corpus")
    passed = 0
    for seed in args.seeds:
        run = progress_run(fores, backs, seed, out=args.work / f"progress_{seed}")
        passed += run.ratio <= PROGRESS_FACTOR
        print(f"seed {seed}: initial {run.initial:.4f} final {run.final:.4f} ratio {run.ratio:.3f}")
    print(f"{passed}/{len(args.seeds)} seeds at or below {PROGRESS_FACTOR}")


if __name__ == "__main__":
    main()
