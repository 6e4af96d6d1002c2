"""Compare model-initialized and randomly initialized negative banks on the toy preset.

Each run is scored by the first step whose 20-step mean loss falls to 0.8 of
its own starting mean. The random run is also scored against the threshold
of its paired model run, since the two start from different losses.
"""
import argparse
from pathlib import Path

from segloc.experiments import PROGRESS_FACTOR, first_step_below, progress_run, toy_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", type=Path, default=Path("toy_work"), help="corpus and run directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    args = ap.parse_args()
    fores, backs = toy_corpus(args.work / "corpus")
    wins = 0
    for seed in args.seeds:
        model = progress_run(fores, backs, seed, "model")
        rand = progress_run(fores, backs, seed, "random")
        shared = first_step_below(rand.losses, PROGRESS_FACTOR * model.initial)
        inf = float("inf")
        wins += (model.steps_to_threshold or inf) < (rand.steps_to_threshold or inf)
        print(
            f"seed {seed}: model {model.steps_to_threshold} (start {model.initial:.3f}) "
            f"random {rand.steps_to_threshold} (start {rand.initial:.3f}) "
            f"random at model threshold {shared}"
        )
    print(f"model init first in {wins}/{len(args.seeds)} paired runs")


if __name__ == "__main__":
    main()
