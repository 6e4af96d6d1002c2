"""Linear-probe accuracy of pre-trained toy encoders against their untrained initialization."""
import argparse
from pathlib import Path

from segloc.experiments import probe_dataset, probe_gap, toy_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", type=Path, default=Path("toy_work"), help="corpus and run directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(4)))
    args = ap.parse_args()
    fores, backs = toy_corpus(args.work / "corpus")
    dataset = probe_dataset(fores, backs, args.work / "probe")
    for seed in args.seeds:
        g = probe_gap(fores, backs, dataset, seed, args.work / f"probe_run_{seed}")
        print(f"seed {seed}: pretrained {g.pretrained:.3f} random init {g.random_init:.3f} gap {g.gap:+.3f}")


if __name__ == "__main__":
    main()
