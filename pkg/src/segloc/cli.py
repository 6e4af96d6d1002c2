"""Command-line entry point: ``segloc <subcommand> [flags]``.

Every numeric flag is checked before any work starts. ``--config FILE``
reads flat ``flag = value`` lines (flag names without the leading dashes);
flags given on the command line win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import SegLocError


class UsageError(SegLocError):
    """A flag value violates its owning configuration's invariants."""


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{n}: expected 'flag = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("_", "-")] = value
    return values


def _add_seed_workers(p, workers=True):
    p.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    if workers:
        p.add_argument("--workers", type=int, default=1, help="worker threads (output does not depend on it)")


def _add_synth_flags(p):
    from .synth import SynthConfig

    d = SynthConfig()
    p.add_argument("--coeff-min", type=float, default=d.c_min, help="lower bound of the composition coefficient")
    p.add_argument("--coeff-max", type=float, default=d.c_max, help="upper bound of the composition coefficient")
    p.add_argument("--width", type=int, default=d.target_width, help="stored image width in pixels")
    p.add_argument("--scale-min", type=float, default=d.scale_range[0], help="smallest segment scale factor")
    p.add_argument("--scale-max", type=float, default=d.scale_range[1], help="largest segment scale factor")


def build_parser() -> argparse.ArgumentParser:
    from .train import PAPER_DATASET_PAIRS, TrainConfig

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="segloc", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress lines to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", help="flat 'flag = value' file; command-line flags win")
        p.add_argument("--dry-run", action="store_true", help="validate flags, print the resolved settings, exit")
        return p

    p = command("gen-toy", "write a deterministic toy corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=4, help="number of object classes")
    p.add_argument("--fore", type=int, default=10, help="instances per class")
    p.add_argument("--back", type=int, default=100, help="background images")
    p.add_argument("--size", type=int, default=64, help="background side in pixels")
    _add_seed_workers(p, workers=False)

    p = command("synth", "synthesize a positive-pair dataset")
    p.add_argument("--fores", required=True, help="foreground corpus directory")
    p.add_argument("--backs", required=True, help="background directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--pairs", type=int, default=1000, help="positive pairs to write")
    _add_synth_flags(p)
    _add_seed_workers(p)

    p = command("region", "print the authentic region of one image as 'x y w h'")
    p.add_argument("image", help="RGB PNG")

    d = TrainConfig()
    p = command("pretrain", "contrastive pre-training with per-class negative queues")
    src = p.add_argument_group("input (a dataset directory, or corpora to synthesize from on the fly)")
    src.add_argument("--dataset", help="synthesized dataset directory")
    src.add_argument("--fores", help="foreground corpus directory")
    src.add_argument("--backs", help="background directory")
    p.add_argument("--out", required=True, help="metrics and checkpoint directory")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--tau", type=float, default=d.tau, help="InfoNCE temperature")
    p.add_argument("--momentum", type=float, default=d.m, help="key-encoder momentum")
    p.add_argument("--lr", type=float, default=d.lr, help="SGD learning rate")
    p.add_argument("--sgd-momentum", type=float, default=d.sgd_momentum, help="SGD momentum")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="L2 weight decay")
    p.add_argument("--batch", type=int, default=d.batch, help="pairs per micro-batch")
    p.add_argument("--accum", type=int, default=d.accum, help="micro-batches per optimizer step")
    p.add_argument("--epochs", type=int, default=d.epochs, help="passes over the data")
    p.add_argument("--queue-size", type=int, default=d.queue_size, help="capacity of each class queue")
    p.add_argument("--queue-init", choices=("model", "random"), default=d.queue_init, help="how the queues are filled before step 1")
    p.add_argument("--freeze-stages", type=int, default=d.freeze_stages, help="leading conv stages kept fixed")
    p.add_argument("--symmetric", action="store_true", help="also use view 2 as the query")
    p.add_argument("--pairs-per-epoch", type=int, default=PAPER_DATASET_PAIRS, help="on-the-fly synthesis only")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    _add_synth_flags(p)
    _add_seed_workers(p)

    p = command("probe", "linear-probe accuracy of a checkpoint's query encoder")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--dataset", required=True, help="synthesized dataset directory")
    p.add_argument("--seed", type=int, default=0, help="seed of the train/test split")

    p = command("gradcheck", "finite-difference checks of encoder and loss gradients")
    p.add_argument("--seeds", type=int, default=5, help="random seeds per check")
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    return None


def parse(argv) -> argparse.Namespace:
    """Parse ``argv``, overlaying ``--config`` values as defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        sp = _subparser(parser, args.command)
        known = {a.option_strings[0].lstrip("-"): a for a in sp._actions if a.option_strings}
        defaults = {}
        for key, value in values.items():
            if key not in known or key in ("config", "help"):
                raise UsageError(f"--config: unknown flag {key!r} for {args.command}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[action.dest] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[action.dest] = value  # argparse converts string defaults with the flag's type
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


def synth_config(args):
    from .synth import SynthConfig

    _check(0 < args.coeff_min <= 1, f"--coeff-min must lie in (0, 1], got {args.coeff_min}")
    _check(0 < args.coeff_max <= 1, f"--coeff-max must lie in (0, 1], got {args.coeff_max}")
    _check(
        args.coeff_min < args.coeff_max,
        f"--coeff-min ({args.coeff_min}) must be smaller than --coeff-max ({args.coeff_max})",
    )
    _check(args.width >= 1, f"--width must be >= 1, got {args.width}")
    _check(0 < args.scale_min <= args.scale_max, "--scale-min must be > 0 and <= --scale-max")
    _check(args.seed >= 0, f"--seed must be >= 0, got {args.seed}")
    return SynthConfig(
        c_min=args.coeff_min,
        c_max=args.coeff_max,
        target_width=args.width,
        scale_range=(args.scale_min, args.scale_max),
        seed=args.seed,
    )


def train_config(args):
    from .train import TrainConfig

    _check(args.tau > 0, f"--tau must be > 0, got {args.tau}")
    _check(0 <= args.momentum <= 1, f"--momentum must lie in [0, 1], got {args.momentum}")
    _check(args.lr >= 0, f"--lr must be >= 0, got {args.lr}")
    _check(0 <= args.sgd_momentum < 1, f"--sgd-momentum must lie in [0, 1), got {args.sgd_momentum}")
    _check(args.weight_decay >= 0, f"--weight-decay must be >= 0, got {args.weight_decay}")
    for flag in ("batch", "accum", "epochs", "queue_size", "pairs_per_epoch", "workers"):
        value = getattr(args, flag)
        _check(value >= 1, f"--{flag.replace('_', '-')} must be >= 1, got {value}")
    _check(0 <= args.freeze_stages <= 3, f"--freeze-stages must lie in [0, 3], got {args.freeze_stages}")
    _check(args.max_steps is None or args.max_steps >= 1, "--max-steps must be >= 1")
    return TrainConfig(
        tau=args.tau,
        m=args.momentum,
        lr=args.lr,
        sgd_momentum=args.sgd_momentum,
        weight_decay=args.weight_decay,
        batch=args.batch,
        accum=args.accum,
        epochs=args.epochs,
        queue_size=args.queue_size,
        queue_init=args.queue_init,
        freeze_stages=args.freeze_stages,
        symmetric=args.symmetric,
        pairs_per_epoch=args.pairs_per_epoch,
        max_steps=args.max_steps,
        seed=args.seed,
        workers=args.workers,
    )


def _dry(args, settings: dict) -> int:
    print(json.dumps({"command": args.command, **settings}, sort_keys=True, default=str))
    return 0


def cmd_gen_toy(args) -> int:
    from .corpus import MAX_CLASSES, gen_toy_corpus

    _check(1 <= args.classes <= MAX_CLASSES, f"--classes must lie in [1, {MAX_CLASSES}], got {args.classes}")
    _check(args.fore >= 2, f"--fore must be >= 2, got {args.fore}")
    _check(args.back >= 1, f"--back must be >= 1, got {args.back}")
    _check(args.size >= 16, f"--size must be >= 16, got {args.size}")
    _check(args.seed >= 0, f"--seed must be >= 0, got {args.seed}")
    if args.dry_run:
        return _dry(args, vars(args))
    fores, backs = gen_toy_corpus(args.out, args.classes, args.fore, args.back, args.seed, args.size)
    print(f"{len(fores.instances)} foregrounds, {len(backs)} backgrounds ({backs.excluded} excluded) in {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .corpus import load_backgrounds, load_foregrounds
    from .synth import synthesize_dataset

    cfg = synth_config(args)
    _check(args.pairs >= 1, f"--pairs must be >= 1, got {args.pairs}")
    _check(args.workers >= 1, f"--workers must be >= 1, got {args.workers}")
    if args.dry_run:
        return _dry(args, {"synth": cfg.to_dict(), "pairs": args.pairs})
    fores = load_foregrounds(args.fores)
    backs = load_backgrounds(args.backs)
    s = synthesize_dataset(fores, backs, cfg, args.pairs, args.out, workers=args.workers)
    print(f"{s.pairs} pairs written to {args.out} ({s.backgrounds_rejected} backgrounds rejected, {s.retries} retries)")
    return 0


def cmd_region(args) -> int:
    from .raster import read_rgb
    from .synth import authentic_region

    if args.dry_run:
        return _dry(args, {"image": args.image})
    box = authentic_region(read_rgb(args.image))
    print(box.x, box.y, box.w, box.h)
    return 0


def cmd_pretrain(args) -> int:
    from .corpus import load_backgrounds, load_foregrounds
    from .train import DatasetPairs, SynthPairs, pretrain

    cfg = train_config(args)
    scfg = synth_config(args)
    _check(
        bool(args.dataset) != bool(args.fores or args.backs),
        "give either --dataset or both --fores and --backs",
    )
    _check(bool(args.dataset) or bool(args.fores and args.backs), "--fores and --backs go together")
    if args.dry_run:
        return _dry(args, {"train": cfg.to_dict(), "synth": scfg.to_dict()})
    if args.dataset:
        source = DatasetPairs(args.dataset)
    else:
        source = SynthPairs(load_foregrounds(args.fores), load_backgrounds(args.backs), scfg)
    res = pretrain(source, cfg, out=args.out, resume=args.resume)
    last = res.metrics[-1] if res.metrics else None
    tail = f", final loss {last.loss:.4f}" if last else ""
    print(f"{res.state.step} steps{tail}; checkpoints: {', '.join(p.name for p in res.checkpoints) or 'none'}")
    return 0


def cmd_probe(args) -> int:
    from .train import linear_probe

    _check(args.seed >= 0, f"--seed must be >= 0, got {args.seed}")
    if args.dry_run:
        return _dry(args, vars(args))
    print(f"{linear_probe(args.ckpt, args.dataset, seed=args.seed):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    _check(args.seeds >= 1, f"--seeds must be >= 1, got {args.seeds}")
    if args.dry_run:
        return _dry(args, vars(args))
    results = run_gradchecks(range(args.seeds))
    for r in results:
        print(f"{r.name}: max relative error {r.max_rel_error:.3e} (tolerance {r.tolerance:.0e}) {'ok' if r.ok else 'FAIL'}")
    return 0 if all(r.ok for r in results) else 1


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "synth": cmd_synth,
    "region": cmd_region,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
}


def run_command(argv=None) -> int:
    """Run one subcommand; returns the process exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except SegLocError as exc:
        print(f"segloc: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"segloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SegLocError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"segloc {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
