import json
import re

import numpy as np
import pytest

from segloc.cli import parse, run_command
from segloc.raster import write_rgb


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_command(["gen-toy", "--out", str(root / "toy"), "--classes", "3", "--fore", "3", "--back", "8", "--seed", "1"]) == 0
    return root / "toy"


def synth_args(corpus, out, *extra):
    return ["synth", "--fores", str(corpus / "foregrounds"), "--backs", str(corpus / "backgrounds"), "--out", str(out), *extra]


def test_region_prints_box(tmp_path, capsys):
    img = np.full((200, 200, 3), 255, np.uint8)
    img[80:160, 60:140] = 0
    write_rgb(tmp_path / "r.png", img)
    assert run_command(["region", str(tmp_path / "r.png")]) == 0
    assert capsys.readouterr().out.strip() == "64 84 72 72"


def test_region_white_fails(tmp_path, capsys):
    write_rgb(tmp_path / "w.png", np.full((30, 30, 3), 255, np.uint8))
    assert run_command(["region", str(tmp_path / "w.png")]) != 0
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "EmptyRegion" in err


def test_missing_file(tmp_path, capsys):
    assert run_command(["region", str(tmp_path / "nope.png")]) != 0
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_synth_twice_identical(corpus, tmp_path):
    for name in ("a", "b"):
        assert run_command(synth_args(corpus, tmp_path / name, "--pairs", "10", "--seed", "7", "--width", "64")) == 0
    a = (tmp_path / "a" / "pairs.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "pairs.jsonl").read_bytes()
    assert len(a.splitlines()) == 10


def test_synth_workers_identical(corpus, tmp_path):
    run_command(synth_args(corpus, tmp_path / "a", "--pairs", "6", "--width", "64"))
    run_command(synth_args(corpus, tmp_path / "b", "--pairs", "6", "--width", "64", "--workers", "4"))
    assert (tmp_path / "a" / "pairs.jsonl").read_bytes() == (tmp_path / "b" / "pairs.jsonl").read_bytes()


def test_pretrain_paper_flags_accepted(corpus, tmp_path, capsys):
    argv = [
        "pretrain", "--fores", str(corpus / "foregrounds"), "--backs", str(corpus / "backgrounds"),
        "--out", str(tmp_path), "--coeff-min", "0.25", "--coeff-max", "0.65", "--batch", "64",
        "--queue-size", "16384", "--dry-run",
    ]  # fmt: skip
    assert run_command(argv) == 0
    settings = json.loads(capsys.readouterr().out)
    assert settings["train"]["batch"] == 64 and settings["train"]["queue_size"] == 16384


def test_coefficient_order_rejected(corpus, tmp_path, capsys):
    argv = ["pretrain", "--fores", str(corpus / "foregrounds"), "--backs", str(corpus / "backgrounds"),
            "--out", str(tmp_path), "--coeff-min", "0.9", "--coeff-max", "0.5"]  # fmt: skip
    assert run_command(argv) != 0
    err = capsys.readouterr().err
    assert "--coeff-min" in err and "--coeff-max" in err
    assert not any(tmp_path.iterdir())


@pytest.mark.parametrize(
    "flags,named",
    [(["--tau", "0"], "--tau"), (["--momentum", "1.5"], "--momentum"), (["--batch", "0"], "--batch"),
     (["--freeze-stages", "5"], "--freeze-stages"), (["--width", "0"], "--width")],
)  # fmt: skip
def test_named_flag_diagnostics(corpus, tmp_path, capsys, flags, named):
    argv = ["pretrain", "--dataset", str(tmp_path), "--out", str(tmp_path / "o"), *flags]
    assert run_command(argv) == 2
    assert named in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run_command(["fly"]) != 0
    assert "usage" in capsys.readouterr().err


def test_help_shows_paper_defaults(capsys):
    assert run_command(["pretrain", "--help"]) == 0
    text = re.sub(r"\s+", " ", capsys.readouterr().out)
    for flag, value in [("--coeff-min", "0.25"), ("--coeff-max", "0.65"), ("--batch", "64"),
                        ("--queue-size", "16384"), ("--width", "500"), ("--tau", "0.2"), ("--momentum", "0.999")]:  # fmt: skip
        assert re.search(re.escape(flag) + r" \S+ (?:(?! --).)*?\(default: " + re.escape(value) + r"\)", text), flag


def test_config_overlay_flags_win(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy run\ntau = 0.1\nbatch=16\nsymmetric = true\n")
    args = parse(["pretrain", "--dataset", "d", "--out", "o", "--config", str(cfg), "--batch", "8"])
    assert args.tau == 0.1 and args.batch == 8 and args.symmetric is True


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("warp = 9\n")
    assert run_command(["pretrain", "--dataset", "d", "--out", "o", "--config", str(cfg)]) != 0
    assert "warp" in capsys.readouterr().err


def test_pretrain_and_probe(corpus, tmp_path, capsys):
    assert run_command(synth_args(corpus, tmp_path / "ds", "--pairs", "20", "--width", "64")) == 0
    argv = ["pretrain", "--dataset", str(tmp_path / "ds"), "--out", str(tmp_path / "run"), "--batch", "4",
            "--queue-size", "8", "--epochs", "1"]  # fmt: skip
    assert run_command(argv) == 0
    assert (tmp_path / "run" / "ckpt_epoch_1" / "header.json").exists()
    assert len((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()) == 5
    capsys.readouterr()
    assert run_command(["probe", "--ckpt", str(tmp_path / "run" / "ckpt_epoch_1"), "--dataset", str(tmp_path / "ds")]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and 0.0 <= float(out[0]) <= 1.0


def test_gradcheck(capsys):
    assert run_command(["gradcheck", "--seeds", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split(":")[0] for ln in lines] == ["encoder", "info_nce"]
