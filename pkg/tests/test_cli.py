import shutil
import subprocess
import sys

import numpy as np
import pytest

from embracenet.cli import EXIT_ABORT, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, main
from embracenet.config import RunConfig, dump_run_config, load_run_config, parse_config_text
from embracenet.errors import ConfigurationError
from embracenet.fusion import SENSORS
from embracenet.model import load_checkpoint


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["-q", "synth", "--out", str(out), "--samples", "32", "--val-samples", "16", "--window", "20", "--seed", "1"]) == 0
    return out


def tiny_train_args(synth_dir, out, *extra):
    return [
        "-q", "train", "--preset", "tiny", "--steps", "6", "--eval-interval", "3", "--checkpoint-interval", "3",
        "--train-manifest", str(synth_dir / "train" / "manifest.txt"),
        "--val-manifest", str(synth_dir / "validation" / "manifest.txt"),
        "--out-dir", str(out), *extra,
    ]  # fmt: skip


def test_synth_layout_and_seed_echo(synth_dir, capsys):
    for split in ("train", "validation"):
        names = {p.name for p in (synth_dir / split).iterdir()}
        assert names == {"manifest.txt", "label.txt", *(f"{s}.txt" for s in SENSORS)}
    assert len((synth_dir / "train" / "label.txt").read_text().splitlines()) == 32
    assert main(["synth", "--out", str(synth_dir / "again"), "--samples", "2", "--seed", "7"]) == 0
    assert "seed: 7" in capsys.readouterr().out


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["-q", "synth", "--out", str(tmp_path / name), "--samples", "64", "--seed", "1"]) == 0
    for f in (tmp_path / "a" / "train").iterdir():
        if f.name != "manifest.txt":
            assert f.read_bytes() == (tmp_path / "b" / "train" / f.name).read_bytes()


def test_synth_rejections(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--classes", "9"]) == EXIT_USAGE
    assert "8" in capsys.readouterr().err
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--out", str(blocker / "sub"), "--samples", "2"]) == EXIT_USAGE
    assert main(["synth"]) == EXIT_USAGE


def test_train_eval_predict_round(synth_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(tiny_train_args(synth_dir, run, "--seed", "4")) == EXIT_OK
    out = capsys.readouterr().out
    assert "seed: 4" in out and "final metrics: acc=" in out
    ckpt = run / "checkpoint-00000006.ckpt"
    assert ckpt.exists() and len((run / "metrics.log").read_text().splitlines()) == 2

    val = str(synth_dir / "validation" / "manifest.txt")
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", val, "--ensemble-n", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ensemble_n=3" in out and "acc=" in out
    assert (run / "eval.log").exists()

    pred = tmp_path / "pred.txt"
    assert main(["-q", "predict", "--checkpoint", str(ckpt), "--manifest", val, "--output", str(pred), "--seed", "2"]) == EXIT_OK
    first = pred.read_bytes()
    assert main(["-q", "predict", "--checkpoint", str(ckpt), "--manifest", val, "--output", str(pred), "--seed", "2"]) == EXIT_OK
    assert pred.read_bytes() == first
    assert np.loadtxt(pred, dtype=int).shape == (16, 5)


def test_unlabelled_split(synth_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(tiny_train_args(synth_dir, run)) == EXIT_OK
    unl = tmp_path / "unl"
    shutil.copytree(synth_dir / "validation", unl)
    (unl / "label.txt").unlink()
    manifest = unl / "manifest.txt"
    manifest.write_text("".join(l for l in manifest.open() if not l.startswith("label")))
    ckpt = str(run / "checkpoint-00000006.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--manifest", str(manifest)]) == EXIT_USAGE
    assert "label" in capsys.readouterr().err
    assert main(["predict", "--checkpoint", ckpt, "--manifest", str(manifest), "--output", str(tmp_path / "p.txt")]) == EXIT_OK
    assert "acc=" not in capsys.readouterr().out


@pytest.mark.parametrize("flags, check", [
    (["--fusion", "early"], lambda c: c.fusion == "early" and "early.pre1.w" in c_params(c)),
    (["--input-mode", "fft"], lambda c: c.input_mode == "fft"),
])  # fmt: skip
def test_train_overrides(synth_dir, tmp_path, flags, check):
    assert main(tiny_train_args(synth_dir, tmp_path, *flags)) == EXIT_OK
    assert check(load_checkpoint(tmp_path / "checkpoint-00000006.ckpt").model.config)


def c_params(cfg):
    from embracenet.model import Model

    return list(Model(cfg).params)


def test_checkpoint_dataset_mismatch(synth_dir, tmp_path):
    run = tmp_path / "run"
    assert main(tiny_train_args(synth_dir, run, "--modalities", "gravity,pressure")) == EXIT_OK
    other = tmp_path / "long"
    assert main(["-q", "synth", "--out", str(other), "--samples", "2", "--window", "40"]) == EXIT_OK
    args = ["eval", "--checkpoint", str(run / "checkpoint-00000006.ckpt"), "--manifest", str(other / "train" / "manifest.txt")]
    assert main(args) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_abort_exit_code(synth_dir, tmp_path):
    bad = tmp_path / "bad"
    shutil.copytree(synth_dir / "train", bad)
    # a value that overflows to inf under the first conv makes every loss non-finite
    text = (bad / "pressure.txt").read_text().splitlines()
    text = [" ".join(["1e308"] * 20) for _ in text]
    (bad / "pressure.txt").write_text("\n".join(text) + "\n")
    args = ["-q", "train", "--preset", "tiny", "--steps", "2", "--train-manifest", str(bad / "manifest.txt"), "--out-dir", str(tmp_path / "o")]
    assert main(args) == EXIT_ABORT


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "gradcheck passed" in out
    # every parameter block of the tiny embrace model is reported exactly once
    from embracenet.model import Model, ModelConfig

    names = [l.split()[1].rstrip(":") for l in out.splitlines() if " model-tiny-embrace/" in l]
    expected = [f"model-tiny-embrace/{n}" for n in Model(ModelConfig.preset_config("tiny")).params]
    assert sorted(names) == sorted(expected)
    assert main(["gradcheck", "--inject-fault"]) == EXIT_CHECK_FAILED
    assert "FAILED" in capsys.readouterr().out


def test_console_script_runs(tmp_path):
    exe = shutil.which("embracenet")
    cmd = [exe] if exe else [sys.executable, "-m", "embracenet"]
    proc = subprocess.run([*cmd, "synth", "--out", str(tmp_path), "--samples", "2", "--seed", "3"], capture_output=True, text=True)
    assert proc.returncode == 0 and "seed: 3" in proc.stdout
    proc = subprocess.run([*cmd, "train", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE


# -- config files -------------------------------------------------------------


def test_config_file_and_flag_precedence(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# desk run\npreset = tiny\ntotal_steps = 4\nseed = 11\neval_interval = 2\n"
        f"train_manifest = {synth_dir / 'train' / 'manifest.txt'}\nout_dir = {tmp_path / 'o'}\n"
    )
    assert main(["train", "--config", str(cfg), "--seed", "12"]) == EXIT_OK
    assert "seed: 12" in capsys.readouterr().out
    assert load_checkpoint(tmp_path / "o" / "checkpoint-00000004.ckpt").model.seed == 12


@pytest.mark.parametrize("text, where", [
    ("seed = 1\nbatchsize = 8\n", ":2: unknown key 'batchsize'"),
    ("seed = 1\n\nseed = 2\n", ":3: key 'seed' already set on line 1"),
    ("augment_rotation = maybe\n", ":1: bad value for 'augment_rotation'"),
    ("total_steps = lots\n", ":1: bad value for 'total_steps'"),
    ("just words\n", ":1: expected 'key = value'"),
])  # fmt: skip
def test_config_errors_name_key_and_line(text, where, tmp_path, capsys):
    with pytest.raises(ConfigurationError) as info:
        parse_config_text(text, "run.cfg")
    assert where in str(info.value)
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    assert main(["train", "--config", str(path)]) == EXIT_USAGE
    assert where in capsys.readouterr().err


def test_config_roundtrip(tmp_path):
    cfg = RunConfig(preset="large", fusion="late", modalities=("gravity", "pressure"), augment_rotation=True, p=(0.5, 0.5))
    path = tmp_path / "c.cfg"
    path.write_text(dump_run_config(cfg))
    assert load_run_config(path) == cfg


def test_manifest_paths_are_relative_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "c.cfg"
    path.write_text("train_manifest = data/m.txt, other/m.txt\n")
    cfg = load_run_config(path)
    assert cfg.train_manifest == (str(tmp_path / "sub" / "data/m.txt"), str(tmp_path / "sub" / "other/m.txt"))
