import numpy as np
import pytest

from ftacl.audio import WavClip, encode_wav
from ftacl.cli import main
from ftacl.fileformat import load_tensor, save_tensor

QUICK = "epochs=2\ntasks=2\nclasses=3\ntrain_per_class=6\ntest_per_class=4\nbottleneck=8\n"


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def quick_config(tmp_path):
    p = tmp_path / "quick.cfg"
    p.write_text(QUICK)
    return str(p)


# -- analyze ----------------------------------------------------------------


def test_analyze_reference_table(capsys):
    code, out, _ = run_cli(capsys, "analyze", "--frames", "101", "501", "1006")
    assert code == 0
    assert out.splitlines() == [
        "# m t o_gsa_over_d o_fta_over_d k",
        "12 9 11881 2377 0.2",
        "12 49 346921 36457 0.105",
        "12 100 1442401 135601 0.094",
    ]


def test_analyze_single_patch_kv(capsys):
    code, out, _ = run_cli(capsys, "analyze", "--freq-bins", "16", "--frames", "16", "--format", "kv")
    assert code == 0
    assert out.strip() == "m=1 t=1 o_gsa_over_d=4 o_fta_over_d=4 k=1.0"


def test_analyze_from_durations(capsys):
    code, out, _ = run_cli(capsys, "analyze", "--duration-s", "1", "5")
    assert code == 0
    assert out.splitlines()[1:] == ["12 9 11881 2377 0.2", "12 49 346921 36457 0.105"]


@pytest.mark.parametrize("argv", [["analyze", "--frames", "5"], ["analyze"], ["nonsense"], ["analyze", "--frames", "x"]])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run_cli(capsys, *argv)
    assert code == 2
    assert err.startswith("error:") or "usage" in err


# -- features ---------------------------------------------------------------


def write_wav(path, samples):
    path.write_bytes(encode_wav(WavClip(16000, samples)))


def test_features_shapes_and_silence(capsys, tmp_path):
    t = np.arange(16000) / 16000
    write_wav(tmp_path / "tone.wav", 0.3 * np.sin(2 * np.pi * 1000 * t))
    write_wav(tmp_path / "quiet.wav", np.zeros(80000))
    code, out, _ = run_cli(capsys, "features", str(tmp_path / "tone.wav"), str(tmp_path / "tone.ftt"))
    assert code == 0 and "shape=128,101" in out
    assert load_tensor(tmp_path / "tone.ftt").shape == (128, 101)
    code, _, _ = run_cli(capsys, "features", str(tmp_path / "quiet.wav"), str(tmp_path / "q.ftt"), "--dtype", "f64")
    q = load_tensor(tmp_path / "q.ftt")
    assert code == 0 and q.shape == (128, 501) and q.dtype == np.float64
    assert np.all(q == np.log(1e-10))


def test_features_truncated_wav_exits_1(capsys, tmp_path):
    raw = encode_wav(WavClip(16000, np.zeros(16000)))
    (tmp_path / "cut.wav").write_bytes(raw[:-100])
    code, _, err = run_cli(capsys, "features", str(tmp_path / "cut.wav"), str(tmp_path / "o.ftt"))
    assert code == 1 and "truncated" in err
    assert not (tmp_path / "o.ftt").exists()


def test_features_missing_file(capsys, tmp_path):
    code, _, _ = run_cli(capsys, "features", str(tmp_path / "none.wav"), str(tmp_path / "o.ftt"))
    assert code in (1, 2)


# -- params -----------------------------------------------------------------


def test_params_full_preset(capsys):
    code, out, _ = run_cli(capsys, "params", "--preset", "paper-full", "--mode", "adapter-inc", "--tasks", "3")
    assert code == 0
    kv = dict(line.split("=", 1) for line in out.splitlines() if "=" in line)
    assert abs(int(kv["total"]) - 96.6e6) / 96.6e6 < 0.05
    assert float(kv["trainable_fraction"]) < 0.05


def test_params_bad_mode(capsys):
    assert run_cli(capsys, "params", "--mode", "lora")[0] == 2


# -- ticl / train / eval ----------------------------------------------------


def test_ticl_adapter_run_has_zero_forgetting(capsys, tmp_path, quick_config):
    code, out, _ = run_cli(capsys, "ticl", str(tmp_path / "r"), "--config", quick_config, "--mode", "adapter-inc")
    assert code == 0
    assert "forgetting=0.000000" in out
    assert (tmp_path / "r" / "matrix.txt").read_text() == out
    assert {p.name for p in (tmp_path / "r").iterdir()} >= {"config.txt", "backbone.ftck", "task_1.ftck", "task_2.ftck"}


def test_ticl_rerun_is_byte_identical(capsys, tmp_path, quick_config):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run_cli(capsys, "ticl", str(tmp_path / name), "--config", quick_config, "--mode", "model-seq")
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    for f in ("task_1.ftck", "task_2.ftck", "backbone.ftck"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_flags_override_config_file_and_env_seed(capsys, tmp_path, quick_config, monkeypatch):
    monkeypatch.setenv("FTACL_SEED", "11")
    run_cli(capsys, "ticl", str(tmp_path / "r"), "--config", quick_config, "--mode", "model-inc", "--epochs", "1")
    text = (tmp_path / "r" / "config.txt").read_text()
    assert "epochs=1" in text and "seed=11" in text and "classes=3" in text
    run_cli(capsys, "ticl", str(tmp_path / "s"), "--config", quick_config, "--mode", "model-inc", "--epochs", "1", "--seed", "4")
    assert "seed=4" in (tmp_path / "s" / "config.txt").read_text()


@pytest.mark.parametrize("extra", ["colour=red\n", "bottleneck=40\n", "heads=5\n"])
def test_bad_config_exits_2(capsys, tmp_path, extra):
    p = tmp_path / "bad.cfg"
    p.write_text(QUICK + extra)
    assert run_cli(capsys, "ticl", str(tmp_path / "r"), "--config", str(p), "--mode", "adapter-inc")[0] == 2


def test_missing_config_and_bad_mode_exit_2(capsys, tmp_path):
    assert run_cli(capsys, "ticl", str(tmp_path / "r"), "--config", str(tmp_path / "nope"))[0] == 2
    assert run_cli(capsys, "ticl", str(tmp_path / "r"), "--mode", "model-xyz")[0] == 2


def test_train_then_eval(capsys, tmp_path, quick_config):
    rd = str(tmp_path / "r")
    code, out, _ = run_cli(capsys, "train", rd, "--config", quick_config, "--mode", "adapter-inc")
    assert code == 0 and out.startswith("task_id=1 ")
    code, out, _ = run_cli(capsys, "train", rd)
    assert code == 0 and out.startswith("task_id=2 ")
    assert run_cli(capsys, "train", rd)[0] == 2  # all tasks done
    assert run_cli(capsys, "train", rd, "--epochs", "3")[0] == 2  # already configured

    code, out, _ = run_cli(capsys, "eval", rd)
    assert code == 0 and len(out.splitlines()) == 2

    x = np.random.default_rng(0).standard_normal((46, 56)).astype(np.float32)
    save_tensor(tmp_path / "x.ftt", x)
    code, out1, _ = run_cli(capsys, "eval", rd, "--features", str(tmp_path / "x.ftt"), "--task-id", "2")
    assert code == 0 and out1.startswith("task_id=2 prediction=")
    code, out2, _ = run_cli(capsys, "eval", rd, "--features", str(tmp_path / "x.ftt"), "--task-id", "2")
    assert out1 == out2
    assert run_cli(capsys, "eval", rd, "--features", str(tmp_path / "x.ftt"), "--task-id", "7")[0] == 1
    assert run_cli(capsys, "eval", str(tmp_path / "empty"))[0] == 2
