"""Command-line interface: subcommands, exit codes, and artifacts."""

import os

import numpy as np
import pytest

from wrenchcast.cli import build_parser, run
from wrenchcast.data import load_episode

SMALL_CONFIG = """\
[synth]
length_s = 8.0

[model]
n = 6
L = 50
T = 50
D = 8
P = 10
M = 2
depth = 1
heads = 2

[train]
batch = 16
epochs = 1

[data]
stride = 25

[eval]
spectrum_window = 500
"""


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text(SMALL_CONFIG)
    return str(path)


@pytest.fixture()
def episode_dir(tmp_path, config_path):
    out = str(tmp_path / "episodes")
    code = run(["synth", "--config", config_path, "--seed", "0",
                "--out", out, "--episodes", "3"])
    assert code == 0
    return out


class TestParsing:
    def test_requires_subcommand(self):
        assert run([]) == 1

    def test_unknown_flag(self):
        assert run(["synth", "--out", "/tmp/x", "--bogus"]) == 1

    def test_help_exits_clean(self):
        assert run(["--help"]) == 0

    def test_all_subcommands_registered(self):
        sub = build_parser()._subparsers._group_actions[0]
        assert set(sub.choices) == {
            "synth", "preprocess", "train", "pretrain", "transfer",
            "evaluate", "ablate", "spectrum", "plot",
        }


class TestSynth:
    def test_writes_episodes_and_manifest(self, episode_dir):
        files = sorted(os.listdir(episode_dir))
        csvs = [f for f in files if f.endswith(".csv")]
        assert csvs == ["episode_000.csv", "episode_001.csv", "episode_002.csv"]
        assert "run_manifest.txt" in files
        manifest = open(os.path.join(episode_dir, "run_manifest.txt")).read()
        assert "command = synth" in manifest
        assert manifest.count("output = ") == 3
        e = load_episode(os.path.join(episode_dir, "episode_000.csv"))
        assert e.steps == 800 and e.n == 6

    def test_deterministic(self, tmp_path, config_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert run(["synth", "--config", config_path, "--seed", "7",
                        "--out", out, "--episodes", "1"]) == 0
        fa = open(os.path.join(a, "episode_000.csv")).read()
        fb = open(os.path.join(b, "episode_000.csv")).read()
        assert fa == fb

    def test_seed_changes_data(self, tmp_path, config_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        run(["synth", "--config", config_path, "--seed", "1", "--out", a,
             "--episodes", "1"])
        run(["synth", "--config", config_path, "--seed", "2", "--out", b,
             "--episodes", "1"])
        fa = open(os.path.join(a, "episode_000.csv")).read()
        fb = open(os.path.join(b, "episode_000.csv")).read()
        assert fa != fb


class TestPreprocess:
    def test_outputs(self, tmp_path, config_path, episode_dir):
        out = str(tmp_path / "prep")
        assert run(["preprocess", "--config", config_path, "--out", out,
                    episode_dir]) == 0
        csvs = [f for f in os.listdir(out) if f.endswith(".csv")]
        assert len(csvs) == 3
        raw = load_episode(os.path.join(episode_dir, "episode_000.csv"))
        prep = load_episode(os.path.join(out, "episode_000.csv"))
        # denoising and offset removal change the stored wrench
        assert prep.steps == raw.steps
        assert not np.allclose(prep.W, raw.W)
        # the static-head offset is removed per channel
        static = prep.timestamps < prep.static_end_s
        assert np.all(np.abs(prep.W[:, static].mean(axis=1)) < 0.2)

    def test_missing_data_dir_is_runtime_error(self, tmp_path):
        assert run(["preprocess", "--out", str(tmp_path / "o"),
                    str(tmp_path / "nope")]) == 2


class TestTrainEvaluate:
    def _train(self, tmp_path, config_path, episode_dir, extra=()):
        out = str(tmp_path / "model")
        code = run(["train", "--config", config_path, "--seed", "0",
                    "--out", out, episode_dir, *extra])
        assert code == 0
        return out

    def test_fdn_checkpoint_and_log(self, tmp_path, config_path, episode_dir):
        out = self._train(tmp_path, config_path, episode_dir)
        assert os.path.exists(os.path.join(out, "checkpoint.pt"))
        assert os.path.exists(os.path.join(out, "checkpoint.manifest.txt"))
        log = open(os.path.join(out, "train_log.csv")).read().strip().split("\n")
        assert log[0] == "step,total,trend,residual,wall_s"
        assert len(log) > 1

    def test_evaluate_writes_report(self, tmp_path, config_path, episode_dir):
        model = self._train(tmp_path, config_path, episode_dir)
        out = str(tmp_path / "eval")
        code = run(["evaluate", "--config", config_path, "--out", out,
                    "--model", os.path.join(model, "checkpoint"),
                    "--delays", "100,500", episode_dir])
        assert code == 0
        rows = open(os.path.join(out, "report.csv")).read().strip().split("\n")
        assert rows[0] == (
            "model,episode,delay_ms,channel,wrmse,prmse,crps,normalized"
        )
        # 3 episodes x 2 delays x 6 channels x {physical, normalized}
        assert len(rows) - 1 == 3 * 2 * 6 * 2
        assert os.path.exists(os.path.join(out, "summary.txt"))

    def test_evaluate_deterministic(self, tmp_path, config_path, episode_dir):
        model = self._train(tmp_path, config_path, episode_dir)
        reports = []
        for tag in ("e1", "e2"):
            out = str(tmp_path / tag)
            assert run(["evaluate", "--config", config_path, "--out", out,
                        "--model", os.path.join(model, "checkpoint"),
                        "--delays", "100", episode_dir]) == 0
            reports.append(open(os.path.join(out, "report.csv")).read())
        assert reports[0] == reports[1]

    def test_baseline_training(self, tmp_path, config_path, episode_dir):
        out = self._train(tmp_path, config_path, episode_dir,
                          extra=["--baseline", "point_mlp"])
        from wrenchcast.training import read_manifest

        assert read_manifest(os.path.join(out, "checkpoint"))["kind"] == "point_mlp"

    def test_corrupt_episode_is_runtime_error(self, tmp_path, config_path):
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "episode_000.csv").write_text("not,a,real,episode\n1,2,3,4\n")
        assert run(["train", "--config", config_path,
                    "--out", str(tmp_path / "m"), str(bad)]) == 2


class TestPretrainTransfer:
    def test_pipeline(self, tmp_path):
        cfg = tmp_path / "pre.ini"
        cfg.write_text(
            "[model]\nL = 50\nT = 50\nD = 8\nP = 10\nM = 2\ndepth = 1\nheads = 2\n"
            "[pretrain]\nepisodes = 2\nlength_s = 6.0\nstride = 25\n"
            "[train]\nbatch = 16\nepochs = 1\n"
            "[data]\nstride = 25\n"
            "[synth]\nlength_s = 8.0\n"
        )
        pre = str(tmp_path / "pre")
        assert run(["pretrain", "--config", str(cfg), "--seed", "0",
                    "--out", pre, "--data-util", "50"]) == 0
        from wrenchcast.training import read_manifest

        manifest = read_manifest(os.path.join(pre, "checkpoint"))
        assert manifest["stage"] == "pretrain"
        assert manifest["config"]["n"] == 7 and manifest["config"]["mask_u"]

        data = str(tmp_path / "eps")
        assert run(["synth", "--config", str(cfg), "--seed", "0",
                    "--out", data, "--episodes", "3"]) == 0
        post = str(tmp_path / "post")
        assert run(["transfer", "--config", str(cfg), "--seed", "0",
                    "--out", post,
                    "--model", os.path.join(pre, "checkpoint"), data]) == 0
        assert read_manifest(os.path.join(post, "checkpoint"))["stage"] == "fine_tune"

        out = str(tmp_path / "eval")
        assert run(["evaluate", "--config", str(cfg), "--out", out,
                    "--model", os.path.join(post, "checkpoint"),
                    "--delays", "100", data]) == 0
        assert os.path.exists(os.path.join(out, "report.csv"))


class TestSpectrum:
    def test_csv_layout(self, tmp_path, config_path, episode_dir):
        out = str(tmp_path / "spec")
        assert run(["spectrum", "--config", config_path, "--out", out,
                    episode_dir]) == 0
        rows = open(os.path.join(out, "spectrum.csv")).read().strip().split("\n")
        assert rows[0] == "freq_hz,fx,fy,fz,mx,my,mz"
        table = np.loadtxt(os.path.join(out, "spectrum.csv"),
                           delimiter=",", skiprows=1)
        # 500-step window at 100 Hz -> rfft bins up to Nyquist
        assert table.shape == (251, 7)
        assert table[0, 0] == 0.0 and table[-1, 0] == pytest.approx(50.0)


class TestAblate:
    def test_unknown_flag_rejected(self, tmp_path, config_path, episode_dir):
        assert run(["ablate", "--config", config_path,
                    "--out", str(tmp_path / "a"), "--flags", "no_magic",
                    episode_dir]) == 2

    def test_table(self, tmp_path, config_path, episode_dir):
        out = str(tmp_path / "abl")
        assert run(["ablate", "--config", config_path, "--seed", "0",
                    "--out", out, "--flags", "no_res_head",
                    "--delays", "100", episode_dir]) == 0
        rows = open(os.path.join(out, "ablation.csv")).read().strip().split("\n")
        assert rows[0].startswith("variant,delay_ms,")
        variants = [r.split(",")[0] for r in rows[1:]]
        assert variants == ["full", "no_res_head"]


class TestPlot:
    def test_writes_pngs(self, tmp_path, config_path, episode_dir):
        model = str(tmp_path / "model")
        assert run(["train", "--config", config_path, "--seed", "0",
                    "--out", model, episode_dir]) == 0
        out = str(tmp_path / "plots")
        assert run(["plot", "--config", config_path, "--out", out,
                    "--model", os.path.join(model, "checkpoint"),
                    "--delays", "100", episode_dir]) == 0
        pngs = [f for f in os.listdir(out) if f.endswith(".png")]
        assert len(pngs) == 3
