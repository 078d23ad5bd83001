import json
import os

import numpy as np

from cmr.cli import main
from cmr.model import generate_synthetic, random_covariances, save_model


def run_dir(base, subcommand, label):
    return os.path.join(base, f"{subcommand}-{label}")


class TestDispatch:
    def test_no_arguments_prints_help_and_fails(self, capsys):
        assert main([]) == 1
        out = capsys.readouterr().out
        assert "usage:" in out

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag(self, capsys):
        assert main(["gradcheck", "--no-such-flag"]) == 1

    def test_missing_model_file_is_config_error(self, tmp_path, capsys):
        code = main(["diagnostics", "--model", str(tmp_path / "nope.json"),
                     "--outdir", str(tmp_path), "--label", "x"])
        assert code == 1


class TestPhase:
    def test_tiny_run_writes_artifacts(self, tmp_path, capsys):
        out = str(tmp_path)
        code = main([
            "phase", "--b", "8", "--p", "4", "--i-values", "5,20", "--t-values", "4,8",
            "--trials", "3", "--seed", "5", "--max-iters", "100",
            "--outdir", out, "--label", "t",
        ])
        assert code == 0
        d = run_dir(out, "phase", "t")
        for name in ("config.json", "trials.csv", "summary.csv", "heatmap.pgm"):
            assert os.path.exists(os.path.join(d, name))
        cfg = json.load(open(os.path.join(d, "config.json")))
        assert cfg["b"] == 8
        assert cfg["i_values"] == [5, 20]
        assert cfg["master_seed"] == 5
        assert cfg["refine"]["max_iters"] == 100
        assert "phase:" in capsys.readouterr().out

    def test_config_file_with_flag_override(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "b": 8, "p": 4, "i_values": [5], "t_values": [4],
            "trials_per_cell": 2, "master_seed": 1,
            "refine": {"max_iters": 50},
        }))
        out = str(tmp_path)
        code = main(["phase", "--config", str(cfg_path), "--seed", "9",
                     "--outdir", out, "--label", "o"])
        assert code == 0
        cfg = json.load(open(os.path.join(run_dir(out, "phase", "o"), "config.json")))
        assert cfg["master_seed"] == 9  # flag wins
        assert cfg["trials_per_cell"] == 2  # file wins over default

    def test_thread_count_gives_identical_csv(self, tmp_path):
        out = str(tmp_path)
        args = ["phase", "--b", "8", "--p", "4", "--i-values", "5,20",
                "--t-values", "4", "--trials", "3", "--seed", "3",
                "--max-iters", "80", "--outdir", out]
        assert main(args + ["--label", "one", "--threads", "1"]) == 0
        assert main(args + ["--label", "two", "--threads", "2"]) == 0
        read = lambda label, name: open(
            os.path.join(run_dir(out, "phase", label), name), "rb").read()
        for name in ("trials.csv", "summary.csv", "heatmap.pgm", "config.json"):
            assert read("one", name) == read("two", name)


class TestHarnessSubcommands:
    def test_sweep_b(self, tmp_path, capsys):
        out = str(tmp_path)
        code = main(["sweep-b", "--b-values", "6,10", "--p", "4", "--i", "30",
                     "--t", "6", "--trials", "3", "--seed", "2", "--max-iters", "80",
                     "--outdir", out, "--label", "s"])
        assert code == 0
        assert os.path.exists(os.path.join(run_dir(out, "sweep-b", "s"), "summary.csv"))

    def test_verify_lemma1(self, tmp_path, capsys):
        out = str(tmp_path)
        code = main(["verify-lemma1", "--i-values", "20,80", "--reps", "6",
                     "--seed", "4", "--outdir", out, "--label", "v"])
        assert code == 0
        d = run_dir(out, "verify-lemma1", "v")
        assert os.path.exists(os.path.join(d, "errors.csv"))
        assert os.path.exists(os.path.join(d, "summary.csv"))

    def test_verify_lemma2(self, tmp_path, capsys):
        out = str(tmp_path)
        code = main(["verify-lemma2", "--i-values", "10,40", "--reps", "6",
                     "--seed", "4", "--outdir", out, "--label", "v"])
        assert code == 0
        assert "verify-lemma2:" in capsys.readouterr().out

    def test_verify_lemma3(self, tmp_path, capsys):
        out = str(tmp_path)
        code = main(["verify-lemma3", "--trials", "5", "--seed", "7",
                     "--outdir", out, "--label", "v"])
        assert code == 0
        printed = capsys.readouterr().out
        assert "0 violations" in printed
        lines = open(os.path.join(run_dir(out, "verify-lemma3", "v"),
                                  "trials.csv")).read().strip().split("\n")
        assert len(lines) == 6

    def test_gradcheck(self, tmp_path, capsys):
        out = str(tmp_path)
        assert main(["gradcheck", "--instances", "3", "--seed", "1",
                     "--outdir", out, "--label", "g"]) == 0
        assert "max_rel_error" in capsys.readouterr().out


class TestClassifyAndDiagnostics:
    def test_classify_synthetic(self, tmp_path, capsys):
        out = str(tmp_path)
        code = main(["classify", "--synthetic", "60", "--pairs", "2",
                     "--t-train", "20", "--t-test", "40", "--reps", "1",
                     "--methods", "cmr,frr", "--outdir", out, "--label", "c"])
        assert code == 0
        csv = open(os.path.join(run_dir(out, "classify", "c"), "accuracy.csv")).read()
        assert csv.startswith("method,t_train,repetition,digit_a,digit_b,accuracy")
        assert "cmr," in csv and "frr," in csv

    def test_classify_reads_idx_from_env(self, tmp_path, capsys, monkeypatch):
        from cmr.vision import synthetic_digits, write_idx_images, write_idx_labels

        data_dir = tmp_path / "data"
        data_dir.mkdir()
        images, labels = synthetic_digits(60, seed=2)
        write_idx_images(data_dir / "train-images-idx3-ubyte", images)
        write_idx_labels(data_dir / "train-labels-idx1-ubyte", labels)
        monkeypatch.setenv("CMR_DATA_DIR", str(data_dir))
        out = str(tmp_path)
        code = main(["classify", "--pairs", "1", "--t-train", "20", "--t-test", "40",
                     "--reps", "1", "--methods", "frr", "--outdir", out, "--label", "e"])
        assert code == 0
        cfg = json.load(open(os.path.join(run_dir(out, "classify", "e"), "config.json")))
        assert cfg["source"]["source"] == "idx"

    def test_degenerate_model_is_runtime_failure(self, tmp_path, capsys):
        # a zero mechanism makes the divergence ratios undefined: exit 2
        from cmr.model import CmrModel, TaskCovariances

        model = CmrModel(w=np.zeros((4, 1)), v=np.ones((2, 3, 1)))
        cov = TaskCovariances.identity(4, 3, 2)
        model_path = tmp_path / "degenerate.json"
        save_model(model_path, model, cov)
        code = main(["diagnostics", "--model", str(model_path),
                     "--outdir", str(tmp_path), "--label", "z"])
        assert code == 2
        assert "Degenerate" in capsys.readouterr().err

    def test_diagnostics(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        cov = random_covariances(5, 3, 4, rng)
        model, _ = generate_synthetic(5, 3, 1, 4, 6, cov, rng)
        model_path = tmp_path / "model.json"
        save_model(model_path, model, cov, seed=5)
        out = str(tmp_path)
        code = main(["diagnostics", "--model", str(model_path),
                     "--outdir", out, "--label", "d"])
        assert code == 0
        doc = json.load(open(os.path.join(run_dir(out, "diagnostics", "d"),
                                          "diagnostics.json")))
        assert doc["nu"] >= doc["eta"]
        assert doc["kappa_gamma"] >= 1.0
