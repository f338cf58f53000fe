"""End-to-end command-line behavior, exit codes, and reproducibility."""
import json
import struct

import numpy as np
import pytest

from multicaps import cli
from multicaps.datasets import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def gen_args(out, variant="exclude", extra=()):
    base = [
        "gen-data", "--variant", variant, "--seed", "11", "--out", str(out),
        "--train-size", "120", "--test-size", "20",
    ]
    if variant != "full":
        base += ["--digit", "6"]
    return base + list(extra)


@pytest.fixture()
def data_dirs(tmp_path, capsys):
    pre = tmp_path / "pre"
    post = tmp_path / "post"
    assert cli.main(gen_args(pre)) == 0
    assert cli.main(gen_args(post, variant="full")) == 0
    capsys.readouterr()
    return pre, post


class TestGenData:
    def test_writes_train_ten_test_sets_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "d"
        code, stdout, _ = run(capsys, *gen_args(out))
        assert code == 0
        files = sorted(p.name for p in out.iterdir())
        assert "train.mcds" in files and "manifest.json" in files
        assert sum(name.startswith("test_") for name in files) == 10
        assert len(stdout.strip().splitlines()) == 11  # one digest per dataset

    def test_identical_invocations_print_identical_digests(self, tmp_path, capsys):
        _, first, _ = run(capsys, *gen_args(tmp_path / "a"))
        _, second, _ = run(capsys, *gen_args(tmp_path / "b"))
        digests = lambda text: [line.split()[0] for line in text.strip().splitlines()]
        assert digests(first) == digests(second)

    def test_k_outside_published_list_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "gen-data", "--variant", "lowdata", "--digit", "6", "--k", "3",
            "--seed", "1", "--out", str(tmp_path / "x"),
        )
        assert code == 2
        assert "allow-any-k" in err

    def test_allow_any_k_permits_it(self, tmp_path, capsys):
        code, _, _ = run(
            capsys, "gen-data", "--variant", "lowdata", "--digit", "6", "--k", "3",
            "--allow-any-k", "--seed", "1", "--out", str(tmp_path / "x"),
            "--train-size", "50", "--test-size", "5",
        )
        assert code == 0

    def test_missing_seed_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "gen-data", "--variant", "full", "--out", str(tmp_path / "x")
        )
        assert code == 2 and "--seed" in err

    def test_missing_idx_inputs_are_data_errors(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "gen-data", "--variant", "full", "--seed", "1",
            "--out", str(tmp_path / "x"), "--source", "idx",
            "--images", str(tmp_path / "nope-images"),
            "--labels", str(tmp_path / "nope-labels"),
            "--test-images", str(tmp_path / "nope-ti"),
            "--test-labels", str(tmp_path / "nope-tl"),
        )
        assert code == 3
        assert "nope-images" in err

    def test_idx_source_end_to_end(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        def write_idx(prefix, n):
            images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
            labels = np.tile(np.arange(10, dtype=np.uint8), n // 10 + 1)[:n]
            (tmp_path / f"{prefix}-images").write_bytes(
                struct.pack(">IIII", IDX_IMAGES_MAGIC, n, 28, 28) + images.tobytes()
            )
            (tmp_path / f"{prefix}-labels").write_bytes(
                struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes()
            )
        write_idx("train", 60)
        write_idx("t10k", 40)
        code, _, _ = run(
            capsys, "gen-data", "--variant", "full", "--seed", "2",
            "--out", str(tmp_path / "idxout"), "--source", "idx",
            "--images", str(tmp_path / "train-images"),
            "--labels", str(tmp_path / "train-labels"),
            "--test-images", str(tmp_path / "t10k-images"),
            "--test-labels", str(tmp_path / "t10k-labels"),
            "--train-size", "50", "--test-size", "10",
        )
        assert code == 0


class TestInject:
    def test_inject_writes_log_report_and_manifest(self, data_dirs, tmp_path, capsys):
        pre, post = data_dirs
        out = tmp_path / "run"
        code, stdout, _ = run(
            capsys, "inject", "--arch", "convnet", "--width", "0.1",
            "--dtype", "float32", "--pre-dir", str(pre), "--post-dir", str(post),
            "--injection-step", "10", "--total-steps", "20", "--eval-period", "5",
            "--batch-size", "8", "--seed", "5", "--out", str(out), "--quiet",
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        for key in ("pre_injection_accuracy", "recovery_label", "peak_accuracy",
                    "iterations_to_recover", "threshold_rule"):
            assert key in report
        log = (out / "log.csv").read_text().splitlines()
        assert log[0].startswith("step,")
        assert len(log) == 1 + 4  # evals at 5, 10, 15, 20
        assert (out / "manifest.json").exists()
        assert "recovery" in stdout

    def test_log_spacing_follows_eval_period(self, data_dirs, tmp_path, capsys):
        pre, post = data_dirs
        out = tmp_path / "run2"
        code, _, _ = run(
            capsys, "inject", "--arch", "convnet", "--width", "0.1",
            "--dtype", "float32", "--pre-dir", str(pre), "--post-dir", str(post),
            "--injection-step", "6", "--total-steps", "12", "--eval-period", "3",
            "--batch-size", "8", "--seed", "5", "--out", str(out), "--quiet",
        )
        assert code == 0
        steps = [int(line.split(",")[0])
                 for line in (out / "log.csv").read_text().splitlines()[1:]]
        assert steps == [3, 6, 9, 12]

    def test_resume_from_branches_identically(self, data_dirs, tmp_path, capsys):
        pre, post = data_dirs
        first = tmp_path / "full"
        code, _, _ = run(
            capsys, "inject", "--arch", "convnet", "--width", "0.1",
            "--dtype", "float32", "--pre-dir", str(pre), "--post-dir", str(post),
            "--injection-step", "10", "--total-steps", "20", "--eval-period", "5",
            "--batch-size", "8", "--seed", "5", "--out", str(first), "--quiet",
        )
        assert code == 0
        branch = tmp_path / "branch"
        code, _, _ = run(
            capsys, "inject", "--resume-from", str(first / "checkpoints" / "step00000010.mckp"),
            "--pre-dir", str(pre), "--post-dir", str(post),
            "--injection-step", "10", "--total-steps", "20", "--eval-period", "5",
            "--batch-size", "8", "--seed", "5", "--out", str(branch), "--quiet",
        )
        assert code == 0
        full_rows = dict(
            (int(l.split(",")[0]), l.split(",")[1])
            for l in (first / "log.csv").read_text().splitlines()[1:]
        )
        branch_rows = dict(
            (int(l.split(",")[0]), l.split(",")[1])
            for l in (branch / "log.csv").read_text().splitlines()[1:]
        )
        assert branch_rows[10] == full_rows[10]  # shared pre-injection point
        assert branch_rows[15] == full_rows[15]
        assert branch_rows[20] == full_rows[20]

    def test_eval_subcommand_on_checkpoint(self, data_dirs, tmp_path, capsys):
        pre, post = data_dirs
        out = tmp_path / "run3"
        run(
            capsys, "inject", "--arch", "convnet", "--width", "0.1",
            "--dtype", "float32", "--pre-dir", str(pre), "--post-dir", str(post),
            "--injection-step", "6", "--total-steps", "12", "--eval-period", "6",
            "--batch-size", "8", "--seed", "5", "--out", str(out), "--quiet",
        )
        code, stdout, _ = run(
            capsys, "eval", "--checkpoint", str(out / "checkpoints" / "final.mckp"),
            "--data", str(post),
        )
        assert code == 0 and "suite accuracy" in stdout
        code, stdout, _ = run(
            capsys, "eval", "--checkpoint", str(out / "checkpoints" / "final.mckp"),
            "--data", str(post / "test_ten_shift0.mcds"),
        )
        assert code == 0 and "test_ten_shift0" in stdout


class TestAnalyzeLog:
    def test_reference_log_with_expectations(self, capsys):
        code, stdout, _ = run(
            capsys, "analyze-log",
            "--expect", "capsgan_ld100_peak=0.975", "--tol", "0.001",
            "--expect", "capsgan_full_recovery=<100",
        )
        assert code == 0
        assert "0.963542" in stdout and "published" in stdout

    def test_failed_expectation_sets_exit_one(self, capsys):
        code, _, err = run(
            capsys, "analyze-log", "--expect", "capsgan_full_peak=0.5", "--tol", "0.001"
        )
        assert code == 1 and "expectation failed" in err

    def test_unparseable_log_sets_exit_three(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("")
        code, _, err = run(capsys, "analyze-log", "--log", str(bad), "--injection-step", "5")
        assert code == 3 and "empty" in err

    def test_external_log_requires_injection_step(self, tmp_path, capsys):
        log = tmp_path / "log.csv"
        log.write_text("1,0.5\n2,0.6\n")
        code, _, err = run(capsys, "analyze-log", "--log", str(log))
        assert code == 2


class TestGradCheckCommand:
    def test_layers_target_passes(self, capsys):
        code, stdout, _ = run(capsys, "grad-check", "--target", "layers", "--coords", "6")
        assert code == 0
        assert "PASS" in stdout and "FAIL" not in stdout


class TestConfigFile:
    def test_config_supplies_defaults_flags_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("variant=exclude\ndigit=6\nseed=11\ntrain-size=60\ntest-size=10\n")
        out = tmp_path / "from-config"
        code, _, _ = run(
            capsys, "gen-data", "--config", str(cfg), "--out", str(out),
            "--train-size", "40",
        )
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["options"]["train_size"] == 40  # flag wins
        assert manifest["options"]["seed"] == 11  # config filled it

    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not_a_real_option=7\n")
        code, _, err = run(
            capsys, "gen-data", "--config", str(cfg), "--variant", "full",
            "--seed", "1", "--out", str(tmp_path / "x"),
        )
        assert code == 2 and "not_a_real_option" in err

    def test_manifest_suffices_to_rerun(self, tmp_path, capsys):
        out = tmp_path / "m"
        run(capsys, *gen_args(out))
        manifest = json.loads((out / "manifest.json").read_text())
        opts = manifest["options"]
        rerun = tmp_path / "m2"
        argv = ["gen-data", "--variant", opts["variant"], "--digit", str(opts["digit"]),
                "--seed", str(opts["seed"]), "--out", str(rerun),
                "--train-size", str(opts["train_size"]),
                "--test-size", str(opts["test_size"]), "--source", opts["source"]]
        code, _, _ = run(capsys, *argv)
        assert code == 0
        assert (rerun / "train.mcds").read_bytes() == (out / "train.mcds").read_bytes()
