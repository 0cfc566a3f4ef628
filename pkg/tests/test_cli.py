import subprocess
import sys

import pytest

from sktcount.cli import ABLATION_ROWS, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from sktcount.density import load_annotations, load_dataset
from sktcount.evaluation import evaluate
from sktcount.train import load_checkpoint, parse_log

TRAIN_FLAGS = ["--epochs", "1", "--lr", "0.001"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_dir_from(out):
    line = next(l for l in out.splitlines() if l.startswith("run "))
    return line.split(" ", 1)[1]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic dataset plus a teacher checkpoint trained through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--count", "3", "--seed", "0", "--size", "32x32", "--people", "2..8"]) == 0
    assert main(["train-teacher", "--data", str(root / "data"), "--runs", str(root / "runs"), *TRAIN_FLAGS]) == 0
    ckpt = next((root / "runs").glob("*/checkpoint.sktc"))
    return root, ckpt


class TestSynth:
    def test_writes_images_and_annotations(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--out", tmp_path / "d", "--count", 4, "--seed", 0, "--size", "64x64", "--people", "5..15")
        assert code == EXIT_OK and "wrote 4" in out
        assert len(list((tmp_path / "d").glob("*.pgm"))) == 4
        records = load_annotations(tmp_path / "d" / "annotations.txt")
        assert len(records) == 4
        assert all(5 <= len(p) <= 15 for _, p in records)

    def test_rerun_bit_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, "synth", "--out", tmp_path / name, "--count", 3, "--seed", 7, "--size", "32x32")
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_empty_scenes(self, tmp_path, capsys):
        run(capsys, "synth", "--out", tmp_path / "d", "--count", 2, "--people", "0..0", "--size", "32x32")
        assert [len(p) for _, p in load_annotations(tmp_path / "d" / "annotations.txt")] == [0, 0]

    @pytest.mark.parametrize("flag, value", [("--size", "64"), ("--size", "60x64"), ("--people", "9..2"), ("--count", "0")])
    def test_bad_flags_are_usage_errors(self, tmp_path, capsys, flag, value):
        code, _, err = run(capsys, "synth", "--out", tmp_path / "d", flag, value)
        assert code == EXIT_USAGE and err

    def test_unwritable_path(self, tmp_path, capsys):
        (tmp_path / "file").write_text("x")
        code, _, err = run(capsys, "synth", "--out", tmp_path / "file", "--count", 1)
        assert code == EXIT_USAGE and "not a directory" in err


class TestTrainTeacher:
    def test_missing_data_names_path(self, tmp_path, capsys):
        code, _, err = run(capsys, "train-teacher", "--data", tmp_path / "nowhere", "--runs", tmp_path / "r")
        assert code == EXIT_RUNTIME and "nowhere" in err

    def test_zero_epochs_usage_error(self, workspace, capsys):
        root, _ = workspace
        code, _, err = run(capsys, "train-teacher", "--data", root / "data", "--epochs", 0)
        assert code == EXIT_USAGE and "epochs" in err

    def test_run_directory_contents(self, workspace):
        root, ckpt = workspace
        d = ckpt.parent
        assert sorted(p.name for p in d.iterdir()) == ["checkpoint.sktc", "config.txt", "train.log"]
        h, records = parse_log((d / "train.log").read_text())
        assert h == d.name and len(records) == 3

    def test_dump_config_reproduces_run(self, workspace, tmp_path, capsys):
        root, ckpt = workspace
        code, text, _ = run(capsys, "train-teacher", "--data", root / "data", *TRAIN_FLAGS, "--dump-config")
        assert code == EXIT_OK
        (tmp_path / "c.txt").write_text(text)
        code, out, _ = run(capsys, "train-teacher", "--config", tmp_path / "c.txt", "--runs", tmp_path / "runs")
        d = tmp_path / "runs" / ckpt.parent.name
        assert code == EXIT_OK and run_dir_from(out) == str(d)
        for name in ("checkpoint.sktc", "train.log", "config.txt"):
            assert (d / name).read_bytes() == (ckpt.parent / name).read_bytes()

    def test_dumped_config_echoes_byte_identically(self, tmp_path, capsys):
        _, first, _ = run(capsys, "train-teacher", "--lr", "0.01", "--seed", 3, "--dump-config")
        (tmp_path / "c.txt").write_text(first)
        _, second, _ = run(capsys, "train-teacher", "--config", tmp_path / "c.txt", "--dump-config")
        assert first == second

    def test_flags_override_config_file(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("train.epochs = 5\ntrain.seed = 9\n")
        _, text, _ = run(capsys, "train-teacher", "--config", tmp_path / "c.txt", "--epochs", 2, "--dump-config")
        assert "train.epochs = 2" in text and "train.seed = 9" in text

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("train.epoch = 5\n")
        code, _, err = run(capsys, "train-teacher", "--config", tmp_path / "c.txt", "--dump-config")
        assert code == EXIT_USAGE and "train.epoch" in err


class TestDistill:
    def test_plain_student_training(self, workspace, tmp_path, capsys):
        root, ckpt = workspace
        code, out, _ = run(
            capsys, "distill", "--teacher", ckpt, "--data", root / "data", "--runs", tmp_path,
            "--fsp", "off", "--alpha-intra", 0, "--gt", "hard", *TRAIN_FLAGS,
        )  # fmt: skip
        assert code == EXIT_OK
        _, records = parse_log((tmp_path / run_dir_from(out).rsplit("/", 1)[1] / "train.log").read_text())
        assert records and all(r[1] == 0.0 and r[2] == 0.0 for r in records)

    def test_student_is_scaled(self, workspace, tmp_path, capsys):
        root, ckpt = workspace
        _, out, _ = run(capsys, "distill", "--teacher", ckpt, "--data", root / "data", "--runs", tmp_path, "--cpr", "1/2", *TRAIN_FLAGS)
        student = load_checkpoint(next(tmp_path.glob("*/checkpoint.sktc")))
        assert str(student.net_config.cpr) == "1/2"

    def test_missing_teacher(self, workspace, tmp_path, capsys):
        root, _ = workspace
        code, _, err = run(capsys, "distill", "--teacher", tmp_path / "none.sktc", "--data", root / "data", "--runs", tmp_path)
        assert code == EXIT_RUNTIME and "none.sktc" in err

    def test_corrupt_teacher(self, workspace, tmp_path, capsys):
        root, ckpt = workspace
        (tmp_path / "bad.sktc").write_bytes(ckpt.read_bytes()[:100])
        code, _, err = run(capsys, "distill", "--teacher", tmp_path / "bad.sktc", "--data", root / "data", "--runs", tmp_path)
        assert code == EXIT_RUNTIME and "truncated" in err

    def test_bad_cpr(self, workspace, capsys):
        _, ckpt = workspace
        code, _, _ = run(capsys, "distill", "--teacher", ckpt, "--cpr", "1/7")
        assert code == EXIT_USAGE


class TestEval:
    def test_matches_in_process(self, workspace, capsys):
        root, ckpt = workspace
        code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", root / "data")
        expect = evaluate(load_checkpoint(ckpt), load_dataset(root / "data")).record()
        assert code == EXIT_OK and out.strip() == expect

    def test_table(self, workspace, capsys):
        root, ckpt = workspace
        _, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", root / "data", "--table")
        assert len(out.strip().splitlines()) == 5

    def test_missing_ckpt_flag(self, capsys):
        code, _, err = run(capsys, "eval", "--data", "x")
        assert code == EXIT_USAGE and "--ckpt" in err


class TestProfile:
    def test_csrnet_full(self, capsys):
        code, out, _ = run(capsys, "profile", "--arch", "csrnet", "--cpr", "1", "--size", "576x864")
        assert code == EXIT_OK
        last = out.strip().splitlines()[-1].split()
        assert float(last[1].rstrip("M")) == pytest.approx(16.26, rel=0.02)
        assert float(last[3].rstrip("G")) == pytest.approx(205.88, rel=0.02)

    def test_quarter_large_input(self, capsys):
        _, out, _ = run(capsys, "profile", "--arch", "csrnet", "--cpr", "1/4", "--size", "2032x2912")
        assert float(out.strip().split()[-1].rstrip("G")) == pytest.approx(155.69, rel=0.02)

    def test_unknown_arch_lists_names(self, capsys):
        code, _, err = run(capsys, "profile", "--arch", "vgg")
        assert code == EXIT_USAGE and "csrnet" in err and "toy" in err


class TestAblate:
    def test_six_rows_and_baseline(self, workspace, tmp_path, capsys):
        root, ckpt = workspace
        code, out, _ = run(
            capsys, "ablate", "--teacher", ckpt, "--data", root / "data", "--runs", tmp_path,
            "--baseline", *TRAIN_FLAGS,
        )  # fmt: skip
        assert code == EXIT_OK
        assert len(list(tmp_path.glob("*/checkpoint.sktc"))) == len(ABLATION_ROWS) + 1
        for name, *_ in ABLATION_ROWS:
            assert any(line.startswith(name) and "run" in line for line in out.splitlines())
        assert "Transfer Configuration" in out


class TestEntryPoint:
    def test_module_invocation(self):
        res = subprocess.run([sys.executable, "-m", "sktcount", "profile", "--arch", "toy", "--size", "64x64"], capture_output=True, text=True)
        assert res.returncode == 0 and res.stdout.startswith("architecture toy")

    def test_no_command_is_usage_error(self, capsys):
        assert run(capsys)[0] == EXIT_USAGE

    def test_bad_thread_count(self, monkeypatch, capsys):
        monkeypatch.setenv("SKT_THREADS", "zero")
        code, _, err = run(capsys, "profile")
        assert code == EXIT_USAGE and "SKT_THREADS" in err
