"""End-to-end command line pipeline at miniature scale."""

import os
import shutil
import subprocess
import sys

import pytest

from tgpt import cli

CFG_TEXT = """\
# miniature pipeline settings
seed = 5
per_class = 70
image_size = 16
patch_size = 8
d = 32
encoder_depth = 1
heads = 4
max_len = 24
k_ctg = 6
k_con = 10
iterations = 40
batch_size = 8
lr = 0.001
val_every = 10
pretrain_iterations = 30
pretrain_batch_size = 8
ablate_shots = 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run gen-data (eval + pretrain sets), pretrain, and train once."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(CFG_TEXT)
    out = root / "out"
    paths = {
        "cfg": str(cfg), "out": str(out),
        "data": str(out / "dataset"), "pre_data": str(out / "pretrain-dataset"),
    }
    base = ["--config", paths["cfg"], "--out", paths["out"]]
    assert cli.main(["gen-data"] + base + ["--data", paths["data"]]) == 0
    assert cli.main(["gen-data"] + base + ["--data", paths["pre_data"],
                                           "--seed", "900"]) == 0
    assert cli.main(["pretrain"] + base + ["--data", paths["pre_data"]]) == 0
    assert cli.main(["train"] + base + ["--data", paths["data"]]) == 0
    return paths


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        out = pipeline["out"]
        for rel in ("checkpoints/encoder.ckpt", "pretrain_metrics.csv",
                    "checkpoints/model-2shot-seed5.ckpt", "metrics.csv",
                    "splits/2shot-seed5/test.txt"):
            assert os.path.exists(os.path.join(out, rel)), rel

    def test_eval_writes_report_and_audit(self, pipeline, monkeypatch):
        monkeypatch.setenv("TGPT_AUDIT", "1")
        base = ["--config", pipeline["cfg"], "--out", pipeline["out"],
                "--data", pipeline["data"]]
        assert cli.main(["eval"] + base) == 0
        with open(os.path.join(pipeline["out"], "audit.txt")) as fh:
            assert fh.readline().rstrip("\n") == "text_files_opened=0"
        with open(os.path.join(pipeline["out"], "eval_report.txt")) as fh:
            report = fh.read()
        assert "accuracy=" in report and "test_size=800" in report

    def test_eval_survives_deleting_text_files(self, pipeline, tmp_path):
        stripped = tmp_path / "stripped"
        shutil.copytree(pipeline["data"], stripped)
        report_path = os.path.join(pipeline["out"], "eval_report.txt")
        base = ["--config", pipeline["cfg"], "--out", pipeline["out"]]
        assert cli.main(["eval"] + base + ["--data", pipeline["data"]]) == 0
        with open(report_path, "rb") as fh:
            before = fh.read()
        for name in ("descriptions.tsv", "templates.txt", "vocab.txt"):
            os.unlink(stripped / name)
        assert cli.main(["eval"] + base + ["--data", str(stripped)]) == 0
        with open(report_path, "rb") as fh:
            after = fh.read()
        assert before == after

    def test_costmodel_writes_table(self, pipeline, capsys):
        base = ["--config", pipeline["cfg"], "--out", pipeline["out"]]
        assert cli.main(["costmodel"] + base) == 0
        assert os.path.exists(os.path.join(pipeline["out"], "cost.csv"))
        stdout = capsys.readouterr().out
        assert "tgpt bs=8 activations constant in N" in stdout
        assert "coop bs=8 activations increasing in N" in stdout


class TestErrors:
    def test_unknown_verb_exits_2(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["frobnicate"])
        assert err.value.code == 2

    def test_missing_dataset_is_one_error_line(self, tmp_path, capsys):
        assert cli.main(["train", "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ") and err.count("\n") == 1

    def test_negative_seed_rejected(self, tmp_path, capsys):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--seed", "-3"]) == 1
        assert "seed" in capsys.readouterr().err

    def test_bad_thread_count_rejected(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("TGPT_THREADS", "0")
        assert cli.main(["gen-data", "--out", str(tmp_path)]) == 1
        assert "TGPT_THREADS" in capsys.readouterr().err

    def test_bad_config_key_names_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("seed = 0\nwarp_factor = 9\n")
        assert cli.main(["gen-data", "--config", str(cfg),
                         "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "warp_factor" in err and "line 2" in err

    def test_per_class_override(self, pipeline, tmp_path, capsys):
        target = tmp_path / "bigger"
        assert cli.main(["gen-data", "--config", pipeline["cfg"],
                         "--out", str(tmp_path), "--data", str(target),
                         "--seed", "77", "--per-class", "71"]) == 0
        assert "wrote 1136 images" in capsys.readouterr().out

    def test_per_class_too_small_rejected(self, tmp_path, capsys):
        assert cli.main(["gen-data", "--out", str(tmp_path),
                         "--per-class", "10"]) == 1
        assert "per_class" in capsys.readouterr().err


class TestConsoleScript:
    def test_entry_point_runs(self, tmp_path):
        exe = shutil.which("tgpt")
        assert exe, "console script should be installed with the package"
        proc = subprocess.run([exe, "costmodel", "--out", str(tmp_path)],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0
        assert "costmodel: wrote" in proc.stdout

    def test_module_invocation_matches(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "tgpt.cli", "costmodel", "--out", str(tmp_path)],
            capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0
