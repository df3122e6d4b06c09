import os

import pytest

from amf.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_IO,
    EXIT_MISMATCH,
    EXIT_OK,
    main,
)

CONFIG = """
data.k_a = 2
data.k_b = 2
data.n_train = 4
data.n_val = 2
data.n_test = 2
data.seed = 0
data.source_classes = 3
model.arch = amf
model.n = 2
model.d = 8
train.epochs = 2
train.batch_size = 16
pretrain.epochs = 2
pretrain.batch_size = 16
optim.branch1.lr = 0.01
optim.branch2.lr = 0.02
optim.classifier.lr = 0.01
optim.policy.lr = 0.001
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Full pipeline: gen-data -> pretrain -> train, shared by the eval tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG)
    data = str(root / "data")
    runs = str(root / "runs")
    assert main(["gen-data", "--config", str(cfg), "--out", data]) == EXIT_OK
    assert main(["pretrain", "--config", str(cfg), "--data",
                 os.path.join(data, "source.ds"), "--out", runs]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data",
                 os.path.join(data, "target.ds"),
                 "--ckpt", os.path.join(runs, "pretrained.ckpt"),
                 "--out", runs]) == EXIT_OK
    return root


class TestPipeline:
    def test_artifacts_exist(self, workdir):
        for name in ("data/target.ds", "data/source.ds", "runs/pretrained.ckpt",
                     "runs/amf_monitor.csv", "runs/amf_best.ckpt"):
            assert (workdir / name).exists(), name

    def test_monitor_has_expected_rows(self, workdir):
        lines = (workdir / "runs/amf_monitor.csv").read_text().strip().split("\n")
        assert len(lines) == 3  # header + 2 epochs

    def test_eval_ok(self, workdir, capsys):
        rc = main(["eval", "--config", str(workdir / "run.cfg"),
                   "--data", str(workdir / "data/target.ds"),
                   "--ckpt", str(workdir / "runs/amf_best.ckpt")])
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "top-1" in out and "assignment" in out

    def test_train_without_pretrained_ckpt(self, workdir, tmp_path):
        rc = main(["train", "--config", str(workdir / "run.cfg"),
                   "--data", str(workdir / "data/target.ds"), "--out", str(tmp_path)])
        assert rc == EXIT_OK


class TestExitCodes:
    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("data.bogus = 1\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_data_file(self, workdir, tmp_path):
        rc = main(["train", "--config", str(workdir / "run.cfg"),
                   "--data", str(tmp_path / "nope.ds"), "--out", str(tmp_path)])
        assert rc == EXIT_IO

    def test_checkpoint_arch_mismatch(self, workdir, tmp_path):
        cfg = tmp_path / "single.cfg"
        cfg.write_text(CONFIG.replace("model.arch = amf", "model.arch = single")
                             .replace("optim.branch1.lr = 0.01", "optim.backbone.lr = 0.01"))
        rc = main(["eval", "--config", str(cfg),
                   "--data", str(workdir / "data/target.ds"),
                   "--ckpt", str(workdir / "runs/amf_best.ckpt")])
        assert rc == EXIT_MISMATCH

    def test_corrupt_checkpoint(self, workdir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        rc = main(["eval", "--config", str(workdir / "run.cfg"),
                   "--data", str(workdir / "data/target.ds"), "--ckpt", str(bad)])
        assert rc == EXIT_MISMATCH

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_run(self, workdir, tmp_path):
        cfg = tmp_path / "diverge.cfg"
        cfg.write_text(CONFIG.replace("optim.branch2.lr = 0.02",
                                      "optim.branch2.lr = 1e30"))
        rc = main(["train", "--config", str(cfg),
                   "--data", str(workdir / "data/target.ds"), "--out", str(tmp_path)])
        assert rc == EXIT_DIVERGED

    def test_grad_check_ok(self):
        assert main(["grad-check", "--seeds", "3"]) == EXIT_OK
