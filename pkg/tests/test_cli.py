import csv
import os

import numpy as np
import pytest

from drft import cli
from drft.config import ABLATIONS, DEFAULTS, ConfigError, RunConfig, load_config
from drft.data import directory_digest
from drft.harness import OP_TOL, run_all


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A written 64-video synthetic corpus plus a small config pointing at it."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(
        "# smoke configuration\n"
        f"data.root = {root / 'data'}\n"
        f"output_dir = {root / 'out'}\n"
        "model.c = 16\n"
        "model.heads = 2\n"
        "train.epochs = 5\n"
    )
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    return root, str(cfg)


class TestConfig:
    def test_defaults_are_full_model(self):
        cfg = RunConfig()
        assert cfg["model.streams"] == ("rgb", "flow", "depth")
        assert cfg["model.transformer"] and cfg["model.learnable_weights"]
        assert cfg["model.share_common_block"] and cfg["loss.contrastive"]
        assert cfg["model.common"] == "rgb"
        assert cfg["contrastive.tau"] == 0.1 and cfg["optim.lr"] == 4e-4
        assert (cfg["contrastive.n_pos"], cfg["contrastive.n_neg"]) == (3, 4)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig({"model.colour": 3})

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            RunConfig({"model.c": 30, "model.heads": 4})
        with pytest.raises(ConfigError):
            RunConfig({"model.transformer": "maybe"})
        with pytest.raises(ConfigError):
            RunConfig({"model.streams": "rgb,sound"})

    @pytest.mark.parametrize("name", sorted(ABLATIONS))
    def test_every_variant_is_flags_only(self, name):
        cfg = RunConfig(ABLATIONS[name])
        assert all(k in DEFAULTS for k in ABLATIONS[name])
        assert cfg.dumps()

    def test_dump_round_trip(self, tmp_path):
        cfg = RunConfig({"model.streams": "rgb,flow", "loss.contrastive": "off", "seed": 9})
        path = tmp_path / "c.cfg"
        path.write_text(cfg.dumps())
        assert load_config(str(path)).values == cfg.values

    def test_output_dir_env(self, monkeypatch):
        monkeypatch.setenv("DRFT_OUTPUT_DIR", "/tmp/elsewhere")
        assert RunConfig().output_dir == "/tmp/elsewhere"


class TestSynthCommand:
    def test_layout(self, workdir):
        root, _ = workdir
        data = root / "data"
        for m in ("rgb", "flow", "depth"):
            assert len(os.listdir(data / m)) == 128
        for name in ("train.txt", "test.txt", "labels.txt", "vocab.txt", "categories.txt"):
            assert (data / name).exists()

    def test_rerun_same_digest(self, workdir, tmp_path):
        root, cfg = workdir
        again = tmp_path / "again"
        assert cli.main(["synth", "--config", cfg, "--set", f"data.root={again}"]) == 0
        assert directory_digest(str(again)) == directory_digest(str(root / "data"))

    def test_weak_signal_fails_probe(self, tmp_path, capsys):
        code = cli.main(["synth", "--set", f"data.root={tmp_path / 'd'}",
                         "--set", "synth.strength=0.1", "--set", "synth.noise=1.0"])
        assert code == 1
        assert "probe failure" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()


class TestTrainEval:
    def test_smoke_train_and_resume(self, workdir, tmp_path):
        root, cfg = workdir
        out = tmp_path / "run"
        assert cli.main(["train", "--config", cfg, "--set", f"output_dir={out}"]) == 0
        rows = read_csv(out / "train.csv")
        assert list(rows[0]) == ["epoch", "L_reg", "L_tag", "L_dqa", "L_cl", "train_mIoU"]
        total = [sum(float(r[k]) for k in ("L_reg", "L_tag", "L_dqa", "L_cl")) for r in rows]
        assert len(rows) == 5 and total[-1] < total[0]

        # resume: a 3 epoch run continued to 5 matches the uninterrupted run exactly
        split = tmp_path / "split"
        base = ["--config", cfg, "--set", f"output_dir={split}"]
        assert cli.main(["train", *base, "--set", "train.epochs=3"]) == 0
        assert cli.main(["train", *base, "--checkpoint", str(split / "model.ckpt")]) == 0
        resumed = read_csv(split / "train.csv")
        assert [r["epoch"] for r in resumed] == ["1", "2", "3", "4", "5"]
        assert resumed == rows

    def test_contrastive_off_logs_zero(self, workdir, tmp_path):
        _, cfg = workdir
        out = tmp_path / "nocl"
        assert cli.main(["train", "--config", cfg, "--set", f"output_dir={out}",
                         "--set", "train.epochs=2", "--set", "loss.contrastive=false"]) == 0
        assert all(float(r["L_cl"]) == 0.0 for r in read_csv(out / "train.csv"))

    def test_eval_csv(self, workdir, tmp_path):
        _, cfg = workdir
        out = tmp_path / "ev"
        args = ["--config", cfg, "--set", f"output_dir={out}", "--set", "train.epochs=2"]
        assert cli.main(["train", *args]) == 0
        assert cli.main(["eval", *args, "--checkpoint", str(out / "model.ckpt")]) == 0
        rows = read_csv(out / "eval_test.csv")
        assert rows[0]["category"] == "ALL" and len(rows) == 1 + 9
        assert sum(int(r["count"]) for r in rows[1:]) == int(rows[0]["count"]) == 64
        wcols = [k for k in rows[0] if k.startswith("w_")]
        assert len(wcols) == 4
        for r in rows:
            assert abs(sum(float(r[k]) for k in wcols) - 1.0) <= 0.01

    def test_incompatible_checkpoint(self, workdir, tmp_path, capsys):
        _, cfg = workdir
        out = tmp_path / "inc"
        args = ["--config", cfg, "--set", f"output_dir={out}", "--set", "train.epochs=1"]
        assert cli.main(["train", *args]) == 0
        code = cli.main(["eval", *args, "--set", "model.c=8", "--checkpoint", str(out / "model.ckpt")])
        assert code == 2
        assert "incompatible" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        code = cli.main(["train", "--set", f"data.root={tmp_path / 'nope'}",
                         "--set", f"output_dir={tmp_path}"])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_context(self, workdir, tmp_path, capsys):
        _, cfg = workdir
        code = cli.main(["train", "--config", cfg, "--set", f"output_dir={tmp_path}",
                         "--set", "optim.lr=1e30", "--set", "train.epochs=3"])
        assert code == 3
        err = capsys.readouterr().err
        assert "numeric error" in err and "largest parameter" in err


class TestGradcheckCommand:
    def test_fault_injection_detected(self, capsys):
        assert cli.main(["gradcheck", "--inject-fault", "tanh"]) == 1
        err = capsys.readouterr().err
        assert "numeric-core/tanh" in err
        # the clean op rows still pass after the faulty run
        rows = run_all(faults=())
        assert all(r.passed for r in rows if r.module == "numeric-core")
        assert all(r.tol == OP_TOL for r in rows if r.module == "numeric-core")

    def test_report_covers_every_module(self):
        rows = run_all(faults=["exp"])
        modules = {r.module for r in rows}
        assert modules >= {"numeric-core", "encoders", "lgi", "fusion", "contrastive", "grounding", "full"}
        failed = {r.name for r in rows if not r.passed}
        assert "exp" in failed
        assert "tanh" not in failed
