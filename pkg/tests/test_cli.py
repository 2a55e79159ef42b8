import csv
import json
import os
import shutil
import subprocess
import sys

import pytest
from conftest import tiny_config_doc

from trajssl import cli
from trajssl.config import ConfigError, RunConfig
from trajssl.nn.gradcheck import registry
from trajssl.pipeline.evaluate import LAYERS, SCENARIOS


def write_config(path, doc):
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + train once for the module; tests copy from here."""
    root = tmp_path_factory.mktemp("ws")
    cfg = write_config(root / "config.json", tiny_config_doc())
    assert cli.main(["gen-data", cfg, "--out", str(root / "data")]) == 0
    assert cli.main(["train", cfg, str(root / "data" / "manifest.json"), "--out", str(root / "traj")]) == 0
    return root


# config ------------------------------------------------------------------------

class TestConfig:
    def test_defaults(self):
        cfg = RunConfig.from_json('{"seed": 3}')
        assert cfg.train.lam == 0.01 and cfg.train.seed == 3 and cfg.train.traj_loss_layer == "feature"
        assert cfg.dataset.instances_per_family == 40 and cfg.eval.k == 20

    def test_round_trip(self):
        cfg = RunConfig.from_dict(tiny_config_doc(**{"lambda": 0.0}))
        again = RunConfig.from_json(cfg.dumps())
        assert again == cfg and again.dumps() == cfg.dumps()
        assert json.loads(cfg.dumps())["train"]["lambda"] == 0.0

    def test_unknown_key_names_key_and_line(self):
        text = '{\n "seed": 0,\n "dataset": {\n  "familes": 3\n }\n}\n'
        with pytest.raises(ConfigError) as info:
            RunConfig.from_json(text)
        assert info.value.line == 4 and "familes" in str(info.value)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="optimiser"):
            RunConfig.from_json('{"seed": 0, "optimiser": {}}')

    @pytest.mark.parametrize("text", ['{}', '{"seed": -1}', '{"seed": 1.5}', '{"seed": 0, "train": {"epochs": "ten"}}',
                                      '{"seed": 0, "train": {"lambda": -0.1}}', '[1, 2]', '{"seed": 0,'])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_json(text)

    def test_hidden_fields_not_accepted(self):
        with pytest.raises(ConfigError):
            RunConfig.from_json('{"seed": 0, "train": {"seed": 4}}')

    def test_with_lambda(self):
        assert RunConfig(seed=0).with_lambda(0).train.lam == 0.0


# gen-data ----------------------------------------------------------------------

class TestGenData:
    def test_default_manifest(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"seed": 0})
        assert cli.main(["gen-data", cfg, "--out", str(tmp_path / "d")]) == 0
        doc = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert len(doc["families"]) == 12
        assert all(len(f["instances"]) == 40 for f in doc["families"])
        assert (tmp_path / "d" / "config.json").exists()

    def test_idempotent(self, workspace, capsys):
        path = workspace / "data" / "manifest.json"
        before = (path.read_bytes(), path.stat().st_mtime_ns)
        assert cli.main(["gen-data", str(workspace / "config.json"), "--out", str(workspace / "data")]) == 0
        assert (path.read_bytes(), path.stat().st_mtime_ns) == before
        assert "unchanged" in capsys.readouterr().out

    def test_typo_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"seed": 0, "dataset": {"familes": 4}})
        assert cli.main(["gen-data", cfg, "--out", str(tmp_path / "d")]) == 2
        assert "familes" in capsys.readouterr().err

    def test_overlap_exits_2(self, tmp_path):
        doc = {"seed": 0, "dataset": {"in_domain_families": ["cross"], "out_of_domain_families": ["cross"]}}
        assert cli.main(["gen-data", write_config(tmp_path / "c.json", doc), "--out", str(tmp_path)]) == 2

    def test_missing_config_exits_3(self, tmp_path):
        assert cli.main(["gen-data", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 3

    def test_dump_images(self, tmp_path, workspace):
        assert cli.main(["gen-data", str(workspace / "config.json"), "--out", str(tmp_path), "--dump-images"]) == 0
        names = os.listdir(tmp_path / "images")
        assert len(names) == 2 * 5 * 50
        assert "l_block_0_0.pgm" in names
        assert (tmp_path / "images" / "l_block_0_0.pgm").read_bytes().startswith(b"P5")


# train -------------------------------------------------------------------------

class TestTrain:
    def test_outputs(self, workspace):
        run = workspace / "traj"
        assert {"checkpoint.bin", "history.csv", "config.json", "run.json"} <= set(os.listdir(run))
        rows = list(csv.reader(open(run / "history.csv")))
        assert rows[0] == ["epoch", "sem_loss", "traj_loss", "total"] and len(rows) == 2
        assert json.loads((run / "run.json").read_text())["label"] == "traj"
        echoed = RunConfig.load(run / "config.json")
        assert echoed == RunConfig.load(workspace / "config.json")

    def test_byte_identical_and_baseline_label(self, workspace, tmp_path):
        manifest = str(workspace / "data" / "manifest.json")
        assert cli.main(["train", str(workspace / "config.json"), manifest, "--out", str(tmp_path / "a")]) == 0
        assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (workspace / "traj" / "checkpoint.bin").read_bytes()
        assert cli.main(["train", str(workspace / "config.json"), manifest, "--out", str(tmp_path / "b"),
                         "--lambda", "0"]) == 0
        assert json.loads((tmp_path / "b" / "run.json").read_text())["label"] == "baseline"
        assert RunConfig.load(tmp_path / "b" / "config.json").train.lam == 0.0

    def test_negative_lambda(self, workspace, tmp_path):
        assert cli.main(["train", str(workspace / "config.json"), str(workspace / "data" / "manifest.json"),
                         "--out", str(tmp_path), "--lambda", "-1"]) == 2

    def test_missing_manifest(self, workspace, tmp_path):
        assert cli.main(["train", str(workspace / "config.json"), str(tmp_path / "m.json"), "--out", str(tmp_path)]) == 3

    def test_divergence_exits_4(self, workspace, tmp_path, monkeypatch, capsys):
        from trajssl.pipeline import train as train_mod
        from trajssl.pipeline.train import TrainingDiverged

        def explode(self, batch, step):
            raise TrainingDiverged(step, {"sem_loss": float("nan")})

        monkeypatch.setattr(train_mod.Trainer, "step", explode)
        code = cli.main(["train", str(workspace / "config.json"), str(workspace / "data" / "manifest.json"),
                         "--out", str(tmp_path)])
        assert code == 4 and "nan" in capsys.readouterr().err


# eval --------------------------------------------------------------------------

class TestEval:
    def test_ten_rows_and_repeatable(self, workspace, tmp_path):
        args = [str(workspace / "traj" / "checkpoint.bin"), str(workspace / "data" / "manifest.json"),
                "--scenarios", "all", "--layers", "feature,conv3"]
        assert cli.main(["eval", *args, "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["eval", *args, "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        rows = list(csv.DictReader(a.decode().splitlines()))
        assert len(rows) == 10
        assert {r["scenario"] for r in rows} == set(SCENARIOS)
        assert all(r["wall_time_s"] == "" for r in rows)
        assert len(json.loads((tmp_path / "a" / "metrics.json").read_text())) == 10

    def test_unknown_layer_exits_2(self, workspace, capsys):
        code = cli.main(["eval", str(workspace / "traj" / "checkpoint.bin"), str(workspace / "data" / "manifest.json"),
                         "--layers", "feature,conv9"])
        err = capsys.readouterr().err
        assert code == 2 and "conv9" in err and all(name in err for name in LAYERS)

    def test_version_exits_5(self, workspace, tmp_path):
        blob = bytearray((workspace / "traj" / "checkpoint.bin").read_bytes())
        blob[8:12] = (7).to_bytes(4, "little")
        (tmp_path / "ck.bin").write_bytes(bytes(blob))
        assert cli.main(["eval", str(tmp_path / "ck.bin"), str(workspace / "data" / "manifest.json")]) == 5

    def test_timings_and_embeddings(self, workspace, tmp_path):
        code = cli.main(["eval", str(workspace / "traj" / "checkpoint.bin"), str(workspace / "data" / "manifest.json"),
                         "--scenarios", "in_domain_abs", "--out", str(tmp_path), "--timings", "--dump-embeddings"])
        assert code == 0
        rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
        assert rows[0]["wall_time_s"] != ""
        sidecar = json.loads((tmp_path / "embeddings" / "in_domain_in_domain_test_feature.json").read_text())
        assert sidecar["shape"] == [100, 64]
        assert len(sidecar["index"]) == sidecar["shape"][0]


# gradcheck ---------------------------------------------------------------------

class TestGradcheckCommand:
    def test_clean(self, capsys):
        assert cli.main(["gradcheck", "--trials", "2"]) == 0
        out = capsys.readouterr().out.splitlines()[1:]
        names = [line.split()[0] for line in out]
        assert sorted(names) == sorted(sg.name for sg in registry())

    def test_sign_flip_fails(self, monkeypatch, capsys):
        from trajssl import losses

        real = losses.traj_loss

        def flipped(*args, **kwargs):
            lv = real(*args, **kwargs)
            return losses.LossValue(lv.value, tuple(-g for g in lv.gradients))

        monkeypatch.setattr(losses, "traj_loss", flipped)
        assert cli.main(["gradcheck", "--trials", "2"]) == 1
        assert "traj_loss" in capsys.readouterr().err


# report ------------------------------------------------------------------------

class TestReport:
    def test_single_run(self, workspace, tmp_path, capsys):
        run = tmp_path / "run"
        shutil.copytree(workspace / "traj", run)
        assert cli.main(["eval", str(run / "checkpoint.bin"), str(workspace / "data" / "manifest.json"),
                         "--scenarios", "in_domain_abs"]) == 0
        capsys.readouterr()
        assert cli.main(["report", str(run), "--out", str(tmp_path / "rep")]) == 0
        out = capsys.readouterr().out
        assert "traj" in out and "+- " in out and " 0.00" in out
        rows = list(csv.DictReader(open(tmp_path / "rep" / "report.csv")))
        assert len(rows) == 1 and float(rows[0]["std"]) == 0.0

    def test_missing_metrics_exits_2(self, tmp_path):
        assert cli.main(["report", str(tmp_path)]) == 2


# process-level -------------------------------------------------------------------

class TestEntryPoint:
    def test_usage_error_exits_2(self):
        assert cli.main(["frobnicate"]) == 2
        assert cli.main([]) == 2

    def test_help_exits_0(self, capsys):
        assert cli.main(["--help"]) == 0

    def test_module_runs(self):
        proc = subprocess.run([sys.executable, "-m", "trajssl.cli", "eval", "x", "y", "--scenarios", "bogus"],
                              capture_output=True, text=True)
        assert proc.returncode == 2 and "bogus" in proc.stderr

    def test_jobs_env(self, monkeypatch):
        monkeypatch.setenv("TRAJSSL_JOBS", "3")
        assert cli._jobs(type("A", (), {"jobs": None})()) == 3
        monkeypatch.setenv("TRAJSSL_JOBS", "many")
        with pytest.raises(cli.CliError):
            cli._jobs(type("A", (), {"jobs": None})())
