import json

import numpy as np
import pytest

from avit import tensor as T
from avit.cli import run
from avit.config import dump_domain_specs, dump_run_config
from avit.data import default_domains, load_dataset
from avit.metrics import write_scores_csv
from avit.model import ModelConfig
from avit.pipeline import StageConfig

TINY = ModelConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2, mlp_hidden=16, head_hidden=4,
                   adapter_in=8, adapter_bottleneck=2)
TRAIN = ["--pretrain-iters", "4", "--finetune-iters", "16", "--checkpoint-every", "2", "--batch-per-domain", "4",
         "--lr", "0.001"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.cfg").write_text(dump_domain_specs(default_domains(), image_size=8, count_per_class=12))
    (root / "run.cfg").write_text(dump_run_config(TINY, StageConfig()))
    assert run(["gen-data", "--spec", str(root / "gen.cfg"), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root


class TestGenData:
    def test_files_and_manifest(self, workspace):
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        assert manifest["domains"] == ["alpha", "beta", "gamma", "delta"]
        assert manifest["command"] == "gen-data" and manifest["seed"] == 3 and manifest["precision"] == "f32"
        ds = load_dataset(workspace / "data" / "gamma.avitdata")
        assert ds.images.shape == (24, 3, 8, 8)

    def test_overrides(self, tmp_path):
        assert run(["gen-data", "--out", str(tmp_path), "--count-per-class", "3", "--image-size", "8"]) == 0
        assert len(load_dataset(tmp_path / "alpha.avitdata")) == 6


class TestParams:
    def test_paper_preset(self, capsys):
        assert run(["params", "--preset", "paper"]) == 0
        out = capsys.readouterr().out
        assert "adapters 4758528" in out

    def test_writes_csv(self, tmp_path, capsys):
        assert run(["params", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "params.csv").read_text() in capsys.readouterr().out


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert run(["params", "--bogus"]) == 1

    def test_no_command(self):
        assert run([]) == 1

    def test_missing_data_dir(self, tmp_path):
        assert run(["protocol", "--data-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_bad_config(self, tmp_path):
        (tmp_path / "bad.cfg").write_text("[model]\ndepth = deep\n")
        assert run(["params", "--config", str(tmp_path / "bad.cfg")]) == 1

    def test_config_and_preset_conflict(self, workspace, tmp_path):
        argv = ["pretrain", "--config", str(workspace / "run.cfg"), "--preset", "desk", "--data-dir",
                str(workspace / "data"), "--target", "alpha", "--out", str(tmp_path)]
        assert run(argv) == 1

    def test_unknown_target(self, workspace, tmp_path):
        argv = ["pretrain", "--config", str(workspace / "run.cfg"), "--data-dir", str(workspace / "data"),
                "--target", "omega", "--out", str(tmp_path), *TRAIN]
        assert run(argv) == 1

    def test_precision_restored(self):
        before = T.precision_name()
        assert run(["--precision", "f64", "params"]) == 0
        assert T.precision_name() == before


class TestGradcheck:
    def test_desk_passes(self, tmp_path, capsys):
        assert run(["gradcheck", "--preset", "desk", "--tol", "1e-4", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        for group in ("backbone", "adapters", "fwt", "head"):
            assert out.count(group) >= 1
        assert "max relative error" in out
        assert (tmp_path / "gradcheck.csv").read_text().startswith("group,max_rel_err,checked")

    def test_single_adapter(self, workspace):
        assert run(["gradcheck", "--config", str(workspace / "run.cfg"), "--ensemble-size", "1"]) == 0

    def test_corrupted_backward_fails(self, workspace, monkeypatch, capsys):
        monkeypatch.setattr(T, "_INV_SQRT_2PI", 0.1)
        assert run(["gradcheck", "--config", str(workspace / "run.cfg")]) == 3
        assert "check failed" in capsys.readouterr().err


class TestTraining:
    def test_pretrain_finetune_eval_ablate(self, workspace, tmp_path, capsys):
        common = ["--config", str(workspace / "run.cfg"), "--data-dir", str(workspace / "data"),
                  "--target", "delta", "--shots", "2", *TRAIN]
        assert run(["pretrain", *common, "--out", str(tmp_path / "pre")]) == 0
        assert (tmp_path / "pre" / "pretrained.avit").exists()
        init = str(tmp_path / "pre" / "pretrained.avit")
        assert run(["finetune", *common, "--init", init, "--out", str(tmp_path / "ft")]) == 0
        assert len(list((tmp_path / "ft").glob("ckpt_*.avit"))) == 8
        assert "stability" in capsys.readouterr().out
        assert (tmp_path / "ft" / "report.csv").read_text().startswith("metric,value")

        ckpt = str(sorted((tmp_path / "ft").glob("ckpt_*.avit"))[-1])
        assert run(["eval", "--checkpoint", ckpt, "--data-dir", str(workspace / "data"), "--target", "delta",
                    "--shots", "2", "--out", str(tmp_path / "ev")]) == 0
        assert len((tmp_path / "ev" / "scores.csv").read_text().splitlines()) == 1 + 20
        assert run(["ablate", "--checkpoint", ckpt, "--data-dir", str(workspace / "data"), "--target", "delta",
                    "--first", "1", "--last", "2", "--out", str(tmp_path / "ab")]) == 0
        rows = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
        assert rows[0].startswith("setting") and len(rows) == 3

    def test_finetune_init_variant_mismatch(self, workspace, tmp_path):
        common = ["--config", str(workspace / "run.cfg"), "--data-dir", str(workspace / "data"),
                  "--target", "delta", *TRAIN]
        assert run(["pretrain", *common, "--variant", "vit_full", "--out", str(tmp_path / "pre")]) == 0
        assert run(["finetune", *common, "--init", str(tmp_path / "pre" / "pretrained.avit"),
                    "--out", str(tmp_path / "ft")]) == 1

    def test_protocol_report(self, workspace, tmp_path):
        argv = ["protocol", "--config", str(workspace / "run.cfg"), "--data-dir", str(workspace / "data"),
                "--shots", "2", "--seed", "4", "--out", str(tmp_path), "--no-checkpoints", *TRAIN]
        assert run(argv) == 0
        lines = (tmp_path / "report_vit_ensemble_adapter_fwt_k2_s4.csv").read_text().splitlines()
        assert lines[0].startswith("target,variant,seed,HTER,AUC,TPR@FPR1,stability_mean,stability_std")
        assert [ln.split(",")[0] for ln in lines[1:]] == ["alpha", "beta", "gamma", "delta"]
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["train"]["seed"] == 4 and manifest["train"]["pretrain_iters"] == 4


class TestEvalScores:
    def test_from_csv(self, tmp_path, capsys):
        write_scores_csv(tmp_path / "s.csv", np.array([0.9, 0.8, 0.4, 0.7, 0.3, 0.1]), np.array([1, 1, 1, 0, 0, 0]))
        assert run(["eval", "--scores", str(tmp_path / "s.csv"), "--fpr", "0.5", "--out", str(tmp_path / "o")]) == 0
        report = (tmp_path / "o" / "report.csv").read_text()
        assert f"auc,{8 / 9!r}" in report and "tpr_at_fpr_0.5" in report

    def test_scores_and_checkpoint_conflict(self, tmp_path):
        write_scores_csv(tmp_path / "s.csv", np.array([0.9, 0.1]), np.array([1, 0]))
        assert run(["eval", "--scores", str(tmp_path / "s.csv"), "--checkpoint", "x"]) == 1

    def test_malformed_scores(self, tmp_path):
        (tmp_path / "s.csv").write_text("a,b\n1,2\n")
        assert run(["eval", "--scores", str(tmp_path / "s.csv")]) == 2
