"""Command-line surface: the generate/train/evaluate/analyze pipeline on a
small task, exit codes, error JSON, and replica handling."""

import json

import numpy as np
import pytest

from seqmask.cli import main

TINY = """
# small end-to-end task
generator.d = 8
generator.n_invariant = 2
generator.n_spurious = 2
generator.tokens_text = 2
generator.frames_video = 3
domains.n = 24
model.epochs = 2
model.batch_size = 8
model.heads = 2
model.keyframe_k = 1
model.warmup_epochs = 0
model.alpha_warmup_epochs = 0
model.val_fraction = 0.2
"""


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / "task.cfg"
    config.write_text(TINY)
    return tmp_path, config


def run_generate(tmp_path, config):
    out = tmp_path / "data"
    code = main(
        ["generate", "--config", str(config), "--out-dir", str(out)]
    )
    assert code == 0
    return out / "dataset.jsonl", out / "ground_truth.json"


class TestPipeline:
    def test_generate_train_evaluate_analyze(self, workspace, capsys):
        tmp_path, config = workspace
        dataset, truth = run_generate(tmp_path, config)
        assert dataset.exists() and truth.exists()
        manifest = json.loads((tmp_path / "data" / "generate_manifest.json").read_text())
        assert manifest["samples"] == 72
        assert manifest["config"]["model"]["d_text"] == 8

        run_dir = tmp_path / "run"
        code = main(
            [
                "train",
                "--config",
                str(config),
                "--data",
                str(dataset),
                "--out-dir",
                str(run_dir),
            ]
        )
        assert code == 0
        summary = json.loads((run_dir / "train_summary.json").read_text())
        assert summary["holdout_domains"] == ["target"]
        assert summary["train_domains"] == ["src_neg", "src_pos"]
        checkpoint = run_dir / "checkpoint_seed0.json"
        report = json.loads((run_dir / "stage_report_seed0.json").read_text())
        assert checkpoint.exists()
        assert [s["stage"] for s in report["stages"]] == ["text", "video"]
        assert report["config"]["model"]["epochs"] == 2

        eval_out = tmp_path / "eval.json"
        code = main(
            [
                "evaluate",
                "--checkpoint",
                str(checkpoint),
                "--data",
                str(dataset),
                "--out",
                str(eval_out),
                "--ablations",
            ]
        )
        assert code == 0
        payload = json.loads(eval_out.read_text())
        assert set(payload["accuracy"]) == {"src_pos", "src_neg", "target"}
        assert set(payload["ablations"]) == {"add_noise", "using_ds", "no_keyframe"}

        analysis_dir = tmp_path / "analysis"
        code = main(
            [
                "analyze",
                "--checkpoint",
                str(checkpoint),
                "--data",
                str(dataset),
                "--truth",
                str(truth),
                "--out-dir",
                str(analysis_dir),
            ]
        )
        assert code == 0
        analysis = json.loads((analysis_dir / "analysis.json").read_text())
        for key in ("supports", "cross_modal", "intra_modal", "label_correlation",
                    "recovery", "evidence", "config", "seed"):
            assert key in analysis
        assert "overlap" not in analysis
        assert set(analysis["recovery"]) == {"text", "video"}
        mask_csv = (analysis_dir / "mask_text.csv").read_text().splitlines()
        assert mask_csv[0] == "index,magnitude,threshold,retained"
        assert len(mask_csv) == 1 + 8
        ratios = (analysis_dir / "independence_ratios.csv").read_text().splitlines()
        assert ratios[0] == "scope,modality,independent_ratio,dependent_ratio"
        decisions = (analysis_dir / "keyframe_decisions.csv").read_text().splitlines()
        assert decisions[0] == "sample_id,frame_0,frame_1,frame_2"
        assert len(decisions) == 1 + 72

    def test_training_outputs_are_reproducible(self, workspace):
        tmp_path, config = workspace
        dataset, _ = run_generate(tmp_path, config)
        outs = []
        for name in ("a", "b"):
            run_dir = tmp_path / name
            assert (
                main(
                    [
                        "train",
                        "--config",
                        str(config),
                        "--data",
                        str(dataset),
                        "--out-dir",
                        str(run_dir),
                    ]
                )
                == 0
            )
            outs.append(
                (
                    (run_dir / "checkpoint_seed0.json").read_bytes(),
                    (run_dir / "stage_report_seed0.json").read_bytes(),
                )
            )
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]

    def test_seed_replicas_write_one_checkpoint_each(self, workspace):
        tmp_path, config = workspace
        dataset, _ = run_generate(tmp_path, config)
        run_dir = tmp_path / "multi"
        code = main(
            [
                "train",
                "--config",
                str(config),
                "--set",
                "seeds=0,1",
                "--data",
                str(dataset),
                "--out-dir",
                str(run_dir),
                "--workers",
                "2",
            ]
        )
        assert code == 0
        summary = json.loads((run_dir / "train_summary.json").read_text())
        assert [r["seed"] for r in summary["replicas"]] == [0, 1]
        assert (run_dir / "checkpoint_seed0.json").exists()
        assert (run_dir / "checkpoint_seed1.json").exists()

        analysis_dir = tmp_path / "overlap"
        code = main(
            [
                "analyze",
                "--checkpoint",
                str(run_dir / "checkpoint_seed0.json"),
                "--checkpoint",
                str(run_dir / "checkpoint_seed1.json"),
                "--data",
                str(dataset),
                "--out-dir",
                str(analysis_dir),
            ]
        )
        assert code == 0
        analysis = json.loads((analysis_dir / "analysis.json").read_text())
        overlap = analysis["overlap"]["text"]
        assert overlap["names"] == ["checkpoint_seed0", "checkpoint_seed1"]
        assert np.asarray(overlap["jaccard"]).shape == (2, 2)
        assert np.asarray(overlap["jaccard"]).diagonal().tolist() == [1.0, 1.0]

    def test_zero_epoch_training_still_writes_outputs(self, workspace):
        tmp_path, config = workspace
        dataset, _ = run_generate(tmp_path, config)
        run_dir = tmp_path / "zero"
        code = main(
            [
                "train",
                "--config",
                str(config),
                "--set",
                "model.epochs=0",
                "--data",
                str(dataset),
                "--out-dir",
                str(run_dir),
            ]
        )
        assert code == 0
        summary = json.loads((run_dir / "train_summary.json").read_text())
        assert summary["replicas"][0]["final_val_accuracy"] is None


class TestErrors:
    def read_error(self, capsys):
        err = capsys.readouterr().err.strip().splitlines()[-1]
        return json.loads(err)["error"]

    def test_unknown_config_key_is_usage_error(self, workspace, capsys):
        tmp_path, config = workspace
        code = main(
            ["generate", "--config", str(config), "--set", "model.epoch=3"]
        )
        assert code == 2
        error = self.read_error(capsys)
        assert error["code"] == 2
        assert "model.epoch" in error["message"]

    def test_malformed_set_is_usage_error(self, workspace, capsys):
        tmp_path, config = workspace
        code = main(["generate", "--config", str(config), "--set", "epochs"])
        assert code == 2
        assert self.read_error(capsys)["type"] == "config"

    def test_missing_dataset_is_data_error(self, workspace, capsys):
        tmp_path, config = workspace
        code = main(
            ["train", "--config", str(config), "--data", str(tmp_path / "no.jsonl")]
        )
        assert code == 3
        assert self.read_error(capsys)["code"] == 3

    def test_unknown_holdout_domain_is_data_error(self, workspace, capsys):
        tmp_path, config = workspace
        dataset, _ = run_generate(tmp_path, config)
        code = main(
            [
                "train",
                "--config",
                str(config),
                "--data",
                str(dataset),
                "--holdout",
                "mars",
            ]
        )
        assert code == 3
        assert "mars" in self.read_error(capsys)["message"]

    def test_missing_subcommand_is_usage_error(self, capsys):
        code = main([])
        assert code == 2
        assert self.read_error(capsys)["type"] == "usage"

    def test_corrupt_dataset_line_is_data_error(self, workspace, capsys):
        tmp_path, config = workspace
        dataset, _ = run_generate(tmp_path, config)
        text = dataset.read_text().splitlines()
        text[3] = "{not json"
        broken = tmp_path / "broken.jsonl"
        broken.write_text("\n".join(text) + "\n")
        code = main(
            ["train", "--config", str(config), "--data", str(broken)]
        )
        assert code == 3
        assert ":4:" in self.read_error(capsys)["message"]


class TestGradcheckCommand:
    def test_small_suite_passes_and_reports(self, tmp_path, capsys):
        out = tmp_path / "gradcheck.json"
        code = main(
            ["gradcheck", "--instances", "2", "--seed", "0", "--out", str(out)]
        )
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert any(line.startswith("add") for line in lines)
        assert lines[-1].endswith("ops within tolerance")
        payload = json.loads(out.read_text())
        assert all(c["passed"] for c in payload["checks"])
