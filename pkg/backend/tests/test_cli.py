"""
Tests for the batch command line and its exit codes
"""

import json

import pytest
from annotations import write_predictions
from cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from gradcheck import CheckResult, GradcheckReport
from models import Detection, FramePredictions, RunManifest
from simdata import load_dataset


@pytest.fixture
def config_file(tmp_path, test_config):
    path = tmp_path / "itid.ini"
    path.write_text(test_config.to_ini(), encoding="utf-8")
    return path


def _echo_ground_truth(dataset_dir, path):
    """Write the dataset's own key-frame annotations as a predictions file"""
    dataset = load_dataset(dataset_dir)
    predictions = [
        FramePredictions(
            video_id=frame.video_id,
            frame_index=frame.frame_index,
            detections=[
                Detection(role=inst.role, category=inst.category, box=inst.box, score=1.0)
                for inst in frame.instances
            ],
            quintuples=frame.quintuples,
        )
        for frame in dataset.frame_annotations()
    ]
    write_predictions(predictions, path)
    return predictions


@pytest.mark.integration
def test_simulate_writes_dataset_and_manifest(tmp_path, config_file, capsys):
    out = tmp_path / "data"
    code = main(["simulate", "--config", str(config_file), "--out", str(out), "--count", "5"])

    assert code == EXIT_OK
    assert len(load_dataset(out).snippets) == 5
    manifest = RunManifest.model_validate_json((out / "run_manifest.json").read_text())
    assert manifest.command == "simulate"
    assert manifest.finished_at is not None
    assert "dataset hash:" in capsys.readouterr().out


def test_non_empty_output_needs_force(tmp_path, config_file):
    out = tmp_path / "data"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    args = ["simulate", "--config", str(config_file), "--out", str(out), "--count", "2"]
    assert main(args) == EXIT_USAGE
    assert main([*args, "--force"]) == EXIT_OK


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["simulate"],
        ["train", "--stage", "3", "--data", "d", "--out", "o"],
        ["--log-level", "chatty", "gradcheck"],
    ],
)
def test_usage_errors_exit_one(argv):
    assert main(argv) == EXIT_USAGE


def test_unknown_config_key_exits_one(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[detector]\nanchors = 9\n", encoding="utf-8")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_stage2_without_stage1_checkpoint_exits_one(tmp_path, dataset_dir):
    argv = ["train", "--stage", "2", "--data", str(dataset_dir), "--out", str(tmp_path / "o")]
    assert main(argv) == EXIT_USAGE


def test_missing_dataset_exits_three(tmp_path):
    argv = ["eval", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]
    assert main(argv) == EXIT_IO


def test_eval_without_checkpoints_or_predictions_exits_one(tmp_path, dataset_dir):
    argv = ["eval", "--data", str(dataset_dir), "--out", str(tmp_path / "o")]
    assert main(argv) == EXIT_USAGE


def test_eval_rejects_more_reference_frames_than_the_dataset(tmp_path, dataset_dir):
    argv = ["eval", "--data", str(dataset_dir), "--out", str(tmp_path / "o"), "--r", "3"]
    assert main(argv) == EXIT_USAGE


@pytest.mark.integration
def test_eval_of_ground_truth_predictions_scores_one(tmp_path, dataset_dir):
    # Setup
    predictions_path = tmp_path / "gt.txt"
    predictions = _echo_ground_truth(dataset_dir, predictions_path)
    assert any(frame.quintuples for frame in predictions)
    out = tmp_path / "eval"

    # Execute
    code = main(
        [
            "eval",
            "--data", str(dataset_dir),
            "--out", str(out),
            "--split", "all",
            "--predictions", str(predictions_path),
            "--compare", str(predictions_path),
            "--json-lines",
        ]
    )

    # Verify
    assert code == EXIT_OK
    report = (out / "report.txt").read_text().splitlines()
    assert report[-1] == "mAP_IT=1.0000, mAP_ITI=1.0000"
    assert (out / "report.jsonl").exists()
    assert (out / "clipwise.txt").read_text().startswith("# video clip mAP_ITI num_gt")
    comparison = json.loads((out / "comparison.json").read_text())
    assert comparison["wilcoxon"]["degenerate"] is True


def test_malformed_predictions_file_exits_three(tmp_path, dataset_dir):
    bad = tmp_path / "bad.txt"
    bad.write_text("v000 2 tissue 0 0.0 0.0 4.0\n", encoding="utf-8")
    argv = ["eval", "--data", str(dataset_dir), "--out", str(tmp_path / "o"), "--predictions", str(bad)]
    assert main(argv) == EXIT_IO


@pytest.mark.parametrize(("passed", "expected"), [(True, EXIT_OK), (False, EXIT_NUMERICAL)])
def test_gradcheck_exit_code(mocker, capsys, passed, expected):
    manager = mocker.patch("cli.default_manager").return_value
    manager.names.return_value = ["core"]
    manager.run.return_value = GradcheckReport(
        tolerance=1e-4, results=[CheckResult("core", "linear", "x", 1e-9 if passed else 0.5, passed)]
    )

    assert main(["gradcheck", "--module", "core"]) == expected
    manager.run.assert_called_once_with("core", tolerance=1e-4)
    assert "1 tensors checked" in capsys.readouterr().out


@pytest.mark.slow
@pytest.mark.integration
def test_train_then_eval_end_to_end(tmp_path, dataset_dir):
    stage1_out, stage2_out, eval_out = tmp_path / "s1", tmp_path / "s2", tmp_path / "ev"
    common = ["--data", str(dataset_dir), "--train-split", "all", "--epochs", "2", "--max-steps", "2"]

    assert main(["train", "--stage", "1", "--out", str(stage1_out), *common]) == EXIT_OK
    assert (stage1_out / "stage1.bin").exists()
    assert (stage1_out / "metrics.log").read_text().startswith("# ")

    stage1_ckpt = str(stage1_out / "stage1")
    argv = ["train", "--stage", "2", "--out", str(stage2_out), "--stage1-ckpt", stage1_ckpt, *common]
    assert main(argv) == EXIT_OK
    assert (stage2_out / "stage2.manifest").read_text().startswith("# format=1")

    argv = [
        "eval",
        "--data", str(dataset_dir),
        "--out", str(eval_out),
        "--split", "all",
        "--stage1-ckpt", stage1_ckpt,
        "--stage2-ckpt", str(stage2_out / "stage2"),
    ]
    assert main(argv) == EXIT_OK
    assert (eval_out / "report.txt").read_text().splitlines()[-1].startswith("mAP_IT=")
    assert (eval_out / "predictions.txt").exists()


@pytest.mark.slow
def test_training_checkpoints_are_reproducible(tmp_path, dataset_dir):
    """Same config and seed: byte-identical stage-1 checkpoints"""
    common = ["--data", str(dataset_dir), "--train-split", "all", "--epochs", "2", "--max-steps", "3"]
    for name in ("a", "b"):
        assert main(["train", "--stage", "1", "--out", str(tmp_path / name), *common]) == EXIT_OK
    assert (tmp_path / "a" / "stage1.bin").read_bytes() == (tmp_path / "b" / "stage1.bin").read_bytes()
