import json

import numpy as np
import pytest
from fixtures import N_FRAMES, TEST_IMAGE_DIM, TEST_TEXT_DIM, make_sequences
from PIL import Image
from pytest import approx

from stereovol.cli import main
from stereovol.evaluation import read_metrics
from stereovol.nutrition import NutrientProfile, save_nutrient_database
from stereovol.serialization import (
    read_json,
    read_manifest,
    read_predictions,
    read_vocabulary,
    write_json,
    write_json_lines,
)
from stereovol.vlm import build_query

N_PER_CLASS = 3

CONFIG = {
    "image_encoder.name": "test",
    "image_encoder.dim": TEST_IMAGE_DIM,
    "text_encoder.name": "test",
    "text_encoder.dim": TEST_TEXT_DIM,
    "epochs": 2,
    "batch_size": 8,
    "projection_dim": 8,
    "max_pairs": 2,
    "log_level": "WARNING",
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Frames on disk, a sequence list, a split file and ingested manifests."""
    root = tmp_path_factory.mktemp("cli")
    records, test_ids = [], []
    for seq in make_sequences(N_PER_CLASS):
        frames = []
        for k, frame in enumerate(seq.frames):
            path = root / "frames" / seq.item_id / f"frame_{k:03d}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.round(frame * 255).astype(np.uint8)).save(path)
            frames.append(str(path.relative_to(root)))
        records.append(
            {
                "item_id": seq.item_id,
                "class_label": seq.class_label,
                "frames": frames,
                "volume_ml": seq.volume_ml,
                "food_code": seq.food_code,
            }
        )
        if seq.item_id.endswith(f"-{N_PER_CLASS - 1:03d}"):
            test_ids.append(seq.item_id)
    write_json_lines(root / "sequences.jsonl", records)
    train_ids = [r["item_id"] for r in records if r["item_id"] not in test_ids]
    write_json(root / "split.json", {"train": train_ids, "test": test_ids})
    write_json(root / "config.json", {**CONFIG, "data_root": str(root)})

    code = main(
        [
            "ingest",
            "--sequences",
            str(root / "sequences.jsonl"),
            "--split-file",
            str(root / "split.json"),
            "--out",
            str(root / "data"),
            "--config",
            str(root / "config.json"),
        ]
    )
    assert code == 0
    return root


def _run(workspace, *argv):
    return main([*argv, "--config", str(workspace / "config.json")])


def test_ingest(workspace):
    data = workspace / "data"
    train = read_manifest(data / "train.jsonl", str(workspace))
    test = read_manifest(data / "test.jsonl", str(workspace))
    assert len(test) == 5
    assert len({s.item_id for s in train}) == 5 * (N_PER_CLASS - 1)
    assert all(s.frame_indices[1] < N_FRAMES for s in train)
    assert read_vocabulary(data / "vocabulary.txt").names == (
        "apple",
        "banana",
        "bread",
        "cake",
        "egg",
    )
    run = read_json(data / "run.json")
    assert run["command"] == "ingest"
    assert run["config"]["image_encoder.name"] == "test"


def test_build_priors(workspace):
    out = workspace / "priors.json"
    code = _run(
        workspace,
        "build-priors",
        "--train-manifest",
        str(workspace / "data" / "train.jsonl"),
        "--out",
        str(out),
    )
    assert code == 0
    priors = read_json(out)
    assert sorted(priors["entries"]) == ["apple", "banana", "bread", "cake", "egg"]
    assert priors["source"] == "train"
    run = read_json(workspace / "priors.run.json")
    assert run["command"] == "build-priors"
    assert run["source"] == "train"


def test_train_predict_evaluate(workspace, capsys):
    data = workspace / "data"
    run = workspace / "run"
    assert _run(
        workspace,
        "train",
        "--train-manifest",
        str(data / "train.jsonl"),
        "--vocab",
        str(data / "vocabulary.txt"),
        "--out",
        str(run),
        "--epochs",
        "3",
    ) == 0
    assert (run / "best.pt").exists()
    assert read_json(run / "run.json")["config"]["epochs"] == 3

    preds_path = workspace / "ours.jsonl"
    assert _run(
        workspace,
        "predict",
        "--checkpoint",
        str(run),
        "--manifest",
        str(data / "test.jsonl"),
        "--out",
        str(preds_path),
    ) == 0
    preds = read_predictions(preds_path)
    assert len(preds) == 5
    assert all(r.food_code.startswith("FC-") for r in preds.records)
    assert (workspace / "ours.run.json").exists()

    capsys.readouterr()
    evaluated = _run(
        workspace,
        "evaluate",
        "--predictions",
        str(preds_path),
        "--out",
        str(workspace / "eval"),
    )
    assert evaluated == 0
    assert capsys.readouterr().out.startswith("| Method")
    report = read_metrics(workspace / "eval" / "metrics.json")
    assert report.n_items == 5
    for name in ("cdf.csv", "kde.csv", "best_fit.json"):
        assert (workspace / "eval" / name).exists()
    assert read_json(workspace / "eval" / "run.json")["n_clipped"] == 0


def test_evaluate_flags_clipped_estimates(workspace):
    preds = workspace / "negative.jsonl"
    write_json_lines(
        preds,
        [
            {
                "item_id": "apple-002",
                "class_label": "apple",
                "volume_est": -40.0,
                "volume_gt": 250.0,
                "predicted_class": "apple",
            },
            {
                "item_id": "pear-000",
                "class_label": "pear",
                "volume_est": 180.0,
                "volume_gt": 200.0,
                "predicted_class": "apple",
            },
        ],
    )
    out = workspace / "negative-eval"
    with pytest.warns(UserWarning) as caught:
        code = _run(
            workspace,
            "evaluate",
            "--predictions",
            str(preds),
            "--vocab",
            str(workspace / "data" / "vocabulary.txt"),
            "--out",
            str(out),
        )
    assert code == 0
    messages = [str(w.message) for w in caught]
    assert any("clipped" in m for m in messages)
    assert any("pear" in m for m in messages)
    report = read_metrics(out / "metrics.json")
    assert report.n_clipped == 1
    assert report.mae_ml == approx((250.0 + 20.0) / 2)
    assert read_json(out / "run.json")["n_clipped"] == 1


def test_baseline_and_report(workspace):
    data = workspace / "data"
    for kind in ("dataset-mean", "category-mean"):
        assert _run(
            workspace,
            "baseline",
            "--kind",
            kind,
            "--train-manifest",
            str(data / "train.jsonl"),
            "--test-manifest",
            str(data / "test.jsonl"),
            "--out",
            str(workspace / kind),
        ) == 0
    dataset_mean = read_predictions(workspace / "dataset-mean" / "predictions.jsonl")
    assert len(set(dataset_mean.estimates)) == 1

    out = workspace / "report"
    assert _run(
        workspace,
        "report",
        "--metrics",
        str(workspace / "category-mean" / "metrics.json"),
        str(workspace / "dataset-mean" / "metrics.json"),
        "--out",
        str(out),
    ) == 0
    table = (out / "comparison.md").read_text()
    assert "category_mean" in table
    assert "Improvement" in table
    run = read_json(out / "run.json")
    assert run["methods"] == ["category_mean", "dataset_mean"]


def test_ablate(workspace):
    data = workspace / "data"
    out = workspace / "ablation"
    assert _run(
        workspace,
        "ablate",
        "--variant",
        "stereo_only",
        "--variant",
        "prompt_template_0",
        "--train-manifest",
        str(data / "train.jsonl"),
        "--test-manifest",
        str(data / "test.jsonl"),
        "--out",
        str(out),
    ) == 0
    assert read_metrics(out / "stereo_only.json").method == "stereo_only"
    assert "prompt_template_0" in (out / "ablation.md").read_text()


def _nutrition_inputs(root):
    preds = root / "truth.jsonl"
    write_json_lines(
        preds,
        [
            {
                "item_id": "apple-002",
                "class_label": "apple",
                "volume_est": 200.0,
                "volume_gt": 250.0,
                "food_code": "FC-apple",
            }
        ],
    )
    db = root / "nutrients.json"
    save_nutrient_database(
        db, {"FC-apple": NutrientProfile("FC-apple", 52.0, 0.3, 14.0, 0.2)}
    )
    return preds, db


def test_nutrition(workspace):
    preds, db = _nutrition_inputs(workspace)
    out = workspace / "nutrition.json"
    code = _run(
        workspace,
        "nutrition",
        "--predictions",
        str(preds),
        "--db",
        str(db),
        "--out",
        str(out),
    )
    assert code == 0
    report = read_json(out)
    assert report["volume_ml"] == approx(50.0)
    assert report["energy_kcal"] == approx(26.0)
    assert read_json(workspace / "nutrition.run.json")["command"] == "nutrition"


def test_vlm_baseline_replay(workspace):
    samples = read_manifest(workspace / "data" / "test.jsonl", str(workspace))
    tape = workspace / "tape.jsonl"
    write_json_lines(
        tape,
        [
            {
                "key": build_query(sample, "single_no_context").key,
                "item_id": sample.item_id,
                "mode": "single_no_context",
                "model": "recorded-model",
                "response": "123.5",
            }
            for sample in samples
        ],
    )
    out = workspace / "vlm.jsonl"
    assert _run(
        workspace,
        "vlm-baseline",
        "--mode",
        "single_no_context",
        "--manifest",
        str(workspace / "data" / "test.jsonl"),
        "--replay",
        str(tape),
        "--out",
        str(out),
    ) == 0
    preds = read_predictions(out)
    assert list(preds.estimates) == [123.5] * len(samples)
    summary = read_json(workspace / "vlm.run.json")["vlm"]
    assert summary["model"] == "recorded-model"
    assert summary["n_missing"] == 0


def test_unknown_config_key(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"epoch": 3}))
    code = main(
        ["build-priors", "--out", str(tmp_path / "p.json"), "--config", str(config)]
    )
    assert code == 6
    assert capsys.readouterr().err.startswith("error: ConfigError: ")


def test_build_priors_without_input(tmp_path, capsys):
    assert main(["build-priors", "--out", str(tmp_path / "p.json")]) == 2
    assert "DataError" in capsys.readouterr().err


def test_data_error_exit_code(workspace, capsys):
    preds, db = _nutrition_inputs(workspace)
    code = _run(
        workspace,
        "nutrition",
        "--predictions",
        str(preds),
        "--db",
        str(db),
        "--volume-floor",
        "0",
        "--out",
        str(workspace / "unused.json"),
    )
    assert code == 2
    assert capsys.readouterr().err.startswith("error: ValueError: ")
