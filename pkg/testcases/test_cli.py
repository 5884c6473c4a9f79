import hashlib
import json

import numpy as np
import pytest

from ablation import SWEEP_COLUMNS
from feature_files import read_feature_file, write_feature_csv
from main import main
from mil_dataset import UNKNOWN_LABEL, InstanceSet

GENERATE = ["--d", "4", "--g", "2", "--n-neg-bags", "6", "--n-pos-bags", "6", "--bag-size", "30",
            "--witness-rate", "0.2", "--seed", "3", "--quiet"]
TRAIN = ["--clusters", "2", "--max-rounds", "2", "--epochs", "30", "--seed", "5", "--quiet"]


@pytest.fixture
def data(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "data"), "--csv", *GENERATE]) == 0
    return tmp_path / "data"


@pytest.fixture
def bundle(tmp_path, data):
    path = tmp_path / "model.json"
    assert main(["train", "--train", str(data / "train.dgmf"), "--out", str(path), *TRAIN]) == 0
    return path


def test_generate_writes_split_and_manifest(data):
    manifest = json.loads((data / "manifest.json").read_text())
    for name in ("train.dgmf", "test.dgmf"):
        digest = hashlib.sha256((data / name).read_bytes()).hexdigest()
        assert manifest["files"][name]["sha256"] == digest
    assert manifest["synthetic"]["witness_rate"] == 0.2
    assert manifest["run"]["options"]["seed"] == 3
    instances, bags = read_feature_file(data / "train.dgmf")
    assert instances.n == 360 and instances.d == 4 and len(bags) == 12


def test_generated_csv_matches_binary(data):
    binary, _ = read_feature_file(data / "test.dgmf")
    text, _ = read_feature_file(data / "test.csv")
    assert np.array_equal(binary.features, text.features)
    assert np.array_equal(binary.instance_label, text.instance_label)


def test_generate_is_reproducible(tmp_path, data):
    assert main(["generate", "--out", str(tmp_path / "again"), *GENERATE]) == 0
    assert (tmp_path / "again" / "train.dgmf").read_bytes() == (data / "train.dgmf").read_bytes()


def test_zero_witness_rate_is_a_validation_error(tmp_path, capsys):
    out = tmp_path / "none"
    assert main(["generate", "--out", str(out), "--witness-rate", "0", "--quiet"]) == 1
    assert "witness-rate" in capsys.readouterr().err
    assert not out.exists()


def test_train_writes_bundle_and_round_log(bundle):
    document = json.loads(bundle.read_text())
    log_lines = (bundle.parent / "model.json.rounds.jsonl").read_text().splitlines()
    assert len(log_lines) == len(document["rounds"])
    for index, line in enumerate(log_lines, start=1):
        record = json.loads(line)
        assert record["round"] == index
        assert record["version"] == document["version"]
    assert document["config"]["options"]["clusters"] == 2


def test_zero_rounds_bundle_is_identity(tmp_path, data):
    path = tmp_path / "zero.json"
    assert main(["train", "--train", str(data / "train.dgmf"), "--out", str(path),
                 *TRAIN, "--max-rounds", "0"]) == 0
    document = json.loads(path.read_text())
    assert document["rounds"] == []
    assert document["collapsed"]["projection_weight"] == np.eye(4).tolist()
    assert (tmp_path / "zero.json.rounds.jsonl").read_text() == ""


def test_one_round_log_has_one_line(tmp_path, data):
    log = tmp_path / "rounds.jsonl"
    assert main(["train", "--train", str(data / "train.dgmf"), "--out", str(tmp_path / "one.json"),
                 "--round-log", str(log), *TRAIN, "--max-rounds", "1"]) == 0
    assert len(log.read_text().splitlines()) == 1


def test_training_is_byte_reproducible(tmp_path, data, bundle):
    log = tmp_path / "model.json.rounds.jsonl"
    first_bundle, first_log = bundle.read_bytes(), log.read_bytes()
    assert main(["train", "--train", str(data / "train.dgmf"), "--out", str(bundle), *TRAIN]) == 0
    assert bundle.read_bytes() == first_bundle
    assert log.read_bytes() == first_log


def test_eval_on_the_training_file_reproduces_training_metrics(tmp_path, data, bundle):
    report = tmp_path / "report.jsonl"
    assert main(["eval", "--bundle", str(bundle), "--test", str(data / "train.dgmf"), "--out", str(report),
                 "--quiet"]) == 0
    (line,) = report.read_text().splitlines()
    metrics = json.loads(line)["metrics"]
    document = json.loads(bundle.read_text())
    assert metrics["instance_auc"] == document["train_instance_auc"]
    assert metrics["bag_auc"] == document["train_bag_auc"]
    assert metrics["threshold"] == document["threshold"]


def test_eval_writes_curves_and_plot(tmp_path, data, bundle):
    curves, plot = tmp_path / "curves.csv", tmp_path / "curves.png"
    assert main(["eval", "--bundle", str(bundle), "--test", str(data / "test.dgmf"),
                 "--out", str(tmp_path / "report.jsonl"), "--curves", str(curves), "--plot", str(plot),
                 "--quiet"]) == 0
    lines = curves.read_text().splitlines()
    assert lines[0] == "curve,x,y"
    assert {line.split(",")[0] for line in lines[1:]} == {"bag_roc", "instance_roc", "froc"}
    assert plot.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_rejects_a_dimension_mismatch(tmp_path, bundle):
    other = tmp_path / "other"
    assert main(["generate", "--out", str(other), *GENERATE, "--d", "5"]) == 0
    report = tmp_path / "mismatch.jsonl"
    assert main(["eval", "--bundle", str(bundle), "--test", str(other / "test.dgmf"), "--out", str(report),
                 "--quiet"]) == 2
    assert not report.exists()


def test_eval_without_instance_labels(tmp_path, data, bundle):
    instances, bags = read_feature_file(data / "test.dgmf")
    unlabeled = InstanceSet(instances.features, instances.bag_of, np.full(instances.n, UNKNOWN_LABEL))
    path = tmp_path / "unlabeled.csv"
    write_feature_csv(unlabeled, bags, path)
    report = tmp_path / "report.jsonl"
    assert main(["eval", "--bundle", str(bundle), "--test", str(path), "--out", str(report), "--quiet"]) == 0
    metrics = json.loads(report.read_text())["metrics"]
    assert metrics["instance_auc"] is None
    assert metrics["bag_auc"] is not None


def test_ablate_writes_sweep_tables(tmp_path, data):
    out = tmp_path / "sweep"
    assert main(["ablate", "--train", str(data / "train.dgmf"), "--test", str(data / "test.dgmf"),
                 "--axis", "clusters", "--values", "1,2", "--out", str(out), "--plot", str(out / "sweep.png"),
                 *TRAIN]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0] == ",".join(SWEEP_COLUMNS)
    rows = json.loads((out / "sweep.json").read_text())["rows"]
    assert [row["value"] for row in rows] == [1, 2]
    assert (out / "sweep.png").exists()


def test_ablate_rejects_an_empty_grid(tmp_path, data, capsys):
    assert main(["ablate", "--train", str(data / "train.dgmf"), "--test", str(data / "test.dgmf"),
                 "--values", "", "--out", str(tmp_path / "sweep"), "--quiet"]) == 1
    assert "values" in capsys.readouterr().err


def test_inspect(data, bundle):
    assert main(["inspect", str(data / "train.dgmf"), str(data / "train.csv"), str(bundle)]) == 0


def test_inspect_missing_file(tmp_path):
    assert main(["inspect", str(tmp_path / "absent.dgmf")]) == 1


def test_inspect_binary_file(tmp_path, capsys):
    image = tmp_path / "figure.png"
    image.write_bytes(b"\x89PNG\r\n\x1a\n\xc0\xff\x00")
    assert main(["inspect", str(image)]) == 2
    assert "bundle" in capsys.readouterr().err


def test_eval_with_a_feature_file_as_bundle(data):
    assert main(["eval", "--bundle", str(data / "train.dgmf"), "--test", str(data / "test.dgmf"),
                 "--out", str(data / "never.jsonl")]) == 2
    assert not (data / "never.jsonl").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--quiet"],
    ["train", "--train", "x.dgmf", "--bogus", "1"],
    ["frobnicate"],
    ["train", "--clusters", "many"],
])
def test_usage_errors_exit_with_one(argv):
    assert main(argv) == 1


def test_missing_training_file(tmp_path):
    assert main(["train", "--train", str(tmp_path / "absent.dgmf"), "--quiet"]) == 1


def test_config_file_is_applied(tmp_path, data):
    config = tmp_path / "run.conf"
    config.write_text("clusters=3\nmax-rounds=0\n")
    path = tmp_path / "model.json"
    assert main(["train", "--train", str(data / "train.dgmf"), "--out", str(path), "--config", str(config),
                 "--quiet"]) == 0
    document = json.loads(path.read_text())
    assert len(document["clusters"]) == 3
    assert document["rounds"] == []
