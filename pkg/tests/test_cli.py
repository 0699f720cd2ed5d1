import csv
import json

import numpy as np
import pytest

from conftest import TINY
from sitmlp.cli import labels_path, main
from sitmlp.engine import load_tensor
from sitmlp.network import ModelConfig, dump_config
from sitmlp.train import read_scores

TRAIN = {"epochs": 2, "warmup_epochs": 1, "batch_size": 6, "base_lr": 0.05}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Generated data, a config file and one trained joint-stream run."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--classes", "3", "--per-class", "8", "--seed", "2", "--out", str(root / "data"),
                 "--joints", "4", "--frames", "12"]) == 0
    (root / "model.toml").write_text(dump_config(ModelConfig(**TINY), TRAIN))
    assert main(["train", "--config", str(root / "model.toml"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_generate_writes_dataset(run, capsys):
    data = run / "data"
    assert {p.name for p in data.iterdir()} >= {"train.tsv", "test.tsv", "graph.txt", "meta.json", "samples"}
    assert json.loads((data / "meta.json").read_text())["centroid_accuracy"] > 0.8


def test_train_writes_log_and_checkpoints(run):
    log = (run / "run/log.csv").read_text().splitlines()
    rows = [ln for ln in log if not ln.startswith("#")]
    assert rows[0] == "epoch,lr,loss,acc" and len(rows) == 3
    assert (run / "run/final.ckpt").exists() and (run / "run/best.ckpt").exists()


def test_train_cli_overrides(run, tmp_path):
    assert main(["train", "--config", str(run / "model.toml"), "--data", str(run / "data"), "--out", str(tmp_path),
                 "--epochs", "3", "--modality", "bone"]) == 0
    rows = [ln for ln in (tmp_path / "log.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 4
    assert "# modality=bone" in (tmp_path / "log.csv").read_text()


def test_eval_writes_scores_labels_and_report(run, tmp_path, capsys):
    scores = tmp_path / "joint.csv"
    assert main(["eval", "--ckpt", str(run / "run/final.ckpt"), "--data", str(run / "data"),
                 "--scores", str(scores), "--report", str(tmp_path / "r.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((tmp_path / "r.json").read_text())
    ids, values = read_scores(scores)
    assert values.shape == (6, 3)
    np.testing.assert_allclose(values.sum(axis=1), 1.0, atol=1e-5)
    assert labels_path(scores).name == "joint.labels.tsv" and labels_path(scores).exists()
    assert np.trace(np.array(report["confusion"])) / 6 == report["accuracy"]


def test_ensemble_of_identical_streams_matches_eval(run, tmp_path, capsys):
    scores = tmp_path / "s.csv"
    main(["eval", "--ckpt", str(run / "run/final.ckpt"), "--data", str(run / "data"), "--scores", str(scores)])
    single = json.loads(capsys.readouterr().out)
    copies = []
    for i in range(4):
        copies.append(tmp_path / f"m{i}.csv")
        copies[-1].write_bytes(scores.read_bytes())
    assert main(["ensemble", *map(str, copies), "--weights", "1,1,1,1", "--data", str(run / "data")]) == 0
    assert json.loads(capsys.readouterr().out) == single
    assert main(["ensemble", str(scores), str(scores)]) == 0  # labels from the sidecar
    assert json.loads(capsys.readouterr().out) == single


def test_ensemble_errors(run, tmp_path, capsys):
    scores = tmp_path / "s.csv"
    main(["eval", "--ckpt", str(run / "run/final.ckpt"), "--data", str(run / "data"), "--scores", str(scores)])
    lonely = tmp_path / "lonely.csv"
    lonely.write_bytes(scores.read_bytes())
    capsys.readouterr()
    assert main(["ensemble", str(lonely)]) == 1
    assert "sidecar" in capsys.readouterr().err
    assert main(["ensemble", str(scores), str(scores), "--weights", "1,1,1"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["ensemble", str(scores), "--weights", "one"])
    assert exc.value.code == 2


def test_inspect_prints_tables(tmp_path, capsys):
    (tmp_path / "c.toml").write_text(dump_config(ModelConfig(**TINY)))
    assert main(["inspect", "--config", str(tmp_path / "c.toml")]) == 0
    out = capsys.readouterr().out
    assert "parameters" in out and "FLOPs per sequence" in out and "blocks.4" in out
    assert main(["inspect"]) == 0
    assert "550,866" in capsys.readouterr().out


def test_export_attention_csv_and_binary(run, tmp_path):
    sample = sorted((run / "data/samples").iterdir())[0]
    common = ["export-attn", "--ckpt", str(run / "run/final.ckpt"), "--sample", str(sample),
              "--graph", str(run / "data/graph.txt")]
    assert main(common + ["--out", str(tmp_path / "a.csv"), "--block", "1"]) == 0
    assert main(common + ["--out", str(tmp_path / "a.bin"), "--block", "1", "--format", "bin"]) == 0
    attn = load_tensor(tmp_path / "a.bin").data
    assert attn.shape == (1, 8, 4, 12)
    with open(tmp_path / "a.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["batch", "frame", "joint", "channel", "value"]
    assert len(rows) == 1 + attn.size
    b, t, v, c, value = rows[1 + 123]
    assert float(value) == attn[int(b), int(t), int(v), int(c)]
    assert main(common + ["--out", str(tmp_path / "x.csv"), "--block", "9"]) == 1


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--only", "ops.gelu", "layers.BatchNorm[train]"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2 and "2/2 cases" in out


def test_gradcheck_unknown_case(capsys):
    assert main(["gradcheck", "--only", "ops.nothing"]) == 1


def test_missing_checkpoint_is_error_exit(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                 "--scores", str(tmp_path / "s.csv")]) == 1
    assert capsys.readouterr().err.startswith("sitmlp eval: error:")


@pytest.mark.parametrize("argv", [["train"], ["frobnicate"], ["inspect", "--bogus"], []])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_label_beyond_classes_rejected(run, tmp_path):
    cfg = ModelConfig(**{**TINY, "num_classes": 2})
    (tmp_path / "c.toml").write_text(dump_config(cfg, TRAIN))
    assert main(["train", "--config", str(tmp_path / "c.toml"), "--data", str(run / "data"),
                 "--out", str(tmp_path / "r")]) == 1
