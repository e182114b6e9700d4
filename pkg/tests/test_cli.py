import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rsicnet.cli import main
from rsicnet.modelfile import load_model
from rsicnet.quant import QuantizedModel

TINY_MODEL = {"blocks": [{"out_channels": 4}, {"out_channels": 8}], "taps": [1, 2], "attention": "SE",
              "head_hidden": 16, "num_classes": 3, "input_size": [16, 16], "num_heads": 2, "key_dim": 3}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    out = json.loads(cap.out) if cap.out.strip() and code == 0 else None
    err = json.loads(cap.err.strip().splitlines()[-1]) if code else None
    return code, out, err


@pytest.fixture
def dataset(tmp_path, capsys):
    d = tmp_path / "data"
    assert run(["gen-data", "--out", d, "--classes", 3, "--per-class", 8, "--size", 16, "--seed", 1], capsys)[0] == 0
    assert run(["split", "--data", d, "--fraction", 0.5, "--seed", 2], capsys)[0] == 0
    return d


def _config(tmp_path, name, **over):
    cfg = {"schema_version": 1, "model": TINY_MODEL,
           "train": {"phase1_epochs": 1, "phase2_epochs": 1, "batch_size": 6, "phase1_lr": 1e-3, "phase2_lr": 1e-5},
           "augment": {"crop_reduction": 2, "erase_extent": 3},
           "paths": {"data": "data", "out": name}}
    cfg.update(over)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_params_parts_sum_to_total(capsys):
    code, out, _ = run(["params"], capsys)
    assert code == 0 and out["backbone"] + out["attention"] + out["head"] == out["total"]
    code, none, _ = run(["params", "--attention", "none"], capsys)
    assert none["attention"] == 0 and none["total"] < out["total"]


def test_unknown_command_is_a_usage_error(capsys):
    code, _, err = run(["fly"], capsys)
    assert code == 2 and err["kind"] == "usage"


def test_unknown_flag_is_a_usage_error(capsys):
    code, _, err = run(["params", "--colour", "red"], capsys)
    assert code == 2 and err["kind"] == "usage"


def test_missing_model_file(tmp_path, capsys):
    code, _, err = run(["eval", "--model", tmp_path / "nope.atnf", "--data", tmp_path], capsys)
    assert code == 1 and err["kind"] == "missing_file"


def test_bad_config_version(tmp_path, dataset, capsys):
    code, _, err = run(["train", "--config", _config(tmp_path, "run", schema_version=7)], capsys)
    assert code == 1 and err["kind"] == "bad_config"


def test_unknown_config_key(tmp_path, dataset, capsys):
    path = _config(tmp_path, "run", train={"phase1_epochs": 1, "warp_speed": 9})
    code, _, err = run(["train", "--config", path], capsys)
    assert code == 1 and err["kind"] == "bad_config" and "warp_speed" in err["error"]


def test_config_class_count_must_match_data(tmp_path, dataset, capsys):
    path = _config(tmp_path, "run", model={**TINY_MODEL, "num_classes": 4})
    code, _, err = run(["train", "--config", path], capsys)
    assert code == 1 and err["kind"] == "bad_config"


def test_corrupt_model_file_reports_its_kind(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.atnf"
    bad.write_bytes(b"NOPE" + bytes(20))
    code, _, err = run(["eval", "--model", bad, "--data", dataset], capsys)
    assert code == 1 and err["kind"] == "BadMagicError"


def test_split_counts(dataset, capsys):
    code, out, _ = run(["split", "--data", dataset, "--fraction", 0.25, "--seed", 0], capsys)
    assert code == 0 and out["train"] == 6 and out["test"] == 18
    assert all(v == 2 for v in out["per_class"]["train"].values())


def test_train_eval_quantize_end_to_end(tmp_path, dataset, capsys):
    code, out, _ = run(["train", "--config", _config(tmp_path, "run")], capsys)
    assert code == 0
    ckpt = tmp_path / "run" / "checkpoint.atnf"
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
    history = (tmp_path / "run" / "history.jsonl").read_text().splitlines()
    assert len(history) == 2 and metrics["train_images"] == 4 * 12 and metrics["test_images"] == 12
    assert out["accuracy"] == metrics["test"]["accuracy"]

    code, ev, _ = run(["eval", "--model", ckpt, "--data", dataset], capsys)
    assert ev["accuracy"] == metrics["test"]["accuracy"]
    assert np.asarray(ev["confusion"]).sum() == 12

    code, q, _ = run(["quantize", "--model", ckpt, "--out", tmp_path / "q.atnf", "--data", dataset], capsys)
    assert code == 0 and q["payload_ratio"] == 0.25
    assert 0 <= q["top1_agreement"] <= 1
    assert isinstance(load_model(tmp_path / "q.atnf"), QuantizedModel)
    code, ev8, _ = run(["eval", "--model", tmp_path / "q.atnf", "--data", dataset], capsys)
    assert ev8["accuracy"] == q["int8_accuracy"]

    code, _, err = run(["quantize", "--model", tmp_path / "q.atnf", "--out", tmp_path / "qq.atnf"], capsys)
    assert code == 1 and err["kind"] == "bad_argument"


def test_training_outputs_are_byte_identical(tmp_path, dataset, capsys):
    for name in ("a", "b"):
        assert run(["train", "--config", _config(tmp_path, name)], capsys)[0] == 0
    for f in ("checkpoint.atnf", "history.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ma, mb = (json.loads((tmp_path / n / "metrics.json").read_text()) for n in ("a", "b"))
    ma["config"].pop("init_from"), mb["config"].pop("init_from")
    assert ma == mb


def test_init_from_transfers_backbone(tmp_path, dataset, capsys):
    assert run(["train", "--config", _config(tmp_path, "up")], capsys)[0] == 0
    path = _config(tmp_path, "down", init_from="up/checkpoint.atnf",
                   train={"phase1_epochs": 0, "phase2_epochs": 0})
    assert run(["train", "--config", path], capsys)[0] == 0
    up, down = load_model(tmp_path / "up" / "checkpoint.atnf"), load_model(tmp_path / "down" / "checkpoint.atnf")
    assert np.array_equal(up.backbone[0].w.data, down.backbone[0].w.data)


def test_augment_preview(tmp_path, dataset, capsys):
    aug = tmp_path / "aug.json"
    aug.write_text(json.dumps({"crop_reduction": 2, "erase_extent": 3, "seed": 4}))
    code, out, _ = run(["augment-preview", "--data", dataset, "--out", tmp_path / "prev", "--count", 3,
                        "--augment", aug], capsys)
    assert code == 0
    assert sum(f.startswith("before_") for f in out["files"]) == 3
    assert sum(f.startswith("after_") for f in out["files"]) == 9
    assert np.allclose(np.sum(out["labels_after"], 1), 1, atol=1e-5)


def test_gradcheck_command(capsys):
    code, out, _ = run(["gradcheck", "--seed", 1], capsys)
    assert code == 0 and out["passed"]
    assert {"dense", "conv2d_s1_same", "attention_TRIAXIS"} <= {c["name"] for c in out["checks"]}


def test_console_script_runs_in_a_fresh_process():
    env = {**os.environ, "ATNF_THREADS": "1"}
    res = subprocess.run([sys.executable, "-m", "rsicnet.cli", "params", "--attention", "TRIAXIS"],
                         capture_output=True, text=True, env=env, check=True)
    assert json.loads(res.stdout)["spec"]["attention"] == "TRIAXIS"
