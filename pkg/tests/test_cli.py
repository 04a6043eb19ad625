import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from tcavlab.cli import main
from tcavlab.diffmodel import Dense, Flatten, LayeredModel, reference_model
from tcavlab.formats import load_cavs, load_dump, load_model, model_to_bytes, save_model


def _config(tmp_path, **over):
    doc = {
        "seed": 0,
        "dataset": {"count_per_class": 20, "size": [12, 12]},
        "train": {"epochs": 2},
        "concepts": [
            {"name": "brown", "kind": "color", "count": 20, "seed": 1, "size": [12, 12]},
            {"name": "blue", "kind": "color", "count": 20, "seed": 2, "size": [12, 12]},
        ],
        "negatives": [{"name": "grayscale_leaves", "kind": "grayscale_leaves", "count": 60, "seed": 3, "size": [12, 12]}],
        "experiment": {"layers": ["relu2", "dense1", "relu3"], "n_runs": 3, "negatives_per_run": 20},
    }
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_generate_default_counts(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("dataset: {generate: false}\n")
    assert main(["generate-concepts", "--config", str(cfg)]) == 0
    for color in ("red", "brown", "blue", "yellow", "green"):
        files = sorted((tmp_path / "out" / "concepts" / color).iterdir())
        assert len(files) == 100 and files[0].name == "0000.png"


def test_generate_count_one_and_idempotent(tmp_path):
    cfg = _config(tmp_path, concepts=[{"name": "red", "kind": "color", "count": 1}], dataset={"generate": False})
    assert main(["generate-concepts", "--config", cfg]) == 0
    first = (tmp_path / "out" / "concepts" / "red" / "0000.png").read_bytes()
    assert [p.name for p in (tmp_path / "out" / "concepts" / "red").iterdir()] == ["0000.png"]
    assert main(["generate-concepts", "--config", cfg]) == 0
    assert (tmp_path / "out" / "concepts" / "red" / "0000.png").read_bytes() == first


def test_full_pipeline(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "out"
    assert main(["generate-concepts", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0 and len(metrics["trace"]) == 2
    assert main(["dump-activations", "--config", cfg, "--layers", "relu3,dense1", "--gradients"]) == 0
    dump = load_dump(out / "activations" / "relu3.actv")
    assert dump.payload.shape == (40, 32) and sorted(dump.gradients) == [0, 1]
    assert main(["run-tcav", "--config", cfg]) == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 3
    doc = json.loads((out / "results.json").read_text())
    assert doc["complete"] is True
    assert (out / "tcav_late_blight.svg").exists()
    assert len(load_cavs(out / "cavs.cvkc")) == 3 * (2 * 3 + 3)
    capsys.readouterr()
    assert main(["report", str(out / "results.json")]) == 0
    assert "brown" in capsys.readouterr().out


def test_dump_matches_live_forward_pass(tmp_path):
    cfg = _config(tmp_path)
    main(["generate-concepts", "--config", cfg])
    main(["train", "--config", cfg])
    assert main(["dump-activations", "--config", cfg, "--layers", "relu2", "--source", "concept:brown"]) == 0
    from tcavlab.concepts import load_image_directory

    model = load_model(tmp_path / "out" / "model.cvkm")
    images = load_image_directory(tmp_path / "out" / "concepts" / "brown", labeled=False).samples
    live = model.activations(np.stack([im.pixels for im in images]), "relu2").astype(np.float32)
    assert load_dump(tmp_path / "out" / "activations" / "relu2.actv").payload.tobytes() == live.tobytes()


def test_zero_epochs_checkpoint_equals_initialization(tmp_path):
    cfg = _config(tmp_path, train={"epochs": 0}, model={"seed": 5})
    main(["generate-concepts", "--config", cfg])
    assert main(["train", "--config", cfg]) == 0
    init = reference_model(2, (12, 12, 3), seed=5)
    assert (tmp_path / "out" / "model.cvkm").read_bytes() == model_to_bytes(init)


def test_missing_data_dir_exits_without_checkpoint(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg]) == 2
    assert not (tmp_path / "out" / "model.cvkm").exists()
    assert "does not exist" in capsys.readouterr().err


def test_unknown_layers_listed(tmp_path, capsys):
    cfg = _config(tmp_path)
    save_model(tmp_path / "out" / "model.cvkm", reference_model(2, (12, 12, 3)))
    assert main(["dump-activations", "--config", cfg, "--layers", "relu3,pool5,fc9"]) == 1
    err = capsys.readouterr().err
    assert "pool5, fc9" in err and "relu3" in err


def test_usage_errors():
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--config", "/no/such/file.yaml"]) == 1


def test_report_empty_and_malformed(tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"format": "tcavlab-results/1", "complete": True, "results": []}))
    assert main(["report", str(empty)]) == 0
    captured = capsys.readouterr()
    assert "no results" in captured.err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"results": [{"concept_name": "x"}]}))
    assert main(["report", str(bad)]) == 2
    assert "record 0" in capsys.readouterr().err


def test_planted_checkpoint_brown_significant(tmp_path):
    size = 8
    d = size * size * 3
    w = np.zeros((2, d), dtype=np.float32)
    w[1, 0::3], w[1, 2::3] = 1.0 / size**2, -1.0 / size**2
    model = LayeredModel([Flatten("flatten", (size, size, 3)), Dense("logits", (d,), 2, weight=w)], 2)
    sz = [size, size]
    cfg = _config(
        tmp_path,
        dataset={"count_per_class": 30, "size": sz},
        concepts=[
            {"name": "brown", "kind": "color", "count": 100, "seed": 1, "size": sz},
            {"name": "blue", "kind": "color", "count": 100, "seed": 2, "size": sz},
        ],
        negatives=[{"name": "grayscale_leaves", "kind": "grayscale_leaves", "count": 300, "seed": 3, "size": sz}],
        experiment={"layers": ["flatten"], "n_runs": 10, "negatives_per_run": 100, "inputs": "all"},
    )
    main(["generate-concepts", "--config", cfg])
    save_model(tmp_path / "out" / "model.cvkm", model)
    assert main(["run-tcav", "--config", cfg]) == 0
    rows = {r.split(",")[0]: r.split(",") for r in (tmp_path / "out" / "results.csv").read_text().splitlines()[1:]}
    assert rows["brown"][5] == "true" and float(rows["brown"][3]) >= 0.9


def test_run_tcav_rerun_is_byte_identical(tmp_path):
    cfg = _config(tmp_path, experiment={"layers": ["relu3"]})
    main(["generate-concepts", "--config", cfg])
    main(["train", "--config", cfg])
    main(["run-tcav", "--config", cfg])
    first = {p: (tmp_path / "out" / p).read_bytes() for p in ("results.csv", "tcav_late_blight.svg", "results.json")}
    main(["run-tcav", "--config", cfg])
    for p, data in first.items():
        assert (tmp_path / "out" / p).read_bytes() == data


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "tcavlab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "run-tcav" in proc.stdout
