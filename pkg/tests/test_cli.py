import json
import os

import numpy as np
import pytest

from atgame import attack as A
from atgame import config as C
from atgame import diagnostics as G
from atgame import models as M
from atgame import train as TR
from atgame.cli import main


def small_synth_section():
    return {
        "kind": "synthetic",
        "n_train": 96,
        "n_test": 48,
        "holdout": 8,
        "synthetic": {
            "n_classes": 2, "image_shape": [1, 4, 4],
            "robust_count": 2, "robust_strength": 0.25,
            "nonrobust_count": 2, "nonrobust_strength": 0.06,
            "noise_scale": 0.06, "rho": 0.02, "gamma_feat": 0.05,
            "eps_target": 0.1,
        },
    }


def write_config(tmp_path, name="exp.json", **overrides):
    doc = {
        "seed": 3,
        "output_dir": str(tmp_path / "run"),
        "dataset": small_synth_section(),
        "model": {"arch": "mlp", "input_shape": [1, 4, 4], "hidden": [6],
                  "n_classes": 2},
        "train": {"epochs": 2, "batch_size": 32, "milestones": [1, 2],
                  "base_lr": 0.05, "metric_sample": 32, "checkpoint_every": 1},
    }
    doc.update(overrides)
    path = str(tmp_path / name)
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path, doc


# ---------------------------------------------------------------------------
# config resolution


def test_preset_rebat_resolves_published_hyperparameters():
    doc = {
        "seed": 0,
        "output_dir": "x",
        "preset": "rebat",
        "dataset": {"kind": "cifar10", "path": "/nowhere"},
        "train": {"epochs": 200, "milestones": [100, 150]},
    }
    exp = C.resolve_experiment(doc)
    assert exp.train.lr.decay_factor == 1.5
    assert exp.train.boat_lambda == 1.0
    assert exp.train.wa_gamma == 0.999
    assert exp.train.wa_start_epoch == 105  # first milestone + 5


def test_preset_rebat_pp_strengthens_attacker_after_decay():
    doc = {
        "seed": 0,
        "output_dir": "x",
        "preset": "rebat++",
        "dataset": {"kind": "cifar10", "path": "/nowhere"},
        "train": {"epochs": 200, "milestones": [100, 150]},
    }
    exp = C.resolve_experiment(doc)
    assert exp.train.lr.decay_factor == 1.7
    at99 = A.attack_schedule(99, exp.train.attack)
    at101 = A.attack_schedule(101, exp.train.attack)
    assert at99.epsilon == pytest.approx(8 / 255) and at99.steps == 10
    assert at101.epsilon == pytest.approx(10 / 255) and at101.steps == 12


def test_preset_pgd_at_is_unregularized():
    doc = {
        "seed": 0, "output_dir": "x", "preset": "pgd-at",
        "dataset": {"kind": "cifar10", "path": "/nowhere"},
        "train": {"epochs": 200, "milestones": [100, 150]},
    }
    exp = C.resolve_experiment(doc)
    assert exp.train.lr.decay_factor == 10.0
    assert exp.train.boat_lambda == 0.0


def test_unknown_key_is_rejected_with_path():
    doc = {"seed": 0, "output_dir": "x",
           "dataset": {"kind": "synthetic"},
           "train": {"epochs": 1, "learnig_rate": 0.1}}
    with pytest.raises(C.ConfigError, match="train.learnig_rate"):
        C.resolve_experiment(doc)


def test_unknown_preset_rejected():
    doc = {"seed": 0, "output_dir": "x", "preset": "trades",
           "dataset": {"kind": "synthetic"}}
    with pytest.raises(C.ConfigError, match="preset"):
        C.resolve_experiment(doc)


def test_synthetic_dataset_bundle_shapes():
    doc = {"seed": 1, "output_dir": "x", "dataset": small_synth_section()}
    exp = C.resolve_experiment(doc)
    train, val, test = C.build_datasets(exp.dataset, exp.seed)
    assert len(train) == 88 and len(val) == 8 and len(test) == 48
    again, _, _ = C.build_datasets(exp.dataset, exp.seed)
    assert np.array_equal(train.images, again.images)


# ---------------------------------------------------------------------------
# commands end to end


def test_cli_train_and_eval_roundtrip(tmp_path, capsys):
    cfg_path, doc = write_config(tmp_path)
    assert main(["train", cfg_path]) == 0
    run = doc["output_dir"]
    assert os.path.exists(os.path.join(run, "metrics.csv"))
    assert os.path.exists(os.path.join(run, "best.ckpt"))
    assert os.path.exists(os.path.join(run, "final.ckpt"))
    snapshot = json.load(open(os.path.join(run, "config.json")))
    assert "config_hash" in snapshot

    out = str(tmp_path / "eval.json")
    rc = main(["eval", os.path.join(run, "final.ckpt"),
               "--config", cfg_path, "--split", "test",
               "--steps", "3", "--out", out])
    assert rc == 0
    report = json.load(open(out))
    assert 0.0 <= report["robust_acc"] <= report["natural_acc"] <= 1.0
    assert report["config_hash"]


def test_cli_train_rerun_is_byte_identical(tmp_path):
    cfg_path, doc = write_config(tmp_path)
    assert main(["train", cfg_path]) == 0
    first = open(os.path.join(doc["output_dir"], "metrics.csv"), "rb").read()
    assert main(["train", cfg_path]) == 0
    second = open(os.path.join(doc["output_dir"], "metrics.csv"), "rb").read()
    assert first == second


def test_cli_invalid_key_exits_2(tmp_path, capsys):
    cfg_path, _ = write_config(tmp_path, extra_section={"oops": 1})
    # unknown top-level key
    assert main(["train", cfg_path]) == 2
    assert "extra_section" in capsys.readouterr().err


def test_cli_missing_dataset_path_exits_2(tmp_path, capsys):
    cfg_path, _ = write_config(tmp_path,
                               dataset={"kind": "cifar10"})
    assert main(["train", cfg_path]) == 2
    err = capsys.readouterr().err
    assert "dataset.path" in err


def test_cli_runtime_failure_exits_3(tmp_path, capsys):
    cfg_path, doc = write_config(tmp_path,
                                 dataset={**small_synth_section(), "path": None})
    # missing checkpoint file -> runtime abort
    rc = main(["eval", str(tmp_path / "missing.ckpt"), "--config", cfg_path,
               "--out", str(tmp_path / "r.json")])
    assert rc == 3


def test_cli_diagnose_confusion_and_symmetry(tmp_path):
    cfg_path, doc = write_config(tmp_path)
    assert main(["train", cfg_path]) == 0
    ckpt = os.path.join(doc["output_dir"], "final.ckpt")
    out = str(tmp_path / "diag")
    rc = main(["diagnose", "confusion", ckpt, "--config", cfg_path,
               "--split", "test", "--steps", "2", "--out", out])
    assert rc == 0
    payload = json.load(open(os.path.join(out, "confusion.json")))
    mat = np.array(payload["matrix"])
    assert np.abs(mat.sum(axis=1) - 1.0).max() < 1e-9
    assert payload["config_hash"]
    grid = open(os.path.join(out, "confusion.csv")).read().strip().splitlines()
    assert len(grid) == 2  # C=2 rows

    rc = main(["diagnose", "symmetry", os.path.join(out, "confusion.json"),
               "--out", out])
    assert rc == 0
    sym = json.load(open(os.path.join(out, "symmetry.json")))
    want = np.linalg.svd(mat - mat.T, compute_uv=False)[0]
    assert sym["symmetry_normalized"] == pytest.approx(want, abs=1e-6)


def test_cli_diagnose_landscape(tmp_path):
    cfg_path, doc = write_config(tmp_path)
    assert main(["train", cfg_path]) == 0
    ckpt = os.path.join(doc["output_dir"], "final.ckpt")
    out = str(tmp_path / "land")
    rc = main(["diagnose", "landscape", ckpt, "--config", cfg_path,
               "--split", "test", "--limit", "16", "--steps", "2",
               "--n-points", "5", "--radius", "0.5", "--out", out])
    assert rc == 0
    rows = [ln for ln in open(os.path.join(out, "landscape.csv"))
            if not ln.startswith("#")]
    assert rows[0].strip() == "t,loss"
    assert len(rows) == 6


def test_cli_sweep_decay_axis(tmp_path):
    cfg_path, doc = write_config(
        tmp_path,
        sweep={"axis": "decay_factor", "values": [1, 10]},
    )
    assert main(["sweep", cfg_path]) == 0
    summary_path = os.path.join(doc["output_dir"], "summary.csv")
    lines = [ln.strip() for ln in open(summary_path) if not ln.startswith("#")]
    assert lines[0].split(",")[0] == "axis"
    assert len(lines) == 3

    # summary rows must equal the per-run metrics exactly
    for line in lines[1:]:
        cells = dict(zip(lines[0].split(","), line.split(",")))
        run_dir = os.path.join(doc["output_dir"],
                               f"decay_factor_{float(cells['value']):g}")
        rows = G.load_metrics(os.path.join(run_dir, "metrics.csv"))
        rob = [r["test_rob_acc"] for r in rows]
        assert float(cells["best_test_rob_acc"]) == pytest.approx(max(rob), abs=1e-6)
        assert float(cells["final_test_rob_acc"]) == pytest.approx(rob[-1], abs=1e-6)


def test_cli_sweep_empty_axis_exits_2(tmp_path, capsys):
    cfg_path, _ = write_config(tmp_path, sweep={"axis": "decay_factor",
                                                "values": []})
    assert main(["sweep", cfg_path]) == 2


def test_cli_nonrobust_dataset(tmp_path):
    cfg_path, doc = write_config(tmp_path)
    assert main(["train", cfg_path]) == 0
    ckpt = os.path.join(doc["output_dir"], "final.ckpt")
    out = str(tmp_path / "nr")
    rc = main(["diagnose", "nonrobust-dataset", ckpt, "--config", cfg_path,
               "--split", "train", "--eps", "0.15", "--steps", "5",
               "--out", out])
    assert rc == 0
    payload = json.load(open(os.path.join(out, "nonrobust.json")))
    assert 0.0 <= payload["success_rate"] <= 1.0
