"""Experiment runner: binds config files to training runs, evaluation,
diagnostics, and sweeps.

Exit codes: 0 success, 2 config/validation error (the offending key path is
printed), 3 runtime abort (partial artifacts are left in place).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import attack as A
from . import data as D
from . import diagnostics as G
from . import models as M
from . import train as TR
from .config import ConfigError, build_datasets, load_experiment, resolve_experiment


def _write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(path)


def _attack_from_args(args, base_eps: float) -> A.AttackConfig:
    eps = args.eps if args.eps is not None else base_eps
    alpha = args.alpha if args.alpha is not None else eps / 4
    steps = args.steps if args.steps is not None else 20
    return A.AttackConfig(eps, alpha, steps, random_start=True, use_best=True)


def _dataset_for(args) -> tuple[D.Dataset, dict]:
    """Materialize the split named on the command line."""
    if args.dataset_file:
        return D.load_dataset(args.dataset_file), {"dataset_file": args.dataset_file}
    if not args.config:
        raise ConfigError("need --config or --dataset-file")
    exp = load_experiment(args.config)
    train, val, test = build_datasets(exp.dataset, exp.seed)
    split = {"train": train, "val": val, "test": test}[args.split]
    if args.limit and args.limit < len(split):
        split = split.subset(np.arange(args.limit))
    return split, {"config": args.config, "split": args.split}


def _base_eps_for(args) -> float:
    if args.dataset_file or not args.config:
        return 8 / 255
    from .config import _dataset_geometry

    exp = load_experiment(args.config)
    return _dataset_geometry(exp.dataset)[0]


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    exp = load_experiment(args.config)
    train, val, test = build_datasets(exp.dataset, exp.seed)
    out = TR.train_adversarial(exp.train, exp.model_spec, train, val, test,
                               exp.output_dir)
    print(out)
    return 0


def cmd_eval(args) -> int:
    ds, echo = _dataset_for(args)
    atk = _attack_from_args(args, _base_eps_for(args))
    nat, rob = G.evaluate_robust(args.ckpt, ds, atk, seed=args.seed)
    report = {
        "ckpt": args.ckpt,
        "inputs": echo,
        "attack": atk.to_dict(),
        "n": len(ds),
        "natural_acc": nat,
        "robust_acc": rob,
        "config_hash": TR.config_hash({"ckpt": args.ckpt, "attack": atk.to_dict(),
                                       "inputs": echo, "seed": args.seed}),
    }
    _write_json(args.out, report)
    return 0


def _confusion_csv(path: str, cm: G.ConfusionMatrix) -> None:
    with open(path, "w") as fh:
        for row in cm.matrix:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


def cmd_diag_confusion(args) -> int:
    ds, echo = _dataset_for(args)
    atk = _attack_from_args(args, _base_eps_for(args))
    cm = G.confusion(args.ckpt, ds, atk, seed=args.seed,
                     meta={"ckpt": args.ckpt, **echo})
    payload = cm.to_json_dict()
    payload["config_hash"] = TR.config_hash(payload["meta"])
    _write_json(os.path.join(args.out, "confusion.json"), payload)
    _confusion_csv(os.path.join(args.out, "confusion.csv"), cm)
    return 0


def _load_confusion(path: str) -> G.ConfusionMatrix:
    with open(path) as fh:
        doc = json.load(fh)
    return G.ConfusionMatrix(np.array(doc["matrix"]), np.array(doc["counts"]),
                             doc.get("meta", {}))


def cmd_diag_symmetry(args) -> int:
    cm = _load_confusion(args.confusion)
    payload = {
        "inputs": {"confusion": args.confusion},
        "symmetry_normalized": G.symmetry_metric(cm.matrix),
        "symmetry_counts": G.symmetry_metric(cm.counts),
        "n": int(cm.counts.sum()),
    }
    payload["config_hash"] = TR.config_hash(payload["inputs"])
    _write_json(os.path.join(args.out, "symmetry.json"), payload)
    return 0


def cmd_diag_correlation(args) -> int:
    mats = {name: _load_confusion(getattr(args, name)) for name in
            ("train_before", "test_before", "test_after")}
    rho = G.bilateral_correlation(mats["train_before"].matrix,
                                  mats["test_before"].matrix,
                                  mats["test_after"].matrix)
    payload = {
        "inputs": {k: getattr(args, k) for k in mats},
        "rho": rho,
        "defined": rho is not None,
    }
    payload["config_hash"] = TR.config_hash(payload["inputs"])
    _write_json(os.path.join(args.out, "correlation.json"), payload)
    return 0


def cmd_diag_probe(args, kind: str) -> int:
    ds, echo = _dataset_for(args)
    atk = _attack_from_args(args, _base_eps_for(args))
    if kind == "memorization":
        res = G.memorization_probe(args.early, args.late, ds, atk,
                                   seed=args.seed, min_count=args.min_count)
    else:
        res = G.target_class_probe(args.reference, args.late, ds, atk,
                                   seed=args.seed, min_count=args.min_count)
    payload = res.to_json_dict()
    payload["inputs"] = echo
    payload["config_hash"] = TR.config_hash(payload)
    _write_json(os.path.join(args.out, f"probe_{kind}.json"), payload)
    return 0


def cmd_diag_landscape(args) -> int:
    ds, echo = _dataset_for(args)
    atk = _attack_from_args(args, _base_eps_for(args))
    curve = G.loss_landscape_1d(args.ckpt, ds, atk, n_points=args.n_points,
                                radius=args.radius, seed=args.seed)
    payload = {
        "ckpt": args.ckpt,
        "inputs": echo,
        "attack": atk.to_dict(),
        "n_points": args.n_points,
        "radius": args.radius,
        "seed": args.seed,
        "curve": curve,
    }
    payload["config_hash"] = TR.config_hash({k: v for k, v in payload.items()
                                             if k != "curve"})
    _write_json(os.path.join(args.out, "landscape.json"), payload)
    with open(os.path.join(args.out, "landscape.csv"), "w") as fh:
        fh.write(f"# config_hash={payload['config_hash']}\n")
        fh.write("t,loss\n")
        for t, v in curve:
            fh.write(f"{t:.6f},{v:.6f}\n")
    return 0


def cmd_diag_nonrobust(args) -> int:
    ds, echo = _dataset_for(args)
    atk = _attack_from_args(args, _base_eps_for(args))
    out_ds, rate = G.build_nonrobust_dataset(
        args.ckpt, ds, atk, seed=args.seed,
        subsample_to=args.subsample, min_success_rate=args.min_success_rate,
    )
    os.makedirs(args.out, exist_ok=True)
    ds_path = os.path.join(args.out, "nonrobust_dataset.bin")
    if len(out_ds) > 0:
        D.save_dataset(ds_path, out_ds)
    payload = {
        "ckpt": args.ckpt,
        "inputs": echo,
        "attack": atk.to_dict(),
        "success_rate": rate,
        "n_kept": len(out_ds),
        "dataset_file": ds_path if len(out_ds) > 0 else None,
    }
    payload["config_hash"] = TR.config_hash(payload)
    _write_json(os.path.join(args.out, "nonrobust.json"), payload)
    return 0


def cmd_diag_inject(args) -> int:
    exp = load_experiment(args.config)
    train, _, test = build_datasets(exp.dataset, exp.seed)
    rows = G.inject_experiment(args.ckpt, train, test,
                               [float(e) for e in args.eps_list],
                               args.epochs, args.out, cfg=exp.train,
                               seed=args.seed)
    payload = {
        "ckpt": args.ckpt,
        "epochs": args.epochs,
        "rows": rows,
        "config_hash": exp.config_hash,
    }
    _write_json(os.path.join(args.out, "inject.json"), payload)
    return 0


SWEEP_COLUMNS = (
    "axis", "value", "best_test_rob_acc", "final_test_rob_acc", "robust_gap",
    "best_wa_test_rob_acc", "final_wa_test_rob_acc", "wa_robust_gap",
    "final_test_nat_acc",
)


def cmd_sweep(args) -> int:
    exp = load_experiment(args.config)
    if not exp.sweep or not exp.sweep.get("values"):
        raise ConfigError("sweep.values: empty axis")
    axis = exp.sweep.get("axis")
    if axis not in ("decay_factor", "epsilon"):
        raise ConfigError(f"sweep.axis: unknown axis {axis!r}")

    summary_rows = []
    for value in exp.sweep["values"]:
        cfg = _sweep_point(exp.train, axis, float(value))
        point_dir = os.path.join(exp.output_dir, f"{axis}_{value:g}")
        train, val, test = build_datasets(exp.dataset, exp.seed)
        TR.train_adversarial(cfg, exp.model_spec, train, val, test, point_dir)
        rows = G.load_metrics(os.path.join(point_dir, "metrics.csv"))
        rob = [r["test_rob_acc"] for r in rows]
        wa = [r["wa_test_rob_acc"] for r in rows]
        summary_rows.append({
            "axis": axis,
            "value": value,
            "best_test_rob_acc": max(rob),
            "final_test_rob_acc": rob[-1],
            "robust_gap": max(rob) - rob[-1],
            "best_wa_test_rob_acc": max(wa),
            "final_wa_test_rob_acc": wa[-1],
            "wa_robust_gap": max(wa) - wa[-1],
            "final_test_nat_acc": rows[-1]["test_nat_acc"],
        })

    os.makedirs(exp.output_dir, exist_ok=True)
    summary = os.path.join(exp.output_dir, "summary.csv")
    with open(summary, "w") as fh:
        fh.write(f"# config_hash={exp.config_hash}\n")
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in summary_rows:
            cells = [row["axis"], f"{row['value']:g}"]
            cells += [f"{row[c]:.6f}" for c in SWEEP_COLUMNS[2:]]
            fh.write(",".join(cells) + "\n")
    print(summary)
    return 0


def _sweep_point(cfg: TR.TrainConfig, axis: str, value: float) -> TR.TrainConfig:
    if axis == "decay_factor":
        return replace(cfg, lr=replace(cfg.lr, decay_factor=value))
    base = cfg.attack.entries[0][1]
    steps = A.steps_for_budget(value, base.epsilon) if value > 0 else 0
    atk = A.AttackConfig(value, base.alpha, steps, random_start=base.random_start,
                         step_rule=base.step_rule)
    return replace(cfg, attack=A.constant_schedule(atk, cfg.epochs))


# ---------------------------------------------------------------------------
# argument wiring


def _add_dataset_args(p, split_default="test"):
    p.add_argument("--config", help="experiment config supplying the dataset")
    p.add_argument("--dataset-file", help="serialized dataset container")
    p.add_argument("--split", default=split_default,
                   choices=("train", "val", "test"))
    p.add_argument("--limit", type=int, default=0,
                   help="cap the number of examples")


def _add_attack_args(p):
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atgame",
        description="Adversarial training as a minimax game: runs, sweeps, "
                    "and robust-overfitting diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training config")
    p.add_argument("config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="natural + robust accuracy of a checkpoint")
    p.add_argument("ckpt")
    _add_dataset_args(p)
    _add_attack_args(p)
    p.add_argument("--out", default="eval.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="run a config across an axis of values")
    p.add_argument("config")
    p.set_defaults(fn=cmd_sweep)

    d = sub.add_parser("diagnose", help="measurement procedures")
    dsub = d.add_subparsers(dest="diagnostic", required=True)

    p = dsub.add_parser("confusion")
    p.add_argument("ckpt")
    _add_dataset_args(p)
    _add_attack_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diag_confusion)

    p = dsub.add_parser("symmetry")
    p.add_argument("confusion", help="confusion.json artifact")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diag_symmetry)

    p = dsub.add_parser("correlation")
    p.add_argument("--train-before", required=True)
    p.add_argument("--test-before", required=True)
    p.add_argument("--test-after", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diag_correlation)

    p = dsub.add_parser("probe-memorization")
    p.add_argument("--early", required=True)
    p.add_argument("--late", required=True)
    _add_dataset_args(p, split_default="train")
    _add_attack_args(p)
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=lambda a: cmd_diag_probe(a, "memorization"))

    p = dsub.add_parser("probe-target")
    p.add_argument("--reference", required=True)
    p.add_argument("--late", required=True)
    _add_dataset_args(p)
    _add_attack_args(p)
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=lambda a: cmd_diag_probe(a, "target"))

    p = dsub.add_parser("landscape")
    p.add_argument("ckpt")
    _add_dataset_args(p)
    _add_attack_args(p)
    p.add_argument("--n-points", type=int, default=41)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diag_landscape)

    p = dsub.add_parser("nonrobust-dataset")
    p.add_argument("ckpt")
    _add_dataset_args(p, split_default="train")
    _add_attack_args(p)
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--min-success-rate", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diag_nonrobust)

    p = dsub.add_parser("inject")
    p.add_argument("ckpt")
    p.add_argument("--config", required=True)
    p.add_argument("--eps-list", nargs="+", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diag_inject)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TR.TrainingAborted, FloatingPointError, FileNotFoundError,
            ValueError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
