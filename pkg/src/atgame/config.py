"""Experiment configs: JSON documents validated against a strict schema,
preset resolution, and deterministic dataset construction.

Presets bundle the published hyperparameters (decay factor, regularization
weight, averaging settings, post-decay attacker) relative to whatever
milestones and budget the config supplies; any field can be overridden.
Unknown keys are rejected with their full key path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import attack as A
from . import data as D
from . import models as M
from . import train as TR


class ConfigError(ValueError):
    """Invalid experiment config; message carries the offending key path."""


_TRAIN_KEYS = {
    "epochs", "batch_size", "momentum", "weight_decay",
    "lr_kind", "base_lr", "milestones", "decay_factor", "stage_targets",
    "wa_start_epoch", "wa_gamma", "boat_lambda", "boat_lambda2",
    "kd_lambda", "kd_teacher", "augment", "checkpoint_every",
    "val_every_before_wa", "metric_sample",
}

_SCHEMA = {
    "seed": None,
    "output_dir": None,
    "preset": None,
    "dataset": {
        "kind": None, "path": None, "n_train": None, "n_test": None,
        "subset": None, "holdout": None, "synthetic": "leaf",
    },
    "model": {"arch": None, "input_shape": None, "hidden": None, "n_classes": None},
    "train": {k: None for k in _TRAIN_KEYS},
    "attack": "leaf",
    "eval_attack": "leaf",
    "sweep": {"axis": None, "values": None},
}

PRESETS = {
    # vanilla adversarial training; the averaged model is still tracked so
    # its columns double as the plain weight-averaging baseline
    "pgd-at": {"decay_factor": 10.0, "boat_lambda": 0.0},
    "rebat": {"decay_factor": 1.5, "boat_lambda": 1.0},
    "rebat++": {"decay_factor": 1.7, "boat_lambda": 1.0, "stronger_attack": True},
    "rebat-kd": {"decay_factor": 1.5, "boat_lambda": 1.0, "kd_lambda": 0.4},
}


def _check_keys(doc, schema, path=""):
    if schema == "leaf" or not isinstance(doc, dict):
        return
    for key, sub in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown key: {here}")
        if isinstance(sub, dict):
            _check_keys(sub, schema[key], here)


@dataclass
class ResolvedExperiment:
    seed: int
    output_dir: str
    dataset: dict
    model_spec: M.ModelSpec
    train: TR.TrainConfig
    sweep: dict | None
    resolved: dict
    config_hash: str


def load_experiment(path: str) -> ResolvedExperiment:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"not valid JSON: {exc}") from exc
    return resolve_experiment(doc)


def resolve_experiment(doc: dict) -> ResolvedExperiment:
    _check_keys(doc, _SCHEMA)
    seed = int(doc.get("seed", 0))
    output_dir = doc.get("output_dir")
    if not output_dir:
        raise ConfigError("missing key: output_dir")
    dcfg = doc.get("dataset")
    if not dcfg or "kind" not in dcfg:
        raise ConfigError("missing key: dataset.kind")
    if dcfg["kind"] not in ("synthetic", "cifar10", "mnist"):
        raise ConfigError(f"dataset.kind: unknown kind {dcfg['kind']!r}")

    base_eps, input_shape, n_classes = _dataset_geometry(dcfg)

    mcfg = doc.get("model")
    if mcfg:
        try:
            model_spec = M.ModelSpec.from_dict(mcfg)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc
    else:
        model_spec = M.default_small_cnn(input_shape, n_classes)

    train = dict(doc.get("train", {}))
    preset_name = doc.get("preset")
    preset = {}
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset_name!r}")
        preset = dict(PRESETS[preset_name])
    stronger = preset.pop("stronger_attack", False)

    epochs = int(train.get("epochs", 60))
    milestones = tuple(train.get("milestones", (max(epochs // 2, 1),
                                                max(3 * epochs // 4, 2))))
    pick = lambda key, fallback: train.get(key, preset.get(key, fallback))

    lr = TR.LRSchedule(
        kind=train.get("lr_kind", "piecewise"),
        base_lr=float(train.get("base_lr", 0.1)),
        milestones=milestones,
        decay_factor=float(pick("decay_factor", 10.0)),
        stage_targets=tuple(train.get("stage_targets", ())),
        total_epochs=epochs,
    )

    alpha = base_eps / 4
    if "attack" in doc:
        attack = _parse_attack_schedule(doc["attack"], epochs)
    else:
        base_attack = A.AttackConfig(base_eps, alpha, 10, random_start=True)
        if stronger and milestones:
            attack = A.stronger_after_decay(base_attack, milestones[0],
                                            base_eps * 1.25, total_epochs=epochs)
        else:
            attack = A.constant_schedule(base_attack, total_epochs=epochs)

    if "eval_attack" in doc:
        try:
            eval_attack = A.AttackConfig.from_dict(doc["eval_attack"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"eval_attack: {exc}") from exc
    else:
        eval_attack = A.eval_attack_default(base_eps, alpha)

    wa_default = (milestones[0] + 5) if milestones else 0
    try:
        train_cfg = TR.TrainConfig(
            epochs=epochs,
            batch_size=int(train.get("batch_size", 128)),
            momentum=float(train.get("momentum", 0.9)),
            weight_decay=float(train.get("weight_decay", 5e-4)),
            lr=lr,
            attack=attack,
            eval_attack=eval_attack,
            wa_start_epoch=int(train.get("wa_start_epoch",
                                         min(wa_default, epochs))),
            wa_gamma=float(pick("wa_gamma", 0.999)),
            boat_lambda=float(pick("boat_lambda", 0.0)),
            boat_lambda2=train.get("boat_lambda2"),
            kd_lambda=float(pick("kd_lambda", 0.0)),
            kd_teacher=train.get("kd_teacher"),
            seed=seed,
            augment=bool(train.get("augment", dcfg["kind"] != "synthetic")),
            checkpoint_every=int(train.get("checkpoint_every", 1)),
            val_every_before_wa=int(train.get("val_every_before_wa", 5)),
            metric_sample=int(train.get("metric_sample", 512)),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc

    resolved = {
        "seed": seed,
        "output_dir": output_dir,
        "preset": preset_name,
        "dataset": dcfg,
        "model": model_spec.to_dict(),
        "train": train_cfg.to_dict(),
        "sweep": doc.get("sweep"),
    }
    return ResolvedExperiment(
        seed=seed,
        output_dir=output_dir,
        dataset=dcfg,
        model_spec=model_spec,
        train=train_cfg,
        sweep=doc.get("sweep"),
        resolved=resolved,
        config_hash=TR.config_hash(resolved),
    )


def _synthetic_spec(dcfg: dict) -> D.SyntheticSpec:
    if "synthetic" not in dcfg:
        return D.SyntheticSpec()
    try:
        return D.SyntheticSpec.from_dict(dcfg["synthetic"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset.synthetic: {exc}") from exc


def _dataset_geometry(dcfg: dict) -> tuple[float, tuple, int]:
    kind = dcfg["kind"]
    if kind == "synthetic":
        spec = _synthetic_spec(dcfg)
        return spec.eps_target, spec.image_shape, spec.n_classes
    if kind == "mnist":
        return 0.1, (1, 28, 28), 10
    return 8 / 255, (3, 32, 32), 10


def _parse_attack_schedule(section, epochs) -> A.AttackSchedule:
    try:
        if "entries" in section:
            sched = A.AttackSchedule.from_dict(section)
            if sched.total_epochs is None:
                sched = A.AttackSchedule(sched.entries, epochs)
            return sched
        return A.constant_schedule(A.AttackConfig.from_dict(section), epochs)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"attack: {exc}") from exc


def build_datasets(dcfg: dict, seed: int) -> tuple[D.Dataset, D.Dataset, D.Dataset]:
    """(train, validation, test) per the dataset section, deterministically."""
    kind = dcfg["kind"]
    if kind == "synthetic":
        spec = _synthetic_spec(dcfg)
        train, test, _ = D.generate_synthetic(
            spec, int(dcfg.get("n_train", 4096)), int(dcfg.get("n_test", 1024)), seed
        )
        holdout = int(dcfg.get("holdout", max(len(train) // 16, 2 * spec.n_classes)))
    else:
        loader = D.load_cifar10 if kind == "cifar10" else D.load_mnist
        if "path" not in dcfg:
            raise ConfigError(f"dataset.path: required for {kind}")
        train, test = loader(dcfg["path"])
        subset = dcfg.get("subset")
        if subset:
            # stratified subsample via the same allocation as the holdout split
            _, train = D.split_holdout(train, int(subset), seed)
        holdout = int(dcfg.get("holdout", 1000))
    train, val = D.split_holdout(train, holdout, seed + 1)
    return train, val, test
