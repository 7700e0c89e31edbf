"""Measurement procedures around trained checkpoints: robustness
evaluation, adversarial confusion matrices and their symmetry, bilateral
class correlation, memorization and target-class probes, non-robust
dataset construction, feature-injection runs, and 1-D loss landscapes.

Everything here is read-only over checkpoints and datasets, deterministic
given the attack seed, and returns plain dataclasses/dicts that serialize
to the JSON artifacts the CLI writes.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import attack as A
from . import data as D
from . import models as M
from . import tensor as T
from .tensor import Tensor
from .train import accuracy, robust_accuracy


def _as_model(ckpt) -> M.Model:
    if isinstance(ckpt, M.Model):
        return ckpt
    meta, arrays = M.read_container(ckpt)
    model = M.init_model(M.ModelSpec.from_dict(meta["spec"]), seed=0)
    model.set_params(arrays["params"].astype(np.float32, copy=False))
    return model


def _adversarial_images(model, ds: D.Dataset, atk: A.AttackConfig, seed: int,
                        batch_size: int = 512) -> np.ndarray:
    out = np.empty_like(ds.images)
    for lo in range(0, len(ds), batch_size):
        xb = Tensor(ds.images[lo : lo + batch_size], dtype=model.dtype)
        out[lo : lo + batch_size] = A.pgd_attack(
            model, xb, ds.labels[lo : lo + batch_size], atk, seed=seed + lo
        ).data
    return out


# ---------------------------------------------------------------------------
# robustness and confusion


def evaluate_robust(model, dataset: D.Dataset, atk: A.AttackConfig,
                    seed: int = 0) -> tuple[float, float]:
    """(natural accuracy, per-example adversarial accuracy)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = _as_model(model)
    nat = accuracy(model, dataset.images, dataset.labels)
    rob = robust_accuracy(model, dataset.images, dataset.labels, atk, seed)
    return nat, rob


@dataclass
class ConfusionMatrix:
    """Adversarial misclassification rates: entry (i,j) is the fraction of
    class-i examples whose adversarial version is predicted as j."""

    matrix: np.ndarray  # row-normalized [C,C]
    counts: np.ndarray  # raw counts [C,C]
    meta: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "counts": self.counts.tolist(),
            "meta": self.meta,
        }


def confusion(model, dataset: D.Dataset, atk: A.AttackConfig, seed: int = 0,
              meta: dict | None = None) -> ConfusionMatrix:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = _as_model(model)
    c = dataset.n_classes
    class_sizes = np.bincount(dataset.labels, minlength=c)
    if (class_sizes == 0).any():
        raise ValueError(f"empty class(es): {np.flatnonzero(class_sizes == 0).tolist()}")
    adv = _adversarial_images(model, dataset, atk, seed)
    pred = M.predict(model, adv)
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (dataset.labels, pred), 1)
    matrix = counts / class_sizes[:, None]
    info = {"attack": atk.to_dict(), "seed": seed, "n": len(dataset)}
    info.update(meta or {})
    return ConfusionMatrix(matrix, counts, info)


def symmetry_metric(a: np.ndarray, rel_tol: float = 1e-8,
                    max_iter: int = 20000) -> float:
    """Spectral norm of A - A^T by power iteration on (A-A^T)^T (A-A^T).

    Works on either row-normalized or raw-count matrices; counts match the
    magnitude scale of the published figures.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"need a square matrix, got shape {a.shape}")
    m = a - a.T
    scale = np.abs(m).max()
    if scale == 0.0:
        return 0.0
    n = a.shape[0]
    # fixed, generic start vector: no seed needed, never orthogonal by luck
    v = 1.0 + np.arange(n) / n
    v /= np.linalg.norm(v)
    sigma_prev = 0.0
    for _ in range(max_iter):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector sits in the null space; nudge it off
            v = np.roll(v, 1) + 1e-3
            v /= np.linalg.norm(v)
            continue
        v = w / norm
        sigma = float(np.linalg.norm(m @ v))  # ||Mv|| with ||v|| = 1
        if sigma_prev > 0 and abs(sigma - sigma_prev) <= rel_tol * sigma:
            return sigma
        sigma_prev = sigma
    return sigma_prev


def pearson(xs, ys) -> float:
    """Sample Pearson correlation of two equal-length sequences."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValueError("need two equal-length 1-d samples with n >= 2")
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0.0:
        raise ValueError("degenerate variance")
    return float((xc * yc).sum() / denom)


def bilateral_correlation(p_train_before: np.ndarray, p_test_before: np.ndarray,
                          p_test_after: np.ndarray) -> float | None:
    """Pearson rho between pre-decay train i->j misclassification and the
    post-decay increase in test j->i misclassification, off-diagonal pairs.

    Returns None when either coordinate has no variance.
    """
    pt = np.asarray(p_train_before, dtype=np.float64)
    delta = np.asarray(p_test_after, dtype=np.float64) - np.asarray(
        p_test_before, dtype=np.float64
    )
    if pt.shape != delta.shape or pt.ndim != 2 or pt.shape[0] != pt.shape[1]:
        raise ValueError("confusion matrices must share a square shape")
    c = pt.shape[0]
    off = ~np.eye(c, dtype=bool)
    xs = pt[off]
    ys = delta.T[off]  # delta[j,i] aligned with pt[i,j]
    try:
        return pearson(xs, ys)
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeResult:
    source_ckpt: str
    target_ckpt: str
    attack: dict
    sample_count: int
    accuracy: float
    label_mode: str  # "true-label" | "misclassified-label"

    def to_json_dict(self) -> dict:
        return {
            "source_ckpt": self.source_ckpt,
            "target_ckpt": self.target_ckpt,
            "attack": self.attack,
            "sample_count": self.sample_count,
            "accuracy": self.accuracy,
            "label_mode": self.label_mode,
        }


def _misclassified_adversarials(model, ds, atk, seed):
    adv = _adversarial_images(model, ds, atk, seed)
    pred = M.predict(model, adv)
    hit = pred != ds.labels
    return adv[hit], ds.labels[hit], pred[hit]


def memorization_probe(ckpt_early, ckpt_late, dataset: D.Dataset,
                       atk: A.AttackConfig, seed: int = 0,
                       min_count: int = 10) -> ProbeResult:
    """Craft adversarial examples on the early checkpoint, keep the
    misclassified ones, and score them on the late checkpoint against their
    true labels. High accuracy means the late trainer memorized the
    features the attacker planted."""
    early = _as_model(ckpt_early)
    late = _as_model(ckpt_late)
    adv, true_y, _ = _misclassified_adversarials(early, dataset, atk, seed)
    if len(true_y) < min_count:
        raise ValueError(f"only {len(true_y)} misclassified examples, need {min_count}")
    acc = float((M.predict(late, adv) == true_y).mean())
    return ProbeResult(_name(ckpt_early), _name(ckpt_late), atk.to_dict(),
                       len(true_y), acc, "true-label")


def target_class_probe(ckpt_reference, ckpt_late, dataset: D.Dataset,
                       atk: A.AttackConfig, seed: int = 0,
                       min_count: int = 10) -> ProbeResult:
    """Craft adversarial examples on the late checkpoint, keep the
    misclassified ones, and score them on the reference checkpoint against
    their misclassified labels. The score measures how much target-class
    content the attack had to inject."""
    reference = _as_model(ckpt_reference)
    late = _as_model(ckpt_late)
    adv, _, wrong_y = _misclassified_adversarials(late, dataset, atk, seed)
    if len(wrong_y) < min_count:
        raise ValueError(f"only {len(wrong_y)} misclassified examples, need {min_count}")
    acc = float((M.predict(reference, adv) == wrong_y).mean())
    return ProbeResult(_name(ckpt_late), _name(ckpt_reference), atk.to_dict(),
                       len(wrong_y), acc, "misclassified-label")


def _name(ckpt) -> str:
    return ckpt if isinstance(ckpt, str) else f"<model {id(ckpt):#x}>"


# ---------------------------------------------------------------------------
# non-robust dataset and injection runs


def build_nonrobust_dataset(ckpt, dataset: D.Dataset, atk: A.AttackConfig,
                            seed: int = 0, subsample_to: int | None = None,
                            min_success_rate: float = 0.0
                            ) -> tuple[D.Dataset, float]:
    """Relabel successfully attacked examples with their wrong predictions.

    Returns the (x_hat, y_hat) dataset plus the attack success rate;
    supports subsampling so datasets built from different checkpoints can
    be size-matched.
    """
    model = _as_model(ckpt)
    adv, _, wrong_y = _misclassified_adversarials(model, dataset, atk, seed)
    rate = len(wrong_y) / len(dataset)
    if rate < min_success_rate:
        raise ValueError(f"attack success rate {rate:.4f} below floor "
                         f"{min_success_rate:.4f}")
    if subsample_to is not None and subsample_to < len(wrong_y):
        pick = np.random.default_rng(seed).permutation(len(wrong_y))[:subsample_to]
        pick = np.sort(pick)
        adv, wrong_y = adv[pick], wrong_y[pick]
    out = D.Dataset(adv, wrong_y, dataset.n_classes,
                    provenance=dataset.provenance + "+nonrobust-relabel")
    return out, rate


def inject_experiment(base_ckpt: str, train_set: D.Dataset, test_set: D.Dataset,
                      eps_list, epochs: int, out_dir: str,
                      cfg=None, seed: int = 0, inject_steps: int = 10) -> list[dict]:
    """Short continued runs on feature-injected data vs a noise control.

    For each epsilon: plant loss-minimizing features of that strength into
    the training images (labels unchanged), build the matched uniform-noise
    control, continue adversarial training from the checkpoint on both, and
    record final test robustness. Returns one row per epsilon.
    """
    from .train import TrainConfig, train_adversarial  # local to avoid a cycle

    meta, _ = M.read_container(base_ckpt)
    base_model = _as_model(base_ckpt)
    if cfg is None:
        cfg = TrainConfig.from_dict(meta["schedule_state"]["config"])
    cfg = _replace_epochs(cfg, epochs)

    rows = []
    for eps in eps_list:
        arms = {}
        for arm in ("injected", "control"):
            if eps == 0:
                images = train_set.images
            elif arm == "injected":
                inj = A.AttackConfig(eps, max(eps / 4, 1e-4), inject_steps,
                                     direction="minimize")
                images = _inject_images(base_model, train_set, inj, seed)
            else:
                images = A.uniform_noise_control(
                    Tensor(train_set.images), eps, seed=seed + 1
                ).data
            ds = D.Dataset(images, train_set.labels, train_set.n_classes,
                           provenance=f"{train_set.provenance}+{arm}@{eps:.4f}")
            run_dir = os.path.join(out_dir, f"eps_{eps:.4f}_{arm}")
            train_adversarial(cfg, base_model.spec, ds, None, test_set, run_dir,
                              init_from=base_ckpt)
            hist = load_metrics(os.path.join(run_dir, "metrics.csv"))
            arms[arm] = hist[-1]
        rows.append({
            "eps": float(eps),
            "injected_test_rob_acc": arms["injected"]["test_rob_acc"],
            "control_test_rob_acc": arms["control"]["test_rob_acc"],
            "injected_test_nat_acc": arms["injected"]["test_nat_acc"],
            "control_test_nat_acc": arms["control"]["test_nat_acc"],
        })
    return rows


def _inject_images(model, ds, inj_cfg, seed, batch_size=512):
    out = np.empty_like(ds.images)
    for lo in range(0, len(ds), batch_size):
        xb = Tensor(ds.images[lo : lo + batch_size], dtype=model.dtype)
        out[lo : lo + batch_size] = A.feature_inject(
            model, xb, ds.labels[lo : lo + batch_size], inj_cfg, seed=seed + lo
        ).data
    return out


def _replace_epochs(cfg, epochs):
    from dataclasses import replace

    return replace(cfg, epochs=epochs,
                   wa_start_epoch=min(cfg.wa_start_epoch, epochs))


# ---------------------------------------------------------------------------
# loss landscapes


def landscape_direction(pv: M.ParamVector, seed: int) -> M.ParamVector:
    """Random direction rescaled per layer to that layer's parameter norm."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(len(pv)).astype(pv.values.dtype)
    for name, offset, shape in pv.layout:
        n = int(np.prod(shape))
        seg = direction[offset : offset + n]
        seg_norm = np.linalg.norm(seg)
        theta_norm = np.linalg.norm(pv.values[offset : offset + n])
        if seg_norm == 0.0 or theta_norm == 0.0:
            seg[:] = 0.0
        else:
            seg *= theta_norm / seg_norm
    return M.ParamVector(direction, pv.layout)


def landscape_curve(eval_fn, theta: M.ParamVector, direction: M.ParamVector,
                    n_points: int, radius: float) -> list[tuple[float, float]]:
    """Evaluate a scalar function of the parameters along theta + t*dir."""
    if n_points < 3:
        raise ValueError("need at least 3 points")
    if radius <= 0:
        raise ValueError("radius must be positive")
    curve = []
    for t in np.linspace(-radius, radius, n_points):
        value = eval_fn(M.interpolate(theta, direction, float(t)))
        curve.append((float(t), float(value)))
    return curve


def loss_landscape_1d(ckpt, dataset: D.Dataset, atk: A.AttackConfig,
                      n_points: int = 41, radius: float = 1.0,
                      seed: int = 0) -> list[tuple[float, float]]:
    """Mean adversarial CE along a filter-normalized random direction.

    The attack seed is fixed across t, so the t=0 point reproduces a direct
    adversarial evaluation of the checkpoint exactly. Non-finite losses are
    recorded as NaN rather than raised; use one seed across checkpoints to
    make their curves comparable.
    """
    model = _as_model(ckpt)
    theta = model.get_params()
    direction = landscape_direction(theta, seed)
    probe = model.clone()

    def adv_ce(pv: M.ParamVector) -> float:
        probe.set_params(pv)
        try:
            adv = _adversarial_images(probe, dataset, atk, seed=seed)
            logits = M.forward(probe, Tensor(adv, dtype=probe.dtype))
            per = T.cross_entropy_per_example(logits.data, dataset.labels)
            return float(per.mean())
        except FloatingPointError:
            return float("nan")

    return landscape_curve(adv_ce, theta, direction, n_points, radius)


# ---------------------------------------------------------------------------
# metrics files


def load_metrics(path: str) -> list[dict]:
    """Rows of a metrics CSV as dicts with float values (epoch as int)."""
    rows = []
    with open(path) as fh:
        reader = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        for raw in reader:
            row = {k: float(v) for k, v in raw.items()}
            row["epoch"] = int(row["epoch"])
            rows.append(row)
    return rows


def robust_gap(rows: list[dict], column: str = "test_rob_acc") -> float:
    """Best-epoch minus final-epoch robust accuracy: the overfitting score."""
    if not rows:
        raise ValueError("no metric rows")
    values = [r[column] for r in rows]
    return max(values) - values[-1]
