"""The minimizing player: SGD with momentum and weight decay, learning-rate
schedules, EMA weight averaging, the bootstrapped loss, and the full
adversarial training loop.

Runs are deterministic given the config seed: shuffling, augmentation and
attack noise all derive from it, and derived streams never depend on the
learning-rate schedule, so schedules that agree up to an epoch produce
bitwise-identical trajectories up to that epoch.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import attack as A
from . import data as D
from . import models as M
from . import tensor as T
from .tensor import Tape, Tensor


class TrainingAborted(RuntimeError):
    """Raised when a run hits a non-finite loss or update."""


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise decay by a factor, staged cosine/linear ramps, or constant.

    Piecewise applies the factor multiplicatively at each milestone
    (base -> base/d -> base/d^2). Cosine/linear interpolate gradually from
    the previous level to ``stage_targets[i]`` across the stage that starts
    at milestone i and ends at the next milestone (or at ``total_epochs``).
    """

    kind: str = "piecewise"  # piecewise | cosine | linear | constant
    base_lr: float = 0.1
    milestones: tuple[int, ...] = ()
    decay_factor: float = 1.0
    stage_targets: tuple[float, ...] = ()
    total_epochs: int | None = None

    def __post_init__(self):
        if self.kind not in ("piecewise", "cosine", "linear", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        # constant 0 is allowed as the degenerate "evaluate only" schedule
        # (continuing from a checkpoint without moving it)
        if self.base_lr < 0 or (self.base_lr == 0 and self.kind != "constant"):
            raise ValueError("base_lr must be positive")
        if self.kind == "piecewise" and self.decay_factor < 1.0:
            raise ValueError("decay_factor must be >= 1 so the lr is non-increasing")
        if self.kind in ("cosine", "linear"):
            if len(self.stage_targets) != len(self.milestones):
                raise ValueError("need one stage target per milestone")
            if any(t <= 0 for t in self.stage_targets):
                raise ValueError("stage targets must stay positive")
            if self.total_epochs is None:
                raise ValueError("staged schedules need total_epochs")
        object.__setattr__(self, "milestones", tuple(self.milestones))
        object.__setattr__(self, "stage_targets", tuple(self.stage_targets))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base_lr": self.base_lr,
            "milestones": list(self.milestones),
            "decay_factor": self.decay_factor,
            "stage_targets": list(self.stage_targets),
            "total_epochs": self.total_epochs,
        }

    @staticmethod
    def from_dict(d: dict) -> "LRSchedule":
        d = dict(d)
        d["milestones"] = tuple(d.get("milestones", ()))
        d["stage_targets"] = tuple(d.get("stage_targets", ()))
        return LRSchedule(**d)


def lr_at(schedule: LRSchedule, epoch: int) -> float:
    """Active learning rate for an epoch."""
    if schedule.kind == "constant":
        return schedule.base_lr
    if schedule.kind == "piecewise":
        passed = sum(1 for m in schedule.milestones if epoch >= m)
        return schedule.base_lr / schedule.decay_factor**passed
    # staged cosine / linear
    if epoch < schedule.milestones[0]:
        return schedule.base_lr
    levels = (schedule.base_lr,) + schedule.stage_targets
    bounds = schedule.milestones + (schedule.total_epochs,)
    for i in range(len(schedule.milestones)):
        lo, hi = bounds[i], bounds[i + 1]
        if epoch < hi or i == len(schedule.milestones) - 1:
            frac = min((epoch - lo) / max(hi - lo, 1), 1.0)
            prev, target = levels[i], levels[i + 1]
            if schedule.kind == "linear":
                return prev + (target - prev) * frac
            return target + (prev - target) * 0.5 * (1 + math.cos(math.pi * frac))
    return schedule.stage_targets[-1]


# ---------------------------------------------------------------------------
# train config and state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr: LRSchedule = field(default_factory=LRSchedule)
    attack: A.AttackSchedule = field(
        default_factory=lambda: A.constant_schedule(A.train_attack_default())
    )
    eval_attack: A.AttackConfig = field(default_factory=A.eval_attack_default)
    wa_start_epoch: int = 0
    wa_gamma: float = 0.999
    boat_lambda: float = 0.0
    boat_lambda2: float | None = None  # switches in at the second milestone
    kd_lambda: float = 0.0
    kd_teacher: str | None = None  # checkpoint path of the standard teacher
    seed: int = 0
    augment: bool = False
    checkpoint_every: int = 1
    val_every_before_wa: int = 5
    metric_sample: int = 512  # examples per split used for epoch metrics (0 = all)

    def __post_init__(self):
        if not (0.0 <= self.wa_gamma <= 1.0):
            raise ValueError("wa_gamma must lie in [0,1]")
        if self.boat_lambda < 0 or (self.boat_lambda2 or 0) < 0:
            raise ValueError("boat lambda must be >= 0")
        if not (0.0 <= self.kd_lambda <= 1.0):
            raise ValueError("kd_lambda must lie in [0,1]")
        if self.wa_start_epoch > self.epochs:
            raise ValueError("wa_start_epoch must be <= epochs")

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr": self.lr.to_dict(),
            "attack": self.attack.to_dict(),
            "eval_attack": self.eval_attack.to_dict(),
            "wa_start_epoch": self.wa_start_epoch,
            "wa_gamma": self.wa_gamma,
            "boat_lambda": self.boat_lambda,
            "boat_lambda2": self.boat_lambda2,
            "kd_lambda": self.kd_lambda,
            "kd_teacher": self.kd_teacher,
            "seed": self.seed,
            "augment": self.augment,
            "checkpoint_every": self.checkpoint_every,
            "val_every_before_wa": self.val_every_before_wa,
            "metric_sample": self.metric_sample,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr"] = LRSchedule.from_dict(d["lr"])
        d["attack"] = A.AttackSchedule.from_dict(d["attack"])
        d["eval_attack"] = A.AttackConfig.from_dict(d["eval_attack"])
        return TrainConfig(**d)


def active_lambda(cfg: TrainConfig, epoch: int) -> float:
    """BoAT coefficient at an epoch: zero before WA starts, lambda2 after
    the second milestone when configured."""
    if epoch < cfg.wa_start_epoch:
        return 0.0
    ms = cfg.lr.milestones
    if cfg.boat_lambda2 is not None and len(ms) >= 2 and epoch >= ms[1]:
        return cfg.boat_lambda2
    return cfg.boat_lambda


@dataclass
class TrainingState:
    model: M.Model
    velocity: np.ndarray
    momentum: float = 0.9
    weight_decay: float = 5e-4
    wa_values: np.ndarray | None = None
    epoch: int = 0
    rng_state: dict | None = None
    history: list = field(default_factory=list)

    def wa_model(self) -> M.Model:
        if self.wa_values is None:
            raise RuntimeError("weight averaging has not started")
        m = self.model.clone()
        m.set_params(self.wa_values)
        return m


# ---------------------------------------------------------------------------
# optimizer and averaging


def sgd_step(state: TrainingState, grads: np.ndarray, lr: float) -> None:
    """v <- momentum*v + (grad + weight_decay*theta); theta <- theta - lr*v.

    Commits nothing on a non-finite update, so the state stays good for the
    abort checkpoint.
    """
    if not np.isfinite(grads).all():
        raise TrainingAborted("non-finite gradient in sgd_step")
    theta = state.model.get_params().values
    dt = theta.dtype.type
    v = dt(state.momentum) * state.velocity + (grads + dt(state.weight_decay) * theta)
    theta -= dt(lr) * v
    if not np.isfinite(theta).all():
        raise TrainingAborted("non-finite parameter update")
    state.velocity = v
    state.model.set_params(theta)


def ema_update(phi: np.ndarray, theta: np.ndarray, gamma: float) -> None:
    """phi <- gamma*phi + (1-gamma)*theta, in place."""
    if phi.shape != theta.shape:
        raise ValueError(f"layout mismatch: {phi.shape} vs {theta.shape}")
    g = phi.dtype.type(gamma)
    phi *= g
    phi += (phi.dtype.type(1.0) - g) * theta


# ---------------------------------------------------------------------------
# losses


def _constant_logits(model: M.Model, x: Tensor) -> Tensor:
    """Forward pass kept off the tape: the result carries no gradient."""
    flags = [p.requires_grad for p in model.params.values()]
    model.set_requires_grad(False)
    try:
        logits = M.forward(model, Tensor(x.data, dtype=x.dtype))
    finally:
        for p, f in zip(model.params.values(), flags):
            p.requires_grad = f
    return logits


def _loss_terms(model_theta, model_wa, model_st, x_adv, y, lam, lam_st):
    """(loss, ce_value, kl_value); gradient flows only into model_theta."""
    logits = M.forward(model_theta, x_adv)
    ce = T.softmax_cross_entropy(logits, y)
    kl_value = 0.0
    if lam > 0.0:
        if model_wa is None:
            raise ValueError("boat loss needs the averaged model when lambda > 0")
        kl = T.kl_divergence(logits, _constant_logits(model_wa, x_adv))
        kl_value = kl.item()
        loss = T.add(ce, T.scale(kl, lam))
    else:
        loss = ce
    if lam_st > 0.0:
        if model_st is None:
            raise ValueError("missing standard teacher for the distillation term")
        kl_st = T.kl_divergence(logits, _constant_logits(model_st, x_adv))
        if lam_st >= 1.0:
            loss = kl_st
        else:
            loss = T.add(T.scale(loss, 1.0 - lam_st), T.scale(kl_st, lam_st))
    return loss, ce.item(), kl_value


def boat_loss(model_theta: M.Model, model_wa: M.Model | None, x_adv: Tensor,
              y: np.ndarray, lam: float) -> Tensor:
    """CE on the adversarial batch plus lam * KL(online || averaged).

    The averaged model is a constant: the KL term regularizes only the
    online parameters. With lam == 0 this is exactly the CE loss.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return _loss_terms(model_theta, model_wa, None, x_adv, y, lam, 0.0)[0]


def rebat_kd_loss(model_theta: M.Model, model_wa: M.Model | None,
                  model_st: M.Model | None, x_adv: Tensor, y: np.ndarray,
                  lam: float, lam_st: float) -> Tensor:
    """(1-lam_st) * boat + lam_st * KL(online || standard teacher)."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if not (0.0 <= lam_st <= 1.0):
        raise ValueError("lam_st must lie in [0,1]")
    if lam_st > 0 and model_st is None:
        raise ValueError("missing standard teacher for the distillation term")
    return _loss_terms(model_theta, model_wa, model_st, x_adv, y, lam, lam_st)[0]


# ---------------------------------------------------------------------------
# evaluation helpers (thin wrappers so the loop does not import diagnostics)


def accuracy(model: M.Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float((M.predict(model, images) == labels).mean())


def robust_accuracy(model: M.Model, images: np.ndarray, labels: np.ndarray,
                    atk: A.AttackConfig, seed: int, batch_size: int = 512) -> float:
    correct = 0
    for lo in range(0, len(images), batch_size):
        xb = Tensor(images[lo : lo + batch_size], dtype=model.dtype)
        yb = labels[lo : lo + batch_size]
        adv = A.pgd_attack(model, xb, yb, atk, seed=seed + lo)
        pred = M.forward(model, adv).data.argmax(axis=1)
        correct += int((pred == yb).sum())
    return correct / len(images)


# ---------------------------------------------------------------------------
# run directory plumbing

METRIC_COLUMNS = (
    "epoch", "lr", "eps_train", "lambda",
    "train_nat_acc", "train_rob_acc", "test_nat_acc", "test_rob_acc",
    "wa_test_nat_acc", "wa_test_rob_acc", "mean_ce", "mean_kl",
)


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _format_row(row: dict) -> str:
    cells = [str(int(row["epoch"]))]
    cells += [f"{float(row[c]):.6f}" for c in METRIC_COLUMNS[1:]]
    return ",".join(cells)


def _derived_seed(base: int, *parts: int) -> int:
    mixed = base & 0xFFFFFFFF
    for p in parts:
        mixed = (mixed * 1_000_003 + p + 0x9E3779B9) & 0xFFFFFFFF
    return int(mixed)


def _metric_indices(n: int, cap: int, seed: int) -> np.ndarray:
    if cap <= 0 or cap >= n:
        return np.arange(n)
    return np.random.default_rng(seed).permutation(n)[:cap]


def save_state(path: str, state: TrainingState, cfg: TrainConfig,
               model_spec: M.ModelSpec, cfg_hash: str) -> None:
    arrays = {"params": state.model.get_params().values.copy()}
    arrays["velocity"] = state.velocity.copy()
    if state.wa_values is not None:
        arrays["wa_params"] = state.wa_values.copy()
    meta = {
        "kind": "training_state",
        "spec": model_spec.to_dict(),
        "epoch": state.epoch,
        "seed": cfg.seed,
        "schedule_state": {"config": cfg.to_dict(), "epoch": state.epoch},
        "metrics": state.history[-1] if state.history else {},
        "history": state.history,
        "rng_state": state.rng_state,
        "config_hash": cfg_hash,
    }
    M.write_container(path, meta, arrays)


def load_state(path: str, dtype=np.float32) -> tuple[TrainingState, dict]:
    meta, arrays = M.read_container(path)
    spec = M.ModelSpec.from_dict(meta["spec"])
    model = M.init_model(spec, seed=0, dtype=dtype)
    model.set_params(arrays["params"].astype(dtype, copy=False))
    saved_cfg = meta.get("schedule_state", {}).get("config", {})
    state = TrainingState(
        model=model,
        velocity=arrays["velocity"].astype(dtype, copy=False),
        momentum=saved_cfg.get("momentum", 0.9),
        weight_decay=saved_cfg.get("weight_decay", 5e-4),
        wa_values=arrays.get("wa_params"),
        epoch=int(meta["epoch"]),
        rng_state=meta.get("rng_state"),
        history=list(meta.get("history", [])),
    )
    return state, meta


# ---------------------------------------------------------------------------
# the training loop


def train_adversarial(cfg: TrainConfig, model_spec: M.ModelSpec,
                      train_set: D.Dataset, val_set: D.Dataset | None,
                      test_set: D.Dataset, out_dir: str,
                      init_from: str | None = None,
                      on_epoch=None) -> str:
    """Run the minimax loop and return the populated run directory.

    Per epoch: a seeded shuffle; per batch: the scheduled attacker crafts
    adversarial examples against the online model, the configured loss is
    minimized by one SGD step, and (past the WA start) the averaged
    parameters take an EMA step. Epoch metrics, checkpoints and the best
    validation-robustness checkpoint land in ``out_dir``.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

    resolved = {"train": cfg.to_dict(), "model": model_spec.to_dict()}
    chash = config_hash(resolved)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({**resolved, "config_hash": chash}, fh, indent=2, sort_keys=True)

    dtype = np.float32
    if init_from is not None:
        model, _ = M.load_model(init_from, dtype=dtype)
        if model.spec != model_spec:
            raise ValueError("checkpoint spec does not match the requested model")
    else:
        model = M.init_model(model_spec, seed=cfg.seed, dtype=dtype)
    state = TrainingState(model=model, velocity=np.zeros(model.n_params(), dtype=dtype),
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    teacher = None
    if cfg.kd_lambda > 0:
        if cfg.kd_teacher is None:
            raise ValueError("kd_lambda > 0 needs kd_teacher")
        teacher, _ = M.load_model(cfg.kd_teacher, dtype=dtype)

    shuffle_rng = np.random.default_rng([cfg.seed, 0xA11CE])
    tr_idx = _metric_indices(len(train_set), cfg.metric_sample,
                             _derived_seed(cfg.seed, 1))
    te_idx = _metric_indices(len(test_set), cfg.metric_sample,
                             _derived_seed(cfg.seed, 2))

    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w") as fh:
        fh.write(f"# config_hash={chash}\n")
        fh.write(",".join(METRIC_COLUMNS) + "\n")

    ckpt_dir = os.path.join(out_dir, "checkpoints")
    save_state(os.path.join(ckpt_dir, "epoch_0000.ckpt"), state, cfg, model_spec, chash)

    best_val = -1.0
    wa_model_cache: M.Model | None = None
    n = len(train_set)

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.lr, epoch)
        atk = A.attack_schedule(epoch, cfg.attack)
        lam = active_lambda(cfg, epoch)
        perm = shuffle_rng.permutation(n)
        ce_sum = kl_sum = 0.0
        steps = 0

        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            xb = train_set.images[idx]
            yb = train_set.labels[idx]
            if cfg.augment:
                xb = D.augment(xb, seed=_derived_seed(cfg.seed, 3, epoch, lo))

            adv = A.pgd_attack(model, Tensor(xb, dtype=dtype), yb, atk,
                               seed=_derived_seed(cfg.seed, 4, epoch, lo))

            lam_step = lam if state.wa_values is not None else 0.0
            if lam_step > 0 and wa_model_cache is None:
                wa_model_cache = model.clone()
            if wa_model_cache is not None and state.wa_values is not None:
                wa_model_cache.set_params(state.wa_values)

            model.zero_grad()
            with Tape():
                loss, ce_val, kl_val = _loss_terms(
                    model, wa_model_cache if lam_step > 0 else None, teacher,
                    adv, yb, lam_step, cfg.kd_lambda,
                )
            if not np.isfinite(loss.data):
                save_state(os.path.join(out_dir, "final.ckpt"), state, cfg,
                           model_spec, chash)
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}; last good checkpoint kept"
                )
            T.backward(loss)
            grads = np.concatenate([p.grad.reshape(-1) for p in model.params.values()])
            try:
                sgd_step(state, grads, lr)
            except TrainingAborted:
                save_state(os.path.join(out_dir, "final.ckpt"), state, cfg,
                           model_spec, chash)
                raise

            if epoch >= cfg.wa_start_epoch and cfg.wa_start_epoch < cfg.epochs:
                theta = model.get_params().values
                if state.wa_values is None:
                    state.wa_values = theta.copy()
                else:
                    ema_update(state.wa_values, theta, cfg.wa_gamma)

            ce_sum += ce_val
            kl_sum += kl_val
            steps += 1

        state.epoch = epoch + 1
        state.rng_state = shuffle_rng.bit_generator.state

        # one attack seed per run: epoch-to-epoch metric changes then track
        # the model trajectory instead of re-rolled attack noise
        eval_seed = _derived_seed(cfg.seed, 5)
        wa_eval = state.wa_model() if state.wa_values is not None else model
        row = {
            "epoch": epoch,
            "lr": lr,
            "eps_train": atk.epsilon,
            "lambda": lam,
            "train_nat_acc": accuracy(model, train_set.images[tr_idx],
                                      train_set.labels[tr_idx]),
            "train_rob_acc": robust_accuracy(model, train_set.images[tr_idx],
                                             train_set.labels[tr_idx],
                                             cfg.eval_attack, eval_seed),
            "test_nat_acc": accuracy(model, test_set.images[te_idx],
                                     test_set.labels[te_idx]),
            "test_rob_acc": robust_accuracy(model, test_set.images[te_idx],
                                            test_set.labels[te_idx],
                                            cfg.eval_attack, eval_seed),
            "mean_ce": ce_sum / max(steps, 1),
            "mean_kl": kl_sum / max(steps, 1),
        }
        # before WA starts the averaged model is the online model
        row["wa_test_nat_acc"] = (
            accuracy(wa_eval, test_set.images[te_idx], test_set.labels[te_idx])
            if state.wa_values is not None else row["test_nat_acc"]
        )
        row["wa_test_rob_acc"] = (
            robust_accuracy(wa_eval, test_set.images[te_idx], test_set.labels[te_idx],
                            cfg.eval_attack, eval_seed)
            if state.wa_values is not None else row["test_rob_acc"]
        )
        state.history.append(row)
        with open(csv_path, "a") as fh:
            fh.write(_format_row(row) + "\n")

        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_state(os.path.join(ckpt_dir, f"epoch_{epoch + 1:04d}.ckpt"),
                       state, cfg, model_spec, chash)

        # best-checkpoint tracking by validation robustness: every epoch once
        # WA is live, on a cadence before that (cost control)
        if val_set is not None and len(val_set) > 0:
            due = (epoch >= cfg.wa_start_epoch
                   or (epoch + 1) % max(cfg.val_every_before_wa, 1) == 0
                   or epoch == cfg.epochs - 1)
            if due:
                val_rob = robust_accuracy(
                    wa_eval, val_set.images, val_set.labels, cfg.eval_attack,
                    _derived_seed(cfg.seed, 6),
                )
                if val_rob > best_val:
                    best_val = val_rob
                    save_state(os.path.join(out_dir, "best.ckpt"), state, cfg,
                               model_spec, chash)

        if on_epoch is not None:
            on_epoch(state, row)

    save_state(os.path.join(out_dir, "final.ckpt"), state, cfg, model_spec, chash)
    if best_val < 0:  # no validation evals happened
        save_state(os.path.join(out_dir, "best.ckpt"), state, cfg, model_spec, chash)
    return out_dir


def train_standard(cfg: TrainConfig, model_spec: M.ModelSpec,
                   train_set: D.Dataset, test_set: D.Dataset, out_dir: str,
                   init_from: str | None = None,
                   random_labels: bool = False) -> str:
    """CE-only training: the zero-attacker edge of the same loop.

    ``random_labels`` replaces the training labels with a seeded uniform
    draw, the control arm for memorization experiments.
    """
    no_attack = A.constant_schedule(A.AttackConfig(0.0, 1.0, 0))
    st_cfg = replace(cfg, attack=no_attack, boat_lambda=0.0, boat_lambda2=None,
                     kd_lambda=0.0, kd_teacher=None)
    if random_labels:
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        labels = rng.integers(0, train_set.n_classes, size=len(train_set))
        train_set = D.Dataset(train_set.images, labels, train_set.n_classes,
                              train_set.provenance + "+random-labels")
    return train_adversarial(st_cfg, model_spec, train_set, None, test_set,
                             out_dir, init_from=init_from)
