"""The maximizing player: l-inf PGD, its projection, and variants.

Attacks are pure functions of (model, inputs, labels, config, seed); they
never touch model parameters. The same iteration runs in two directions:
ascent to craft adversarial examples, descent to plant easy features into
clean data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import models as M
from . import tensor as T
from .tensor import Tape, Tensor

_STEP_RULES = ("sign", "raw")
_DIRECTIONS = ("maximize", "minimize")


@dataclass(frozen=True)
class AttackConfig:
    """Attacker strategy: budget, step size, iteration count, step rule."""

    epsilon: float
    alpha: float
    steps: int
    random_start: bool = False
    step_rule: str = "sign"
    direction: str = "maximize"
    norm: str = "linf"
    use_best: bool = False  # best-of-iterates (evaluation) vs last-iterate (training)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.alpha <= 0:
            raise ValueError("alpha must be > 0 when steps > 0")
        if self.step_rule not in _STEP_RULES:
            raise ValueError(f"step_rule must be one of {_STEP_RULES}")
        if self.direction not in _DIRECTIONS:
            raise ValueError(f"direction must be one of {_DIRECTIONS}")
        if self.norm != "linf":
            raise ValueError("only the linf norm is supported")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "steps": self.steps,
            "random_start": self.random_start,
            "step_rule": self.step_rule,
            "direction": self.direction,
            "norm": self.norm,
            "use_best": self.use_best,
        }

    @staticmethod
    def from_dict(d: dict) -> "AttackConfig":
        return AttackConfig(**d)


def eval_attack_default(epsilon: float = 8 / 255, alpha: float = 2 / 255) -> AttackConfig:
    """PGD-20 with best-of-iterates: the standard robustness evaluator."""
    return AttackConfig(epsilon, alpha, 20, random_start=True, use_best=True)


def train_attack_default(epsilon: float = 8 / 255, alpha: float = 2 / 255) -> AttackConfig:
    """PGD-10 last-iterate: the standard training attacker."""
    return AttackConfig(epsilon, alpha, 10, random_start=True)


def steps_for_budget(epsilon: float, base_epsilon: float = 8 / 255) -> int:
    """Iteration count scaling k = 10 * eps / base, floored.

    Reproduces the published pairs: 10/255 -> 12, 12/255 -> 15, 14/255 -> 17,
    16/255 -> 20.
    """
    return int(10 * epsilon / base_epsilon)


def _project_np(x: np.ndarray, x_bar: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(x, x_bar - epsilon, x_bar + epsilon), 0.0, 1.0)


def project_linf(x: Tensor, x_bar: Tensor, epsilon: float) -> Tensor:
    """Clamp x into the epsilon box around x_bar, intersected with [0,1]."""
    if x.shape != x_bar.shape:
        raise T.ShapeError(f"project shapes {x.shape} vs {x_bar.shape}")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return Tensor(_project_np(x.data, x_bar.data, epsilon), dtype=x.dtype)


def _input_gradient(model: M.Model, x: np.ndarray, y: np.ndarray, dtype):
    """One forward pass returning (logits array, dCE/dx)."""
    xt = Tensor(x, dtype=dtype, requires_grad=True)
    xt.zero_grad()
    with Tape():
        logits = M.forward(model, xt)
        loss = T.softmax_cross_entropy(logits, y)
    T.backward(loss)
    return logits.data, xt.grad


def _run_iterations(model: M.Model, x_bar: np.ndarray, y: np.ndarray,
                    cfg: AttackConfig, seed: int, dtype) -> np.ndarray:
    sign = 1.0 if cfg.direction == "maximize" else -1.0
    better = np.greater if cfg.direction == "maximize" else np.less
    eps = cfg.epsilon

    x = x_bar.copy()
    if cfg.random_start and eps > 0:
        rng = np.random.default_rng(seed)
        x = _project_np(x + rng.uniform(-eps, eps, size=x.shape), x_bar, eps)
    x = x.astype(dtype, copy=False)

    best_x, best_loss = None, None
    # Parameters stay untouched; skipping their adjoints just saves work.
    saved_flags = [p.requires_grad for p in model.params.values()]
    model.set_requires_grad(False)
    try:
        for k in range(cfg.steps):
            logits, grad = _input_gradient(model, x, y, dtype)
            if not np.isfinite(grad).all():
                raise FloatingPointError(f"non-finite input gradient at attack step {k}")
            if cfg.use_best:
                loss = T.cross_entropy_per_example(logits, y)
                if best_loss is None:
                    best_x, best_loss = x.copy(), loss
                else:
                    hit = better(loss, best_loss)
                    best_x[hit] = x[hit]
                    best_loss = np.where(hit, loss, best_loss)
            step = np.sign(grad) if cfg.step_rule == "sign" else grad
            x = _project_np(x + sign * cfg.alpha * step, x_bar, eps).astype(dtype)
    finally:
        for p, flag in zip(model.params.values(), saved_flags):
            p.requires_grad = flag

    if cfg.use_best and cfg.steps > 0:
        xt = Tensor(x, dtype=dtype)
        loss = T.cross_entropy_per_example(M.forward(model, xt).data, y)
        hit = better(loss, best_loss)
        best_x[hit] = x[hit]
        return best_x
    return x


def pgd_attack(model: M.Model, x_bar: Tensor, y: np.ndarray,
               cfg: AttackConfig, seed: int = 0) -> Tensor:
    """Iterated gradient ascent on CE, projected into the epsilon box."""
    if cfg.direction != "maximize":
        raise ValueError("pgd_attack maximizes; use feature_inject for descent")
    return _attack(model, x_bar, y, cfg, seed)


def feature_inject(model: M.Model, x_bar: Tensor, y: np.ndarray,
                   cfg: AttackConfig, seed: int = 0) -> Tensor:
    """The descent twin of PGD: plants epsilon-strength easy features."""
    if cfg.direction != "minimize":
        cfg = replace(cfg, direction="minimize")
    return _attack(model, x_bar, y, cfg, seed)


def _attack(model, x_bar: Tensor, y, cfg: AttackConfig, seed: int) -> Tensor:
    xb = x_bar.data
    if xb.min() < 0.0 or xb.max() > 1.0:
        raise ValueError("clean inputs must lie in [0,1]")
    y = np.asarray(y)
    out = _run_iterations(model, xb, y, cfg, seed, x_bar.dtype)
    return Tensor(out, dtype=x_bar.dtype)


def uniform_noise_control(x_bar: Tensor, epsilon: float, seed: int) -> Tensor:
    """Uniform noise of the same norm budget: the matched control arm."""
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-epsilon, epsilon, size=x_bar.shape)
    return Tensor(_project_np(x_bar.data + noise, x_bar.data, epsilon), dtype=x_bar.dtype)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class AttackSchedule:
    """Maps epoch ranges to attacker configs; entries are (start_epoch, cfg)."""

    entries: tuple[tuple[int, AttackConfig], ...]
    total_epochs: int | None = None

    def __post_init__(self):
        if not self.entries:
            raise ValueError("schedule needs at least one entry")
        starts = [s for s, _ in self.entries]
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError("entry start epochs must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "entries": [[s, cfg.to_dict()] for s, cfg in self.entries],
            "total_epochs": self.total_epochs,
        }

    @staticmethod
    def from_dict(d: dict) -> "AttackSchedule":
        entries = tuple((int(s), AttackConfig.from_dict(c)) for s, c in d["entries"])
        return AttackSchedule(entries, d.get("total_epochs"))


def constant_schedule(cfg: AttackConfig, total_epochs: int | None = None) -> AttackSchedule:
    return AttackSchedule(((0, cfg),), total_epochs)


def stronger_after_decay(base: AttackConfig, milestone: int, epsilon_after: float,
                         total_epochs: int | None = None,
                         steps_after: int | None = None) -> AttackSchedule:
    """Keep the base attacker before the milestone, strengthen it after.

    The post-decay step count follows the k = 10*eps/base_eps rule unless
    given explicitly; step size is left unchanged.
    """
    if steps_after is None:
        steps_after = steps_for_budget(epsilon_after, base.epsilon)
    after = replace(base, epsilon=epsilon_after, steps=steps_after)
    return AttackSchedule(((0, base), (milestone, after)), total_epochs)


def attack_schedule(epoch: int, schedule: AttackSchedule) -> AttackConfig:
    """The active attacker for a given epoch."""
    first = schedule.entries[0][0]
    if epoch < first or (
        schedule.total_epochs is not None and epoch >= schedule.total_epochs
    ):
        raise ValueError(f"epoch {epoch} outside schedule domain")
    active = schedule.entries[0][1]
    for start, cfg in schedule.entries:
        if epoch >= start:
            active = cfg
    return active
