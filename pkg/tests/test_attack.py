import numpy as np
import pytest

from atgame import attack as A
from atgame import models as M
from atgame import tensor as T
from atgame.tensor import Tensor


def linear_model_2px(seed=0):
    """Linear 2-class head over a 2-pixel input."""
    return M.init_model(M.ModelSpec("mlp", (1, 1, 2), (), 2), seed=seed)


def ce_mean(model, x_np, y):
    logits = M.forward(model, Tensor(x_np, dtype=model.dtype)).data
    return T.cross_entropy_per_example(logits, y).mean()


# ---------------------------------------------------------------------------
# projection


def test_project_inside_is_unchanged():
    x = Tensor([[0.45, 0.52]])
    xb = Tensor([[0.5, 0.5]])
    out = A.project_linf(x, xb, 0.1)
    assert np.array_equal(out.data, x.data)


def test_project_clamps_to_ball():
    out = A.project_linf(Tensor([0.9]), Tensor([0.5]), 0.1)
    assert out.data[0] == pytest.approx(0.6)


def test_project_image_box_dominates():
    out = A.project_linf(Tensor([-0.3]), Tensor([0.0]), 0.5)
    assert out.data[0] == 0.0


def test_project_errors():
    with pytest.raises(T.ShapeError):
        A.project_linf(Tensor([1.0, 2.0]), Tensor([1.0]), 0.1)
    with pytest.raises(ValueError):
        A.project_linf(Tensor([1.0]), Tensor([1.0]), -0.1)


# ---------------------------------------------------------------------------
# PGD


def test_pgd_zero_steps_returns_clean():
    model = linear_model_2px()
    xb = Tensor(np.array([[[[0.4, 0.6]]]], dtype=np.float32))
    cfg = A.AttackConfig(0.1, 0.05, 0, random_start=False)
    out = A.pgd_attack(model, xb, np.array([0]), cfg, seed=0)
    assert np.array_equal(out.data, xb.data)


def test_pgd_zero_epsilon_returns_clean():
    model = linear_model_2px()
    xb = Tensor(np.array([[[[0.4, 0.6]]]], dtype=np.float32))
    cfg = A.AttackConfig(0.0, 0.05, 7, random_start=True)
    out = A.pgd_attack(model, xb, np.array([0]), cfg, seed=0)
    assert np.array_equal(out.data, xb.data)


def test_pgd_beats_grid_search_oracle():
    # Exhaustive 41x41 grid over the epsilon box around a 2-pixel input.
    model = linear_model_2px(seed=3)
    x_bar = np.array([[[[0.4, 0.6]]]], dtype=np.float64)
    y = np.array([0])
    eps = 0.1

    ticks = np.linspace(-eps, eps, 41)
    g0, g1 = np.meshgrid(ticks, ticks, indexing="ij")
    grid = np.stack([x_bar[0, 0, 0, 0] + g0.ravel(), x_bar[0, 0, 0, 1] + g1.ravel()], 1)
    grid = np.clip(grid, 0.0, 1.0).reshape(-1, 1, 1, 2)
    losses = T.cross_entropy_per_example(
        M.forward(model, Tensor(grid, dtype=model.dtype)).data,
        np.zeros(len(grid), dtype=np.int64),
    )
    grid_best = losses.max()

    cfg = A.AttackConfig(eps, 0.05, 5, random_start=False, use_best=True)
    adv = A.pgd_attack(model, Tensor(x_bar, dtype=model.dtype), y, cfg, seed=0)
    achieved = ce_mean(model, adv.data, y)
    assert achieved >= grid_best - 1e-3


def test_pgd_projection_invariants_hold():
    spec = M.ModelSpec("small_cnn", (1, 6, 6), (3,), 3)
    model = M.init_model(spec, seed=4)
    rng = np.random.default_rng(5)
    xb = Tensor(rng.uniform(0, 1, (6, 1, 6, 6)).astype(np.float32))
    y = rng.integers(0, 3, size=6)
    for eps, steps, rs in [(0.03, 3, True), (0.1, 5, False), (0.3, 4, True)]:
        cfg = A.AttackConfig(eps, eps / 2, steps, random_start=rs)
        out = A.pgd_attack(model, xb, y, cfg, seed=6).data
        assert np.abs(out - xb.data).max() <= eps + 1e-6
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_pgd_best_of_iterates_never_decreases_loss():
    spec = M.ModelSpec("mlp", (1, 2, 2), (5,), 3)
    model = M.init_model(spec, seed=7)
    rng = np.random.default_rng(8)
    xb = Tensor(rng.uniform(0.1, 0.9, (8, 1, 2, 2)).astype(np.float32))
    y = rng.integers(0, 3, size=8)
    initial = ce_mean(model, xb.data, y)
    cfg = A.AttackConfig(0.05, 0.02, 4, random_start=False, use_best=True)
    adv = A.pgd_attack(model, xb, y, cfg, seed=0)
    assert ce_mean(model, adv.data, y) >= initial


def test_pgd_deterministic_and_leaves_params_untouched():
    spec = M.ModelSpec("small_cnn", (1, 6, 6), (3,), 3)
    model = M.init_model(spec, seed=9)
    before = model.get_params().values.copy()
    rng = np.random.default_rng(10)
    xb = Tensor(rng.uniform(0, 1, (4, 1, 6, 6)).astype(np.float32))
    y = rng.integers(0, 3, size=4)
    cfg = A.AttackConfig(0.1, 0.03, 5, random_start=True)
    a = A.pgd_attack(model, xb, y, cfg, seed=11).data
    b = A.pgd_attack(model, xb, y, cfg, seed=11).data
    c = A.pgd_attack(model, xb, y, cfg, seed=12).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(model.get_params().values, before)
    assert all(p.requires_grad for p in model.params.values())


def test_pgd_rejects_inputs_outside_unit_box():
    model = linear_model_2px()
    xb = Tensor(np.array([[[[1.4, 0.6]]]], dtype=np.float32))
    with pytest.raises(ValueError):
        A.pgd_attack(model, xb, np.array([0]), A.AttackConfig(0.1, 0.05, 1), seed=0)


# ---------------------------------------------------------------------------
# descent variant


def test_inject_reduces_loss():
    spec = M.ModelSpec("mlp", (1, 2, 2), (5,), 3)
    model = M.init_model(spec, seed=12)
    rng = np.random.default_rng(13)
    xb = Tensor(rng.uniform(0.1, 0.9, (8, 1, 2, 2)).astype(np.float32))
    y = rng.integers(0, 3, size=8)
    cfg = A.AttackConfig(0.1, 0.04, 5, random_start=False,
                         direction="minimize", use_best=True)
    out = A.feature_inject(model, xb, y, cfg, seed=0)
    assert ce_mean(model, out.data, y) <= ce_mean(model, xb.data, y)


def test_inject_zero_epsilon_is_identity():
    model = linear_model_2px()
    xb = Tensor(np.array([[[[0.4, 0.6]]]], dtype=np.float32))
    cfg = A.AttackConfig(0.0, 0.05, 5, direction="minimize")
    out = A.feature_inject(model, xb, np.array([1]), cfg, seed=0)
    assert np.array_equal(out.data, xb.data)


def test_inject_approaches_grid_minimum():
    model = linear_model_2px(seed=14)
    x_bar = np.array([[[[0.5, 0.5]]]], dtype=np.float64)
    y = np.array([1])
    eps = 0.1
    ticks = np.linspace(-eps, eps, 41)
    g0, g1 = np.meshgrid(ticks, ticks, indexing="ij")
    grid = np.stack([0.5 + g0.ravel(), 0.5 + g1.ravel()], 1).reshape(-1, 1, 1, 2)
    losses = T.cross_entropy_per_example(
        M.forward(model, Tensor(grid, dtype=model.dtype)).data,
        np.ones(len(grid), dtype=np.int64),
    )
    cfg = A.AttackConfig(eps, 0.05, 5, direction="minimize", use_best=True)
    out = A.feature_inject(model, Tensor(x_bar, dtype=model.dtype), y, cfg, seed=0)
    assert ce_mean(model, out.data, y) <= losses.min() + 1e-3


def test_uniform_noise_control_within_budget():
    rng = np.random.default_rng(15)
    xb = Tensor(rng.uniform(0, 1, (5, 1, 3, 3)).astype(np.float32))
    out = A.uniform_noise_control(xb, 0.07, seed=3)
    assert np.abs(out.data - xb.data).max() <= 0.07 + 1e-6
    assert out.data.min() >= 0 and out.data.max() <= 1
    again = A.uniform_noise_control(xb, 0.07, seed=3)
    assert np.array_equal(out.data, again.data)


# ---------------------------------------------------------------------------
# config and schedule


def test_config_roundtrips():
    cfg = A.AttackConfig(8 / 255, 2 / 255, 10, random_start=True, use_best=True)
    assert A.AttackConfig.from_dict(cfg.to_dict()) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        A.AttackConfig(-0.1, 0.01, 5)
    with pytest.raises(ValueError):
        A.AttackConfig(0.1, 0.0, 5)
    with pytest.raises(ValueError):
        A.AttackConfig(0.1, 0.01, 5, step_rule="newton")
    with pytest.raises(ValueError):
        A.AttackConfig(0.1, 0.01, 5, norm="l2")


def test_constant_schedule():
    cfg = A.train_attack_default()
    sched = A.constant_schedule(cfg, total_epochs=200)
    for e in (0, 57, 199):
        assert A.attack_schedule(e, sched) == cfg
    with pytest.raises(ValueError):
        A.attack_schedule(200, sched)


def test_stronger_after_decay_schedule():
    base = A.train_attack_default()  # 8/255, PGD-10
    sched = A.stronger_after_decay(base, milestone=100, epsilon_after=10 / 255)
    at99 = A.attack_schedule(99, sched)
    assert at99.epsilon == pytest.approx(8 / 255) and at99.steps == 10
    at101 = A.attack_schedule(101, sched)
    assert at101.epsilon == pytest.approx(10 / 255) and at101.steps == 12


def test_step_count_budget_rule():
    assert A.steps_for_budget(10 / 255) == 12
    assert A.steps_for_budget(12 / 255) == 15
    assert A.steps_for_budget(14 / 255) == 17
    assert A.steps_for_budget(16 / 255) == 20


def test_schedule_roundtrips():
    sched = A.stronger_after_decay(
        A.train_attack_default(), 30, 10 / 255, total_epochs=60
    )
    assert A.AttackSchedule.from_dict(sched.to_dict()) == sched
