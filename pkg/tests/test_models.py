import numpy as np
import pytest

from atgame import models as M
from atgame import tensor as T
from atgame.tensor import Tape, Tensor


def tiny_cnn_spec():
    return M.ModelSpec("small_cnn", (1, 8, 8), (4, 8), 3)


def test_init_is_deterministic():
    spec = tiny_cnn_spec()
    a = M.init_model(spec, seed=7).get_params()
    b = M.init_model(spec, seed=7).get_params()
    assert np.array_equal(a.values, b.values)
    assert a.layout == b.layout
    c = M.init_model(spec, seed=8).get_params()
    assert not np.array_equal(a.values, c.values)


def test_zero_hidden_mlp_is_linear_classifier():
    spec = M.ModelSpec("mlp", (1, 1, 5), (), 4)
    model = M.init_model(spec, seed=0)
    assert model.n_params() == 4 * (5 + 1)


def test_cnn_param_count_matches_layout():
    model = M.init_model(M.default_small_cnn(), seed=0)
    pv = model.get_params()
    by_layout = sum(int(np.prod(shape)) for _, _, shape in pv.layout)
    assert model.n_params() == by_layout == pv.values.size


def test_default_cnn_under_param_budget():
    model = M.init_model(M.default_small_cnn(), seed=0)
    assert model.n_params() < 500_000


def test_layout_is_injective_and_covers_vector():
    pv = M.init_model(tiny_cnn_spec(), seed=0).get_params()
    spans = sorted(
        (off, off + int(np.prod(shape))) for _, off, shape in pv.layout
    )
    cursor = 0
    for lo, hi in spans:
        assert lo == cursor
        cursor = hi
    assert cursor == pv.values.size


def test_spec_roundtrips_serialization():
    spec = tiny_cnn_spec()
    assert M.ModelSpec.from_dict(spec.to_dict()) == spec


def test_unsupported_arch_rejected():
    with pytest.raises(ValueError):
        M.ModelSpec("transformer", (3, 32, 32), (4,), 10)


def test_zero_weights_give_constant_logits():
    spec = M.ModelSpec("mlp", (1, 2, 2), (3,), 2)
    model = M.init_model(spec, seed=0)
    model.set_params(np.zeros(model.n_params(), dtype=np.float32))
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (5, 1, 2, 2)))
    logits = M.forward(model, x).data
    assert np.allclose(logits, logits[0])


def test_linear_model_is_homogeneous_in_weights():
    spec = M.ModelSpec("mlp", (1, 1, 3), (), 2)
    model = M.init_model(spec, seed=1)
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (4, 1, 1, 3)))
    base = M.forward(model, x).data.copy()
    pv = model.get_params()
    model.set_params(pv.values * 2.0)
    assert np.allclose(M.forward(model, x).data, 2.0 * base, rtol=1e-6)


def test_forward_shape_mismatch():
    model = M.init_model(tiny_cnn_spec(), seed=0)
    with pytest.raises(T.ShapeError):
        M.forward(model, Tensor(np.zeros((2, 1, 7, 7))))


@pytest.mark.parametrize("spec", [
    M.ModelSpec("mlp", (1, 3, 3), (6,), 3),
    M.ModelSpec("small_cnn", (2, 6, 6), (3,), 3),
])
def test_input_gradient_matches_finite_diff(spec):
    model = M.init_model(spec, seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(0.2, 0.8, (2,) + spec.input_shape),
               dtype=np.float64, requires_grad=True)
    y = rng.integers(0, spec.n_classes, size=2)
    x.zero_grad()
    with Tape():
        loss = T.softmax_cross_entropy(M.forward(model, x), y)
    T.backward(loss)
    fd = T.finite_diff_gradient(
        lambda t: T.softmax_cross_entropy(M.forward(model, t), y), x
    ).data
    mask = np.abs(fd) > 1e-8
    assert (np.abs(x.grad - fd)[mask] / np.abs(fd)[mask]).max() < 1e-4


def test_param_gradient_matches_finite_diff_full_cnn():
    spec = M.ModelSpec("small_cnn", (1, 6, 6), (2, 3), 3)
    model = M.init_model(spec, seed=5, dtype=np.float64)
    rng = np.random.default_rng(6)
    x = Tensor(rng.uniform(0, 1, (2, 1, 6, 6)), dtype=np.float64)
    y = rng.integers(0, 3, size=2)

    model.zero_grad()
    with Tape():
        loss = T.softmax_cross_entropy(M.forward(model, x), y)
    T.backward(loss)

    for name, p in model.params.items():
        fd = T.finite_diff_gradient(
            lambda t: T.softmax_cross_entropy(M.forward(model, x), y), p
        ).data
        mask = np.abs(fd) > 1e-8
        if mask.any():
            err = (np.abs(p.grad - fd)[mask] / np.abs(fd)[mask]).max()
            assert err < 1e-4, name


def test_params_roundtrip_bitwise():
    model = M.init_model(tiny_cnn_spec(), seed=9)
    x = Tensor(np.random.default_rng(9).uniform(0, 1, (3, 1, 8, 8)))
    before = M.forward(model, x).data.copy()
    model.set_params(model.get_params())
    after = M.forward(model, x).data
    assert np.array_equal(before, after)


def test_interpolate_identities():
    model = M.init_model(tiny_cnn_spec(), seed=10)
    theta = model.get_params()
    direction = ParamVectorLike = theta.copy()
    direction.values = np.random.default_rng(10).standard_normal(len(theta)).astype(
        np.float32
    )
    zero = theta.copy()
    zero.values = np.zeros_like(theta.values)

    assert np.array_equal(M.interpolate(theta, direction, 0.0).values, theta.values)
    assert np.array_equal(M.interpolate(theta, zero, 1.0).values, theta.values)
    left = M.interpolate(theta, direction, -1.0).values
    right = M.interpolate(theta, direction, 1.0).values
    assert np.allclose((left + right) / 2, theta.values, atol=1e-6)


def test_interpolate_length_mismatch():
    a = M.init_model(tiny_cnn_spec(), seed=0).get_params()
    b = M.init_model(M.ModelSpec("mlp", (1, 2, 2), (), 2), seed=0).get_params()
    with pytest.raises(ValueError):
        M.interpolate(a, b, 0.5)


def test_checkpoint_roundtrip(tmp_path):
    model = M.init_model(tiny_cnn_spec(), seed=11)
    path = str(tmp_path / "m.ckpt")
    M.save_model(path, model, epoch=3, seed=11)
    loaded, meta = M.load_model(path)
    assert meta["epoch"] == 3
    assert meta["spec"] == model.spec.to_dict()
    assert np.array_equal(loaded.get_params().values, model.get_params().values)


def test_checkpoint_rejects_bad_magic(tmp_path):
    model = M.init_model(tiny_cnn_spec(), seed=0)
    path = str(tmp_path / "m.ckpt")
    M.save_model(path, model)
    raw = bytearray(open(path, "rb").read())
    raw[7] = ord("9")  # version byte
    open(path, "wb").write(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        M.load_model(path)


def test_container_preserves_extra_arrays(tmp_path):
    path = str(tmp_path / "c.ckpt")
    arrays = {
        "params": np.arange(5, dtype=np.float32),
        "momentum": np.ones(5, dtype=np.float32),
        "labels": np.array([1, 2, 3], dtype=np.int64),
    }
    M.write_container(path, {"epoch": 1}, arrays)
    meta, back = M.read_container(path)
    assert meta["epoch"] == 1
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype
