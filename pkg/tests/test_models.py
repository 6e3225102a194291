import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offmanifold import autodiff as ad
from offmanifold import models
from offmanifold.container import ContainerError


def _central(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_linear_parameter_count():
    m = models.init([3, 1], seed=4)
    assert m.weights[0].shape == (1, 3) and m.biases[0].shape == (1,)
    assert m.n_params == 4


def test_mlp_parameter_count():
    assert models.init([2, 8, 2], seed=0).n_params == 42


def test_same_seed_same_parameters():
    a, b = models.init([5, 7, 3], seed=11), models.init([5, 7, 3], seed=11)
    for p, q in zip(a.params(), b.params()):
        assert np.array_equal(p, q)
    c = models.init([5, 7, 3], seed=12)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_validation():
    with pytest.raises(ValueError):
        models.init([3])
    with pytest.raises(ValueError):
        models.init([3, 0, 2])
    with pytest.raises(ValueError):
        models.init([3, 2], "swish")


def test_probs_sum_to_one_and_match_softmax():
    m = models.init([4, 6, 5], "tanh", seed=1)
    x = np.random.default_rng(0).standard_normal((20, 4)) * 5
    p = models.probs(m, x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p, models.softmax(models.logits(m, x)), atol=0)


def test_linear_logit_is_w_dot_x():
    w = np.array([[1.5, -2.0, 0.25]])
    m = models.Model((w,), (np.zeros(1),), "identity")
    x = np.array([2.0, 1.0, 4.0])
    assert models.logits(m, x)[0] == pytest.approx(w[0] @ x)


def test_zero_logits_give_uniform_probs():
    m = models.Model((np.zeros((4, 3)),), (np.zeros(4),), "identity")
    np.testing.assert_allclose(models.probs(m, np.ones(3)), np.full(4, 0.25))


def test_dimension_mismatch():
    m = models.init([3, 2], seed=0)
    with pytest.raises(ValueError, match="dimension"):
        models.logits(m, np.ones(4))


def test_linear_input_gradient_is_weight_row_and_column_sum():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 5))
    m = models.Model((w,), (rng.standard_normal(3),), "identity")
    x = rng.standard_normal(5)
    np.testing.assert_allclose(models.input_gradient(m, x, 0), w[0], atol=1e-14)
    np.testing.assert_allclose(models.input_gradient(m, x, "sum"), w.sum(axis=0), atol=1e-14)


def test_invalid_class_index():
    m = models.init([3, 2], seed=0)
    with pytest.raises(ValueError, match="out of range"):
        models.input_gradient(m, np.ones(3), 2)
    with pytest.raises(ValueError):
        models.input_gradient(m, np.ones(3), "largest")


def test_input_gradients_match_finite_differences_50_pairs():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(50):
        act = ["softplus", "tanh", "identity"][i % 3]
        m = models.init([4, 6, 5, 3], act, seed=i)
        x = rng.standard_normal(4)
        c = int(rng.integers(3))
        g = models.input_gradient(m, x, c)
        fd = _central(lambda v: models.logits(m, v)[c], x)
        worst = max(worst, float(np.max(np.abs(g - fd) / (np.abs(fd) + 1e-12))))
    assert worst < 1e-5


def test_post_softmax_flag_differentiates_probabilities():
    m = models.init([3, 4, 2], seed=5)
    x = np.array([0.2, -0.4, 1.0])
    g = models.input_gradient(m, x, 1, post_softmax=True)
    np.testing.assert_allclose(g, _central(lambda v: models.probs(m, v)[1], x), atol=1e-9)


def test_input_gradient_is_differentiable_node():
    m = models.init([3, 4, 2], seed=6)
    ps = [ad.Tensor(p, requires_grad=True) for p in m.params()]
    g = models.input_gradient(m, np.ones((2, 3)), "predicted", params=ps, create_graph=True)
    # the output bias shifts every logit equally and never reaches the input gradient
    grads = ad.grad(ad.sumsq(g), ps[:-1])
    assert all(np.all(np.isfinite(q.data)) for q in grads)
    assert any(np.any(q.data != 0) for q in grads)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_argmax_of_probs_equals_argmax_of_logits(seed):
    rng = np.random.default_rng(seed)
    m = models.init([3, 5, 4], "softplus", seed=seed)
    x = rng.standard_normal((10, 3)) * 3
    assert np.array_equal(models.probs(m, x).argmax(axis=1), models.logits(m, x).argmax(axis=1))


@pytest.mark.parametrize("act", ["identity", "softplus", "tanh", "relu"])
def test_mrl1_round_trip_is_bit_exact(tmp_path, act):
    m = models.init([7, 5, 3], act, seed=9)
    path = tmp_path / "m.mrl"
    models.save(m, path)
    back = models.load(path)
    assert back.activation == act
    for p, q in zip(m.params(), back.params()):
        assert p.tobytes() == q.tobytes()
    models.save(back, tmp_path / "again.mrl")
    assert path.read_bytes() == (tmp_path / "again.mrl").read_bytes()


def test_mrl1_rejects_corruption(tmp_path):
    m = models.init([3, 2], seed=0)
    path = tmp_path / "m.mrl"
    models.save(m, path)
    data = path.read_bytes()
    (tmp_path / "bad.mrl").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ContainerError):
        models.load(tmp_path / "bad.mrl")
    (tmp_path / "short.mrl").write_bytes(data[:-3])
    with pytest.raises(ContainerError):
        models.load(tmp_path / "short.mrl")
