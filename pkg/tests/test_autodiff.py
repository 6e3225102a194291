import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offmanifold import autodiff as ad

A = np.diag([2.0, 1.0])


def quad(x):
    # 0.5 * x^T A x for a (2,) tensor
    xr = ad.reshape(x, (1, 2))
    return ad.mul(ad.tsum(ad.mul(xr, ad.matmul(xr, ad.Tensor(A)))), 0.5)


def test_square_value_and_gradient():
    x = ad.Tensor(3.0, requires_grad=True)
    y = ad.square(x)
    assert y.item() == 9.0
    assert ad.grad(y, x).item() == 6.0


def test_softplus_zero_is_ln2():
    assert ad.softplus(ad.Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-15)


def test_quadratic_value_and_gradient():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    f = quad(x)
    assert f.item() == pytest.approx(1.5)
    np.testing.assert_allclose(ad.grad(f, x).data, [2.0, 1.0])


def test_grad_of_grad_norm():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    g = ad.grad(quad(x), x, create_graph=True)
    pen = ad.sumsq(g)
    np.testing.assert_allclose(ad.grad(pen, x).data, [8.0, 2.0], atol=1e-12)


def test_grad_of_grad_matches_finite_differences():
    def pen(x):
        return ad.sumsq(ad.grad(quad(x), x, create_graph=True))

    assert ad.finite_diff_check(pen, np.array([1.0, 1.0])) < 1e-6


def test_finite_diff_check_examples():
    assert ad.finite_diff_check(ad.square, np.array(3.0)) < 1e-8
    w = ad.Tensor(np.array([0.5, -2.0, 1.5]))
    # central differences are exact on linear maps, so a wide step keeps roundoff out
    assert ad.finite_diff_check(lambda x: ad.tsum(ad.mul(x, w)), np.array([0.1, 2.0, -3.0]), h=0.5) < 1e-10
    M = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    norm_sq = lambda x: ad.sumsq(ad.matmul(ad.reshape(x, (1, 2)), ad.transpose(M)))
    assert ad.finite_diff_check(norm_sq, np.array([1.0, 1.0])) < 1e-6


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_check(ad.square, np.array(1.0), h=0.0)


def test_non_scalar_output_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.grad(ad.square(x), x)


def test_disconnected_input_rejected():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    y = ad.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="not connected"):
        ad.grad(ad.sumsq(x), y)


def test_non_finite_values_raise():
    with pytest.raises(FloatingPointError):
        ad.log(ad.Tensor(np.array([0.0, 1.0])))
    with pytest.raises(FloatingPointError):
        ad.div(ad.Tensor(1.0), ad.Tensor(0.0))


def test_forward_is_deterministic_and_checks_shapes():
    g = ad.Graph(quad, [(2,)])
    x = np.array([0.3, -1.7])
    assert ad.forward(g, x).item() == ad.forward(g, x).item()
    with pytest.raises(ValueError, match="shape"):
        ad.forward(g, np.ones(3))
    with pytest.raises(ValueError):
        ad.forward(g)


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.sumsq(x)
    assert not y.requires_grad
    assert ad.sumsq(x).requires_grad


_UNARY = {
    "exp": ad.exp, "sigmoid": ad.sigmoid, "softplus": ad.softplus, "tanh": ad.tanh,
    "square": ad.square, "neg": ad.neg,
    "log": lambda x: ad.log(ad.add(ad.square(x), 1.0)),
    "logsumexp": lambda x: ad.logsumexp(ad.reshape(x, (1, -1))),
    "softmax": lambda x: ad.mul(ad.softmax(x), ad.Tensor(np.arange(x.shape[0], dtype=float))),
    "log_softmax": lambda x: ad.mul(ad.log_softmax(x), ad.Tensor(np.linspace(-1, 1, x.shape[0]))),
    "div": lambda x: ad.div(x, ad.add(ad.square(x), 2.0)),
    "mean": lambda x: ad.square(ad.mean(x)),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_every_op_matches_central_differences(name):
    rng = np.random.default_rng(0)
    op = _UNARY[name]
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(4)
        worst = max(worst, ad.finite_diff_check(lambda t: ad.tsum(op(t)), x))
    assert worst < 1e-5


def test_matmul_broadcast_and_transpose_gradients():
    rng = np.random.default_rng(1)
    B = rng.standard_normal((3, 4))
    bias = rng.standard_normal(4)
    for _ in range(100):
        x = rng.standard_normal((2, 3))
        f = lambda t: ad.sumsq(ad.add(ad.matmul(t, ad.Tensor(B)), ad.Tensor(bias)))
        assert ad.finite_diff_check(f, x) < 1e-5
        g = lambda t: ad.tsum(ad.tanh(ad.matmul(ad.transpose(t), ad.Tensor(x))))
        assert ad.finite_diff_check(g, x) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_grad_is_linear(alpha, beta, seed):
    x0 = np.random.default_rng(seed).standard_normal(3)
    x = ad.Tensor(x0, requires_grad=True)
    f = lambda t: ad.tsum(ad.tanh(t))
    g = lambda t: ad.sumsq(ad.softplus(t))
    combo = ad.add(ad.mul(f(x), alpha), ad.mul(g(x), beta))
    lhs = ad.grad(combo, x).data
    rhs = alpha * ad.grad(f(x), x).data + beta * ad.grad(g(x), x).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_second_order_on_random_quadratics(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((4, 4))
    A = M + M.T
    x0 = rng.standard_normal(4)
    x = ad.Tensor(x0.reshape(1, 4), requires_grad=True)
    f = ad.mul(ad.tsum(ad.mul(x, ad.matmul(x, ad.Tensor(A)))), 0.5)
    pen = ad.sumsq(ad.grad(f, x, create_graph=True))
    np.testing.assert_allclose(ad.grad(pen, x).data[0], 2 * A.T @ A @ x0, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6), st.integers(0, 2**31 - 1))
def test_finite_diff_check_linear_any_point(x, seed):
    w = ad.Tensor(np.random.default_rng(seed).uniform(0.5, 2.0, len(x)))
    assert ad.finite_diff_check(lambda t: ad.tsum(ad.mul(t, w)), np.array(x), h=0.5) < 1e-10


def test_relu_second_derivative_is_zero():
    x = ad.Tensor(np.array([0.5, -0.5, 2.0]), requires_grad=True)
    g = ad.grad(ad.tsum(ad.square(ad.relu(x))), x, create_graph=True)
    # d/dx of relu' is zero almost everywhere, so only the square contributes
    np.testing.assert_allclose(ad.grad(ad.tsum(g), x).data, [2.0, 0.0, 2.0])
