import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offmanifold import worlds
from offmanifold.worlds import (CurvedWorld, Dataset, LinearSubspaceWorld, OracleError, Projector,
                                SignalDistractorWorld)


def two_gaussians(mu, priors=(0.5, 0.5)):
    mu = np.asarray(mu, dtype=float)
    d = len(mu)
    return LinearSubspaceWorld(np.eye(d), [mu, -mu], np.eye(d), list(priors), smoothing=0.0)


def _central(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_subspace_samples_lie_on_span():
    rng = np.random.default_rng(0)
    B = np.linalg.qr(rng.standard_normal((3, 2)))[0]
    w = LinearSubspaceWorld(B, [[1.0, 0.0], [-1.0, 0.0]], np.eye(2), [0.5, 0.5])
    x = w.sample(100, 3).x
    assert np.abs(x - x @ B @ B.T).max() < 1e-10


def test_label_frequencies_match_priors():
    w = LinearSubspaceWorld(np.eye(2), [[1.0, 0], [-1.0, 0]], np.eye(2), [0.3, 0.7])
    n = 20000
    y = w.sample(n, 1).y
    p = 0.3
    assert abs(np.mean(y == 0) - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_sampling_is_seeded():
    w = worlds.subspace_2of8()
    a, b = w.sample(50, 7), w.sample(50, 7)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_distractor_block_is_label_independent():
    w = worlds.signal_distractor_4_4()
    data = w.sample(4000, 2)
    d = data.x[:, ~w.mask]
    # class-conditional distractor means agree within sampling error
    m0, m1 = d[data.y == 0].mean(axis=0), d[data.y == 1].mean(axis=0)
    se = np.sqrt(d.var(axis=0) * (1 / np.sum(data.y == 0) + 1 / np.sum(data.y == 1)))
    assert np.all(np.abs(m0 - m1) < 4 * se)
    # permuting the distractor block keeps a valid sample from the same world
    perm = np.random.default_rng(0).permutation(len(data))
    shuffled = data.x.copy()
    shuffled[:, ~w.mask] = d[perm]
    np.testing.assert_allclose(np.sort(shuffled[:, ~w.mask], axis=0), np.sort(d, axis=0))


def test_axis_projector_example():
    P = Projector.from_basis(np.array([[1.0, 0], [0, 1], [0, 0]]))
    u = np.ones(3)
    np.testing.assert_allclose(P.on(u), [1, 1, 0])
    np.testing.assert_allclose(P.off(u), [0, 0, 1])


def test_full_rank_projector_is_identity():
    B = np.linalg.qr(np.random.default_rng(1).standard_normal((4, 4)))[0]
    P = Projector.from_basis(B)
    np.testing.assert_allclose(P.matrix, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(P.perp, 0, atol=1e-12)


def test_rank_deficient_basis():
    with pytest.raises(OracleError):
        Projector.from_basis(np.array([[1.0, 2.0], [2.0, 4.0]]))


def _circle_world():
    def embed(t):
        t = float(np.ravel(t)[0])
        return np.array([np.cos(t), np.sin(t)])

    def jac(t):
        t = float(np.ravel(t)[0])
        return np.array([[-np.sin(t)], [np.cos(t)]])

    return CurvedWorld(embed, jac, np.array([[0.0], [np.pi]]), np.array([[0.5], [0.5]]),
                       np.array([0.5, 0.5]), dim=2, k=1, latent_period=2 * np.pi)


def test_circle_tangent_at_zero():
    w = _circle_world()
    P = w.tangent_projector(np.array([1.0, 0.0]), latent=[0.0])
    np.testing.assert_allclose(P.matrix, [[0, 0], [0, 1]], atol=1e-12)
    # same direction from a finite-difference Jacobian
    fd = (w.embed(1e-6) - w.embed(-1e-6)) / 2e-6
    np.testing.assert_allclose(Projector.from_basis(fd[:, None]).matrix, P.matrix, atol=1e-9)


@pytest.mark.parametrize("name", sorted(worlds.PRESETS))
def test_projector_invariants_on_every_world(name):
    w = worlds.preset(name)
    data = w.sample(30, 4)
    for i, x in enumerate(data.x):
        lat = None if data.latent is None else data.latent[i]
        P = worlds.tangent_projector(w, x, lat)
        M = P.matrix
        assert np.abs(M @ M - M).max() < 1e-10
        assert np.abs(M - M.T).max() < 1e-10
        assert abs(np.trace(M) - w.k if hasattr(w, "k") else 0) < 1e-10 or name.startswith("signal")
        assert P.rank == (w.k if hasattr(w, "k") else int(w.mask.sum()))


def test_posterior_symmetric_point():
    w = two_gaussians([1.0, 0.0])
    np.testing.assert_allclose(w.bayes_posterior(np.zeros(2)), [0.5, 0.5], atol=1e-15)


def test_posterior_sigmoid_closed_form():
    w = two_gaussians([1.0, 0.0])
    p = w.bayes_posterior(np.array([1.0, 0.0]))
    assert p[0] == pytest.approx(1 / (1 + np.exp(-2.0)), abs=1e-12)
    assert p[0] == pytest.approx(0.8808, abs=1e-4)


def test_degenerate_prior():
    w = two_gaussians([1.0, 0.0], priors=(1.0, 0.0))
    x = np.random.default_rng(0).standard_normal((10, 2))
    np.testing.assert_allclose(w.bayes_posterior(x), np.tile([1.0, 0.0], (10, 1)))


def test_zero_smoothing_off_manifold_raises():
    w = worlds.subspace_2of8(smoothing=0.0)
    P = w.tangent_projector()
    x = P.off(np.ones(8)) * 5
    with pytest.raises(OracleError):
        w.bayes_posterior(x)


def test_distractor_gradient_example():
    w = SignalDistractorWorld([[1.0, 0.0], [-1.0, 0.0]], np.eye(2), np.zeros(1), np.eye(1), [0.5, 0.5],
                              smoothing=0.0)
    g = w.bayes_input_gradient(np.zeros(3), 0)
    np.testing.assert_allclose(g, [0.5, 0.0, 0.0], atol=1e-15)
    fd = _central(lambda v: w.bayes_posterior(v)[0], np.zeros(3))
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_subspace_gradient_lies_on_span():
    w = worlds.subspace_2of8()
    P = w.tangent_projector()
    for x in w.sample(20, 5).x + np.random.default_rng(0).standard_normal((20, 8)):
        g = w.bayes_input_gradient(x, 0)
        assert np.linalg.norm(P.off(g)) / np.linalg.norm(g) < 1e-10
        fd = _central(lambda v: w.bayes_posterior(v)[0], x, h=1e-3)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)


def test_class_independent_world_has_zero_gradient():
    w = LinearSubspaceWorld(np.eye(3), [[1.0, 2.0, 0.0], [1.0, 2.0, 0.0]], np.eye(3), [0.4, 0.6])
    assert np.all(w.bayes_input_gradient(np.array([0.3, -1.0, 2.0]), 1) == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_posterior_gradients_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    w = worlds.signal_distractor_4_4()
    x = rng.standard_normal(8) * 2
    total = sum(w.bayes_input_gradient(x, c) for c in range(w.n_classes))
    assert np.abs(total).max() < 1e-10
    assert np.abs(w.bayes_input_gradient(x, 0)[~w.mask]).max() < 1e-10


def test_clean_standard_normal_denoiser_and_score():
    w = LinearSubspaceWorld(np.eye(2), [[0.0, 0.0]], np.eye(2), [1.0], smoothing=0.0)
    x = np.array([2.0, 0.0])
    np.testing.assert_allclose(w.optimal_denoiser(x, 1.0), [1.0, 0.0], atol=1e-14)
    np.testing.assert_allclose(w.score(x, None, 1.0), [-1.0, 0.0], atol=1e-14)


def test_denoiser_large_sigma_gives_prior_mean():
    for w in (worlds.subspace_2of8(), worlds.signal_distractor_4_4()):
        x = w.sample(3, 0).x
        np.testing.assert_allclose(w.optimal_denoiser(x, 1e6), np.tile(w.prior_mean(), (3, 1)), atol=1e-4)


def test_denoiser_rejects_nonpositive_sigma():
    w = worlds.subspace_2of8()
    with pytest.raises(ValueError):
        w.optimal_denoiser(np.zeros(8), 0.0)
    with pytest.raises(ValueError):
        w.score(np.zeros(8), 0, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 5.0))
def test_denoiser_score_identity(seed, sigma):
    w = worlds.signal_distractor_4_4()
    x = np.random.default_rng(seed).standard_normal(8) * 2
    for cls in (None, 0, 1):
        resid = (w.optimal_denoiser(x, sigma, cls) - x) / sigma**2 - w.score(x, cls, sigma)
        assert np.abs(resid).max() < 1e-8


def test_dataset_csv_round_trip(tmp_path):
    d = worlds.subspace_2of8().sample(5, 0)
    d.to_csv(tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == ",".join([f"x_{i}" for i in range(8)] + ["label"])
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.x, d.x) and np.array_equal(back.y, d.y)


def test_unknown_preset():
    with pytest.raises(ValueError, match="unknown world preset"):
        worlds.preset("torus")
