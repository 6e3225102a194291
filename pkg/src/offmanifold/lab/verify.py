"""Self-checks of the theory against closed forms and finite differences."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .. import metrics, models, training, worlds
from .report import Check

SUITES = ("prop1", "prop2", "denoiser", "linear", "gradcheck")


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / (np.abs(b) + 1e-12)))


def _central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(seed: int = 0, n_pairs: int = 100) -> list[Check]:
    """Input and parameter gradients of random small MLPs against central differences."""
    rng = np.random.default_rng(seed)
    acts = ["softplus", "tanh", "identity"]
    worst_in, worst_par = 0.0, 0.0
    for _ in range(n_pairs):
        d, c = int(rng.integers(2, 6)), int(rng.integers(2, 4))
        hidden = [int(h) for h in rng.integers(3, 7, size=rng.integers(1, 3))]
        model = models.init([d, *hidden, c], acts[int(rng.integers(len(acts)))], seed=int(rng.integers(1 << 31)))
        x = rng.standard_normal(d)
        y = int(rng.integers(c))
        cls = int(rng.integers(c))

        g = models.input_gradient(model, x, sel=cls)
        fd = _central_diff(lambda v: models.logits(model, v)[cls], x)
        worst_in = max(worst_in, _rel_err(g, fd))

        ps = [ad.Tensor(p, requires_grad=True) for p in model.params()]
        loss = training.cross_entropy(models.apply(ps, ad.Tensor(x.reshape(1, -1)), model.activation), np.array([y]))
        grads = ad.grad(loss, ps)
        for k, p in enumerate(model.params()):
            def f(v, k=k):
                params = list(model.params())
                params[k] = v
                with ad.no_grad():
                    z = models.apply([ad.Tensor(q) for q in params], ad.Tensor(x.reshape(1, -1)), model.activation)
                    return training.cross_entropy(z, np.array([y])).item()
            worst_par = max(worst_par, _rel_err(grads[k].data, _central_diff(f, p)))

    # second order: d/dx ||grad f||^2 for f = x^T A x / 2 equals 2 A^T A x with A symmetric
    A = rng.standard_normal((5, 5))
    A = A + A.T
    worst_q = 0.0
    for _ in range(20):
        x = rng.standard_normal(5)
        At = ad.Tensor(A, requires_grad=True)
        xt = ad.Tensor(x.reshape(1, -1), requires_grad=True)
        f = ad.mul(ad.tsum(ad.mul(xt, ad.matmul(xt, At))), 0.5)
        gx = ad.grad(f, xt, create_graph=True)
        pen = ad.sumsq(gx)
        dx, dA = ad.grad(pen, [xt, At])
        Ax = A @ x
        worst_q = max(worst_q, float(np.max(np.abs(dx.data[0] - 2 * A @ Ax))))
        worst_q = max(worst_q, float(np.max(np.abs(dA.data - np.outer(Ax, x) - np.outer(x, Ax)))))
    return [
        Check(f"input gradients vs central differences ({n_pairs} pairs)", worst_in, "< 1e-5", worst_in < 1e-5),
        Check(f"parameter gradients vs central differences ({n_pairs} pairs)", worst_par, "< 1e-5", worst_par < 1e-5),
        Check("second-order penalty gradient on quadratics", worst_q, "< 1e-8", worst_q < 1e-8),
    ]


def denoiser(seed: int = 0, n: int = 200) -> list[Check]:
    """(D(x, sigma) - x) / sigma^2 against the closed-form score on Gaussian worlds."""
    rng = np.random.default_rng(seed)
    ws = [worlds.subspace_2of8(), worlds.signal_distractor_4_4(),
          worlds.LinearSubspaceWorld(np.eye(3), [[1.0, 0.0, 0.0], [-1.0, 0.5, 0.0]], np.eye(3), [0.3, 0.7])]
    worst = 0.0
    for i in range(n):
        w = ws[i % len(ws)]
        x = w.sample(1, int(rng.integers(1 << 31))).x[0] + rng.standard_normal(w.dim)
        sigma = float(np.exp(rng.uniform(np.log(0.05), np.log(5.0))))
        cls = None if i % 2 else int(rng.integers(w.n_classes))
        resid = (w.optimal_denoiser(x, sigma, cls) - x) / sigma**2 - w.score(x, cls, sigma)
        worst = max(worst, float(np.max(np.abs(resid))))
    return [Check(f"denoiser-score identity ({n} points)", worst, "< 1e-8", worst < 1e-8)]


def prop2(seed: int = 0, n: int = 100) -> list[Check]:
    """Bayes gradients have no distractor part and no off-subspace part."""
    rng = np.random.default_rng(seed)
    sd = worlds.signal_distractor_4_4()
    xs = sd.sample(n, seed).x + 0.5 * rng.standard_normal((n, sd.dim))
    worst_d, worst_sum = 0.0, 0.0
    for x in xs:
        gs = [sd.bayes_input_gradient(x, c) for c in range(sd.n_classes)]
        worst_d = max(worst_d, max(float(np.max(np.abs(g[~sd.mask]))) for g in gs))
        worst_sum = max(worst_sum, float(np.max(np.abs(np.sum(gs, axis=0)))))
    sub = worlds.subspace_2of8()
    P = sub.tangent_projector()
    xs = sub.sample(n, seed + 1).x + 0.5 * rng.standard_normal((n, sub.dim))
    worst_f = 0.0
    for x in xs:
        for c in range(sub.n_classes):
            g = sub.bayes_input_gradient(x, c)
            nrm = float(g @ g)
            if nrm > 0:
                off = P.off(g)
                worst_f = max(worst_f, float(off @ off) / nrm)
    return [
        Check(f"distractor block of Bayes gradients ({n} points)", worst_d, "< 1e-10", worst_d < 1e-10),
        Check("class posterior gradients sum to zero", worst_sum, "< 1e-10", worst_sum < 1e-10),
        Check(f"off-span fraction of Bayes gradients on the subspace world ({n} points)", worst_f, "< 1e-10",
              worst_f < 1e-10),
    ]


def ridge_closed_form(x: np.ndarray, t: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """argmin mean((x w + b - t)^2) + lam ||w||^2 with the bias unpenalized."""
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    reg = lam * np.eye(d + 1)
    reg[d, d] = 0.0
    sol = np.linalg.solve(xa.T @ xa / n + reg, xa.T @ t / n)
    return sol[:d], float(sol[d])


def linear(seed: int = 0, lam: float = 1e-2) -> list[Check]:
    """A weight-decayed linear model on subspace data keeps its weights on the subspace."""
    world = worlds.subspace_2of8(scale=1.0)
    data = world.sample(500, seed)
    P = world.tangent_projector()
    model = models.init([world.dim, 1], "identity", seed=seed)
    sched = training.Schedule(epochs=3000, batch_size=len(data), lr=0.1, seed=seed, weight_decay=lam)
    trained, _ = training.train(model, data, training.Mse(), sched)
    w, b = trained.weights[0][0], float(trained.biases[0][0])
    w_ref, b_ref = ridge_closed_form(data.x, 2.0 * data.y - 1.0, lam)
    off = float(np.linalg.norm(P.off(w)) / np.linalg.norm(w))
    diff = float(max(np.max(np.abs(w - w_ref)), abs(b - b_ref)))
    return [
        Check("off-subspace weight fraction ||P_perp w|| / ||w||", off, "< 1e-3", off < 1e-3),
        Check("distance to closed-form ridge solution (max abs)", diff, "< 1e-6", diff < 1e-6),
    ]


def trained_smooth_mlp(seed: int = 0) -> tuple[worlds.LinearSubspaceWorld, models.Model, np.ndarray]:
    world = worlds.subspace_2of8()
    data = world.sample(2000, 1)
    model = models.init([world.dim, 64, 64, 2], "softplus", seed=seed)
    sched = training.Schedule(epochs=10, batch_size=64, lr=0.02, decay_epochs=(8,), seed=seed)
    model, _ = training.train(model, data, training.CE(), sched)
    return world, model, world.sample(20, 2).x


def prop1(seed: int = 0, n: int = 100_000, sigmas=(1.0, 0.1, 0.01, 0.001)) -> list[Check]:
    """rho1 -> rho2 as sigma -> 0 on a trained MLP; equality at every sigma for a linear model."""
    world, model, xs = trained_smooth_mlp(seed)
    P = world.tangent_projector()
    worst_last, worst_mono = 0.0, -np.inf
    for i, x in enumerate(xs):
        rows = metrics.verify_prop1(model, x, P, sigmas, n=n, seed=seed + i)
        last = rows[-1]
        worst_last = max(worst_last, last.gap / max(last.rho2, 0.01))
        # positive values violate "gap non-increasing as sigma shrinks, up to 2 SE"
        worst_mono = max(worst_mono, max(b.gap - a.gap - 2 * max(a.stderr, b.stderr) for a, b in zip(rows, rows[1:])))

    lin = models.init([world.dim, 2], "identity", seed=seed)
    lin, _ = training.train(lin, world.sample(500, 3), training.CE(),
                            training.Schedule(epochs=5, batch_size=64, lr=0.001, seed=seed))
    worst_lin = 0.0
    for i, x in enumerate(xs[:5]):
        for r in metrics.verify_prop1(lin, x, P, sigmas, n=20_000, seed=seed + i):
            worst_lin = max(worst_lin, r.gap / max(r.stderr, 1e-300))
    return [
        Check("|rho1 - rho2| / max(rho2, 0.01) at the smallest sigma (20 points)", worst_last, "< 0.05",
              worst_last < 0.05),
        Check("largest increase of |rho1 - rho2| as sigma shrinks, beyond 2 SE", worst_mono, "<= 0",
              worst_mono <= 0),
        Check("linear model: |rho1 - rho2| in standard errors", worst_lin, "< 3", worst_lin < 3),
    ]


def run(suite: str, seed: int = 0) -> list[Check]:
    funcs = {"prop1": prop1, "prop2": prop2, "denoiser": denoiser, "linear": linear, "gradcheck": gradcheck}
    if suite not in funcs:
        raise ValueError(f"unknown suite '{suite}' (choose from {', '.join(SUITES)})")
    return funcs[suite](seed=seed)
