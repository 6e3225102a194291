"""Acceptance criteria 1-10, each reported as one PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

from offmanifold import metrics, mnist, models, tangent, worlds
from offmanifold.lab import cli, config, experiment, report, verify

from conftest import ACCEPTANCE_LINES


def _record(n, title, checks, elapsed, budget):
    ok = all(c.passed for c in checks) and elapsed < budget
    detail = "; ".join(f"{c.name}: {c.measured:.4g} ({c.bound})" for c in checks)
    line = f"{'PASS' if ok else 'FAIL'} criterion {n} ({title}, {elapsed:.0f}s of {budget:.0f}s): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    for c in checks:
        print("   ", c.line())
    return ok


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def test_criterion_1_gradient_correctness():
    checks, dt = _timed(lambda: verify.gradcheck(seed=0))
    assert _record(1, "gradient correctness", checks, dt, 60)


def test_criterion_2_rho1_small_sigma_limit():
    checks, dt = _timed(lambda: verify.prop1(seed=0))
    assert _record(2, "rho1 -> rho2 as sigma -> 0", checks, dt, 300)


def test_criterion_3_bayes_gradients_on_signal():
    checks, dt = _timed(lambda: verify.prop2(seed=0))
    assert _record(3, "Bayes gradients on the signal manifold", checks, dt, 60)


def test_criterion_4_denoiser_score_identity():
    checks, dt = _timed(lambda: verify.denoiser(seed=0))
    assert _record(4, "denoiser-score identity", checks, dt, 60)


def test_criterion_5_robust_linear_models():
    checks, dt = _timed(lambda: verify.linear(seed=0))
    assert _record(5, "weight-decayed linear model", checks, dt, 60)


@pytest.fixture(scope="module")
def fig2(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig2")
    cfg = config.load(preset="fig2-desk")
    t = time.perf_counter()
    rows = experiment.run_experiment(cfg, out, preset="fig2-desk")
    return rows, time.perf_counter() - t


def test_criterion_6_regularization_trends(fig2):
    rows, dt = fig2
    checks = report.trend_checks(rows, ["gradnorm", "smoothness", "randsmooth"])
    print(report.summary(rows))
    assert _record(6, "fig2-desk rank trends", checks, dt, 1800)


def test_criterion_8_alignment_proxy(fig2):
    rows, dt = fig2
    checks = report.alignment_checks(rows, "gradnorm", 0.1)
    assert _record(8, "Bayes-cosine rise and fall along GradNorm", checks, dt, 1800)


def test_criterion_7_mnist_distractor(mnist_idx, tmp_path):
    images, labels = mnist_idx
    path = tmp_path / "mnist.toml"
    path.write_text(f'[world]\nimages = "{images}"\nlabels = "{labels}"\n')
    out = tmp_path / "out"
    t = time.perf_counter()
    code = cli.main(["sweep", "--preset", "mnist-distractor", "--config", str(path), "--out", str(out)])
    dt = time.perf_counter() - t
    assert code == 0
    runs = {(r["objective"], r["param"]): r for r in json.loads((out / "report.json").read_text())["runs"]}
    std = runs["ce", 0.0]["extras"]["relative_noise_robustness"]
    pgd = runs["pgd", 4.0]["extras"]["relative_noise_robustness"]
    levels = sorted(std, key=float)
    print("sigma  standard  pgd(eps=4)")
    for s in levels:
        print(f"{s:>5}  {std[s]:.4f}    {pgd[s]:.4f}")
    worst_gap = max(pgd[s] - std[s] for s in levels)
    factor = std[levels[-1]] / pgd[levels[-1]]
    worst_std = max(std[s] for s in levels)
    checks = [
        report.Check("max over levels of pgd - standard ratio", worst_gap, "< 0", worst_gap < 0),
        report.Check(f"standard / pgd at sigma={levels[-1]}", factor, ">= 1.5", factor >= 1.5),
        report.Check("largest standard-model ratio", worst_std, "<= 1", worst_std <= 1),
    ]
    assert _record(7, "MNIST distractor relative noise robustness", checks, dt, 1200)


def test_criterion_9_tangent_estimation():
    def run():
        world, model, xs = verify.trained_smooth_mlp(0)
        P = world.tangent_projector()
        clean = tangent.fit(world.sample(1000, 5).x, 2)
        err_clean = tangent.projector_error(tangent.estimated_projector(clean), P)
        noisy_world = worlds.subspace_2of8(noise=0.01)
        P_hat = tangent.estimated_projector(tangent.fit(noisy_world.sample(1000, 6).x, 2))
        d1 = d2 = 0.0
        for i, x in enumerate(xs):
            a = metrics.rho1(model, x, P, 1e-3, 100_000, i).rho1
            b = metrics.rho1(model, x, P_hat, 1e-3, 100_000, i).rho1
            d1 = max(d1, abs(a - b))
            d2 = max(d2, abs(metrics.rho2(model, x, P) - metrics.rho2(model, x, P_hat)))
        return [
            report.Check("noiseless PCA projector error (Frobenius)", err_clean, "< 1e-6", err_clean < 1e-6),
            report.Check("max |rho1(P) - rho1(P_hat)| over 20 points", d1, "< 0.02", d1 < 0.02),
            report.Check("max |rho2(P) - rho2(P_hat)| over 20 points", d2, "< 0.02", d2 < 0.02),
        ]

    checks, dt = _timed(run)
    assert _record(9, "tangent-estimation fidelity", checks, dt, 120)


TINY = """
[world]
n_train = 300
n_test = 100

[model]
hidden = [16]

[schedule]
epochs = 3
decay_epochs = []

[grid]
seeds = [0, 1]
gradnorm = [0.0, 1.0]
smoothness = [1.0]

[objective.smoothness]
sigma = 1.0

[metrics]
n_points = 10
n_draws = 10
rho_n = 500
rho_points = 3
"""


def test_criterion_10_determinism_and_formats(mnist_idx, tmp_path):
    def run():
        cfg_path = tmp_path / "tiny.toml"
        cfg_path.write_text(TINY)
        outs = []
        for jobs in (1, 2, 4):
            out = tmp_path / f"jobs{jobs}"
            assert cli.main(["sweep", "--config", str(cfg_path), "--out", str(out), "--jobs", str(jobs)]) == 0
            outs.append((out / "report.csv").read_bytes())
        same = float(all(o == outs[0] for o in outs))

        m = models.init([8, 64, 64, 2], "softplus", seed=3)
        models.save(m, tmp_path / "m.mrl")
        back = models.load(tmp_path / "m.mrl")
        exact = float(all(p.tobytes() == q.tobytes() for p, q in zip(m.weights + m.biases, back.weights + back.biases))
                      and back.activation == m.activation)

        imgs = mnist.read_idx(mnist_idx[0])
        labs = mnist.read_idx(mnist_idx[1])
        accepted = float(imgs.magic == 0x803 and labs.magic == 0x801 and imgs.dims[1:] == (28, 28))
        raw = bytearray(mnist_idx[0].read_bytes())
        rejected = 0.0
        for bad in (b"\x00\x00\x09\x03", b"\x01\x00\x08\x03", b"\x00\x00\x08\x02"):
            raw[:4] = bad
            (tmp_path / "bad").write_bytes(bytes(raw))
            try:
                mnist.read_idx(tmp_path / "bad")
            except mnist.IdxError:
                rejected += 1
        return [
            report.Check("report.csv byte-identical for jobs 1, 2, 4", same, "= 1", same == 1),
            report.Check("MRL1 round-trip bit-exact", exact, "= 1", exact == 1),
            report.Check("IDX files accepted", accepted, "= 1", accepted == 1),
            report.Check("corrupted magics rejected (of 3)", rejected, "= 3", rejected == 3),
        ]

    checks, dt = _timed(run)
    assert _record(10, "determinism and formats", checks, dt, 120)
