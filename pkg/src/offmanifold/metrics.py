"""On/off-manifold sensitivity and gradient-alignment measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import models
from .models import ClassSelector, Model
from .worlds import MaskProjector, Projector

RATIO_CAP = 1e6
_CHUNK = 20000


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SensitivityEstimate:
    mean: float
    stderr: float
    n_samples: int
    mode: str  # "raw-projection" or "norm-matched"
    scale: float  # sigma for raw noise, L2 radius for norm-matched


@dataclass(frozen=True)
class Rho1Estimate:
    rho1: float
    stderr: float
    rho1_norm_matched: float
    stderr_norm_matched: float
    off: SensitivityEstimate
    total: SensitivityEstimate
    sigma: float
    n: int


@dataclass(frozen=True)
class AlignmentRecord:
    rho1: float
    rho2: float
    cosine: float


def _fsum_mean(v: np.ndarray) -> float:
    return math.fsum(v.tolist()) / len(v)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    m = _fsum_mean(v)
    if len(v) < 2:
        return m, 0.0
    var = math.fsum(((v - m) ** 2).tolist()) / (len(v) - 1)
    return m, math.sqrt(var / len(v))


def _vector_fn(model, output: str) -> Callable[[np.ndarray], np.ndarray]:
    """Batch function x (n, d) -> outputs (n, C)."""
    if isinstance(model, Model):
        if output == "probs":
            return lambda x: models.probs(model, x)
        if output == "logits":
            return lambda x: models.logits(model, x)
        raise ValueError(f"unknown output '{output}'")
    return model


def _scalar_fn(model, x: np.ndarray, sel: ClassSelector) -> Callable[[np.ndarray], np.ndarray]:
    """Selected pre-softmax logit (or class sum), with 'predicted' resolved at x."""
    if not isinstance(model, Model):
        return model
    z0 = models.logits(model, x.reshape(1, -1))
    mask = models.selector_mask(sel, z0)[0]
    return lambda xs: models.logits(model, xs) @ mask


def _chunked(fn, xs: np.ndarray) -> np.ndarray:
    return np.concatenate([fn(xs[i:i + _CHUNK]) for i in range(0, len(xs), _CHUNK)])


def output_change(model, x, u, sel: ClassSelector | None = None, output: str = "probs"):
    """||f(x+u) - f(x)||_2 over the output vector, or (f(x+u) - f(x))^2 for a scalar selector.

    ``u`` may be a single perturbation or a batch (n, d).
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    u2 = u.reshape(1, -1) if single else u
    if u2.shape[1] != x.shape[-1]:
        raise ValueError("perturbation dimension does not match input")
    if sel is None:
        f = _vector_fn(model, output)
        base = f(x.reshape(1, -1))
        out = np.linalg.norm(_chunked(f, x + u2) - base, axis=1)
    else:
        f = _scalar_fn(model, x, sel)
        base = f(x.reshape(1, -1))
        out = (_chunked(f, x + u2) - base) ** 2
    return float(out[0]) if single else out


def _ratio_se(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """Ratio of means and its delta-method standard error."""
    n = len(num)
    mn, md = _fsum_mean(num), _fsum_mean(den)
    r = mn / md
    c = np.cov(np.vstack([num, den]), ddof=1)
    var = (c[0, 0] - 2 * r * c[0, 1] + r * r * c[1, 1]) / (md * md * n)
    return r, math.sqrt(max(var, 0.0))


def rho1(model, x, P: Projector, sigma: float, n: int = 10_000, seed: int = 0,
         sel: ClassSelector = "predicted") -> Rho1Estimate:
    """Monte Carlo relative off-manifold robustness of a scalar output at x.

    Raw mode uses u_off = P_perp u with u ~ N(0, sigma^2 I); norm-matched mode
    rescales each u_off to ||u||. Both share the same draws.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n < 100:
        raise ValueError("n must be >= 100")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    u = sigma * rng.standard_normal((n, x.size))
    u_off = P.off(u)
    den = output_change(model, x, u, sel=sel)
    num = output_change(model, x, u_off, sel=sel)
    md, sd = _mean_se(den)
    if not md > 10 * sd:
        raise MetricError(f"ill-conditioned ratio: denominator {md:.3e} within 10 standard errors ({sd:.3e})")
    r, se = _ratio_se(num, den)
    off_norm = np.linalg.norm(u_off, axis=1)
    if np.all(off_norm == 0):
        r_nm, se_nm = 0.0, 0.0
    else:
        scale = np.divide(np.linalg.norm(u, axis=1), off_norm, out=np.zeros(n), where=off_norm > 0)
        num_nm = output_change(model, x, u_off * scale[:, None], sel=sel)
        r_nm, se_nm = _ratio_se(num_nm, den)
    off_mean, off_se = _mean_se(num)
    return Rho1Estimate(r, se, r_nm, se_nm,
                        SensitivityEstimate(off_mean, off_se, n, "raw-projection", sigma),
                        SensitivityEstimate(md, sd, n, "raw-projection", sigma), sigma, n)


def rho2(model, x, P: Projector, sel: ClassSelector = "predicted", gradient: np.ndarray | None = None) -> float:
    """Fraction of the squared input-gradient norm that lies off the tangent space."""
    g = gradient if gradient is not None else models.input_gradient(model, x, sel)
    g = np.asarray(g, dtype=np.float64)
    total = float(g @ g)
    if total == 0:
        raise MetricError("undefined alignment: zero gradient")
    off = g - P.on(g)
    return float(off @ off) / total


@dataclass(frozen=True)
class Prop1Row:
    sigma: float
    rho1: float
    stderr: float
    rho2: float

    @property
    def gap(self) -> float:
        return abs(self.rho1 - self.rho2)


def verify_prop1(model, x, P: Projector, sigmas: Sequence[float], n: int = 100_000, seed: int = 0,
                 sel: ClassSelector = "predicted") -> list[Prop1Row]:
    """rho1 at each sigma (same seed for all) against the exact rho2."""
    sigmas = list(sigmas)
    if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigmas must be strictly decreasing")
    r2 = rho2(model, x, P, sel)
    return [Prop1Row(s, (e := rho1(model, x, P, s, n, seed, sel)).rho1, e.stderr, r2) for s in sigmas]


def prop1_holds(rows: Sequence[Prop1Row], rel_tol: float = 0.05, floor: float = 0.01) -> tuple[bool, bool]:
    """(gap non-increasing as sigma shrinks up to 2 SE, smallest-sigma gap within tolerance)."""
    monotone = all(b.gap <= a.gap + 2 * max(a.stderr, b.stderr) for a, b in zip(rows, rows[1:]))
    last = rows[-1]
    return monotone, last.gap < rel_tol * max(last.rho2, floor)


def on_off_sensitivity(model, xs, projectors, radius: float, n: int = 100, seed: int = 0,
                       output: str = "probs", norm_matched: bool = True):
    """Mean ||f(x+u) - f(x)|| for on- and off-manifold perturbations over points ``xs``.

    ``projectors`` is one Projector or one per point. Norm-matched mode draws
    u ~ N(0, I), projects, and rescales each part to L2 norm ``radius``; raw
    mode uses sigma = ``radius`` and keeps the projected norms.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    rng = np.random.default_rng(seed)
    f = _vector_fn(model, output)
    on_vals, off_vals = [], []
    for i, x in enumerate(xs):
        P = projectors if isinstance(projectors, (Projector, MaskProjector)) else projectors[i]
        u = rng.standard_normal((n, x.size))
        parts = []
        for part in (P.on(u), P.off(u)):
            if norm_matched:
                norms = np.linalg.norm(part, axis=1, keepdims=True)
                part = np.divide(part, norms, out=np.zeros_like(part), where=norms > 0) * radius
            else:
                part = part * radius
            parts.append(part)
        base = f(x.reshape(1, -1))
        on_vals.append(np.linalg.norm(f(x + parts[0]) - base, axis=1))
        off_vals.append(np.linalg.norm(f(x + parts[1]) - base, axis=1))
    mode = "norm-matched" if norm_matched else "raw-projection"
    out = []
    for vals in (np.concatenate(on_vals), np.concatenate(off_vals)):
        m, se = _mean_se(vals)
        out.append(SensitivityEstimate(m, se, len(vals), mode, radius))
    return out[0], out[1]


def relative_noise_robustness(model, images, signal_masks, sigma: float, n: int = 10, seed: int = 0,
                              output: str = "probs") -> float:
    """Mean output change under distractor-only noise over that under signal-only noise.

    Values below one mean the model is more robust to noise on the distractor.
    Signal-blind models return ``RATIO_CAP``.
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    masks = np.atleast_2d(np.asarray(signal_masks, dtype=bool))
    f = _vector_fn(model, output)
    rng = np.random.default_rng(seed)
    base = np.repeat(f(images), n, axis=0)
    tiled = np.repeat(images, n, axis=0)
    tmask = np.repeat(masks, n, axis=0)
    noise = sigma * rng.standard_normal(tiled.shape)
    sig = np.linalg.norm(_chunked(f, tiled + noise * tmask) - base, axis=1)
    dis = np.linalg.norm(_chunked(f, tiled + noise * ~tmask) - base, axis=1)
    s, d = _fsum_mean(sig), _fsum_mean(dis)
    if s == 0:
        if d == 0:
            raise MetricError("degenerate model: no sensitivity to signal or distractor noise")
        return RATIO_CAP
    return min(d / s, RATIO_CAP)


def cosine(a, b) -> np.ndarray | float:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise MetricError("undefined cosine: zero vector")
    c = np.clip(np.sum(a * b, axis=1) / (na * nb), -1.0, 1.0)
    return float(c[0]) if len(c) == 1 else c


def gradient_score_alignment(model, oracle: Callable[[np.ndarray], np.ndarray], x,
                             sel: ClassSelector = "predicted"):
    """Cosine between the model's input gradient and an oracle gradient/score at x."""
    g = model(x) if not isinstance(model, Model) else models.input_gradient(model, x, sel)
    return cosine(g, oracle(x))


def alignment_record(model, x, P: Projector, oracle, sigma: float = 1e-3, n: int = 10_000,
                     seed: int = 0, sel: ClassSelector = "predicted") -> AlignmentRecord:
    r1 = rho1(model, x, P, sigma, n, seed, sel).rho1
    return AlignmentRecord(r1, rho2(model, x, P, sel), gradient_score_alignment(model, oracle, x, sel))
