"""Synthetic data worlds with exact manifold structure and closed-form oracles.

Gaussian worlds (``LinearSubspaceWorld``, ``SignalDistractorWorld``) are
class-conditional Gaussian mixtures in the ambient space, possibly with
singular covariances. Off the data manifold, Bayes quantities are evaluated
under the Gaussian-smoothed density with variance ``smoothing**2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class Projector:
    """Orthogonal projector onto a tangent (sub)space."""

    matrix: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.matrix, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError("projector must be a square matrix")
        object.__setattr__(self, "matrix", p)

    @classmethod
    def from_basis(cls, basis: np.ndarray, rcond: float = 1e-10) -> "Projector":
        """Projector onto the column span of ``basis`` (columns need not be orthonormal)."""
        basis = np.asarray(basis, dtype=np.float64)
        if basis.size == 0 or basis.shape[1] == 0:
            return cls(np.zeros((basis.shape[0], basis.shape[0])))
        u, s, _ = np.linalg.svd(basis, full_matrices=False)
        if s.min() <= rcond * max(s.max(), 1.0):
            raise OracleError("rank-deficient basis")
        return cls(u @ u.T)

    @classmethod
    def identity(cls, d: int) -> "Projector":
        return cls(np.eye(d))

    @classmethod
    def zero(cls, d: int) -> "Projector":
        return cls(np.zeros((d, d)))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def rank(self) -> int:
        return int(round(np.trace(self.matrix)))

    @property
    def perp(self) -> np.ndarray:
        return np.eye(self.dim) - self.matrix

    def on(self, u: np.ndarray) -> np.ndarray:
        return u @ self.matrix.T

    def off(self, u: np.ndarray) -> np.ndarray:
        return u - self.on(u)

    def check(self, tol: float = 1e-10) -> None:
        p = self.matrix
        if np.abs(p @ p - p).max() > tol:
            raise OracleError("projector is not idempotent")
        if np.abs(p - p.T).max() > tol:
            raise OracleError("projector is not symmetric")


@dataclass(frozen=True)
class MaskProjector:
    """Coordinate projector diag(mask), applied without forming the d x d matrix."""

    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool).reshape(-1))

    @property
    def dim(self) -> int:
        return self.mask.size

    @property
    def rank(self) -> int:
        return int(self.mask.sum())

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.mask.astype(np.float64))

    def on(self, u: np.ndarray) -> np.ndarray:
        return u * self.mask

    def off(self, u: np.ndarray) -> np.ndarray:
        return u * ~self.mask


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    latent: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        lat = None if self.latent is None else self.latent[idx]
        return Dataset(self.x[idx], self.y[idx], lat)

    def to_csv(self, path) -> None:
        d = self.x.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i}" for i in range(d)] + ["label"])
            for row, label in zip(self.x, self.y):
                w.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[-1] != "label" or any(h != f"x_{i}" for i, h in enumerate(header[:-1])):
            raise ValueError("unexpected dataset CSV header")
        x = np.array([[float(v) for v in r[:-1]] for r in body])
        y = np.array([int(r[-1]) for r in body])
        return cls(x, y)


def _random_orthonormal(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))


class GaussianWorld:
    """Classes are mixtures of (possibly degenerate) Gaussians in R^d.

    Subclasses set ``means`` (M, d), ``covs`` (M, d, d), ``comp_class`` (M,),
    ``comp_weight`` (M,; sums to 1 within each class) and ``priors`` (C,).
    """

    means: np.ndarray
    covs: np.ndarray
    comp_class: np.ndarray
    comp_weight: np.ndarray
    priors: np.ndarray
    smoothing: float = 0.05
    noise: float = 0.0

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.priors)

    def _check(self):
        if abs(self.priors.sum() - 1) > 1e-12 or np.any(self.priors < 0):
            raise ValueError("class priors must be a probability vector")
        for c in range(self.n_classes):
            if np.any(self.comp_class == c) and abs(self.comp_weight[self.comp_class == c].sum() - 1) > 1e-12:
                raise ValueError("component weights must sum to one within each class")

    def sample(self, n: int, seed: int) -> Dataset:
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        y = rng.choice(self.n_classes, size=n, p=self.priors)
        x = np.empty((n, self.dim))
        comps = np.empty(n, dtype=int)
        for c in range(self.n_classes):
            idx = np.flatnonzero(y == c)
            members = np.flatnonzero(self.comp_class == c)
            comps[idx] = rng.choice(members, size=len(idx), p=self.comp_weight[members])
        for m in range(len(self.means)):
            idx = np.flatnonzero(comps == m)
            x[idx] = self._draw(m, len(idx), rng)
        if self.noise > 0:
            x = x + self.noise * rng.standard_normal(x.shape)
        return Dataset(x, y)

    def _draw(self, m: int, n: int, rng: np.random.Generator) -> np.ndarray:
        lam, v = self._eig(m)
        root = v * np.sqrt(lam)
        return self.means[m] + rng.standard_normal((n, self.dim)) @ root.T

    # mixture evaluation

    def _eig(self, m: int):
        """Eigenpairs of component m's covariance, with round-off negatives clipped to zero."""
        cache = self.__dict__.setdefault("_eig_cache", {})
        if m not in cache:
            lam, v = np.linalg.eigh(self.covs[m])
            lam = np.clip(lam, 0.0, None)
            lam[lam < 1e-12 * max(lam.max(), 1.0)] = 0.0
            cache[m] = (lam, v)
        return cache[m]

    def _components(self, x: np.ndarray, var: float):
        """Per-component log(prior * weight * density) and grad log density.

        Returns log_joint (n, M) and grads (n, M, d).
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, d = x.shape
        if d != self.dim:
            raise ValueError(f"point dimension {d} does not match world dimension {self.dim}")
        n_comp = len(self.means)
        logj = np.empty((n, n_comp))
        grads = np.empty((n, n_comp, d))
        for m in range(n_comp):
            lam, v = self._eig(m)
            w = lam + var
            if w.min() <= 1e-14 * max(w.max(), 1.0):
                raise OracleError("all class densities vanish off the manifold (zero smoothing)")
            r = x - self.means[m]
            proj = r @ v
            maha = np.sum(proj**2 / w, axis=1)
            logdet = np.sum(np.log(w))
            prior = self.priors[self.comp_class[m]] * self.comp_weight[m]
            with np.errstate(divide="ignore"):
                logj[:, m] = np.log(prior) - 0.5 * (maha + logdet + d * np.log(2 * np.pi))
            grads[:, m] = -(proj / w) @ v.T
        return logj, grads

    def _class_terms(self, x, var):
        logj, grads = self._components(x, var)
        C = self.n_classes
        log_class = np.full((logj.shape[0], C), -np.inf)
        class_grad = np.zeros((logj.shape[0], C, self.dim))
        for c in range(C):
            cols = np.flatnonzero(self.comp_class == c)
            if len(cols) == 0 or self.priors[c] == 0:
                continue
            lc = logsumexp(logj[:, cols], axis=1)
            log_class[:, c] = lc
            resp = np.exp(logj[:, cols] - lc[:, None])
            class_grad[:, c] = np.einsum("nm,nmd->nd", resp, grads[:, cols])
        return log_class, class_grad

    def bayes_posterior(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        log_class, _ = self._class_terms(x, self.smoothing**2)
        if np.any(np.all(np.isneginf(log_class), axis=1)):
            raise OracleError("all class densities vanish at x")
        p = softmax(log_class, axis=1)
        return p[0] if x.ndim == 1 else p

    def bayes_input_gradient(self, x, cls: int, log: bool = False) -> np.ndarray:
        """Gradient of p(y=cls|x) (or its log) with respect to x."""
        x = np.asarray(x, dtype=np.float64)
        if not 0 <= cls < self.n_classes:
            raise ValueError(f"class {cls} out of range")
        log_class, class_grad = self._class_terms(x, self.smoothing**2)
        p = softmax(log_class, axis=1)
        mean_grad = np.einsum("nc,ncd->nd", p, class_grad)
        g = class_grad[:, cls] - mean_grad
        if not log:
            g = p[:, cls:cls + 1] * g
        return g[0] if x.ndim == 1 else g

    def score(self, x, cls: int | None, sigma: float) -> np.ndarray:
        """grad_x log p(x | cls, sigma) of the sigma-noised clean data (marginal if cls is None)."""
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        x = np.asarray(x, dtype=np.float64)
        log_class, class_grad = self._class_terms(x, sigma**2)
        if cls is None:
            w = softmax(log_class, axis=1)
            g = np.einsum("nc,ncd->nd", w, class_grad)
        else:
            g = class_grad[:, cls]
        return g[0] if x.ndim == 1 else g

    def optimal_denoiser(self, x, sigma: float, cls: int | None = None) -> np.ndarray:
        """Posterior mean E[x0 | x0 + sigma * n = x]."""
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        x = np.asarray(x, dtype=np.float64)
        x2 = np.atleast_2d(x)
        logj, _ = self._components(x2, sigma**2)
        if cls is not None:
            logj = np.where(self.comp_class[None, :] == cls, logj, -np.inf)
        resp = softmax(logj, axis=1)
        out = np.zeros_like(x2)
        for m in range(len(self.means)):
            # cov (cov + s^2 I)^-1 in the eigenbasis of cov, which keeps small-sigma cases accurate
            lam, v = self._eig(m)
            gain = (v * (lam / (lam + sigma**2))) @ v.T
            out += resp[:, m:m + 1] * (self.means[m] + (x2 - self.means[m]) @ gain.T)
        return out[0] if x.ndim == 1 else out

    def prior_mean(self) -> np.ndarray:
        w = self.priors[self.comp_class] * self.comp_weight
        return w @ self.means


class LinearSubspaceWorld(GaussianWorld):
    """Latent Gaussian mixture on a k-dimensional linear subspace of R^d.

    ``latent_means`` has shape (M, k); ``comp_class`` assigns components to
    classes (defaults to one component per class). All components share
    ``latent_cov``.
    """

    def __init__(self, basis, latent_means, latent_cov, priors, comp_class=None,
                 comp_weight=None, smoothing: float = 0.05, noise: float = 0.0):
        self.basis = np.asarray(basis, dtype=np.float64)
        d, k = self.basis.shape
        if np.abs(self.basis.T @ self.basis - np.eye(k)).max() > 1e-12:
            raise ValueError("basis columns must be orthonormal")
        self.latent_means = np.atleast_2d(np.asarray(latent_means, dtype=np.float64))
        self.latent_cov = np.asarray(latent_cov, dtype=np.float64)
        self.priors = np.asarray(priors, dtype=np.float64)
        M = len(self.latent_means)
        self.comp_class = np.arange(M) if comp_class is None else np.asarray(comp_class)
        if comp_weight is None:
            counts = np.bincount(self.comp_class, minlength=len(self.priors))
            comp_weight = 1.0 / counts[self.comp_class]
        self.comp_weight = np.asarray(comp_weight, dtype=np.float64)
        self.means = self.latent_means @ self.basis.T
        self.covs = np.repeat((self.basis @ self.latent_cov @ self.basis.T)[None], M, axis=0)
        self.smoothing = smoothing
        self.noise = noise
        self._check()

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def tangent_projector(self, x=None) -> Projector:
        return Projector(self.basis @ self.basis.T)

    def _components(self, x, var):
        if var > 0:
            return super()._components(x, var)
        # zero smoothing: densities live on the subspace, evaluate in latent coordinates
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = x @ self.basis
        if np.abs(x - z @ self.basis.T).max() > 1e-8:
            raise OracleError("all class densities vanish: point is off the manifold")
        latent = _LatentView(self)
        logj, gz = latent._components(z, 0.0)
        return logj, gz @ self.basis.T


class _LatentView(GaussianWorld):
    def __init__(self, world: LinearSubspaceWorld):
        self.means = world.latent_means
        self.covs = np.repeat(world.latent_cov[None], len(world.latent_means), axis=0)
        self.comp_class = world.comp_class
        self.comp_weight = world.comp_weight
        self.priors = world.priors


class SignalDistractorWorld(GaussianWorld):
    """Signal block carries the label; the distractor block is class independent.

    ``signal_means`` has shape (M, s) with components assigned by ``comp_class``;
    the distractor block is N(distractor_mean, distractor_cov) for every class.
    """

    def __init__(self, signal_means, signal_cov, distractor_mean, distractor_cov, priors,
                 comp_class=None, comp_weight=None, smoothing: float = 0.05, noise: float = 0.0):
        sm = np.atleast_2d(np.asarray(signal_means, dtype=np.float64))
        M, s = sm.shape
        dm = np.asarray(distractor_mean, dtype=np.float64)
        t = len(dm)
        self.n_signal, self.n_distractor = s, t
        self.mask = np.concatenate([np.ones(s, dtype=bool), np.zeros(t, dtype=bool)])
        self.priors = np.asarray(priors, dtype=np.float64)
        self.comp_class = np.arange(M) if comp_class is None else np.asarray(comp_class)
        if comp_weight is None:
            counts = np.bincount(self.comp_class, minlength=len(self.priors))
            comp_weight = 1.0 / counts[self.comp_class]
        self.comp_weight = np.asarray(comp_weight, dtype=np.float64)
        self.signal_cov = np.asarray(signal_cov, dtype=np.float64)
        self.distractor_mean = dm
        self.distractor_cov = np.asarray(distractor_cov, dtype=np.float64)
        self.means = np.hstack([sm, np.repeat(dm[None], M, axis=0)])
        cov = np.zeros((s + t, s + t))
        cov[:s, :s] = self.signal_cov
        cov[s:, s:] = self.distractor_cov
        self.covs = np.repeat(cov[None], M, axis=0)
        self.smoothing = smoothing
        self.noise = noise
        self._check()

    def sample(self, n: int, seed: int) -> Dataset:
        # the distractor block is drawn from its own stream without looking at labels
        data = super().sample(n, seed)
        rng = np.random.default_rng([seed, 1])
        w, v = np.linalg.eigh(self.distractor_cov)
        root = v * np.sqrt(np.clip(w, 0, None))
        data.x[:, ~self.mask] = self.distractor_mean + rng.standard_normal((n, self.n_distractor)) @ root.T
        if self.noise > 0:
            data.x[:, ~self.mask] += self.noise * rng.standard_normal((n, self.n_distractor))
        return data

    def tangent_projector(self, x=None) -> Projector:
        """Projector onto the signal coordinates (the signal manifold)."""
        return Projector(np.diag(self.mask.astype(float)))


@dataclass
class CurvedWorld:
    """Smooth embedding phi: R^k -> R^d of class-conditional latent Gaussians.

    Bayes quantities are evaluated in latent coordinates at the preimage of x,
    so they are only meaningful on (or very near) the manifold.
    """

    embed: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    latent_means: np.ndarray
    latent_std: np.ndarray
    priors: np.ndarray
    dim: int
    k: int
    noise: float = 0.0
    start_grid: np.ndarray | None = field(default=None, repr=False)
    latent_period: float | None = None

    @property
    def n_classes(self) -> int:
        return len(self.priors)

    def sample(self, n: int, seed: int) -> Dataset:
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        y = rng.choice(self.n_classes, size=n, p=self.priors)
        t = self.latent_means[y] + self.latent_std[y] * rng.standard_normal((n, self.k))
        x = np.array([self.embed(ti) for ti in t])
        if self.noise > 0:
            x = x + self.noise * rng.standard_normal(x.shape)
        return Dataset(x, y, latent=t)

    def preimage(self, x: np.ndarray, latent=None, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
        """Closest latent point by damped Gauss-Newton, started from ``latent``."""
        x = np.asarray(x, dtype=np.float64)
        if latent is None:
            grid = self.start_grid
            if grid is None:
                raise ValueError("a latent starting point is required")
            dists = [np.sum((self.embed(g) - x) ** 2) for g in grid]
            t = np.array(grid[int(np.argmin(dists))], dtype=np.float64)
        else:
            t = np.array(latent, dtype=np.float64).reshape(self.k)
        cost = np.sum((self.embed(t) - x) ** 2)
        for _ in range(max_iter):
            r = self.embed(t) - x
            J = self.jacobian(t)
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
            lam = 1.0
            while lam > 1e-8:
                cand = t + lam * step
                c2 = np.sum((self.embed(cand) - x) ** 2)
                if c2 <= cost:
                    break
                lam *= 0.5
            t, cost = cand, c2
            if np.linalg.norm(lam * step) < tol:
                break
        return t

    def tangent_projector(self, x, latent=None) -> Projector:
        t = self.preimage(x, latent)
        J = self.jacobian(t)
        if np.linalg.matrix_rank(J) < self.k:
            raise OracleError("rank-deficient Jacobian")
        return Projector(J @ np.linalg.solve(J.T @ J, J.T))

    def _latent_terms(self, t):
        diff = t[None, :] - self.latent_means
        if self.latent_period is not None:
            half = self.latent_period / 2
            diff = (diff + half) % self.latent_period - half
        z = diff / self.latent_std
        with np.errstate(divide="ignore"):
            logp = np.log(self.priors) - 0.5 * np.sum(z**2, axis=1) - np.sum(np.log(self.latent_std), axis=1)
        glog = -z / self.latent_std
        return logp, glog

    def bayes_posterior(self, x, latent=None) -> np.ndarray:
        logp, _ = self._latent_terms(self.preimage(x, latent))
        return softmax(logp)

    def bayes_input_gradient(self, x, cls: int, latent=None, log: bool = False) -> np.ndarray:
        t = self.preimage(x, latent)
        logp, glog = self._latent_terms(t)
        p = softmax(logp)
        gt = glog[cls] - p @ glog
        if not log:
            gt = p[cls] * gt
        J = self.jacobian(t)
        # derivative of the nearest-point map on the manifold: (J^T J)^-1 J^T
        return J @ np.linalg.solve(J.T @ J, gt)


# presets


def subspace_2of8(smoothing: float = 0.05, noise: float = 0.0, scale: float = 20.0,
                  separation: float = 0.6, corr: float = 0.8) -> LinearSubspaceWorld:
    """Two correlated latent Gaussians on a 2-plane in R^8.

    The correlation makes the Bayes direction differ from the mean difference.
    """
    rng = np.random.default_rng(20230817)
    basis = _random_orthonormal(8, 2, rng)
    cov = np.array([[1.0, corr], [corr, 1.0]]) * scale**2
    return LinearSubspaceWorld(basis, latent_means=[[separation * scale, 0.0], [-separation * scale, 0.0]],
                               latent_cov=cov, priors=[0.5, 0.5], smoothing=smoothing, noise=noise)


def signal_distractor_4_4(smoothing: float = 0.05, noise: float = 0.0) -> SignalDistractorWorld:
    rng = np.random.default_rng(20230818)
    a = rng.standard_normal((4, 4))
    dcov = a @ a.T / 4 + 0.25 * np.eye(4)
    return SignalDistractorWorld(signal_means=[[0.8, 0.4, 0.0, 0.0], [-0.8, -0.4, 0.0, 0.0]],
                                 signal_cov=np.diag([0.5, 0.5, 0.3, 0.3]),
                                 distractor_mean=np.zeros(4), distractor_cov=dcov,
                                 priors=[0.5, 0.5], smoothing=smoothing, noise=noise)


def circle_in_3d(noise: float = 0.0) -> CurvedWorld:
    rng = np.random.default_rng(20230819)
    frame = _random_orthonormal(3, 2, rng)

    def embed(t):
        t = np.asarray(t, dtype=np.float64).reshape(-1)[0]
        return frame @ np.array([np.cos(t), np.sin(t)])

    def jacobian(t):
        t = np.asarray(t, dtype=np.float64).reshape(-1)[0]
        return (frame @ np.array([-np.sin(t), np.cos(t)])).reshape(3, 1)

    return CurvedWorld(embed, jacobian, latent_means=np.array([[0.0], [np.pi]]),
                       latent_std=np.array([[0.7], [0.7]]), priors=np.array([0.5, 0.5]),
                       dim=3, k=1, noise=noise, latent_period=2 * np.pi,
                       start_grid=np.linspace(-np.pi, np.pi, 73)[:-1, None])


PRESETS: dict[str, Callable] = {
    "subspace-2of8": subspace_2of8,
    "signal-distractor-4+4": signal_distractor_4_4,
    "circle-in-3d": circle_in_3d,
}


def preset(name: str, **kwargs):
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown world preset '{name}' (choose from {sorted(PRESETS)})") from None


def sample(world, n: int, seed: int) -> Dataset:
    return world.sample(n, seed)


def tangent_projector(world, x=None, latent=None) -> Projector:
    if isinstance(world, CurvedWorld):
        return world.tangent_projector(x, latent)
    return world.tangent_projector(x)
