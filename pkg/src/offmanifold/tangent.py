"""Tangent-space estimation from data with autoencoders."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .container import Reader, Writer
from .models import Model
from .worlds import OracleError, Projector


@dataclass(frozen=True)
class LinearAutoencoder:
    encoder: np.ndarray  # (k, d)
    decoder: np.ndarray  # (d, k)
    mean: np.ndarray  # (d,)

    @property
    def k(self) -> int:
        return self.encoder.shape[0]

    def encode(self, x):
        return (np.asarray(x) - self.mean) @ self.encoder.T

    def decode(self, z):
        return np.asarray(z) @ self.decoder.T + self.mean

    def reconstruct(self, x):
        return self.decode(self.encode(x))


def fit(x: np.ndarray, k: int) -> LinearAutoencoder:
    """Least-squares linear autoencoder: the top-k principal subspace."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if k > d:
        raise ValueError(f"latent dimension k={k} exceeds input dimension {d}")
    if n <= k:
        raise ValueError("need more samples than latent dimensions")
    mean = x.mean(axis=0)
    xc = x - mean
    w, v = np.linalg.eigh(xc.T @ xc / n)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    rank = int(np.sum(w > 1e-12 * max(w[0], 1e-300)))
    if rank < k:
        warnings.warn(f"covariance rank {rank} is below k={k}; extra directions are arbitrary", RuntimeWarning)
    basis = v[:, :k]
    return LinearAutoencoder(basis.T.copy(), basis.copy(), mean)


def estimated_projector(ae, x=None) -> Projector:
    """Projector onto the decoder's column space (its Jacobian at the encoding of x)."""
    if isinstance(ae, LinearAutoencoder):
        D = ae.decoder
    else:
        D = ae.decoder_jacobian(x)
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise OracleError("rank-deficient decoder")
    return Projector(D @ np.linalg.solve(D.T @ D, D.T))


def projector_error(p_hat: Projector, p_true: Projector) -> float:
    if p_hat.dim != p_true.dim:
        raise ValueError("projector dimensions differ")
    return float(np.linalg.norm(p_hat.matrix - p_true.matrix, "fro"))


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between the column spans of a and b."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))


@dataclass
class MlpAutoencoder:
    """Nonlinear autoencoder; the tangent at x is spanned by the decoder Jacobian at enc(x)."""

    encoder: Model
    decoder: Model

    @property
    def k(self) -> int:
        return self.encoder.n_classes

    def encode(self, x):
        return models.logits(self.encoder, x)

    def reconstruct(self, x):
        return models.logits(self.decoder, self.encode(x))

    def decoder_jacobian(self, x) -> np.ndarray:
        z = self.encode(np.asarray(x, dtype=np.float64).reshape(1, -1))
        d = self.decoder.n_classes
        rows = [models.input_gradient(self.decoder, z[0], sel=i) for i in range(d)]
        return np.array(rows)  # (d, k)


def fit_mlp(x: np.ndarray, k: int, hidden: int = 32, epochs: int = 200, lr: float = 0.01,
            batch_size: int = 64, seed: int = 0, activation: str = "tanh") -> MlpAutoencoder:
    """Train encoder/decoder MLPs on mean squared reconstruction error with SGD + momentum."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    enc = models.init([d, hidden, k], activation, seed=seed)
    dec = models.init([k, hidden, d], activation, seed=seed + 1)
    params = enc.params() + dec.params()
    vel = [np.zeros_like(p) for p in params]
    ne = len(enc.params())
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = x[order[start:start + batch_size]]
            ts = [ad.Tensor(p, requires_grad=True) for p in params]
            z = models.apply(ts[:ne], ad.Tensor(xb), activation)
            rec = models.apply(ts[ne:], z, activation)
            loss = ad.mul(ad.sumsq(ad.sub(rec, ad.Tensor(xb))), 1.0 / len(xb))
            grads = ad.grad(loss, ts)
            for p, v, g in zip(params, vel, grads):
                v *= 0.9
                v += g.data
                p -= lr * v
    return MlpAutoencoder(enc.with_params(params[:ne]), dec.with_params(params[ne:]))


def save(ae: LinearAutoencoder, path) -> None:
    w = Writer("linear-autoencoder")
    w.u32(ae.encoder.shape[1], ae.k)
    w.array(ae.encoder)
    w.array(ae.decoder)
    w.array(ae.mean)
    Path(path).write_bytes(w.getvalue())


def load(path) -> LinearAutoencoder:
    r = Reader(Path(path).read_bytes(), expect_tag="linear-autoencoder")
    d, k = r.u32(2)
    enc, dec, mean = r.array(), r.array(), r.array()
    r.done()
    if enc.shape != (k, d) or dec.shape != (d, k) or mean.shape != (d,):
        raise ValueError("MRL1 autoencoder section has inconsistent shapes")
    return LinearAutoencoder(enc, dec, mean)
