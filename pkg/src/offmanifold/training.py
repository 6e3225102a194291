"""Robust training objectives, the l2 PGD attack, and SGD training loops."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import models
from .models import Model
from .worlds import Dataset

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class CE:
    name = "ce"

    @property
    def param(self) -> float:
        return 0.0


@dataclass(frozen=True)
class GradNorm:
    """Cross-entropy plus lam * squared norm of the input gradient of the true-class logit.

    ``sum_classes`` penalizes the gradient of the sum of logits instead.
    """

    lam: float
    sum_classes: bool = False
    name = "gradnorm"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    @property
    def param(self) -> float:
        return self.lam


@dataclass(frozen=True)
class Smoothness:
    """Cross-entropy plus lam * E||f(x + eps) - f(x)||^2 with eps ~ N(0, sigma^2 I).

    ``output`` selects whether f is the logit vector or the softmax output.
    """

    lam: float
    sigma: float
    n_noise: int = 1
    output: str = "logits"
    name = "smoothness"

    def __post_init__(self):
        if self.lam < 0 or self.sigma <= 0 or self.n_noise < 1:
            raise ValueError("need lam >= 0, sigma > 0, n_noise >= 1")
        if self.output not in ("logits", "probs"):
            raise ValueError("output must be 'logits' or 'probs'")

    @property
    def param(self) -> float:
        return self.lam


@dataclass(frozen=True)
class RandSmooth:
    """Cross-entropy on Gaussian-noised inputs."""

    sigma: float
    n_noise: int = 1
    name = "randsmooth"

    def __post_init__(self):
        if self.sigma <= 0 or self.n_noise < 1:
            raise ValueError("need sigma > 0, n_noise >= 1")

    @property
    def param(self) -> float:
        return self.sigma


@dataclass(frozen=True)
class Pgd:
    """Cross-entropy at the l2 PGD adversarial point. Default step size is 2.5 * eps / steps."""

    eps: float
    steps: int = 10
    step_size: float | None = None
    random_start: bool = False
    name = "pgd"

    def __post_init__(self):
        if self.eps < 0 or self.steps < 1:
            raise ValueError("need eps >= 0, steps >= 1")

    @property
    def alpha(self) -> float:
        return 2.5 * self.eps / self.steps if self.step_size is None else self.step_size

    @property
    def param(self) -> float:
        return self.eps


@dataclass(frozen=True)
class Mse:
    """Squared error of a single output against targets 2y - 1 (linear regression on labels)."""

    name = "mse"

    @property
    def param(self) -> float:
        return 0.0


Objective = Union[CE, GradNorm, Smoothness, RandSmooth, Pgd, Mse]


def make_objective(name: str, value: float = 0.0, **kw) -> Objective:
    """Build an objective from its name and swept hyperparameter."""
    name = name.lower()
    if name == "ce":
        return CE()
    if name == "gradnorm":
        return GradNorm(lam=value, **kw)
    if name == "smoothness":
        return Smoothness(lam=value, **kw)
    if name == "randsmooth":
        return RandSmooth(sigma=value, **kw)
    if name == "pgd":
        return Pgd(eps=value, **kw)
    if name == "mse":
        return Mse()
    raise ValueError(f"unknown objective '{name}'")


@dataclass(frozen=True)
class Schedule:
    epochs: int
    batch_size: int
    lr: float
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    # scale lr by min(1, lr_ref_lambda / lam) for penalty objectives
    lr_ref_lambda: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        de = self.decay_epochs
        if any(b <= a for a, b in zip(de, de[1:])) or any(e >= self.epochs or e < 0 for e in de):
            raise ValueError("decay epochs must be strictly increasing and < epochs")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch size and lr must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** sum(epoch >= e for e in self.decay_epochs)


SCHEDULE_PRESETS = {
    "cifar": dict(epochs=200, batch_size=128, lr=0.025, decay_epochs=(150, 175), decay_factor=0.1),
    "imagenet64": dict(epochs=90, batch_size=4096, lr=0.1, decay_epochs=(30, 60), decay_factor=0.1),
    "mnist": dict(epochs=9, batch_size=128, lr=0.1, decay_epochs=(3, 6), decay_factor=0.1),
}


def schedule_preset(name: str, **overrides) -> Schedule:
    return Schedule(**{**SCHEDULE_PRESETS[name], **overrides})


# losses


def cross_entropy(z: ad.Tensor, y: np.ndarray) -> ad.Tensor:
    """Mean cross-entropy; a single logit column is treated as binary logistic."""
    n, c = z.shape
    if c == 1:
        sign = ad.Tensor((1.0 - 2.0 * y).reshape(n, 1))
        return ad.mean(ad.softplus(ad.mul(z, sign)))
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    return ad.neg(ad.mean(ad.tsum(ad.mul(ad.log_softmax(z), ad.Tensor(onehot)), axis=1)))


def _weight_penalty(params, weight_decay):
    total = None
    for w in params[0::2]:
        term = ad.sumsq(w)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, weight_decay)


def objective_loss(objective: Objective, model: Model, params: Sequence[ad.Tensor],
                   x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> ad.Tensor:
    act = model.activation
    X = ad.Tensor(x)
    if isinstance(objective, Mse):
        z = models.apply(params, X, act)
        t = ad.Tensor((2.0 * y - 1.0).reshape(-1, 1))
        return ad.mean(ad.square(ad.sub(z, t)))
    if isinstance(objective, RandSmooth):
        k = objective.n_noise
        xs = np.tile(x, (k, 1)) + objective.sigma * rng.standard_normal((k * len(x), x.shape[1]))
        return cross_entropy(models.apply(params, ad.Tensor(xs), act), np.tile(y, k))
    if isinstance(objective, Pgd):
        current = model.with_params([p.data for p in params])
        x_adv = pgd_attack(current, x, y, objective.eps, objective.steps, objective.alpha,
                           random_start=objective.random_start, rng=rng)
        return cross_entropy(models.apply(params, ad.Tensor(x_adv), act), y)

    z = models.apply(params, X, act)
    loss = cross_entropy(z, y)
    if isinstance(objective, GradNorm) and objective.lam > 0:
        sel = "sum" if objective.sum_classes or model.n_classes == 1 else y
        g = models.input_gradient(model, X, sel=sel, params=params, create_graph=True)
        loss = ad.add(loss, ad.mul(ad.sumsq(g), objective.lam / len(x)))
    elif isinstance(objective, Smoothness) and objective.lam > 0:
        k = objective.n_noise
        xs = np.tile(x, (k, 1)) + objective.sigma * rng.standard_normal((k * len(x), x.shape[1]))
        zn = models.apply(params, ad.Tensor(xs), act)
        z0 = z
        if objective.output == "probs":
            zn, z0 = ad.softmax(zn), ad.softmax(z0)
        z0 = ad.reshape(ad.broadcast_to(ad.reshape(z0, (1, *z.shape)), (k, *z.shape)), zn.shape)
        diff = ad.sumsq(ad.sub(zn, z0))
        loss = ad.add(loss, ad.mul(diff, objective.lam / (k * len(x))))
    return loss


def loss_and_grads(objective: Objective, model: Model, batch: tuple[np.ndarray, np.ndarray],
                   rng: np.random.Generator, weight_decay: float = 0.0):
    """Scalar loss and parameter gradients (list of arrays matching ``model.params()``)."""
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    params = [ad.Tensor(p, requires_grad=True) for p in model.params()]
    loss = objective_loss(objective, model, params, np.asarray(x, dtype=np.float64), np.asarray(y), rng)
    if weight_decay > 0:
        loss = ad.add(loss, _weight_penalty(params, weight_decay))
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged("non-finite loss")
    grads = ad.grad(loss, params)
    return value, [g.data for g in grads]


def pgd_attack(model: Model, x, y, eps: float, steps: int, step_size: float,
               random_start: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """l2 PGD: normalized gradient ascent on the cross-entropy, projected onto the eps-ball."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    y2 = np.atleast_1d(np.asarray(y))
    delta = np.zeros_like(x2)
    if eps == 0:
        return x.copy()
    if random_start:
        rng = rng or np.random.default_rng(0)
        u = rng.standard_normal(x2.shape)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        delta = u * eps * rng.random((len(x2), 1)) ** (1.0 / x2.shape[1])
    params = [ad.Tensor(p) for p in model.params()]
    for _ in range(steps):
        xt = ad.Tensor(x2 + delta, requires_grad=True)
        loss = ad.mul(cross_entropy(models.apply(params, xt, model.activation), y2), float(len(x2)))
        g = ad.grad(loss, xt).data
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        delta = delta + step_size * np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        dn = np.linalg.norm(delta, axis=1, keepdims=True)
        delta = delta * np.minimum(1.0, eps / np.maximum(dn, 1e-300))
    out = x2 + delta
    return out[0] if single else out


def accuracy(model: Model, data: Dataset) -> float:
    z = models.logits(model, data.x)
    pred = (z[:, 0] > 0).astype(int) if z.shape[1] == 1 else z.argmax(axis=1)
    return float(np.mean(pred == data.y))


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def effective_lr(objective: Objective, schedule: Schedule) -> float:
    lam = getattr(objective, "lam", None)
    if schedule.lr_ref_lambda is None or not lam or lam <= schedule.lr_ref_lambda:
        return schedule.lr
    return schedule.lr * schedule.lr_ref_lambda / lam


def train(model: Model, data: Dataset, objective: Objective, schedule: Schedule,
          test: Dataset | None = None,
          callback: Callable[[int, Model], None] | None = None) -> tuple[Model, History]:
    """Minibatch SGD with momentum. Deterministic given ``schedule.seed``."""
    if data.x.shape[1] != model.input_dim:
        raise ValueError("dataset dimension does not match model input")
    shuffle_rng = np.random.default_rng([schedule.seed, 0])
    noise_rng = np.random.default_rng([schedule.seed, 1])
    params = [p.copy() for p in model.params()]
    velocity = [np.zeros_like(p) for p in params]
    base_lr = effective_lr(objective, schedule)
    hist = History()
    n = len(data)
    for epoch in range(schedule.epochs):
        lr = base_lr * schedule.decay_factor ** sum(epoch >= e for e in schedule.decay_epochs)
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            current = model.with_params(params)
            try:
                value, grads = loss_and_grads(objective, current, (data.x[idx], data.y[idx]), noise_rng,
                                              schedule.weight_decay)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            for p, v, g in zip(params, velocity, grads):
                v *= schedule.momentum
                v += g
                p -= lr * v
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingDiverged(f"epoch {epoch}: parameters became non-finite (lr={lr:g})")
            total += value * len(idx)
            count += len(idx)
        model_now = model.with_params(params)
        hist.train_loss.append(total / count)
        hist.lr.append(lr)
        hist.test_acc.append(accuracy(model_now, test) if test is not None else float("nan"))
        log.debug("epoch %d loss %.5f acc %.4f", epoch, hist.train_loss[-1], hist.test_acc[-1])
        if callback is not None:
            callback(epoch, model_now)
    return model.with_params(params), hist


# sweeps


@dataclass
class SweepRun:
    objective: str
    value: float
    seed: int
    index: int
    model: Model | None = None
    history: History | None = None
    status: str = "ok"
    error: str = ""


@dataclass(frozen=True)
class SweepSpec:
    """One training run: everything a worker needs, nothing shared but read-only data."""

    index: int
    objective: Objective
    objective_name: str
    value: float
    seed: int
    sizes: tuple[int, ...]
    activation: str
    schedule: Schedule


def _run_one(spec: SweepSpec, data: Dataset, test: Dataset | None) -> SweepRun:
    run = SweepRun(spec.objective_name, spec.value, spec.seed, spec.index)
    try:
        model = models.init(spec.sizes, spec.activation, seed=spec.seed)
        run.model, run.history = train(model, data, spec.objective, replace(spec.schedule, seed=spec.seed), test)
    except Exception as exc:  # per-run failures are recorded, not raised
        run.status = "failed"
        run.error = f"{type(exc).__name__}: {exc}"
        log.warning("run %d (%s=%g, seed %d) failed: %s", spec.index, spec.objective_name,
                    spec.value, spec.seed, run.error)
    return run


def build_grid(objective: str, values: Sequence[float], seeds: Sequence[int], sizes: Sequence[int],
               activation: str, schedule: Schedule, objective_kw: dict | None = None,
               start_index: int = 0) -> list[SweepSpec]:
    specs = []
    i = start_index
    for v in values:
        for s in seeds:
            specs.append(SweepSpec(i, make_objective(objective, v, **(objective_kw or {})), objective,
                                   float(v), int(s), tuple(sizes), activation, schedule))
            i += 1
    return specs


def sweep(specs: Sequence[SweepSpec], data: Dataset, test: Dataset | None = None,
          jobs: int = 1) -> list[SweepRun]:
    """Train every grid point; results come back ordered by grid index."""
    if not specs:
        raise ValueError("empty sweep")
    if jobs <= 1:
        runs = [_run_one(s, data, test) for s in specs]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_one, specs, [data] * len(specs), [test] * len(specs)))
    return sorted(runs, key=lambda r: r.index)
