"""Sweep orchestration: build data, train or reload every grid point, measure, and write the report."""

from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import metrics, mnist, models, training, worlds
from ..metrics import MetricError
from ..models import Model
from ..worlds import CurvedWorld, Dataset, MaskProjector, OracleError
from . import report
from .config import config_hash, grid_points

log = logging.getLogger(__name__)

MODEL_DIR = "models"
MANIFEST = "manifest.json"


class RunFailure(RuntimeError):
    """Raised when a run cannot proceed at all (as opposed to a single grid point failing)."""


@dataclass
class Environment:
    kind: str  # "world" or "mnist"
    world: object | None
    train: Dataset
    test: Dataset
    test_masks: np.ndarray | None = None  # (n, d) signal masks for the MNIST test images
    meta: dict = field(default_factory=dict)


def build_environment(cfg: dict) -> Environment:
    w = cfg["world"]
    if w["preset"] == "mnist-distractor":
        return _mnist_environment(w)
    world = worlds.preset(w["preset"], **w.get("params", {}))
    train = world.sample(int(w["n_train"]), int(w["train_seed"]))
    test = world.sample(int(w["n_test"]), int(w["test_seed"]))
    return Environment("world", world, train, test, meta={"world": w["preset"]})


def _mnist_environment(w: dict) -> Environment:
    if not w.get("images") or not w.get("labels"):
        raise RunFailure("mnist-distractor needs [world] images and labels paths to IDX files")
    images, labels = mnist.load_mnist(w["images"], w["labels"])
    n = min(int(w["n_digits"]), len(labels))
    pick = np.sort(np.random.default_rng(int(w["placement_seed"])).permutation(len(labels))[:n])
    images, labels = images[pick], labels[pick]
    train = mnist.compose_distractor(images, labels, seed=int(w["placement_seed"]))
    # held-out placements of a seeded subset of the same digits
    sub = np.sort(np.random.default_rng(int(w["test_seed"])).permutation(n)[:int(w["n_test"])])
    test = mnist.compose_distractor(images[sub], labels[sub], seed=int(w["test_seed"]) + 1)
    return Environment("mnist", None, Dataset(train.flat(), train.labels), Dataset(test.flat(), test.labels),
                       test_masks=test.signal_masks.reshape(len(test), -1),
                       meta={"world": "mnist-distractor", "n_digits": n, "pixel_range": [0.0, 1.0],
                             "normalized": False})


# grid


@dataclass(frozen=True)
class GridPoint:
    index: int
    objective: str
    param: float
    seed: int


def expand_grid(cfg: dict) -> list[GridPoint]:
    pts = []
    for name, value in grid_points(cfg):
        for seed in cfg["grid"]["seeds"]:
            pts.append(GridPoint(len(pts), name, value, int(seed)))
    if not pts:
        raise ValueError("empty sweep")
    return pts


def make_objective(cfg: dict, name: str, value: float) -> training.Objective:
    kw = dict(cfg["objective"].get(name, {}))
    if name == "pgd":
        value = value * float(kw.pop("eps_scale", 1.0))
    return training.make_objective(name, value, **kw)


def make_schedule(cfg: dict, seed: int) -> training.Schedule:
    s = dict(cfg["schedule"])
    preset = s.pop("preset", None)
    base = dict(training.SCHEDULE_PRESETS[preset]) if preset else {}
    base.update(s)
    base["decay_epochs"] = tuple(base.get("decay_epochs", ()))
    return training.Schedule(**base, seed=seed)


def model_sizes(cfg: dict, env: Environment) -> list[int]:
    n_classes = int(max(env.train.y.max(), env.test.y.max())) + 1
    return [env.train.dim, *cfg["model"]["hidden"], n_classes]


# per-run work


@dataclass
class RunResult:
    point: GridPoint
    status: str = "ok"
    error: str = ""
    model: Model | None = None
    history: dict = field(default_factory=dict)
    row: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    gradients: list = field(default_factory=list)


def _train_point(cfg: dict, env: Environment, pt: GridPoint):
    model = models.init(model_sizes(cfg, env), cfg["model"]["activation"], seed=pt.seed)
    obj = make_objective(cfg, pt.objective, pt.param)
    trained, hist = training.train(model, env.train, obj, make_schedule(cfg, pt.seed))
    return trained, {"train_loss": hist.train_loss, "lr": hist.lr}


def _projectors(env: Environment, xs: np.ndarray, latent=None):
    if env.kind == "mnist":
        return [MaskProjector(m) for m in env.test_masks[:len(xs)]]
    world = env.world
    if isinstance(world, CurvedWorld):
        lat = latent if latent is not None else [None] * len(xs)
        return [world.tangent_projector(x, t) for x, t in zip(xs, lat)]
    return [world.tangent_projector(x) for x in xs]


def _nanmean(vals) -> float:
    vals = [v for v in vals if np.isfinite(v)]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def measure(cfg: dict, env: Environment, model: Model) -> tuple[dict, dict, list]:
    """Row metrics, extra measurements, and gradient dumps for one trained model."""
    m = cfg["metrics"]
    seed = int(m["seed"])
    test = env.test
    lat = test.latent
    n_pts = min(int(m["n_points"]), len(test))
    xs = test.x[:n_pts]
    projs = _projectors(env, xs, None if lat is None else lat[:n_pts])
    s_on, s_off = metrics.on_off_sensitivity(model, xs, projs, float(m["radius"]), int(m["n_draws"]), seed,
                                             output=m["output"])
    r1, r2 = [], []
    for i in range(min(int(m["rho_points"]), n_pts)):
        try:
            r1.append(metrics.rho1(model, xs[i], projs[i], float(m["rho_sigma"]), int(m["rho_n"]), seed + i).rho1)
            r2.append(metrics.rho2(model, xs[i], projs[i]))
        except MetricError as exc:
            log.debug("rho skipped at point %d: %s", i, exc)
    grads = models.input_gradient(model, xs, "predicted", post_softmax=True)
    cos = float("nan")
    if env.kind == "world":
        pred = models.logits(model, xs).argmax(axis=1)
        vals = []
        for i, (x, c) in enumerate(zip(xs, pred)):
            try:
                if isinstance(env.world, CurvedWorld):
                    oracle = env.world.bayes_input_gradient(x, int(c), latent=None if lat is None else lat[i],
                                                            log=True)
                else:
                    oracle = env.world.bayes_input_gradient(x, int(c), log=True)
                vals.append(metrics.cosine(grads[i], oracle))
            except (MetricError, OracleError):
                continue
        cos = _nanmean(vals)
    row = {"test_acc": training.accuracy(model, test), "s_on": s_on.mean, "s_off": s_off.mean,
           "rho1": _nanmean(r1), "rho2": _nanmean(r2), "oracle_cos": cos}
    extras = {"s_on_stderr": s_on.stderr, "s_off_stderr": s_off.stderr, "rho_points_used": len(r1)}
    if env.kind == "mnist" and m.get("noise_levels"):
        k = min(int(m.get("noise_points", 300)), len(test))
        rel = {}
        for sigma in m["noise_levels"]:
            try:
                rel[repr(float(sigma))] = metrics.relative_noise_robustness(
                    model, test.x[:k], env.test_masks[:k], float(sigma), int(m.get("noise_draws", 10)), seed)
            except MetricError:
                rel[repr(float(sigma))] = float("nan")
        extras["relative_noise_robustness"] = rel
    # dumps follow the usual saliency convention: pre-softmax logit of the predicted class
    n_dump = min(int(m["n_dump"]), n_pts)
    dumps = [] if n_dump == 0 else [g.tolist() for g in models.input_gradient(model, xs[:n_dump], "predicted")]
    return row, extras, dumps


# worker plumbing: fork-inherited globals avoid pickling worlds with closures

_STATE: dict = {}


def _work(pt: GridPoint) -> RunResult:
    cfg, env, cached = _STATE["cfg"], _STATE["env"], _STATE["cached"]
    res = RunResult(pt)
    try:
        if pt.index in cached:
            res.model, res.history = cached[pt.index]
        else:
            res.model, res.history = _train_point(cfg, env, pt)
        if _STATE["measure"]:
            res.row, res.extras, res.gradients = measure(cfg, env, res.model)
    except Exception as exc:  # a failed grid point is recorded and the sweep goes on
        res.status = "failed"
        res.error = f"{type(exc).__name__}: {exc}"
        log.warning("run %d (%s=%g, seed %d) failed: %s", pt.index, pt.objective, pt.param, pt.seed, res.error)
    return res


def _execute(points, cfg, env, cached, jobs: int, measure_runs: bool = True) -> list[RunResult]:
    _STATE.update(cfg=cfg, env=env, cached=cached, measure=measure_runs)
    try:
        if jobs <= 1 or len(points) == 1:
            results = [_work(p) for p in points]
        else:
            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                results = list(pool.map(_work, points))
    finally:
        _STATE.clear()
    return sorted(results, key=lambda r: r.point.index)


def _model_path(out: Path, pt: GridPoint) -> Path:
    return out / MODEL_DIR / f"run_{pt.index:03d}.mrl"


def _load_cache(out: Path, cfg: dict, points) -> dict:
    """Models from an earlier run with the same config hash."""
    man = out / MANIFEST
    if not man.exists():
        return {}
    info = json.loads(man.read_text())
    if info.get("config_hash") != config_hash(cfg):
        return {}
    cached = {}
    hist = {int(k): v for k, v in info.get("histories", {}).items()}
    for pt in points:
        path = _model_path(out, pt)
        if path.exists() and pt.index in hist:
            cached[pt.index] = (models.load(path), hist[pt.index])
    return cached


def _save_models(out: Path, cfg: dict, results) -> None:
    (out / MODEL_DIR).mkdir(parents=True, exist_ok=True)
    hist = {}
    for r in results:
        if r.model is not None:
            models.save(r.model, _model_path(out, r.point))
            hist[str(r.point.index)] = r.history
    (out / MANIFEST).write_text(json.dumps({"config_hash": config_hash(cfg), "histories": hist}, sort_keys=True))


def run_experiment(cfg: dict, out, jobs: int = 1, reuse: bool = True, require_models: bool = False,
                   preset: str | None = None) -> list[dict]:
    """Train (or reload) every grid point, measure it, and write report.csv/report.json/gradients.csv.

    Returns the report rows. Identical config and seeds give identical files
    for any ``jobs``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    points = expand_grid(cfg)
    env = build_environment(cfg)
    cached = _load_cache(out, cfg, points) if reuse else {}
    if require_models and len(cached) < len(points):
        raise RunFailure(f"{len(points) - len(cached)} trained model(s) missing in {out}; run 'sweep' first")
    results = _execute(points, cfg, env, cached, jobs)
    _save_models(out, cfg, results)
    return report.write(out, cfg, env.meta, results, preset=preset)


def train_only(cfg: dict, out, jobs: int = 1) -> list[RunResult]:
    """Train the grid and persist models without measuring."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = _execute(expand_grid(cfg), cfg, build_environment(cfg), {}, jobs, measure_runs=False)
    _save_models(out, cfg, results)
    return results
