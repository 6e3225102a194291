"""Small feed-forward classifiers built on the autodiff core."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .container import Reader, Writer

# int -> that class; "predicted" -> argmax logit; "sum" -> sum over classes
ClassSelector = Union[int, str]

_ACT_CODES = {"identity": 0, "softplus": 1, "tanh": 2, "relu": 3}


@dataclass(frozen=True)
class Model:
    """MLP with weights stored as (out, in) matrices.

    The nonlinearity is applied after every layer except the last.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "softplus"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Model":
        params = [np.array(p, dtype=np.float64) for p in params]
        return Model(tuple(params[0::2]), tuple(params[1::2]), self.activation)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def init(layer_sizes: Sequence[int], nonlinearity: str = "softplus", seed: int = 0) -> Model:
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ValueError("architecture needs an input size and at least one layer")
    if any(int(s) <= 0 for s in sizes):
        raise ValueError("layer sizes must be positive")
    if nonlinearity not in _ACT_CODES:
        raise ValueError(f"unknown nonlinearity '{nonlinearity}'")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return Model(tuple(weights), tuple(biases), nonlinearity)


def apply(params: Sequence[ad.Tensor], x: ad.Tensor, activation: str) -> ad.Tensor:
    """Logits graph for a batch ``x`` of shape (n, d)."""
    act = ad.ACTIVATIONS[activation]
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        if i < n_layers - 1:
            h = act(h)
    return h


def _batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != model.input_dim:
        raise ValueError(f"input dimension {x.shape} does not match model input {model.input_dim}")
    return x2, single


def logits(model: Model, x) -> np.ndarray:
    x2, single = _batch(model, x)
    with ad.no_grad():
        z = apply([ad.Tensor(p) for p in model.params()], ad.Tensor(x2), model.activation).data
    return z[0] if single else z


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def probs(model: Model, x) -> np.ndarray:
    return softmax(logits(model, x))


def selector_mask(sel: ClassSelector, z: np.ndarray) -> np.ndarray:
    """(n, C) weights picking the selected output per row."""
    n, c = z.shape
    if isinstance(sel, str) and sel == "sum":
        return np.ones((n, c))
    m = np.zeros((n, c))
    if isinstance(sel, str):
        if sel != "predicted":
            raise ValueError(f"unknown class selector '{sel}'")
        m[np.arange(n), z.argmax(axis=1)] = 1.0
        return m
    idx = np.broadcast_to(np.asarray(sel, dtype=int), (n,))
    if np.any(idx < 0) or np.any(idx >= c):
        raise ValueError(f"class index {sel} out of range for {c} classes")
    m[np.arange(n), idx] = 1.0
    return m


def input_gradient(model: Model, x, sel: ClassSelector = "predicted", post_softmax: bool = False,
                   params: Sequence[ad.Tensor] | None = None, create_graph: bool = False):
    """Gradient of the selected pre-softmax logit (or class sum) with respect to the input.

    ``sel`` may also be an integer array giving one class per row. With
    ``create_graph`` the result is a differentiable Tensor (pass ``params``
    as grad-requiring tensors to train through it); otherwise an ndarray.
    """
    if isinstance(x, ad.Tensor):
        x2, single = x.data, False
    else:
        x2, single = _batch(model, x)
    ptensors = params if params is not None else [ad.Tensor(p) for p in model.params()]
    xt = ad.Tensor(x2, requires_grad=True)
    z = apply(ptensors, xt, model.activation)
    if post_softmax:
        z = ad.softmax(z)
    mask = selector_mask(sel, z.data)
    out = ad.tsum(ad.mul(z, ad.Tensor(mask)))
    g = ad.grad(out, xt, create_graph=create_graph)
    if create_graph:
        return g
    return g.data[0] if single else g.data


def save(model: Model, path) -> None:
    w = Writer("mlp")
    w.u32(_ACT_CODES[model.activation], len(model.weights))
    w.u32(*model.sizes)
    for p in model.params():
        w.array(p)
    Path(path).write_bytes(w.getvalue())


def load(path) -> Model:
    r = Reader(Path(path).read_bytes(), expect_tag="mlp")
    code, n_layers = r.u32(2)
    act = {v: k for k, v in _ACT_CODES.items()}[code]
    sizes = list(r.u32(n_layers + 1))
    params = [r.array() for _ in range(2 * n_layers)]
    r.done()
    model = Model(tuple(params[0::2]), tuple(params[1::2]), act)
    if model.sizes != sizes:
        raise ValueError("MRL1 model dims do not match stored parameters")
    return model
