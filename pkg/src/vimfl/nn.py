"""Dense numerical core: ReLU MLPs with analytic gradients, softmax CE, momentum SGD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Input or upstream gradient has the wrong shape for a model."""


@dataclass
class MlpModel:
    """Fully connected network with ReLU on hidden layers and identity output.

    Parameters live in a single flat float64 vector. Layer ``i`` occupies a
    row-major ``dims[i] x dims[i+1]`` weight block followed by its bias, so a
    forward pass computes ``X @ W + b`` per layer.
    """

    layer_dims: List[int]
    params: np.ndarray

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) <= 0:
            raise ShapeError(f"invalid layer dims {self.layer_dims}")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (n_params(self.layer_dims),):
            raise ShapeError(
                f"parameter vector has length {self.params.size}, "
                f"expected {n_params(self.layer_dims)}"
            )

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def d_out(self) -> int:
        return self.layer_dims[-1]

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into the flat parameter vector."""
        out = []
        off = 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = self.params[off:off + a * b].reshape(a, b)
            off += a * b
            out.append((w, self.params[off:off + b]))
            off += b
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_dims), self.params.copy())


def n_params(dims: Sequence[int]) -> int:
    return int(sum(a * b + b for a, b in zip(dims[:-1], dims[1:])))


def init_mlp(dims: Sequence[int], rng: np.random.Generator) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    chunks = []
    for a, b in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(a)
        chunks.append(rng.uniform(-bound, bound, size=a * b))
        chunks.append(rng.uniform(-bound, bound, size=b))
    return MlpModel(list(dims), np.concatenate(chunks))


def _check_input(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d_in:
        raise ShapeError(f"input of shape {X.shape} does not match model input dim {model.d_in}")
    return X


def _forward_cache(model: MlpModel, X: np.ndarray):
    acts = [X]
    pre = []
    layers = model.layers()
    a = X
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(a)
    return acts, pre


def mlp_forward(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = _check_input(model, X)
    return _forward_cache(model, X)[0][-1]


def mlp_backward(
    model: MlpModel, X: np.ndarray, upstream: np.ndarray, cache=None
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of ``<upstream, forward(X)>`` w.r.t. the flat params and ``X``.

    ``cache`` may be the ``(acts, pre)`` pair from a previous forward on the
    same ``X`` to avoid recomputing it.
    """
    X = _check_input(model, X)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (X.shape[0], model.d_out):
        raise ShapeError(
            f"upstream of shape {upstream.shape}, expected {(X.shape[0], model.d_out)}"
        )
    acts, pre = cache if cache is not None else _forward_cache(model, X)
    layers = model.layers()
    grads: List[np.ndarray] = [None] * (2 * len(layers))
    delta = upstream
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[2 * i] = (acts[i].T @ delta).ravel()
        grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ w.T
        if i > 0:
            delta = delta * (pre[i - 1] > 0)
    return np.concatenate(grads), delta


def forward_with_cache(model: MlpModel, X: np.ndarray):
    X = _check_input(model, X)
    cache = _forward_cache(model, X)
    return cache[0][-1], cache


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def onehot(y: np.ndarray, d_c: int) -> np.ndarray:
    y = np.asarray(y)
    out = np.zeros((y.shape[0], d_c))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def check_labels(y, d_c: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= d_c):
        raise ValueError(f"labels must lie in [0, {d_c}); got range [{y.min()}, {y.max()}]")
    return y


def softmax_ce(z: np.ndarray, y) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(z, dtype=np.float64)
    y = check_labels(y, z.shape[1])
    b = z.shape[0]
    logp = log_softmax(z)
    loss = -logp[np.arange(b), y].mean()
    grad = np.exp(logp)
    grad[np.arange(b), y] -= 1.0
    return float(loss), grad / b


@dataclass
class OptState:
    """Heavy-ball momentum state: ``v <- m v + g``, ``p <- p - lr v``."""

    velocity: np.ndarray
    lr: float
    momentum: float = 0.9

    @classmethod
    def fresh(cls, n: int, lr: float, momentum: float = 0.9) -> "OptState":
        return cls(np.zeros(n), lr, momentum)


def sgd_step(params: np.ndarray, grads: np.ndarray, state: OptState) -> np.ndarray:
    if params.shape != grads.shape or state.velocity.shape != params.shape:
        raise ShapeError("params, grads and velocity must have equal shapes")
    state.velocity *= state.momentum
    state.velocity += grads
    return params - state.lr * state.velocity


def finite_diff_check(
    objective: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    step: float = 1e-5,
    coords: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``coords`` restricts the check to a subset of coordinates.
    """
    x = np.array(x, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64).ravel()
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    flat = x.ravel()
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = objective(x)
        flat[i] = old - step
        fm = objective(x)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"objective is not finite near coordinate {i}")
        num = (fp - fm) / (2 * step)
        a = analytic_grad[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
