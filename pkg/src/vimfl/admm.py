"""VIMADMM: multi-head ADMM training with model splitting.

The server keeps per-sample auxiliary variables ``z`` and duals ``lam`` plus
one linear head per client. Each round it solves the per-sample ``z``
problem, takes a dual ascent step, one (inexact) step on every head and
sends each client its duals, residual targets and head. Clients then run
``tau`` local SGD steps on their own ADMM sub-objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .base import ClientSite, Trainer, TrainConfig, init_head, make_sites
from .ledger import EmbeddingBatch, ServerToClientAdmmMsg
from .nn import (MlpModel, check_labels, forward_with_cache, log_softmax, mlp_backward,
                 mlp_forward, onehot, sgd_step, softmax, softmax_ce)
from .rng import stream


class ZSolveError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"z-update did not converge: residual {residual:.3e} "
                         f"after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


# -- per-sample losses -----------------------------------------------------

class CrossEntropy:
    """Softmax cross-entropy on a single logit row (not batch-averaged)."""

    def value(self, z, Y):
        return -(log_softmax(z) * Y).sum(axis=1)

    def grad(self, z, Y):
        return softmax(z) - Y

    def hess(self, z, Y):
        p = softmax(z)
        return p[:, :, None] * np.eye(z.shape[1])[None] - p[:, :, None] * p[:, None, :]


class Quadratic:
    """``0.5 * ||z - onehot(y)||^2``, a test hook with a closed-form z-update."""

    def value(self, z, Y):
        return 0.5 * ((z - Y) ** 2).sum(axis=1)

    def grad(self, z, Y):
        return z - Y

    def hess(self, z, Y):
        return np.broadcast_to(np.eye(z.shape[1]), (z.shape[0],) + (z.shape[1],) * 2)


LOSSES = {"ce": CrossEntropy(), "quadratic": Quadratic()}


def _loss(loss):
    return LOSSES[loss] if isinstance(loss, str) else loss


# -- server sub-problems ---------------------------------------------------

def predict(embeddings: Sequence[np.ndarray], heads: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_k H_k W_k``, accumulated in ascending client order."""
    if len(embeddings) != len(heads) or not heads:
        raise ValueError("need one head per embedding block")
    out = None
    for H, W in zip(embeddings, heads):
        if H.shape[1] != W.shape[0]:
            raise ValueError(f"embedding width {H.shape[1]} does not match head {W.shape}")
        P = H @ W
        out = P if out is None else out + P
    return out


def z_stationarity(z, labels, lam, pred, rho, loss="ce") -> np.ndarray:
    Y = onehot(labels, z.shape[1])
    return _loss(loss).grad(z, Y) - lam - rho * (pred - z)


def update_z(labels, lam: np.ndarray, pred: np.ndarray, rho: float, loss="ce",
             tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Row-wise minimiser of ``loss(z, y) - lam.z + rho/2 ||pred - z||^2``.

    Damped Newton with backtracking; rows that stall fall back to
    backtracking gradient descent. Raises :class:`ZSolveError` when the
    stationarity residual still exceeds ``tol``.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    L = _loss(loss)
    lam = np.asarray(lam, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    labels = check_labels(labels, pred.shape[1])
    Y = onehot(labels, pred.shape[1])
    target = tol * 1e-3

    def obj(z, rows):
        return L.value(z, Y[rows]) - (lam[rows] * z).sum(1) + 0.5 * rho * ((pred[rows] - z) ** 2).sum(1)

    z = pred + lam / rho
    eye = np.eye(pred.shape[1])
    active = np.arange(z.shape[0])
    for _ in range(max_iter):
        g = L.grad(z[active], Y[active]) - lam[active] - rho * (pred[active] - z[active])
        keep = np.abs(g).max(axis=1) > target if g.size else np.zeros(0, bool)
        active, g = active[keep], g[keep]
        if active.size == 0:
            break
        H = L.hess(z[active], Y[active]) + rho * eye
        step = np.linalg.solve(H, g[:, :, None])[:, :, 0]
        f0 = obj(z[active], active)
        t = np.ones(active.size)
        # close to the optimum the full Newton step is safe and f differences drown in rounding
        far = np.abs(g).max(axis=1) > 1e-4
        for _ in range(40):
            trial = z[active] - t[:, None] * step
            bad = far & (obj(trial, active) > f0 - 1e-4 * t * (g * step).sum(1))
            if not bad.any():
                break
            t[bad] *= 0.5
        z[active] = z[active] - t[:, None] * step
    res = np.abs(z_stationarity(z, labels, lam, pred, rho, L)).max() if z.size else 0.0
    # written as "not <=" so NaN residuals count as failures
    if not res <= tol:
        z = _gd_fallback(z, labels, lam, pred, rho, L, tol)
        res = np.abs(z_stationarity(z, labels, lam, pred, rho, L)).max()
        if not res <= tol:
            raise ZSolveError(float(res), max_iter)
    return z


def _gd_fallback(z, labels, lam, pred, rho, L, tol, max_iter=100000):
    Y = onehot(labels, z.shape[1])
    # the objective is (rho + 1/2)-smooth for CE and (rho + 1)-smooth for the quadratic loss
    step = 1.0 / (rho + 1.0)
    for _ in range(max_iter):
        g = L.grad(z, Y) - lam - rho * (pred - z)
        gmax = np.abs(g).max()
        if gmax <= tol * 1e-2 or not np.isfinite(gmax):
            break
        z = z - step * g
    return z


def update_lambda(lam: np.ndarray, pred: np.ndarray, z: np.ndarray, rho: float) -> np.ndarray:
    return lam + rho * (pred - z)


def head_gradients(heads, embeddings, z, lam, rho, betas) -> List[np.ndarray]:
    """Gradient of every head's sub-objective, all evaluated at the current heads."""
    b = z.shape[0]
    common = lam + rho * (predict(embeddings, heads) - z)
    return [2 * beta * W + (H.T @ common) / b for H, W, beta in zip(embeddings, heads, betas)]


def head_objective(Wk, k, heads, embeddings, z, lam, rho, beta) -> float:
    b = z.shape[0]
    others = [H @ W for i, (H, W) in enumerate(zip(embeddings, heads)) if i != k]
    rest = np.sum(others, axis=0) if others else 0.0
    Hk = embeddings[k]
    r = rest + Hk @ Wk - z
    return float(beta * (Wk ** 2).sum() + (lam * (Hk @ Wk)).sum() / b + rho / (2 * b) * (r ** 2).sum())


def update_heads(heads, embeddings, z, lam, rho, betas, lr, schedule="simultaneous",
                 solver="sgd") -> List[np.ndarray]:
    """One inexact (SGD) step or an exact minimisation of each head's sub-problem.

    ``schedule="simultaneous"`` evaluates every head's problem at the
    pre-step heads; ``"sequential"`` updates heads in client order, each
    seeing the already-updated earlier ones.
    """
    heads = [W.copy() for W in heads]
    if solver == "sgd" and schedule == "simultaneous":
        grads = head_gradients(heads, embeddings, z, lam, rho, betas)
        return [W - lr * G for W, G in zip(heads, grads)]
    b = z.shape[0]
    old = [W.copy() for W in heads]
    for k in range(len(heads)):
        view = heads if schedule == "sequential" else old
        if solver == "sgd":
            heads[k] = view[k] - lr * head_gradients(view, embeddings, z, lam, rho, betas)[k]
            continue
        Hk = embeddings[k]
        others = [H @ W for i, (H, W) in enumerate(zip(embeddings, view)) if i != k]
        rest = np.sum(others, axis=0) if others else np.zeros_like(z)
        A = 2 * betas[k] * np.eye(Hk.shape[1]) + (rho / b) * (Hk.T @ Hk)
        rhs = -(Hk.T @ (lam + rho * (rest - z))) / b
        heads[k] = np.linalg.solve(A, rhs)
    return heads


def residuals(z: np.ndarray, embeddings, heads, k: int) -> np.ndarray:
    """``z - sum_{i != k} H_i W_i``."""
    s = z.copy()
    for i, (H, W) in enumerate(zip(embeddings, heads)):
        if i != k:
            s -= H @ W
    return s


def all_residuals(z, embeddings, heads) -> List[np.ndarray]:
    parts = [H @ W for H, W in zip(embeddings, heads)]
    out = []
    for k in range(len(parts)):
        s = z.copy()
        for i, P in enumerate(parts):
            if i != k:
                s -= P
        out.append(s)
    return out


# -- client sub-problem ----------------------------------------------------

def client_objective(model: MlpModel, W, lam, s, X, rho, beta) -> float:
    b = X.shape[0]
    O = mlp_forward(model, X) @ W
    return float(beta * (model.params ** 2).sum() + (lam * O).sum() / b
                 + rho / (2 * b) * ((s - O) ** 2).sum())


def client_gradient(model: MlpModel, W, lam, s, X, rho, beta, cache=None):
    """Gradient of the client's ADMM objective w.r.t. its flat parameters."""
    b = X.shape[0]
    if cache is None:
        F, cache = forward_with_cache(model, X)
    else:
        F = cache[0][-1]
    upstream = ((lam + rho * (F @ W - s)) / b) @ W.T
    g, _ = mlp_backward(model, X, upstream, cache=cache)
    return g + 2 * beta * model.params


def client_update_theta(site: ClientSite, W, lam, s, X, rho, steps: Optional[int] = None,
                        solver: str = "sgd") -> MlpModel:
    steps = site.local_steps if steps is None else steps
    if solver == "exact":
        fn = lambda p: client_gradient(MlpModel(site.model.layer_dims, p), W, lam, s, X, rho, site.beta)
        site.model.params = solve_quadratic(fn, site.model.params)
        return site.model
    for _ in range(steps):
        g = client_gradient(site.model, W, lam, s, X, rho, site.beta)
        site.model.params = sgd_step(site.model.params, g, site.opt)
    return site.model


def solve_quadratic(grad_fn, x0: np.ndarray, polish: int = 3) -> np.ndarray:
    """Exact minimiser of a strongly convex quadratic given only its gradient.

    The Hessian is assembled column by column from gradient differences.
    """
    n = x0.size
    g0 = grad_fn(np.zeros(n))
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        H[:, j] = grad_fn(e) - g0
    H = 0.5 * (H + H.T)
    x = np.linalg.solve(H, -g0)
    for _ in range(polish):
        x = x - np.linalg.solve(H, grad_fn(x))
    return x


# -- diagnostics -----------------------------------------------------------

def admm_loss(z, lam, heads, embeddings, labels, rho, betas, thetas=None) -> float:
    """Augmented Lagrangian over the full sample set."""
    N = z.shape[0]
    pred = predict(embeddings, heads)
    Y = onehot(labels, z.shape[1])
    r = pred - z
    val = CrossEntropy().value(z, Y).sum() / N
    val += sum(beta * (W ** 2).sum() for beta, W in zip(betas, heads))
    if thetas is not None:
        val += sum(beta * (th ** 2).sum() for beta, th in zip(betas, thetas))
    val += (lam * r).sum() / N + rho / (2 * N) * (r ** 2).sum()
    return float(val)


# -- orchestration -----------------------------------------------------------

@dataclass
class AdmmState:
    z: np.ndarray
    lam: np.ndarray
    heads: List[np.ndarray]
    rho: float
    betas: List[float]
    head_lr: float


class VimAdmm(Trainer):
    name = "vimadmm"

    def __init__(self, data, cfg: TrainConfig, seed=0, dp=None, ledger=None, pool=None):
        super().__init__(data, cfg, seed, dp, ledger, pool)
        d_f, d_c = cfg.embed_dim, data.n_classes
        self.sites = make_sites(data, cfg, seed, d_f)
        heads = [init_head(d_f, d_c, stream(seed, "head-init", k)) for k in range(self.M)]
        self.state = AdmmState(
            z=np.zeros((data.n, d_c)), lam=np.zeros((data.n, d_c)), heads=heads,
            rho=cfg.rho, betas=[cfg.beta] * self.M,
            head_lr=cfg.local_lr if cfg.head_lr is None else cfg.head_lr)
        self.last = {}

    def _embed(self, k, idx, t):
        site = self.sites[k]
        H = mlp_forward(site.model, site.X[idx])
        return EmbeddingBatch(t, k, self._send_up(k, t, H))

    def run_round(self, t: int, idx: np.ndarray) -> Dict[str, float]:
        st, cfg = self.state, self.cfg
        y = self.data.labels[idx]
        ups = self._deliver(self.pool.map(lambda k: self._embed(k, idx, t), range(self.M)))
        H = [m.embeddings for m in ups]

        # server phase
        pred = predict(H, st.heads)
        train_loss, _ = softmax_ce(pred, y)
        lam_old = st.lam[idx]
        z = update_z(y, lam_old, pred, st.rho)
        lam = update_lambda(lam_old, pred, z, st.rho)
        st.z[idx], st.lam[idx] = z, lam
        st.heads = update_heads(st.heads, H, z, lam, st.rho, st.betas, st.head_lr,
                                cfg.head_schedule, cfg.head_solver)
        S = all_residuals(z, H, st.heads)
        downs = [self.ledger.record(ServerToClientAdmmMsg(t, k, lam, S[k], st.heads[k].copy()))
                 for k in range(self.M)]

        def local(k):
            msg = downs[k]
            site = self.sites[k]
            client_update_theta(site, msg.head, msg.lam, msg.residual, site.X[idx], st.rho,
                                solver=cfg.local_solver)

        self.pool.map(local, range(self.M))
        self.last = {"pred": pred, "z": z, "lam": lam, "idx": idx}
        return {
            "train_loss": train_loss,
            "constraint_residual": float(((pred - z) ** 2).sum(axis=1).mean()),
        }

    def embeddings(self, blocks) -> List[np.ndarray]:
        return self.pool.map(lambda k: mlp_forward(self.sites[k].model, blocks[k]), range(self.M))

    def predict_logits(self, blocks, t=0):
        return predict(self.embeddings(blocks), self.state.heads)

    def full_admm_loss(self) -> float:
        st = self.state
        H = self.embeddings(self.data.blocks)
        return admm_loss(st.z, st.lam, st.heads, H, self.data.labels, st.rho, st.betas,
                         [s.model.params for s in self.sites])

    def head_norms(self):
        return [float(np.linalg.norm(W)) for W in self.state.heads]

    def state_arrays(self):
        out = super().state_arrays()
        for k, W in enumerate(self.state.heads):
            out[f"server.head{k}"] = W
        out["server.z"] = self.state.z
        out["server.lam"] = self.state.lam
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.state.heads = [arrays[f"server.head{k}"].copy() for k in range(self.M)]
        self.state.z = arrays["server.z"].copy()
        self.state.lam = arrays["server.lam"].copy()


def infer(sites: Sequence[ClientSite], heads, blocks) -> np.ndarray:
    """Argmax of ``sum_k f_k(x_k) W_k``; ties resolve to the lowest class index."""
    H = [mlp_forward(s.model, X) for s, X in zip(sites, blocks)]
    return np.argmax(predict(H, heads), axis=1)
