"""VIMADMM-J: the ADMM variant without model splitting.

Each client owns both its feature extractor and its linear head and sends
local logits; the server only keeps ``z``/``lam`` and returns duals and
residual targets.
"""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from .admm import update_lambda, update_z
from .base import ClientSite, Trainer, TrainConfig, make_sites
from .ledger import EvalLogitBatch, JointServerMsg, LogitBatch
from .nn import MlpModel, forward_with_cache, mlp_backward, mlp_forward, sgd_step, softmax_ce


def update_z_joint(labels, lam, logit_sum, rho, **kw):
    return update_z(labels, lam, logit_sum, rho, **kw)


def update_lambda_joint(lam, logit_sum, z, rho):
    return update_lambda(lam, logit_sum, z, rho)


def logit_sum(logits: List[np.ndarray]) -> np.ndarray:
    out = logits[0].copy()
    for o in logits[1:]:
        out += o
    return out


def residual_joint(z: np.ndarray, logits: List[np.ndarray], k: int) -> np.ndarray:
    s = z.copy()
    for i, o in enumerate(logits):
        if i != k:
            s -= o
    return s


def joint_objective(model: MlpModel, W, lam, s, X, rho, beta) -> float:
    b = X.shape[0]
    O = mlp_forward(model, X) @ W
    return float(beta * ((model.params ** 2).sum() + (W ** 2).sum()) + (lam * O).sum() / b
                 + rho / (2 * b) * ((s - O) ** 2).sum())


def joint_head_gradient(F, W, lam, s, rho, beta) -> np.ndarray:
    b = F.shape[0]
    return 2 * beta * W + F.T @ (lam + rho * (F @ W - s)) / b


def joint_theta_gradient(model, X, W, lam, s, rho, beta, cache=None) -> np.ndarray:
    b = X.shape[0]
    if cache is None:
        F, cache = forward_with_cache(model, X)
    else:
        F = cache[0][-1]
    upstream = ((lam + rho * (F @ W - s)) / b) @ W.T
    g, _ = mlp_backward(model, X, upstream, cache=cache)
    return g + 2 * beta * model.params


def client_update_joint(site: ClientSite, lam, s, X, rho, steps: Optional[int] = None):
    """``tau`` alternating steps: head first, then the extractor with the fresh head."""
    steps = site.local_steps if steps is None else steps
    for _ in range(steps):
        F, cache = forward_with_cache(site.model, X)
        gW = joint_head_gradient(F, site.head, lam, s, rho, site.beta)
        site.head = sgd_step(site.head.ravel(), gW.ravel(), site.head_opt).reshape(site.head.shape)
        g = joint_theta_gradient(site.model, X, site.head, lam, s, rho, site.beta, cache=cache)
        site.model.params = sgd_step(site.model.params, g, site.opt)
    return site.head, site.model


class VimAdmmJoint(Trainer):
    name = "vimadmm-j"

    def __init__(self, data, cfg: TrainConfig, seed=0, dp=None, ledger=None, pool=None):
        super().__init__(data, cfg, seed, dp, ledger, pool)
        self.sites = make_sites(data, cfg, seed, cfg.embed_dim, with_head=True)
        d_c = data.n_classes
        self.z = np.zeros((data.n, d_c))
        self.lam = np.zeros((data.n, d_c))
        self.rho = cfg.rho
        self.last = {}

    def _logits(self, k, idx, t):
        site = self.sites[k]
        o = mlp_forward(site.model, site.X[idx]) @ site.head
        return LogitBatch(t, k, self._send_up(k, t, o))

    def run_round(self, t: int, idx: np.ndarray) -> Dict[str, float]:
        y = self.data.labels[idx]
        ups = self._deliver(self.pool.map(lambda k: self._logits(k, idx, t), range(self.M)))
        O = [m.logits for m in ups]
        pred = logit_sum(O)
        train_loss, _ = softmax_ce(pred, y)
        lam_old = self.lam[idx]
        z = update_z_joint(y, lam_old, pred, self.rho)
        lam = update_lambda_joint(lam_old, pred, z, self.rho)
        self.z[idx], self.lam[idx] = z, lam
        downs = [self.ledger.record(JointServerMsg(t, k, lam, residual_joint(z, O, k)))
                 for k in range(self.M)]

        def local(k):
            site = self.sites[k]
            client_update_joint(site, downs[k].lam, downs[k].residual, site.X[idx], self.rho)

        self.pool.map(local, range(self.M))
        self.last = {"pred": pred, "z": z, "lam": lam, "idx": idx}
        return {"train_loss": train_loss,
                "constraint_residual": float(((pred - z) ** 2).sum(axis=1).mean())}

    def local_logits(self, blocks) -> List[np.ndarray]:
        return self.pool.map(
            lambda k: mlp_forward(self.sites[k].model, blocks[k]) @ self.sites[k].head,
            range(self.M))

    def predict_logits(self, blocks, t=0):
        # evaluation transport is logged under its own direction, outside training cost
        O = [self.ledger.record(EvalLogitBatch(t, k, o)).logits
             for k, o in enumerate(self.local_logits(blocks))]
        return logit_sum(O)

    def head_norms(self):
        return [float(np.linalg.norm(s.head)) for s in self.sites]

    def state_arrays(self):
        out = super().state_arrays()
        for s in self.sites:
            out[f"client{s.client}.head_velocity"] = s.head_opt.velocity
        out["server.z"] = self.z
        out["server.lam"] = self.lam
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        for s in self.sites:
            s.head_opt.velocity[:] = arrays[f"client{s.client}.head_velocity"]
        self.z = arrays["server.z"].copy()
        self.lam = arrays["server.lam"].copy()
