"""Gradient-based VFL references: Split Learning, VAFL, FedBCD and FDML.

All of them exchange local outputs for gradients w.r.t. those outputs every
round; they differ in how the server aggregates and in how many local steps
a client takes with the gradient it receives.
"""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .admm_joint import logit_sum
from .base import Trainer, TrainConfig, make_sites
from .ledger import EmbeddingBatch, GradientBatchMsg, LogitBatch
from .nn import MlpModel, forward_with_cache, mlp_backward, mlp_forward, sgd_step, softmax_ce


class LinearServer:
    """Linear layer over concatenated embeddings, trained by plain SGD."""

    def __init__(self, d_in: int, d_c: int, lr: float, beta: float, zero_init: bool = False,
                 rng=None):
        if zero_init:
            self.W = np.zeros((d_in, d_c))
            self.b = np.zeros(d_c)
        else:
            bound = 1.0 / np.sqrt(d_in)
            self.W = rng.uniform(-bound, bound, size=(d_in, d_c))
            self.b = rng.uniform(-bound, bound, size=d_c)
        self.lr, self.beta = lr, beta

    def logits(self, Hcat):
        return Hcat @ self.W + self.b

    def loss_and_grads(self, Hcat, y):
        loss, D = softmax_ce(self.logits(Hcat), y)
        reg = self.beta * ((self.W ** 2).sum() + (self.b ** 2).sum())
        gW = Hcat.T @ D + 2 * self.beta * self.W
        gb = D.sum(axis=0) + 2 * self.beta * self.b
        return loss + reg, gW, gb, D

    def step(self, Hcat, y) -> float:
        loss, gW, gb, _ = self.loss_and_grads(Hcat, y)
        self.W = self.W - self.lr * gW
        self.b = self.b - self.lr * gb
        return loss

    def embedding_grads(self, Hcat, y) -> np.ndarray:
        _, D = softmax_ce(self.logits(Hcat), y)
        return D @ self.W.T


def split_blocks(G: np.ndarray, widths: List[int]) -> List[np.ndarray]:
    cuts = np.cumsum([0] + widths)
    return [np.ascontiguousarray(G[:, a:b]) for a, b in zip(cuts[:-1], cuts[1:])]


def chain_rule_step(site, X, upstream, cache=None):
    """One client SGD step: backprop ``upstream`` through the local model plus the ridge term."""
    g, _ = mlp_backward(site.model, X, upstream, cache=cache)
    site.model.params = sgd_step(site.model.params, g + 2 * site.beta * site.model.params, site.opt)


class SplitLearning(Trainer):
    """Concatenated embeddings into a linear server model, one client step per round."""

    name = "split"
    stale_steps = False

    def __init__(self, data, cfg: TrainConfig, seed=0, dp=None, ledger=None, pool=None,
                 zero_init_server=False):
        super().__init__(data, cfg, seed, dp, ledger, pool)
        from .rng import stream

        self.sites = make_sites(data, cfg, seed, cfg.embed_dim)
        self.server = LinearServer(self.M * cfg.embed_dim, data.n_classes, cfg.lr, cfg.server_beta,
                                   zero_init_server, stream(seed, "server-init"))

    def _local_steps(self):
        return 1

    def _embed(self, k, idx, t):
        site = self.sites[k]
        F, cache = forward_with_cache(site.model, site.X[idx])
        msg = EmbeddingBatch(t, k, self._send_up(k, t, F))
        return msg, cache

    def server_phase(self, H: List[np.ndarray], y) -> (float, List[np.ndarray]):
        Hcat = np.concatenate(H, axis=1)
        loss = self.server.step(Hcat, y)
        G = self.server.embedding_grads(Hcat, y)
        return loss, split_blocks(G, [h.shape[1] for h in H])

    def run_round(self, t, idx) -> Dict[str, float]:
        y = self.data.labels[idx]
        ups = self.pool.map(lambda k: self._embed(k, idx, t), range(self.M))
        self._deliver([m for m, _ in ups])
        H = [m.embeddings for m, _ in ups]
        loss, grads = self.server_phase(H, y)
        downs = [self.ledger.record(GradientBatchMsg(t, k, grads[k])) for k in range(self.M)]
        steps = self._local_steps()

        def local(k):
            site = self.sites[k]
            X = site.X[idx]
            cache = ups[k][1]
            for i in range(steps):
                if i > 0:
                    # stale upstream, Jacobian at the current parameters
                    _, cache = forward_with_cache(site.model, X)
                chain_rule_step(site, X, downs[k].grad, cache)

        self.pool.map(local, range(self.M))
        return {"train_loss": loss}

    def embeddings(self, blocks):
        return self.pool.map(lambda k: mlp_forward(self.sites[k].model, blocks[k]), range(self.M))

    def predict_logits(self, blocks, t=0):
        return self.server.logits(np.concatenate(self.embeddings(blocks), axis=1))

    def state_arrays(self):
        out = super().state_arrays()
        out["server.W"] = self.server.W
        out["server.b"] = self.server.b
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.server.W = arrays["server.W"].copy()
        self.server.b = arrays["server.b"].copy()


class FedBCD(SplitLearning):
    """Split Learning where each client reuses the received gradient for ``tau`` steps."""

    name = "fedbcd"

    def _local_steps(self):
        return self.cfg.local_steps


class VaflServer:
    """Learnable scalar aggregation weights followed by a linear layer."""

    def __init__(self, M, d_f, d_c, lr, beta, rng):
        self.alpha = np.full(M, 1.0 / M)
        bound = 1.0 / np.sqrt(d_f)
        self.W = rng.uniform(-bound, bound, size=(d_f, d_c))
        self.b = rng.uniform(-bound, bound, size=d_c)
        self.lr, self.beta = lr, beta

    def aggregate(self, H):
        h = self.alpha[0] * H[0]
        for a, Hk in zip(self.alpha[1:], H[1:]):
            h = h + a * Hk
        return h

    def logits(self, H):
        return self.aggregate(H) @ self.W + self.b

    def loss_and_grads(self, H, y):
        h = self.aggregate(H)
        loss, D = softmax_ce(h @ self.W + self.b, y)
        loss += self.beta * ((self.W ** 2).sum() + (self.b ** 2).sum())
        gW = h.T @ D + 2 * self.beta * self.W
        gb = D.sum(axis=0) + 2 * self.beta * self.b
        dh = D @ self.W.T
        galpha = np.array([(Hk * dh).sum() for Hk in H])
        return loss, gW, gb, galpha, dh

    def step(self, H, y):
        loss, gW, gb, ga, _ = self.loss_and_grads(H, y)
        self.W = self.W - self.lr * gW
        self.b = self.b - self.lr * gb
        self.alpha = self.alpha - self.lr * ga
        return loss

    def embedding_grads(self, H, y) -> List[np.ndarray]:
        _, D = softmax_ce(self.logits(H), y)
        dh = D @ self.W.T
        return [a * dh for a in self.alpha]


class Vafl(SplitLearning):
    name = "vafl"

    def __init__(self, data, cfg: TrainConfig, seed=0, dp=None, ledger=None, pool=None):
        Trainer.__init__(self, data, cfg, seed, dp, ledger, pool)
        from .rng import stream

        self.sites = make_sites(data, cfg, seed, cfg.embed_dim)
        self.server = VaflServer(self.M, cfg.embed_dim, data.n_classes, cfg.lr, cfg.server_beta,
                                 stream(seed, "server-init"))

    def server_phase(self, H, y):
        loss = self.server.step(H, y)
        return loss, self.server.embedding_grads(H, y)

    def predict_logits(self, blocks, t=0):
        return self.server.logits(self.embeddings(blocks))

    def state_arrays(self):
        out = Trainer.state_arrays(self)
        out["server.W"] = self.server.W
        out["server.b"] = self.server.b
        out["server.alpha"] = self.server.alpha
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.server.alpha = arrays["server.alpha"].copy()


class Fdml(Trainer):
    """Clients hold whole models; the server sums logits and returns d(loss)/d(logits)."""

    name = "fdml"

    def __init__(self, data, cfg: TrainConfig, seed=0, dp=None, ledger=None, pool=None):
        super().__init__(data, cfg, seed, dp, ledger, pool)
        self.sites = make_sites(data, cfg, seed, cfg.embed_dim, with_head=True)

    def _logits(self, k, idx, t):
        site = self.sites[k]
        F, cache = forward_with_cache(site.model, site.X[idx])
        msg = LogitBatch(t, k, self._send_up(k, t, F @ site.head))
        return msg, F, cache

    def run_round(self, t, idx):
        y = self.data.labels[idx]
        ups = self.pool.map(lambda k: self._logits(k, idx, t), range(self.M))
        self._deliver([m for m, _, _ in ups])
        loss, D = softmax_ce(logit_sum([m.logits for m, _, _ in ups]), y)
        downs = [self.ledger.record(GradientBatchMsg(t, k, D.copy())) for k in range(self.M)]

        def local(k):
            site = self.sites[k]
            _, F, cache = ups[k]
            D_k = downs[k].grad
            gW = F.T @ D_k + 2 * site.beta * site.head
            g, _ = mlp_backward(site.model, site.X[idx], D_k @ site.head.T, cache=cache)
            g = g + 2 * site.beta * site.model.params
            site.head = sgd_step(site.head.ravel(), gW.ravel(), site.head_opt).reshape(site.head.shape)
            site.model.params = sgd_step(site.model.params, g, site.opt)

        self.pool.map(local, range(self.M))
        return {"train_loss": loss}

    def predict_logits(self, blocks, t=0):
        return logit_sum(self.pool.map(
            lambda k: mlp_forward(self.sites[k].model, blocks[k]) @ self.sites[k].head,
            range(self.M)))

    def state_arrays(self):
        out = super().state_arrays()
        for s in self.sites:
            out[f"client{s.client}.head_velocity"] = s.head_opt.velocity
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        for s in self.sites:
            s.head_opt.velocity[:] = arrays[f"client{s.client}.head_velocity"]


# -- composite objectives used by gradient checks ------------------------------

def split_composite_loss(server: LinearServer, models: List[MlpModel], Xs, y, k, betas) -> float:
    Hcat = np.concatenate([mlp_forward(m, X) for m, X in zip(models, Xs)], axis=1)
    loss, _ = softmax_ce(server.logits(Hcat), y)
    return loss + betas[k] * (models[k].params ** 2).sum()


def split_client_gradient(server: LinearServer, models, Xs, y, k, betas) -> np.ndarray:
    H = [mlp_forward(m, X) for m, X in zip(models, Xs)]
    G = split_blocks(server.embedding_grads(np.concatenate(H, axis=1), y), [h.shape[1] for h in H])
    g, _ = mlp_backward(models[k], Xs[k], G[k])
    return g + 2 * betas[k] * models[k].params
