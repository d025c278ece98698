"""Pieces shared by every training method: client sites and the trainer contract."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import VerticalDataset
from .ledger import CommLedger
from .nn import MlpModel, OptState, init_mlp
from .pool import ClientPool
from .privacy import DpPolicy, PrivacySpend
from .rng import stream


@dataclass
class ClientSite:
    """Client-held state. ``model`` and ``X`` never leave the site."""

    client: int
    model: MlpModel
    opt: OptState
    X: np.ndarray
    local_steps: int = 1
    beta: float = 0.005
    head: Optional[np.ndarray] = None
    head_opt: Optional[OptState] = None


@dataclass
class TrainConfig:
    """Hyperparameters common to all methods (unused ones are ignored)."""

    hidden: int = 64
    embed_dim: int = 60
    batch_size: int = 1024
    local_steps: int = 1
    rho: float = 1.0
    lr: float = 0.1            # server learning rate
    local_lr: float = 0.1      # client learning rate
    head_lr: Optional[float] = None
    beta: float = 0.005
    server_beta: float = 0.005
    momentum: float = 0.9
    head_schedule: str = "simultaneous"   # or "sequential"
    head_solver: str = "sgd"              # or "exact"
    local_solver: str = "sgd"             # or "exact" (linear local models)
    server_model: str = "linear"


def local_dims(d_in: int, cfg: TrainConfig, d_out: int) -> List[int]:
    if cfg.hidden and cfg.hidden > 0:
        return [d_in, cfg.hidden, d_out]
    return [d_in, d_out]


def make_sites(data: VerticalDataset, cfg: TrainConfig, seed: int, d_out: int,
               with_head: bool = False) -> List[ClientSite]:
    sites = []
    for k, X in enumerate(data.blocks):
        model = init_mlp(local_dims(X.shape[1], cfg, d_out), stream(seed, "client-init", k))
        site = ClientSite(k, model, OptState.fresh(model.params.size, cfg.local_lr, cfg.momentum),
                          X, cfg.local_steps, cfg.beta)
        if with_head:
            site.head = init_head(d_out, data.n_classes, stream(seed, "head-init", k))
            site.head_opt = OptState.fresh(site.head.size, cfg.local_lr, cfg.momentum)
        sites.append(site)
    return sites


def init_head(d_f: int, d_c: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / np.sqrt(d_f)
    return rng.uniform(-bound, bound, size=(d_f, d_c))


class Trainer:
    """Base for a VFL training method.

    Subclasses implement :meth:`run_round` (one communication round over the
    given batch indices) and :meth:`predict_logits` (server-side scores for
    the given per-client feature blocks).
    """

    name = "base"

    def __init__(self, data: VerticalDataset, cfg: TrainConfig, seed: int = 0,
                 dp: Optional[DpPolicy] = None, ledger: Optional[CommLedger] = None,
                 pool: Optional[ClientPool] = None):
        self.data = data
        self.cfg = cfg
        self.seed = seed
        self.dp = dp
        self.ledger = ledger if ledger is not None else CommLedger(data.n_clients)
        self.pool = pool if pool is not None else ClientPool(1)
        self.spend = PrivacySpend(dp.sigma, dp.delta) if dp is not None else None
        self.sites: List[ClientSite] = []

    @property
    def M(self) -> int:
        return self.data.n_clients

    def _send_up(self, k: int, t: int, A: np.ndarray) -> np.ndarray:
        """Client-side DP mechanism (when enabled) on a matrix leaving client ``k``."""
        if self.dp is None:
            return A
        return self.dp.privatize(A, k, t)

    def _deliver(self, msgs):
        """Orchestrator-only: log uplink messages and charge the privacy budget."""
        for m in msgs:
            if self.spend is not None:
                self.spend.step(m.client)
            self.ledger.record(m)
        return msgs

    def epsilon(self) -> Optional[float]:
        return None if self.spend is None else self.spend.epsilon()

    def run_round(self, t: int, idx: np.ndarray) -> Dict[str, float]:
        raise NotImplementedError

    def predict_logits(self, blocks: List[np.ndarray], t: int = 0) -> np.ndarray:
        raise NotImplementedError

    def predict(self, blocks: List[np.ndarray], t: int = 0) -> np.ndarray:
        return np.argmax(self.predict_logits(blocks, t), axis=1)

    def head_norms(self) -> Optional[List[float]]:
        return None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for s in self.sites:
            out[f"client{s.client}.params"] = s.model.params
            out[f"client{s.client}.velocity"] = s.opt.velocity
            if s.head is not None:
                out[f"client{s.client}.head"] = s.head
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for s in self.sites:
            s.model.params[:] = arrays[f"client{s.client}.params"]
            s.opt.velocity[:] = arrays[f"client{s.client}.velocity"]
            if s.head is not None:
                s.head[:] = arrays[f"client{s.client}.head"]
