"""Wire messages and the byte-exact communication ledger.

Every array that crosses the client/server boundary is wrapped in one of the
message classes below. The ledger only accepts whitelisted classes and
counts 4 bytes per scalar, matching a float32 wire encoding.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, fields
from typing import Dict, List, Optional

import numpy as np

BYTES_PER_SCALAR = 4
MIB = 2 ** 20

UP, DOWN, EVAL = "up", "down", "eval"


@dataclass(frozen=True)
class Message:
    round: int
    client: int

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray)]

    @property
    def n_scalars(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    @property
    def n_bytes(self) -> int:
        return BYTES_PER_SCALAR * self.n_scalars


@dataclass(frozen=True)
class EmbeddingBatch(Message):
    embeddings: np.ndarray          # b x d_f


@dataclass(frozen=True)
class LogitBatch(Message):
    logits: np.ndarray              # b x d_c


@dataclass(frozen=True)
class ServerToClientAdmmMsg(Message):
    lam: np.ndarray                 # b x d_c
    residual: np.ndarray            # b x d_c
    head: np.ndarray                # d_f x d_c


@dataclass(frozen=True)
class JointServerMsg(Message):
    lam: np.ndarray                 # b x d_c
    residual: np.ndarray            # b x d_c


@dataclass(frozen=True)
class GradientBatchMsg(Message):
    grad: np.ndarray                # b x d_f or b x d_c


@dataclass(frozen=True)
class EvalLogitBatch(Message):
    logits: np.ndarray


WHITELIST = {
    EmbeddingBatch: UP,
    LogitBatch: UP,
    EvalLogitBatch: EVAL,
    ServerToClientAdmmMsg: DOWN,
    JointServerMsg: DOWN,
    GradientBatchMsg: DOWN,
}

_FORBIDDEN_FIELDS = {"theta", "params", "model", "features", "x"}


class LedgerError(ValueError):
    pass


class CommLedger:
    """Per-client, per-message-class byte counts for every round."""

    def __init__(self, n_clients: int):
        self.n_clients = n_clients
        # client -> class name -> round -> bytes
        self._bytes: Dict[int, Dict[str, Dict[int, int]]] = defaultdict(
            lambda: defaultdict(lambda: defaultdict(int)))
        self._count: Dict[int, Dict[str, int]] = defaultdict(lambda: defaultdict(int))
        self._direction: Dict[str, str] = {}
        self.n_rounds = 0

    def record(self, msg: Message) -> Message:
        cls = type(msg)
        if cls not in WHITELIST:
            raise LedgerError(f"message class {cls.__name__} is not allowed on the wire")
        bad = {f.name for f in fields(msg)} & _FORBIDDEN_FIELDS
        if bad:
            raise LedgerError(f"{cls.__name__} carries private fields {sorted(bad)}")
        name = cls.__name__
        self._direction[name] = WHITELIST[cls]
        self._bytes[msg.client][name][msg.round] += msg.n_bytes
        self._count[msg.client][name] += 1
        if WHITELIST[cls] != EVAL:
            self.n_rounds = max(self.n_rounds, msg.round + 1)
        return msg

    def direction(self, name: str) -> str:
        return self._direction[name]

    def total_bytes(self, direction: Optional[str] = None, client: Optional[int] = None) -> int:
        tot = 0
        for k, per_class in self._bytes.items():
            if client is not None and k != client:
                continue
            for name, per_round in per_class.items():
                d = self._direction[name]
                if (direction is None and d != EVAL) or d == direction:
                    tot += sum(per_round.values())
        return tot

    def round_bytes(self, t: int, direction: str, client: Optional[int] = None) -> int:
        tot = 0
        for k, per_class in self._bytes.items():
            if client is not None and k != client:
                continue
            for name, per_round in per_class.items():
                if self._direction[name] == direction:
                    tot += per_round.get(t, 0)
        return tot

    def cumulative(self, direction: str, upto_round: int) -> int:
        """Bytes in ``direction`` summed over clients for rounds ``<= upto_round``."""
        tot = 0
        for per_class in self._bytes.values():
            for name, per_round in per_class.items():
                if self._direction[name] == direction:
                    tot += sum(v for r, v in per_round.items() if r <= upto_round)
        return tot

    def to_dict(self) -> dict:
        out = {}
        n = self.n_rounds
        for k in sorted(self._bytes):
            entry = {}
            for name in sorted(self._bytes[k]):
                per_round = self._bytes[k][name]
                rounds = (max(per_round) + 1) if per_round else 0
                length = max(n, rounds)
                entry[name] = {
                    "direction": self._direction[name],
                    "count": self._count[k][name],
                    "per_round": [per_round.get(t, 0) for t in range(length)],
                    "total_bytes": int(sum(per_round.values())),
                }
            out[str(k)] = entry
        return {"bytes_per_scalar": BYTES_PER_SCALAR, "n_rounds": n, "clients": out}

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "CommLedger":
        led = cls(len(d["clients"]))
        for k, entry in d["clients"].items():
            for name, rec in entry.items():
                led._direction[name] = rec["direction"]
                led._count[int(k)][name] = rec.get("count", 0)
                for t, v in enumerate(rec["per_round"]):
                    if v:
                        led._bytes[int(k)][name][t] += int(v)
        led.n_rounds = d.get("n_rounds", 0)
        return led

    @classmethod
    def load(cls, path) -> "CommLedger":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def mib(n_bytes: int) -> float:
    return n_bytes / MIB


# closed-form per-client, per-round scalar counts ---------------------------

def admm_scalars(b: int, d_f: int, d_c: int) -> Dict[str, int]:
    return {UP: b * d_f, DOWN: 2 * b * d_c + d_f * d_c}


def admm_joint_scalars(b: int, d_c: int) -> Dict[str, int]:
    return {UP: b * d_c, DOWN: 2 * b * d_c}


def split_scalars(b: int, d_f: int) -> Dict[str, int]:
    return {UP: b * d_f, DOWN: b * d_f}


def fdml_scalars(b: int, d_c: int) -> Dict[str, int]:
    return {UP: b * d_c, DOWN: b * d_c}
