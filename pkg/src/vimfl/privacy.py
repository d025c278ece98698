"""Client-level DP for transmitted output matrices, its RDP accountant, and label DP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .rng import stream

ALPHA_MAX = 4096.0


@dataclass
class DpPolicy:
    """Frobenius clip ``C`` plus Gaussian noise of std ``sigma * C`` per cell."""

    clip: float
    sigma: float
    delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.clip <= 0 or self.sigma < 0:
            raise ValueError("clip must be positive and sigma non-negative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    def noise_stream(self, client: int, round_: int) -> np.random.Generator:
        return stream(self.seed, "dp-noise", client, round_)

    def privatize(self, A: np.ndarray, client: int, round_: int) -> np.ndarray:
        return gaussian_perturb(clip_frobenius(A, self.clip), self.sigma, self.clip,
                                self.noise_stream(client, round_))


def clip_frobenius(A: np.ndarray, C: float) -> np.ndarray:
    if C <= 0:
        raise ValueError("clip threshold must be positive")
    norm = float(np.linalg.norm(A))
    if norm <= C:
        return np.array(A, dtype=np.float64)
    # the rescaled norm can exceed C by one ulp; shave it so the bound is hard
    out = A * (C / norm)
    while np.linalg.norm(out) > C:
        out = out * (1.0 - 1e-15)
    return out


def gaussian_perturb(A: np.ndarray, sigma: float, C: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return np.array(A, dtype=np.float64)
    return A + rng.normal(0.0, sigma * C, size=A.shape)


# -- accountant ------------------------------------------------------------

def _eps_of_alpha(alpha, T: float, sigma: float, delta: float):
    alpha = np.asarray(alpha, dtype=np.float64)
    return (T * alpha / (2 * sigma ** 2) + np.log((alpha - 1) / alpha)
            - (math.log(delta) + np.log(alpha)) / (alpha - 1))


def _alpha_grid() -> np.ndarray:
    geo = 1.0 + np.geomspace(1e-6, ALPHA_MAX - 1, 2000)
    ints = np.arange(2, int(ALPHA_MAX) + 1, dtype=np.float64)
    return np.unique(np.concatenate([geo, ints]))


_GRID = _alpha_grid()


def _check_args(T, sigma, delta):
    if T < 0:
        raise ValueError("T must be non-negative")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")


def rdp_epsilon(T: float, sigma: float, delta: float) -> Tuple[float, float]:
    """Smallest ``(eps, alpha)`` of the T-round Gaussian RDP-to-DP bound.

    Evaluates ``T a / 2s^2 + log((a-1)/a) - (log d + log a)/(a-1)`` on a
    geometric-plus-integer grid over ``(1, 4096]`` and refines the best
    bracket by golden-section search.
    """
    _check_args(T, sigma, delta)
    vals = _eps_of_alpha(_GRID, T, sigma, delta)
    i = int(np.argmin(vals))
    lo = _GRID[max(i - 1, 0)]
    hi = _GRID[min(i + 1, len(_GRID) - 1)]
    f = lambda a: float(_eps_of_alpha(a, T, sigma, delta))
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(200):
        if b - a <= 1e-12 * b:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    best_a, best = (c, fc) if fc < fd else (d, fd)
    if vals[i] < best:
        best_a, best = float(_GRID[i]), float(vals[i])
    return float(best), float(best_a)


class CalibrationError(ValueError):
    pass


def calibrate_sigma(T: float, eps_target: float, delta: float,
                    lo: float = 1e-2, hi: float = 1e4, rtol: float = 1e-3) -> float:
    """Smallest-noise ``sigma`` whose epsilon lands in ``[eps(1 - rtol), eps]``."""
    if eps_target <= 0:
        raise CalibrationError("target epsilon must be positive")
    if rdp_epsilon(T, hi, delta)[0] > eps_target:
        raise CalibrationError(f"epsilon {eps_target} unreachable with sigma <= {hi}")
    if rdp_epsilon(T, lo, delta)[0] <= eps_target:
        return lo
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        eps = rdp_epsilon(T, mid, delta)[0]
        if eps > eps_target:
            lo = mid
        else:
            hi = mid
            if eps >= eps_target * (1 - rtol):
                return mid
    return hi


@dataclass
class PrivacySpend:
    """Per-client round counter; the reported budget is the max over clients."""

    sigma: float
    delta: float
    rounds: Dict[int, int] = field(default_factory=dict)

    def step(self, client: int) -> None:
        self.rounds[client] = self.rounds.get(client, 0) + 1

    def client_epsilon(self, client: int) -> float:
        return rdp_epsilon(self.rounds.get(client, 0), self.sigma, self.delta)[0]

    def epsilon(self) -> float:
        # disjoint features across clients: parallel composition takes the max
        if not self.rounds:
            return rdp_epsilon(0, self.sigma, self.delta)[0]
        return max(self.client_epsilon(k) for k in self.rounds)


# -- label DP ----------------------------------------------------------------

def label_dp_epsilon(scale: float) -> float:
    return 2 * math.sqrt(2) / scale


def label_dp_randomize(labels, n_classes: int, scale: float,
                       rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """One-hot labels plus Laplace(``scale``) noise per coordinate, relabelled by argmax."""
    if scale <= 0:
        raise ValueError("Laplace scale must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    y = np.zeros((labels.size, n_classes))
    y[np.arange(labels.size), labels] = 1.0
    noisy = y + rng.laplace(0.0, scale, size=y.shape)
    return noisy.argmax(axis=1), label_dp_epsilon(scale)
