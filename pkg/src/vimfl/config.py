"""Experiment configuration: flat ``key = value`` files with dotted sections.

Example::

    method = vimadmm
    seeds = [0, 1, 2]
    dataset.kind = mnist
    dataset.mnist_dir = /data/mnist
    partition.kind = row-bands
    partition.n_clients = 14
    train.local_steps = 20
    train.rho = [0.5, 1, 2]      # a list on a grid key expands to one run per value
    dp.target_epsilon = 8

Values are parsed as JSON where possible (numbers, lists, booleans, null)
and otherwise kept as bare strings. ``#`` starts a comment.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Iterator, List, Optional

from .base import TrainConfig

METHODS = ("vimadmm", "vimadmm-j", "split", "vafl", "fedbcd", "fdml")
ADMM_METHODS = ("vimadmm", "vimadmm-j")
MULTI_STEP_METHODS = ("vimadmm", "vimadmm-j", "fedbcd")
GRID_KEYS = ("train.rho", "train.local_steps", "train.lr", "train.local_lr", "train.head_lr")


class ConfigError(ValueError):
    """A configuration problem; the message always names the offending key."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class DatasetConfig:
    kind: str = "synthetic"            # mnist | synthetic
    mnist_dir: Optional[str] = None
    n_train: Optional[int] = None      # subset of the training pool (first n after a seeded shuffle)
    n_val: int = 0
    n_test: Optional[int] = None
    seed: Optional[int] = None         # data generation / subsetting; defaults to the run seed
    # synthetic only
    n: int = 2000
    n_classes: int = 10
    informative_dims: List[int] = field(default_factory=lambda: [8])
    noise_dims: List[int] = field(default_factory=lambda: [8])
    noise_scale: float = 1.0
    separation: float = 1.0
    # inject Gaussian noise into one client's train and test features
    noisy_client: Optional[int] = None
    noisy_sigma: float = 0.0


@dataclass
class PartitionConfig:
    kind: str = "row-bands"           # row-bands | patches | dim-ranges (synthetic uses its blocks)
    n_clients: Optional[int] = None
    grid: Optional[List[int]] = None
    ranges: Optional[List[List[int]]] = None
    clients: Optional[List[int]] = None   # keep only these clients, in this order


@dataclass
class DpConfig:
    enabled: bool = False
    clip: float = 1.0
    sigma: Optional[float] = None
    target_epsilon: Optional[float] = None
    delta: float = 1e-5


@dataclass
class LabelDpConfig:
    enabled: bool = False
    scale: float = 1.0


@dataclass
class StopConfig:
    max_rounds: Optional[int] = None
    max_epochs: Optional[float] = 10
    patience: int = 1
    drop_tol: float = 0.02
    eval_every: Optional[int] = None   # rounds; default one epoch
    admm_loss: bool = False            # full-data L_ADMM at each eval point (ADMM only)


@dataclass
class ExperimentConfig:
    method: str = "vimadmm"
    seeds: List[int] = field(default_factory=lambda: [0])
    threads: Optional[int] = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    label_dp: LabelDpConfig = field(default_factory=LabelDpConfig)
    stop: StopConfig = field(default_factory=StopConfig)
    tau_set: bool = False              # whether train.local_steps was given explicitly
    rho_set: bool = False

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d.pop("tau_set")
        d.pop("rho_set")
        return d

    def dumps(self) -> str:
        """Effective config in the same flat format ``parse_text`` reads."""
        lines = []
        for key, value in flatten(self.to_dict()):
            if key == "train.local_steps" and self.method not in MULTI_STEP_METHODS:
                continue
            if key == "train.rho" and self.method not in ADMM_METHODS:
                continue
            lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    def total_rounds(self, n_train: int) -> int:
        rpe = -(-n_train // self.train.batch_size)
        limits = []
        if self.stop.max_rounds is not None:
            limits.append(int(self.stop.max_rounds))
        if self.stop.max_epochs is not None:
            limits.append(int(round(self.stop.max_epochs * rpe)))
        return min(limits) if limits else 10 * rpe


_SECTIONS = {"dataset": DatasetConfig, "partition": PartitionConfig, "train": TrainConfig,
             "dp": DpConfig, "label_dp": LabelDpConfig, "stop": StopConfig}
_TOP = {"method", "seeds", "threads"}


def flatten(d: Dict[str, Any], prefix: str = "") -> Iterator:
    for k, v in d.items():
        if isinstance(v, dict):
            yield from flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_text(text: str) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(key, "given twice")
        out[key] = _parse_value(value)
    return out


def read_config_file(path) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read())


def _known(key: str) -> bool:
    if key in _TOP:
        return True
    sec, _, name = key.partition(".")
    return sec in _SECTIONS and name in {f.name for f in fields(_SECTIONS[sec])}


def build_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Unvalidated config with grid keys still possibly holding lists."""
    for key in raw:
        if not _known(key):
            raise ConfigError(key, "unknown key")
    if "method" not in raw:
        raise ConfigError("method", "required key missing")
    cfg = ExperimentConfig()
    sections = {name: {} for name in _SECTIONS}
    for key, value in raw.items():
        if key in _TOP:
            setattr(cfg, key, value)
        else:
            sec, _, name = key.partition(".")
            sections[sec][name] = value
    for sec, values in sections.items():
        setattr(cfg, sec, replace(getattr(cfg, sec), **values))
    cfg.tau_set = "train.local_steps" in raw
    cfg.rho_set = "train.rho" in raw
    if isinstance(cfg.seeds, int):
        cfg.seeds = [cfg.seeds]
    return cfg


def expand_grid(cfg: ExperimentConfig) -> List[ExperimentConfig]:
    axes = []
    for key in GRID_KEYS:
        name = key.split(".", 1)[1]
        value = getattr(cfg.train, name)
        if isinstance(value, list):
            axes.append([(name, v) for v in value])
    if not axes:
        return [cfg]
    out = []
    for combo in itertools.product(*axes):
        out.append(replace(cfg, train=replace(cfg.train, **dict(combo))))
    return out


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(key, msg)


def validate(cfg: ExperimentConfig, n_train: Optional[int] = None) -> ExperimentConfig:
    """Check ranges and method rules; fill ``dp.sigma`` from a target epsilon."""
    from .privacy import CalibrationError, calibrate_sigma

    _require(cfg.method in METHODS, "method", f"must be one of {', '.join(METHODS)}")
    _require(isinstance(cfg.seeds, list) and cfg.seeds and all(isinstance(s, int) for s in cfg.seeds),
             "seeds", "must be a non-empty list of integers")
    if cfg.tau_set and cfg.method not in MULTI_STEP_METHODS:
        raise ConfigError("train.local_steps", f"not applicable to method {cfg.method} "
                          "(one local step per round)")
    if cfg.rho_set and cfg.method not in ADMM_METHODS:
        raise ConfigError("train.rho", f"only ADMM methods take rho, not {cfg.method}")

    t = cfg.train
    for name in ("rho", "lr", "local_lr"):
        _require(_scalar_positive(getattr(t, name)), f"train.{name}", "must be positive")
    _require(t.head_lr is None or _scalar_positive(t.head_lr), "train.head_lr", "must be positive")
    _require(isinstance(t.local_steps, int) and t.local_steps >= 1, "train.local_steps",
             "must be an integer >= 1")
    _require(0 <= t.momentum < 1, "train.momentum", "must lie in [0, 1)")
    _require(t.beta >= 0, "train.beta", "must be non-negative")
    _require(t.server_beta >= 0, "train.server_beta", "must be non-negative")
    _require(isinstance(t.batch_size, int) and t.batch_size >= 1, "train.batch_size",
             "must be a positive integer")
    _require(isinstance(t.embed_dim, int) and t.embed_dim >= 1, "train.embed_dim",
             "must be a positive integer")
    _require(t.head_schedule in ("simultaneous", "sequential"), "train.head_schedule",
             "must be simultaneous or sequential")
    _require(t.head_solver in ("sgd", "exact"), "train.head_solver", "must be sgd or exact")
    _require(t.local_solver in ("sgd", "exact"), "train.local_solver", "must be sgd or exact")
    _require(t.server_model == "linear", "train.server_model", "only 'linear' is supported")

    d = cfg.dataset
    _require(d.kind in ("mnist", "synthetic"), "dataset.kind", "must be mnist or synthetic")
    if d.kind == "mnist":
        _require(d.mnist_dir is not None, "dataset.mnist_dir", "required for dataset.kind = mnist")
    _require(d.n_val >= 0, "dataset.n_val", "must be non-negative")
    if n_train is not None:
        _require(t.batch_size <= n_train, "train.batch_size",
                 f"{t.batch_size} exceeds the {n_train} training samples")

    s = cfg.stop
    _require(s.max_rounds is not None or s.max_epochs is not None, "stop.max_rounds",
             "one of stop.max_rounds / stop.max_epochs is required")
    _require(0 <= s.drop_tol < 1, "stop.drop_tol", "must lie in [0, 1)")
    _require(s.patience >= 1, "stop.patience", "must be >= 1")

    if cfg.dp.enabled:
        _require(cfg.dp.clip > 0, "dp.clip", "must be positive")
        _require(0 < cfg.dp.delta < 1, "dp.delta", "must lie in (0, 1)")
        # with a target epsilon, sigma is (re)derived so echoed configs round-trip
        _require(cfg.dp.sigma is not None or cfg.dp.target_epsilon is not None, "dp.sigma",
                 "give dp.sigma or dp.target_epsilon")
        _require(cfg.dp.sigma is None or cfg.dp.sigma >= 0, "dp.sigma", "must be non-negative")
        if cfg.dp.target_epsilon is not None:
            _require(n_train is not None, "dp.target_epsilon", "needs the training-set size")
            try:
                cfg.dp.sigma = calibrate_sigma(cfg.total_rounds(n_train), cfg.dp.target_epsilon,
                                               cfg.dp.delta)
            except CalibrationError as exc:
                raise ConfigError("dp.target_epsilon", str(exc)) from exc
    if cfg.label_dp.enabled:
        _require(cfg.label_dp.scale > 0, "label_dp.scale", "must be positive")
    return cfg


def _scalar_positive(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0


def parse_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read ``path`` (if any), apply ``overrides`` and return the unvalidated config."""
    raw = read_config_file(path) if path is not None else {}
    raw.update(overrides or {})
    return build_config(raw)
