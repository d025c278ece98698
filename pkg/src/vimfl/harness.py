"""Experiment orchestration, reporting and the client-importance experiments."""

from __future__ import annotations

import csv
import functools
import json
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .admm import VimAdmm
from .admm_joint import VimAdmmJoint
from .base import Trainer
from .baselines import FedBCD, Fdml, SplitLearning, Vafl
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, validate
from .data import (BatchSchedule, PartitionScheme, Splits, SyntheticSpec, VerticalDataset,
                   find_mnist_files, gen_synthetic, load_mnist_idx, partition_vertical,
                   train_val_split)
from .ledger import DOWN, MIB, UP, CommLedger
from .nn import mlp_forward
from .pool import ClientPool
from .privacy import DpPolicy, label_dp_randomize
from .rng import stream

TRAINERS = {
    "vimadmm": VimAdmm,
    "vimadmm-j": VimAdmmJoint,
    "split": SplitLearning,
    "vafl": Vafl,
    "fedbcd": FedBCD,
    "fdml": Fdml,
}

METRIC_FIELDS = ["round", "train_loss", "val_acc", "test_acc", "admm_loss",
                 "constraint_residual", "bytes_up", "bytes_down", "epsilon"]

NOT_REACHED = "not reached"


class RunError(RuntimeError):
    pass


# -- data ------------------------------------------------------------------

@functools.lru_cache(maxsize=2)
def _mnist_arrays(directory: str):
    files = find_mnist_files(directory)
    Xtr, ytr = load_mnist_idx(files["train_images"], files["train_labels"])
    Xte, yte = load_mnist_idx(files["test_images"], files["test_labels"])
    for a in (Xtr, ytr, Xte, yte):
        a.setflags(write=False)
    return Xtr, ytr, Xte, yte


def _partition(cfg: ExperimentConfig, X: np.ndarray) -> List[np.ndarray]:
    p = cfg.partition
    scheme = PartitionScheme(
        kind=p.kind, n_clients=p.n_clients, image_shape=(28, 28),
        grid=tuple(p.grid) if p.grid else None,
        ranges=[tuple(r) for r in p.ranges] if p.ranges else None)
    return partition_vertical(X, scheme)


def load_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    """Train/validation/test vertical datasets for one run."""
    d = cfg.dataset
    dseed = seed if d.seed is None else d.seed
    if d.kind == "mnist":
        Xtr, ytr, Xte, yte = _mnist_arrays(str(d.mnist_dir))
        if d.n_train is not None:
            keep = np.sort(stream(dseed, "mnist-subset").permutation(len(ytr))[: d.n_train])
            Xtr, ytr = Xtr[keep], ytr[keep]
        if d.n_test is not None:
            Xte, yte = Xte[: d.n_test], yte[: d.n_test]
        train = VerticalDataset(_partition(cfg, Xtr), ytr, 10)
        test = VerticalDataset(_partition(cfg, Xte), yte, 10)
    else:
        n_test = d.n_test if d.n_test is not None else max(1, d.n // 4)
        spec = SyntheticSpec(d.n + n_test, d.n_classes, list(d.informative_dims),
                             list(d.noise_dims), d.noise_scale, d.separation)
        full = gen_synthetic(spec, dseed)
        train, test = full.take(np.arange(d.n)), full.take(np.arange(d.n, d.n + n_test))
    val = None
    if d.n_val:
        tr_idx, va_idx = train_val_split(train.n, d.n_val, dseed)
        train, val = train.take(np.sort(tr_idx)), train.take(np.sort(va_idx))
    if d.noisy_client is not None and d.noisy_sigma > 0:
        k, s = d.noisy_client, d.noisy_sigma
        train = _add_noise(train, k, s, stream(dseed, "client-noise", k, "train"))
        test = _add_noise(test, k, s, stream(dseed, "client-noise", k, "test"))
        if val is not None:
            val = _add_noise(val, k, s, stream(dseed, "client-noise", k, "val"))
    if cfg.partition.clients is not None:
        keep = list(cfg.partition.clients)
        train = train.select_clients(keep)
        test = test.select_clients(keep)
        val = val.select_clients(keep) if val is not None else None
    return Splits(train, val, test)


def _add_noise(ds: VerticalDataset, k: int, sigma: float, rng) -> VerticalDataset:
    blocks = list(ds.blocks)
    blocks[k] = blocks[k] + sigma * rng.standard_normal(blocks[k].shape)
    return VerticalDataset(blocks, ds.labels, ds.n_classes)


def make_trainer(cfg: ExperimentConfig, train: VerticalDataset, seed: int,
                 ledger: Optional[CommLedger] = None, pool: Optional[ClientPool] = None) -> Trainer:
    if cfg.label_dp.enabled:
        noisy, _ = label_dp_randomize(train.labels, train.n_classes, cfg.label_dp.scale,
                                      stream(seed, "label-dp"))
        train = VerticalDataset(train.blocks, noisy, train.n_classes)
    dp = None
    if cfg.dp.enabled:
        dp = DpPolicy(cfg.dp.clip, cfg.dp.sigma, cfg.dp.delta, seed)
    return TRAINERS[cfg.method](train, cfg.train, seed=seed, dp=dp, ledger=ledger, pool=pool)


# -- metrics -----------------------------------------------------------------

def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels)) if len(labels) else float("nan")


def classwise_accuracy_std(predictions, labels, n_classes: Optional[int] = None) -> float:
    """Population std of per-class accuracy over the classes present in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    classes = np.unique(labels) if n_classes is None else [
        c for c in range(n_classes) if np.any(labels == c)]
    accs = [np.mean(predictions[labels == c] == c) for c in classes]
    return float(np.std(accs)) if accs else 0.0


@dataclass
class RoundMetrics:
    round: int
    train_loss: float
    val_acc: Optional[float] = None
    test_acc: Optional[float] = None
    admm_loss: Optional[float] = None
    constraint_residual: Optional[float] = None
    bytes_up: int = 0
    bytes_down: int = 0
    epsilon: Optional[float] = None

    def row(self) -> List[str]:
        return [_fmt(getattr(self, f)) for f in METRIC_FIELDS]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class StoppingRule:
    """Stop once validation accuracy has sat more than ``drop_tol`` below its
    running best for ``patience`` consecutive evaluations, or at ``max_rounds``."""

    max_rounds: int
    patience: int = 1
    drop_tol: float = 0.02
    best: float = -math.inf
    strikes: int = 0

    def update(self, val_acc: Optional[float]) -> bool:
        if val_acc is None:
            return False
        self.best = max(self.best, val_acc)
        self.strikes = self.strikes + 1 if self.best - val_acc > self.drop_tol else 0
        return self.strikes >= self.patience


@dataclass
class RunResult:
    metrics: List[RoundMetrics]
    ledger: CommLedger
    trainer: Trainer
    splits: Splits
    summary: Dict
    out_dir: Optional[Path] = None


def _eval(trainer: Trainer, ds: Optional[VerticalDataset], t: int) -> Tuple[Optional[float], Optional[np.ndarray]]:
    if ds is None:
        return None, None
    pred = trainer.predict(ds.blocks, t)
    return accuracy(pred, ds.labels), pred


def run_experiment(cfg: ExperimentConfig, seed: Optional[int] = None, out_dir=None,
                   threads: Optional[int] = None, cancel: Optional[threading.Event] = None,
                   splits: Optional[Splits] = None) -> RunResult:
    """Train one (config, seed) pair to its stopping point and persist artifacts.

    ``out_dir`` (when given) receives ``config.txt``, ``metrics.csv`` (flushed
    after every row), ``ledger.json``, ``summary.json`` and
    ``checkpoint.vflc``. Setting ``cancel`` stops after the current round;
    everything produced so far is still written.
    """
    seed = cfg.seeds[0] if seed is None else seed
    splits = splits if splits is not None else load_splits(cfg, seed)
    train = splits.train
    cfg = validate(cfg, train.n)
    rpe = -(-train.n // cfg.train.batch_size)
    cadence = cfg.stop.eval_every or rpe
    total = cfg.total_rounds(train.n)
    rule = StoppingRule(total, cfg.stop.patience, cfg.stop.drop_tol)

    pool = ClientPool(threads if threads is not None else cfg.threads)
    ledger = CommLedger(train.n_clients)
    trainer = make_trainer(cfg, train, seed, ledger, pool)
    schedule = BatchSchedule(train.n, cfg.train.batch_size, seed)

    out = Path(out_dir) if out_dir is not None else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(replace(cfg, seeds=[seed]).dumps(), encoding="utf-8")
        fh = open(out / "metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        fh.flush()

    metrics: List[RoundMetrics] = []
    losses: List[float] = []
    last: Dict[str, float] = {}
    stopped_early = cancelled = False
    test_pred = None
    t = 0
    try:
        while t < total:
            if cancel is not None and cancel.is_set():
                cancelled = True
                break
            try:
                last = trainer.run_round(t, schedule.indices(t))
            except Exception as exc:
                raise RunError(f"round {t}: {type(exc).__name__}: {exc}") from exc
            if not np.isfinite(last["train_loss"]):
                raise RunError(f"round {t}: training diverged (non-finite loss)")
            losses.append(last["train_loss"])
            t += 1
            if t % cadence == 0 or t == total:
                val_acc, _ = _eval(trainer, splits.val, t - 1)
                test_acc, test_pred = _eval(trainer, splits.test, t - 1)
                m = RoundMetrics(
                    round=t, train_loss=float(np.mean(losses)), val_acc=val_acc, test_acc=test_acc,
                    admm_loss=(trainer.full_admm_loss()
                               if cfg.stop.admm_loss and hasattr(trainer, "full_admm_loss") else None),
                    constraint_residual=last.get("constraint_residual"),
                    bytes_up=ledger.total_bytes(UP), bytes_down=ledger.total_bytes(DOWN),
                    epsilon=trainer.epsilon())
                losses = []
                metrics.append(m)
                if writer is not None:
                    writer.writerow(m.row())
                    fh.flush()
                if rule.update(val_acc):
                    stopped_early = True
                    break
    finally:
        if fh is not None:
            fh.close()
        pool.close()

    if test_pred is None and splits.test is not None and t > 0:
        _, test_pred = _eval(trainer, splits.test, t - 1)
    summary = {
        "method": cfg.method,
        "seed": seed,
        "rounds": t,
        "rounds_per_epoch": rpe,
        "eval_every": cadence,
        "final_test_acc": metrics[-1].test_acc if metrics else None,
        "final_val_acc": metrics[-1].val_acc if metrics else None,
        "best_val_acc": rule.best if rule.best > -math.inf else None,
        "classwise_acc_std": (classwise_accuracy_std(test_pred, splits.test.labels)
                              if test_pred is not None else None),
        "head_norms": trainer.head_norms(),
        "bytes_up": ledger.total_bytes(UP),
        "bytes_down": ledger.total_bytes(DOWN),
        "epsilon": trainer.epsilon(),
        "sigma": cfg.dp.sigma if cfg.dp.enabled else None,
        "stopped_early": stopped_early,
        "cancelled": cancelled,
    }
    if out is not None:
        ledger.dump(out / "ledger.json")
        with open(out / "summary.json", "w", encoding="utf-8") as sf:
            json.dump(summary, sf, indent=1, sort_keys=True)
            sf.write("\n")
        save_checkpoint(out / "checkpoint.vflc", trainer.state_arrays())
    return RunResult(metrics, ledger, trainer, splits, summary, out)


def seed_summary(results: Sequence[Dict]) -> Dict:
    """Mean and population std of final test accuracy across seeds."""
    accs = [r["final_test_acc"] for r in results if r.get("final_test_acc") is not None]
    return {
        "seeds": [r["seed"] for r in results],
        "final_test_acc": accs,
        "mean": float(np.mean(accs)) if accs else None,
        "std": float(np.std(accs)) if accs else None,
    }


# -- reports -----------------------------------------------------------------

def ledger_report(ledger: CommLedger, target_accuracy: Optional[float] = None,
                  metrics: Optional[Sequence[RoundMetrics]] = None) -> Dict:
    """Per-round MiB by direction (summed over clients) and MiB spent to reach a target."""
    n = ledger.n_rounds
    up, down = ledger.total_bytes(UP), ledger.total_bytes(DOWN)
    report = {
        "rounds": n,
        "total_mib": {"up": up / MIB, "down": down / MIB, "total": (up + down) / MIB},
        "first_round_mib": {
            "up": ledger.round_bytes(0, UP) / MIB if n else 0.0,
            "down": ledger.round_bytes(0, DOWN) / MIB if n else 0.0,
        },
        "mean_round_mib": {
            "up": up / MIB / n if n else 0.0,
            "down": down / MIB / n if n else 0.0,
        },
    }
    report["first_round_mib"]["total"] = report["first_round_mib"]["up"] + report["first_round_mib"]["down"]
    report["mean_round_mib"]["total"] = report["mean_round_mib"]["up"] + report["mean_round_mib"]["down"]
    if target_accuracy is not None:
        if metrics is None:
            raise ValueError("a target accuracy needs the metrics trace")
        hit = next((m for m in metrics if m.test_acc is not None and m.test_acc >= target_accuracy),
                   None)
        report["target_accuracy"] = target_accuracy
        report["mib_to_target"] = ((hit.bytes_up + hit.bytes_down) / MIB if hit is not None
                                   else NOT_REACHED)
        report["round_to_target"] = hit.round if hit is not None else NOT_REACHED
    return report


def read_metrics_csv(path) -> List[RoundMetrics]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            def num(key, cast=float):
                return cast(row[key]) if row[key] != "" else None
            out.append(RoundMetrics(
                round=int(row["round"]), train_loss=float(row["train_loss"]),
                val_acc=num("val_acc"), test_acc=num("test_acc"), admm_loss=num("admm_loss"),
                constraint_residual=num("constraint_residual"),
                bytes_up=int(row["bytes_up"]), bytes_down=int(row["bytes_down"]),
                epsilon=num("epsilon")))
    return out


# -- client importance ------------------------------------------------------------

def head_importance(heads) -> List[Tuple[int, float]]:
    """``(client, ||W_k||_F)`` in descending norm order, ties broken by client id.

    Accepts head matrices or precomputed norms.
    """
    norms = [float(np.linalg.norm(h)) if np.ndim(h) else float(h) for h in heads]
    return sorted(enumerate(norms), key=lambda kv: (-kv[1], kv[0]))


def noisy_test_validation(trainer: Trainer, test: VerticalDataset, client: int, sigma: float,
                          rng: np.random.Generator) -> float:
    """Test accuracy after adding N(0, sigma^2) to one client's test features."""
    blocks = list(test.blocks)
    if sigma > 0:
        blocks[client] = blocks[client] + sigma * rng.standard_normal(blocks[client].shape)
    return accuracy(trainer.predict(blocks), test.labels)


def client_denoise_experiment(cfg: ExperimentConfig, client: int, sigma: float,
                              seed: Optional[int] = None, clean: Optional[RunResult] = None,
                              out_dir=None) -> Dict:
    """Retrain with Gaussian noise injected into one client's features; compare head norms."""
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(out_dir) if out_dir is not None else None
    if clean is None:
        clean = run_experiment(cfg, seed, out / "clean" if out else None)
    noisy_cfg = replace(cfg, dataset=replace(cfg.dataset, noisy_client=client, noisy_sigma=sigma))
    noisy = run_experiment(noisy_cfg, seed, out / "noisy" if out else None)
    return {
        "client": client,
        "sigma": sigma,
        "clean_norms": clean.trainer.head_norms(),
        "noisy_norms": noisy.trainer.head_norms(),
        "clean_test_acc": clean.summary["final_test_acc"],
        "noisy_test_acc": noisy.summary["final_test_acc"],
        "noisy_metrics": noisy.metrics,
    }


def select_clients(ranking: Sequence[Tuple[int, float]], ratio: float, mode: str) -> List[int]:
    """Top (``important``) or bottom (``unimportant``) ``ratio`` of ranked clients, in id order."""
    if mode not in ("important", "unimportant"):
        raise ValueError(f"unknown mode {mode!r}")
    m = len(ranking)
    count = max(1, min(m, int(round(ratio * m))))
    ids = [k for k, _ in ranking]
    chosen = ids[:count] if mode == "important" else ids[m - count:]
    return sorted(chosen)


def client_summarize(cfg: ExperimentConfig, ratio: float, mode: str, seed: Optional[int] = None,
                     ranking: Optional[Sequence[Tuple[int, float]]] = None, out_dir=None) -> Dict:
    """Retrain from scratch on the ``ratio`` most (or least) important clients."""
    seed = cfg.seeds[0] if seed is None else seed
    if ranking is None:
        full = run_experiment(cfg, seed)
        ranking = head_importance(full.trainer.head_norms())
    base = cfg.partition.clients
    chosen = select_clients(ranking, ratio, mode)
    # ranking ids index the current client list
    absolute = [base[k] for k in chosen] if base is not None else chosen
    sub_cfg = replace(cfg, partition=replace(cfg.partition, clients=absolute))
    res = run_experiment(sub_cfg, seed, out_dir)
    return {"mode": mode, "ratio": ratio, "clients": absolute,
            "final_test_acc": res.summary["final_test_acc"], "metrics": res.metrics}


def export_embeddings(trainer: Trainer, ds: VerticalDataset, path, indices=None) -> None:
    """CSV ``client,sample_idx,label,e0..`` of every client's extractor output."""
    idx = np.arange(ds.n) if indices is None else np.asarray(indices)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d_f = trainer.sites[0].model.d_out
        w.writerow(["client", "sample_idx", "label"] + [f"e{i}" for i in range(d_f)])
        for site, X in zip(trainer.sites, ds.blocks):
            E = mlp_forward(site.model, X[idx])
            for j, row in zip(idx, E):
                w.writerow([site.client, int(j), int(ds.labels[j])] + [repr(float(v)) for v in row])
