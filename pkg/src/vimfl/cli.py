"""Command-line entry point: ``vimfl run | dp-calibrate | analyze``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, build_config, expand_grid, parse_config, read_config_file, validate
from .harness import (RunError, client_denoise_experiment, client_summarize, export_embeddings,
                      head_importance, ledger_report, load_splits, make_trainer,
                      noisy_test_validation, read_metrics_csv, run_experiment, seed_summary)
from .ledger import CommLedger
from .privacy import CalibrationError, calibrate_sigma, rdp_epsilon
from .rng import stream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class Refusal(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, action="append",
                        help="override the config's seeds (repeatable)")
    common.add_argument("--force", action="store_true", help="write into a non-empty --out")
    common.add_argument("--threads", type=int, help="client fan-out threads (env VFL_THREADS)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key")

    ap = argparse.ArgumentParser(prog="vimfl", description="Vertical federated learning simulator")
    sub = ap.add_subparsers(dest="verb", required=True)

    sub.add_parser("run", parents=[common], help="train per seed (and grid point)")

    cal = sub.add_parser("dp-calibrate", parents=[common], help="RDP accountant query")
    cal.add_argument("--rounds", "-T", type=float, required=True)
    cal.add_argument("--delta", type=float, default=1e-5)
    grp = cal.add_mutually_exclusive_group(required=True)
    grp.add_argument("--epsilon", type=float, help="target epsilon, solve for sigma")
    grp.add_argument("--sigma", type=float, help="noise multiplier, report epsilon")

    an = sub.add_parser("analyze", parents=[common], help="reports on a finished run")
    an.add_argument("what", choices=["importance", "summarize", "denoise", "noisy-test",
                                     "comm-report", "embeddings"])
    an.add_argument("run_dir", help="directory written by 'run' for one seed")
    an.add_argument("--target", type=float, help="comm-report: target test accuracy")
    an.add_argument("--ratio", type=float, default=0.5, help="summarize: fraction of clients")
    an.add_argument("--client", type=int, help="denoise / noisy-test: client id")
    an.add_argument("--sigma", type=float, default=1.0, help="denoise / noisy-test: noise std")
    an.add_argument("--split", choices=["train", "test"], default="test",
                    help="embeddings: which split to export")
    return ap


def _overrides(pairs: List[str]) -> dict:
    from .config import _parse_value

    out = {}
    for p in pairs:
        if "=" not in p:
            raise ConfigError(p, "expected KEY=VALUE")
        k, v = p.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def _check_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise Refusal(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def cmd_run(args) -> int:
    cfg = parse_config(args.config, _overrides(args.set))
    if args.seed:
        cfg.seeds = list(args.seed)
    if not args.out:
        raise ConfigError("--out", "required for run")
    out = Path(args.out)
    grid = expand_grid(cfg)
    # validate every grid point up front; sizes need the data
    for g in grid:
        validate(replace(g, dp=replace(g.dp)), load_splits(g, g.seeds[0]).train.n)
    _check_out(out, args.force)

    cancel = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: cancel.set())
    failed = False
    try:
        for gi, g in enumerate(grid):
            gdir = out / f"grid{gi}" if len(grid) > 1 else out
            summaries = []
            for s in g.seeds:
                try:
                    res = run_experiment(g, s, gdir / f"seed{s}", threads=args.threads,
                                         cancel=cancel)
                    summaries.append(res.summary)
                    print(f"seed {s}: test_acc={res.summary['final_test_acc']}", flush=True)
                except RunError as exc:
                    failed = True
                    print(f"seed {s} failed: {exc}", file=sys.stderr)
                if cancel.is_set():
                    break
            with open(gdir / "summary.json", "w", encoding="utf-8") as fh:
                json.dump(seed_summary(summaries), fh, indent=1, sort_keys=True)
                fh.write("\n")
            if cancel.is_set():
                break
    finally:
        signal.signal(signal.SIGINT, previous)
    return EXIT_RUNTIME if failed or cancel.is_set() else EXIT_OK


def cmd_dp_calibrate(args) -> int:
    T, delta = args.rounds, args.delta
    if args.epsilon is not None:
        sigma = calibrate_sigma(T, args.epsilon, delta)
    else:
        sigma = args.sigma
    eps, alpha = rdp_epsilon(T, sigma, delta)
    print(json.dumps({"T": T, "sigma": sigma, "delta": delta, "epsilon": eps, "alpha_star": alpha},
                     sort_keys=True))
    return EXIT_OK


def _load_run(run_dir: Path):
    for name in ("config.txt", "ledger.json", "metrics.csv"):
        if not (run_dir / name).exists():
            raise FileNotFoundError(f"missing run artifact {run_dir / name}")
    cfg = build_config(read_config_file(run_dir / "config.txt"))
    return cfg


def _restore(run_dir: Path, cfg):
    seed = cfg.seeds[0]
    splits = load_splits(cfg, seed)
    validate(cfg, splits.train.n)
    trainer = make_trainer(cfg, splits.train, seed)
    ck = run_dir / "checkpoint.vflc"
    if not ck.exists():
        raise FileNotFoundError(f"missing run artifact {ck}")
    trainer.load_state_arrays(load_checkpoint(ck))
    return trainer, splits


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return {k: getattr(o, k) for k in o.__dataclass_fields__}
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = _load_run(run_dir)
    out = Path(args.out) if args.out else run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]

    if args.what == "comm-report":
        report = ledger_report(CommLedger.load(run_dir / "ledger.json"), args.target,
                               read_metrics_csv(run_dir / "metrics.csv"))
        _write_json(out / "comm_report.json", report)
        print(json.dumps(report, sort_keys=True))
        return EXIT_OK

    trainer, splits = _restore(run_dir, cfg)
    norms = trainer.head_norms()
    if args.what in ("importance", "summarize") and norms is None:
        raise ConfigError("method", f"{cfg.method} has no per-client heads to rank")
    if args.what == "importance":
        ranking = head_importance(norms)
        with open(out / "importance.csv", "w", encoding="utf-8") as fh:
            fh.write("rank,client,head_norm\n")
            for r, (k, v) in enumerate(ranking):
                fh.write(f"{r},{k},{v!r}\n")
        print("\n".join(f"{k},{v!r}" for k, v in ranking))
    elif args.what == "summarize":
        ranking = head_importance(norms)
        for mode in ("important", "unimportant"):
            res = client_summarize(cfg, args.ratio, mode, seed, ranking, out / f"summarize_{mode}")
            _write_json(out / f"summarize_{mode}.json", res)
            print(f"{mode}: clients={res['clients']} test_acc={res['final_test_acc']}")
    elif args.what == "noisy-test":
        clients = [args.client] if args.client is not None else range(trainer.M)
        rows = []
        for k in clients:
            acc = noisy_test_validation(trainer, splits.test, k, args.sigma,
                                        stream(seed, "noisy-test", k))
            rows.append({"client": k, "sigma": args.sigma, "test_acc": acc})
        _write_json(out / "noisy_test.json", rows)
        for r in rows:
            print(f"client {r['client']}: test_acc={r['test_acc']}")
    elif args.what == "denoise":
        if args.client is None:
            raise ConfigError("--client", "required for denoise")
        res = client_denoise_experiment(cfg, args.client, args.sigma, seed, out_dir=out / "denoise")
        _write_json(out / "denoise.json", res)
        print(f"client {args.client}: clean norm {res['clean_norms'][args.client]!r} "
              f"-> noisy norm {res['noisy_norms'][args.client]!r}")
    elif args.what == "embeddings":
        ds = splits.test if args.split == "test" else splits.train
        export_embeddings(trainer, ds, out / f"embeddings_{args.split}.csv")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"run": cmd_run, "dp-calibrate": cmd_dp_calibrate, "analyze": cmd_analyze}
    try:
        return handlers[args.verb](args)
    except (ConfigError, CalibrationError, Refusal) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
