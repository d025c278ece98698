import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from vimfl.config import build_config
from vimfl.data import SyntheticSpec, gen_synthetic
from vimfl.harness import (NOT_REACHED, RoundMetrics, RunError, StoppingRule, accuracy,
                           classwise_accuracy_std, client_denoise_experiment, client_summarize,
                           export_embeddings, head_importance, ledger_report, load_splits,
                           noisy_test_validation, read_metrics_csv, run_experiment,
                           seed_summary, select_clients)
from vimfl.ledger import MIB, CommLedger, EmbeddingBatch, GradientBatchMsg


def _cfg(method="vimadmm", **over):
    raw = {"method": method, "dataset.n": 120, "dataset.n_test": 60, "dataset.n_val": 20,
           "dataset.n_classes": 3, "dataset.informative_dims": [4], "dataset.noise_dims": [3, 3],
           "train.hidden": 6, "train.embed_dim": 3, "train.batch_size": 25,
           "train.local_lr": 0.05, "stop.max_epochs": 2}
    if method in ("vimadmm", "vimadmm-j", "fedbcd"):
        raw["train.local_steps"] = 2
    raw.update(over)
    return build_config(raw)


def test_accuracy_and_classwise_std():
    y = np.array([0, 0, 1, 1, 2, 2])
    p = np.array([0, 0, 1, 0, 0, 0])
    assert accuracy(p, y) == pytest.approx(0.5)
    # per-class accuracies 1, 0.5, 0
    assert classwise_accuracy_std(p, y) == pytest.approx(np.std([1.0, 0.5, 0.0]))
    assert classwise_accuracy_std(y, y) == 0.0


def test_stopping_rule():
    r = StoppingRule(100, patience=2, drop_tol=0.02)
    assert not r.update(0.90)
    assert not r.update(0.885)      # within tolerance
    assert not r.update(0.87)       # first strike
    assert not r.update(0.91)       # resets
    assert not r.update(0.88)
    assert r.update(0.85)
    assert not StoppingRule(5).update(None)


def test_ledger_report_values():
    led = CommLedger(2)
    for t in range(2):
        for k in range(2):
            led.record(EmbeddingBatch(t, k, np.zeros((256, 256))))
            led.record(GradientBatchMsg(t, k, np.zeros((128, 256))))
    rep = ledger_report(led)
    assert rep["first_round_mib"]["up"] == pytest.approx(0.5)
    assert rep["first_round_mib"]["down"] == pytest.approx(0.25)
    assert rep["total_mib"]["total"] == pytest.approx(1.5)
    ms = [RoundMetrics(1, 0.0, test_acc=0.5, bytes_up=MIB, bytes_down=0),
          RoundMetrics(2, 0.0, test_acc=0.8, bytes_up=2 * MIB, bytes_down=MIB)]
    assert ledger_report(led, 0.7, ms)["mib_to_target"] == pytest.approx(3.0)
    assert ledger_report(led, 0.9, ms)["mib_to_target"] == NOT_REACHED
    with pytest.raises(ValueError):
        ledger_report(led, 0.5)


def test_ledger_report_empty():
    rep = ledger_report(CommLedger(3))
    assert rep["rounds"] == 0 and rep["mean_round_mib"]["total"] == 0.0


def test_head_importance_order_and_ties():
    heads = [np.ones((2, 2)), 3 * np.ones((2, 2)), np.ones((2, 2))]
    assert [k for k, _ in head_importance(heads)] == [1, 0, 2]
    assert head_importance([1.0, 2.0])[0] == (1, 2.0)


def test_select_clients():
    ranking = [(3, 9.0), (0, 5.0), (4, 2.0), (1, 1.0), (2, 0.5)]
    assert select_clients(ranking, 0.4, "important") == [0, 3]
    assert select_clients(ranking, 0.4, "unimportant") == [1, 2]
    assert select_clients(ranking, 1.0, "important") == [0, 1, 2, 3, 4]
    assert select_clients(ranking, 0.01, "important") == [3]
    with pytest.raises(ValueError):
        select_clients(ranking, 0.5, "middle")


def test_seed_summary():
    s = seed_summary([{"seed": 0, "final_test_acc": 0.8}, {"seed": 1, "final_test_acc": 0.9}])
    assert s["mean"] == pytest.approx(0.85) and s["std"] == pytest.approx(0.05)


def test_splits_shapes_and_disjoint_validation():
    sp = load_splits(_cfg(), 0)
    assert sp.train.n == 100 and sp.val.n == 20 and sp.test.n == 60
    assert sp.train.n_clients == 3


def test_run_writes_artifacts(tmp_path):
    res = run_experiment(_cfg(), 0, tmp_path)
    for name in ("config.txt", "metrics.csv", "ledger.json", "summary.json", "checkpoint.vflc"):
        assert (tmp_path / name).exists()
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert [r.round for r in rows] == [4, 8]
    assert rows[-1].bytes_up == res.ledger.total_bytes("up")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["rounds"] == 8 and summary["rounds_per_epoch"] == 4


@pytest.mark.parametrize("method", ["vimadmm", "vimadmm-j", "split", "vafl", "fedbcd", "fdml"])
def test_byte_identical_reruns_including_threads(tmp_path, method):
    cfg = _cfg(method, **{"dp.enabled": True, "dp.sigma": 0.5})
    run_experiment(cfg, 3, tmp_path / "a", threads=1)
    run_experiment(cfg, 3, tmp_path / "b", threads=4)
    for name in ("metrics.csv", "ledger.json", "checkpoint.vflc"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_epsilon_grows_with_rounds():
    res = run_experiment(_cfg(**{"dp.enabled": True, "dp.sigma": 2.0}), 0)
    eps = [m.epsilon for m in res.metrics]
    assert eps[0] < eps[1]


def test_target_epsilon_sets_sigma():
    res = run_experiment(_cfg(**{"dp.enabled": True, "dp.target_epsilon": 4.0}), 0)
    assert res.summary["sigma"] > 0
    assert res.summary["epsilon"] == pytest.approx(4.0, rel=2e-3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    with pytest.raises(RunError, match="round"):
        run_experiment(_cfg("split", **{"train.lr": 1e6, "train.local_lr": 1e6,
                                        "stop.max_epochs": 5}), 0)


def test_cancel_stops_and_flushes(tmp_path):
    import threading

    ev = threading.Event()
    ev.set()
    res = run_experiment(_cfg(), 0, tmp_path, cancel=ev)
    assert res.summary["cancelled"] and res.summary["rounds"] == 0
    assert (tmp_path / "metrics.csv").read_text().startswith("round,")


def test_noisy_test_validation_extremes():
    res = run_experiment(_cfg(**{"stop.max_epochs": 4}), 0)
    base = accuracy(res.trainer.predict(res.splits.test.blocks), res.splits.test.labels)
    same = noisy_test_validation(res.trainer, res.splits.test, 1, 0.0, np.random.default_rng(0))
    assert same == base
    # swamping the informative client drives accuracy toward chance
    drowned = noisy_test_validation(res.trainer, res.splits.test, 0, 1e3, np.random.default_rng(0))
    assert drowned < base and drowned < 0.6


def test_summarize_full_ratio_matches_full_run():
    cfg = _cfg()
    full = run_experiment(cfg, 0)
    ranking = head_importance(full.trainer.head_norms())
    out = client_summarize(cfg, 1.0, "important", 0, ranking)
    assert out["clients"] == [0, 1, 2]
    assert out["final_test_acc"] == full.summary["final_test_acc"]


def test_denoise_reports_both_runs():
    out = client_denoise_experiment(_cfg(), 2, 5.0, 0)
    assert len(out["clean_norms"]) == len(out["noisy_norms"]) == 3


def test_export_embeddings(tmp_path):
    res = run_experiment(_cfg(), 0)
    export_embeddings(res.trainer, res.splits.test, tmp_path / "e.csv", indices=[0, 5])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "client,sample_idx,label,e0,e1,e2"
    assert len(lines) == 1 + 3 * 2


def test_planted_noise_blocks_carry_no_signal():
    ds = gen_synthetic(SyntheticSpec(3000, 4, [6], [6, 6]), 0)
    tr, te = np.arange(2000), np.arange(2000, 3000)
    for k in range(3):
        X = ds.blocks[k]
        clf = LogisticRegression(max_iter=2000).fit(X[tr], ds.labels[tr])
        acc = clf.score(X[te], ds.labels[te])
        if k == 0:
            assert acc > 0.6
        else:
            assert abs(acc - 0.25) <= 0.05


def _planted(method="vimadmm", seed=0, **over):
    raw = {"method": method, "seeds": [seed], "dataset.n": 600, "dataset.n_test": 400,
           "dataset.n_classes": 4, "dataset.informative_dims": [8], "dataset.noise_dims": [8],
           "train.hidden": 16, "train.embed_dim": 8, "train.batch_size": 100,
           "train.local_lr": 0.05, "stop.max_epochs": 10}
    if method == "vimadmm":
        raw["train.local_steps"] = 5
    raw.update(over)
    return build_config(raw)


def test_zeroed_head_ranks_last_and_scaling_doubles_norm():
    tr = run_experiment(_cfg(), 0).trainer
    base = tr.head_norms()
    tr.state.heads[0] = np.zeros_like(tr.state.heads[0])
    assert head_importance(tr.head_norms())[-1] == (0, 0.0)
    tr.state.heads[0] = np.ones_like(tr.state.heads[0])
    before = head_importance(tr.head_norms())
    tr.state.heads[0] = 2 * tr.state.heads[0]
    after = head_importance(tr.head_norms())
    assert tr.head_norms()[0] == pytest.approx(2 * before[[k for k, _ in before].index(0)][1])
    assert [k for k, _ in after].index(0) <= [k for k, _ in before].index(0)
    assert tr.head_norms()[1:] == base[1:]


def test_noisy_test_single_client_drowned_is_chance():
    cfg = build_config({"method": "vimadmm", "dataset.n": 800, "dataset.n_test": 4000,
                        "dataset.n_classes": 4, "dataset.informative_dims": [6],
                        "dataset.noise_dims": [], "train.hidden": 8, "train.embed_dim": 4,
                        "train.batch_size": 100, "train.local_steps": 3,
                        "train.local_lr": 0.05, "stop.max_epochs": 3})
    res = run_experiment(cfg, 0)
    assert res.splits.train.n_clients == 1
    acc = noisy_test_validation(res.trainer, res.splits.test, 0, 1e3, np.random.default_rng(1))
    assert abs(acc - 0.25) <= 0.05


def test_top_ranked_client_drop_exceeds_bottom():
    res = run_experiment(_planted(), 0)
    ranking = head_importance(res.trainer.head_norms())
    top, bottom = ranking[0][0], ranking[-1][0]
    clean = accuracy(res.trainer.predict(res.splits.test.blocks), res.splits.test.labels)
    drop = {k: clean - noisy_test_validation(res.trainer, res.splits.test, k, 2.0,
                                             np.random.default_rng(0))
            for k in (top, bottom)}
    assert drop[top] >= drop[bottom]


def test_denoise_at_zero_sigma_is_plain_run():
    cfg = _cfg()
    plain = run_experiment(cfg, 4)
    out = client_denoise_experiment(cfg, 1, 0.0, 4)
    assert out["noisy_test_acc"] == plain.summary["final_test_acc"]
    assert out["noisy_norms"] == plain.summary["head_norms"]


def test_vimadmm_beats_split_with_a_noisy_client():
    over = {"dataset.noisy_client": 0, "dataset.noisy_sigma": 1.0}
    vim = run_experiment(_planted(**over), 0).summary["final_test_acc"]
    split = run_experiment(_planted("split", **over, **{"train.lr": 0.05}), 0)
    assert vim > split.summary["final_test_acc"]
