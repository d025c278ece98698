import numpy as np
import pytest

from vimfl.base import TrainConfig
from vimfl.baselines import (Fdml, FedBCD, LinearServer, SplitLearning, Vafl, VaflServer,
                             split_blocks, split_client_gradient, split_composite_loss)
from vimfl.data import SyntheticSpec, gen_synthetic
from vimfl.ledger import CommLedger, fdml_scalars, split_scalars
from vimfl.nn import MlpModel, finite_diff_check, init_mlp, mlp_backward, mlp_forward, softmax_ce


def _models(rng, widths, d_f, hidden=5):
    return [init_mlp([w, hidden, d_f], rng) for w in widths]


def test_split_client_gradient_fd():
    rng = np.random.default_rng(0)
    for trial in range(15):
        widths, d_f, d_c, b = [3, 4], 4, 3, 6
        models = _models(rng, widths, d_f)
        Xs = [rng.standard_normal((b, w)) for w in widths]
        y = rng.integers(0, d_c, b)
        server = LinearServer(len(widths) * d_f, d_c, 0.1, 0.01, rng=rng)
        betas = [0.01, 0.02]
        for k in range(2):
            g = split_client_gradient(server, models, Xs, y, k, betas)

            def obj(p, k=k):
                ms = list(models)
                ms[k] = MlpModel(models[k].layer_dims, p)
                return split_composite_loss(server, ms, Xs, y, k, betas)

            assert finite_diff_check(obj, models[k].params, g) <= 1e-5


def test_linear_server_gradients_fd():
    rng = np.random.default_rng(1)
    for trial in range(15):
        H = rng.standard_normal((7, 6))
        y = rng.integers(0, 3, 7)
        srv = LinearServer(6, 3, 0.1, 0.03, rng=rng)
        _, gW, gb, _ = srv.loss_and_grads(H, y)
        flat = np.concatenate([srv.W.ravel(), srv.b])

        def obj(p):
            s = LinearServer(6, 3, 0.1, 0.03, zero_init=True)
            s.W, s.b = p[:18].reshape(6, 3), p[18:]
            return s.loss_and_grads(H, y)[0]

        assert finite_diff_check(obj, flat, np.concatenate([gW.ravel(), gb])) <= 1e-5

        def emb(h):
            return softmax_ce(srv.logits(h.reshape(7, 6)), y)[0]

        assert finite_diff_check(emb, H.ravel(), srv.embedding_grads(H, y).ravel()) <= 1e-5


def test_vafl_server_gradients_fd():
    rng = np.random.default_rng(2)
    for trial in range(15):
        M, d_f, d_c, b = 3, 4, 3, 5
        H = [rng.standard_normal((b, d_f)) for _ in range(M)]
        y = rng.integers(0, d_c, b)
        srv = VaflServer(M, d_f, d_c, 0.1, 0.02, rng)
        srv.alpha = rng.uniform(0.2, 1.0, M)
        _, gW, gb, ga, _ = srv.loss_and_grads(H, y)
        n_w = d_f * d_c

        def obj(p):
            s = VaflServer(M, d_f, d_c, 0.1, 0.02, np.random.default_rng(0))
            s.W, s.b, s.alpha = p[:n_w].reshape(d_f, d_c), p[n_w:n_w + d_c], p[n_w + d_c:]
            return s.loss_and_grads(H, y)[0]

        flat = np.concatenate([srv.W.ravel(), srv.b, srv.alpha])
        assert finite_diff_check(obj, flat, np.concatenate([gW.ravel(), gb, ga])) <= 1e-5
        grads = srv.embedding_grads(H, y)
        for k in range(M):
            def emb(h, k=k):
                Hs = list(H)
                Hs[k] = h.reshape(b, d_f)
                return softmax_ce(srv.logits(Hs), y)[0]

            assert finite_diff_check(emb, H[k].ravel(), grads[k].ravel()) <= 1e-5


def test_fdml_end_to_end_gradients_fd():
    rng = np.random.default_rng(3)
    for trial in range(15):
        widths, d_f, d_c, b, beta = [3, 2, 4], 3, 3, 6, 0.01
        models = _models(rng, widths, d_f, hidden=4)
        heads = [rng.standard_normal((d_f, d_c)) for _ in widths]
        Xs = [rng.standard_normal((b, w)) for w in widths]
        y = rng.integers(0, d_c, b)

        def total(ms, ws):
            O = sum(mlp_forward(m, X) @ w for m, X, w in zip(ms, Xs, ws))
            return softmax_ce(O, y)[0]

        _, D = softmax_ce(sum(mlp_forward(m, X) @ w for m, X, w in zip(models, Xs, heads)), y)
        for k in range(3):
            F = mlp_forward(models[k], Xs[k])
            gW = F.T @ D + 2 * beta * heads[k]
            g, _ = mlp_backward(models[k], Xs[k], D @ heads[k].T)
            g = g + 2 * beta * models[k].params

            def obj_w(w, k=k):
                ws = list(heads)
                ws[k] = w.reshape(d_f, d_c)
                return total(models, ws) + beta * (w ** 2).sum()

            def obj_t(p, k=k):
                ms = list(models)
                ms[k] = MlpModel(models[k].layer_dims, p)
                return total(ms, heads) + beta * (p ** 2).sum()

            assert finite_diff_check(obj_w, heads[k].ravel(), gW.ravel()) <= 1e-5
            assert finite_diff_check(obj_t, models[k].params, g) <= 1e-5


def _ds(n=24, seed=0):
    return gen_synthetic(SyntheticSpec(n, 3, [3, 4, 2], []), seed)


def _cfg(**kw):
    base = dict(hidden=4, embed_dim=3, batch_size=8, lr=0.1, local_lr=0.1)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_server_sends_zero_gradients():
    srv = LinearServer(6, 3, 0.1, 0.0, zero_init=True)
    G = srv.embedding_grads(np.ones((4, 6)), np.array([0, 1, 2, 0]))
    assert not G.any()


def test_split_blocks_roundtrip():
    G = np.arange(12.0).reshape(2, 6)
    parts = split_blocks(G, [1, 3, 2])
    assert [p.shape[1] for p in parts] == [1, 3, 2]
    np.testing.assert_array_equal(np.concatenate(parts, axis=1), G)


def test_split_round_uses_post_step_server_weights():
    ds = _ds()
    tr = SplitLearning(ds, _cfg(momentum=0.0), seed=0)
    twin = SplitLearning(ds, _cfg(momentum=0.0), seed=0)
    idx = np.arange(8)
    tr.run_round(0, idx)
    H = [mlp_forward(s.model, s.X[idx]) for s in twin.sites]
    Hcat = np.concatenate(H, axis=1)
    y = ds.labels[idx]
    twin.server.step(Hcat, y)
    G = split_blocks(twin.server.embedding_grads(Hcat, y), [3, 3, 3])
    for k, s in enumerate(twin.sites):
        g, _ = mlp_backward(s.model, s.X[idx], G[k])
        want = s.model.params - 0.1 * (g + 2 * s.beta * s.model.params)
        np.testing.assert_allclose(tr.sites[k].model.params, want, atol=1e-14)
    np.testing.assert_array_equal(tr.server.W, twin.server.W)


def test_fedbcd_one_step_equals_split():
    ds = _ds()
    a = SplitLearning(ds, _cfg(), seed=4)
    b = FedBCD(ds, _cfg(local_steps=1), seed=4)
    for t in range(3):
        a.run_round(t, np.arange(8 * t, 8 * t + 8))
        b.run_round(t, np.arange(8 * t, 8 * t + 8))
    for x, y in zip(a.state_arrays().values(), b.state_arrays().values()):
        np.testing.assert_array_equal(x, y)


def test_fedbcd_reuses_stale_gradient():
    ds = _ds()
    tr = FedBCD(ds, _cfg(local_steps=3, momentum=0.0), seed=5)
    before = [s.model.params.copy() for s in tr.sites]
    idx = np.arange(8)
    H = [mlp_forward(s.model, s.X[idx]) for s in tr.sites]
    tr.run_round(0, idx)
    G = split_blocks(tr.server.embedding_grads(np.concatenate(H, axis=1), ds.labels[idx]),
                     [3, 3, 3])
    # replay with the same upstream gradient: Jacobian moves, upstream does not
    for k, s in enumerate(tr.sites):
        p = before[k].copy()
        for _ in range(3):
            m = MlpModel(s.model.layer_dims, p)
            g, _ = mlp_backward(m, s.X[idx], G[k])
            p = p - 0.1 * (g + 2 * s.beta * p)
        np.testing.assert_allclose(s.model.params, p, atol=1e-13)


def test_fdml_broadcasts_identical_gradient():
    ds = _ds()
    led = CommLedger(3)
    tr = Fdml(ds, _cfg(), seed=0, ledger=led)
    seen = []
    orig = led.record

    def spy(msg):
        seen.append(msg)
        return orig(msg)

    led.record = spy
    tr.run_round(0, np.arange(8))
    grads = [m.grad for m in seen if type(m).__name__ == "GradientBatchMsg"]
    assert len(grads) == 3
    for g in grads[1:]:
        np.testing.assert_array_equal(g, grads[0])


def test_vafl_alpha_starts_uniform_and_downlink_scaled():
    ds = _ds()
    tr = Vafl(ds, _cfg(), seed=0)
    np.testing.assert_allclose(tr.server.alpha, [1 / 3] * 3)
    H = [np.ones((4, 3)) * k for k in range(3)]
    y = np.array([0, 1, 2, 0])
    grads = tr.server.embedding_grads(H, y)
    np.testing.assert_allclose(grads[1], grads[2])


@pytest.mark.parametrize("cls", [SplitLearning, Vafl, FedBCD])
def test_split_family_wire_sizes(cls):
    ds = _ds()
    led = CommLedger(3)
    tr = cls(ds, _cfg(local_steps=2), seed=0, ledger=led)
    tr.run_round(0, np.arange(8))
    want = split_scalars(8, 3)
    for k in range(3):
        assert led.round_bytes(0, "up", k) == 4 * want["up"]
        assert led.round_bytes(0, "down", k) == 4 * want["down"]


def test_fdml_wire_sizes():
    ds = _ds()
    led = CommLedger(3)
    Fdml(ds, _cfg(), seed=0, ledger=led).run_round(0, np.arange(8))
    want = fdml_scalars(8, 3)
    assert led.round_bytes(0, "up", 2) == 4 * want["up"]
    assert led.round_bytes(0, "down", 2) == 4 * want["down"]


@pytest.mark.parametrize("cls", [SplitLearning, Vafl, FedBCD, Fdml])
def test_baselines_learn_separable_set(cls):
    ds = gen_synthetic(SyntheticSpec(60, 3, [4, 4], [], noise_scale=0.0), 2)
    tr = cls(ds, _cfg(hidden=8, embed_dim=4, batch_size=60, local_steps=2, lr=0.3,
                      local_lr=0.05), seed=0)
    for t in range(100):
        tr.run_round(t, np.arange(60))
    assert np.mean(tr.predict(ds.blocks) == ds.labels) >= 0.95


@pytest.mark.parametrize("cls", [SplitLearning, Vafl, FedBCD, Fdml])
def test_state_roundtrip(cls):
    ds = _ds()
    a = cls(ds, _cfg(local_steps=2), seed=1)
    a.run_round(0, np.arange(8))
    b = cls(ds, _cfg(local_steps=2), seed=2)
    b.load_state_arrays(a.state_arrays())
    a.run_round(1, np.arange(8, 16))
    b.run_round(1, np.arange(8, 16))
    np.testing.assert_array_equal(a.predict_logits(ds.blocks), b.predict_logits(ds.blocks))
