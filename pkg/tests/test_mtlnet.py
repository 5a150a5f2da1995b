import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlavsr import mtlnet as M
from mtlavsr.features import AUDIO_DIM, FUSED_DIM, splice


def toy_batch(rng, n_in=8, ka=3, kv=2, n=6):
    x = rng.normal(size=(n, n_in))
    variants = np.array([M.AV, M.A_ONLY, M.V_ONLY] * (n // 3))
    a = rng.integers(0, ka, n)
    v = np.where(variants == M.V_ONLY, rng.integers(0, kv, n), M.NO_LABEL)
    return x, variants, a, v


def loss_of(net, x, variants, a, v, lam):
    p_a, p_v, _ = M.forward(net, x)
    return M.mtl_loss(p_a, p_v, variants, a, v, lam)[0]


def numeric_grads(net, x, variants, a, v, lam, h=1e-5):
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss_of(net, x, variants, a, v, lam)
            p[i] = old - h
            down = loss_of(net, x, variants, a, v, lam)
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def min_preactivation(net, x):
    h, out = x, np.inf
    for w, b in net.trunk:
        z = h @ w + b
        out = min(out, float(np.abs(z).min()))
        h = M._act(net.activation, z)
    return out


def max_rel_error(analytic, numeric):
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-6)
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst


@pytest.mark.parametrize("activation", M.ACTIVATIONS)
@pytest.mark.parametrize("layers", [1, 2, 4])
def test_gradients_match_finite_differences(activation, layers):
    rng = np.random.default_rng(layers)
    net = M.init_network([8] + [6] * layers + [3, 2], activation, seed=layers)
    for lam in (0.0, 0.3, 1.0):
        x, variants, a, v = toy_batch(rng)
        # finite differences are undefined across a ReLU kink
        while activation == "relu" and min_preactivation(net, x) < 1e-3:
            x, variants, a, v = toy_batch(rng)
        p_a, p_v, cache = M.forward(net, x)
        analytic = M.backward(net, p_a, p_v, cache, variants, a, v, lam)
        assert max_rel_error(analytic, numeric_grads(net, x, variants, a, v, lam)) <= 1e-4


def test_lambda_zero_and_linearity_of_head_v():
    rng = np.random.default_rng(0)
    net = M.init_network([8, 6, 3, 2], seed=0)
    x, variants, a, v = toy_batch(rng)
    p_a, p_v, cache = M.forward(net, x)
    g0 = M.backward(net, p_a, p_v, cache, variants, a, v, 0.0)
    assert np.all(g0[-2] == 0) and np.all(g0[-1] == 0)
    g1 = M.backward(net, p_a, p_v, cache, variants, a, v, 0.25)
    g2 = M.backward(net, p_a, p_v, cache, variants, a, v, 0.5)
    assert np.array_equal(2 * g1[-2], g2[-2]) and np.array_equal(2 * g1[-1], g2[-1])
    assert np.array_equal(g1[2], g2[2])  # head_a untouched by lambda


def test_no_visual_instances_means_no_head_v_gradient():
    rng = np.random.default_rng(1)
    net = M.init_network([8, 6, 3, 2], seed=0)
    x = rng.normal(size=(4, 8))
    variants = np.array([M.AV, M.A_ONLY, M.AV, M.A_ONLY])
    a = np.array([0, 1, 2, 0])
    v = np.full(4, M.NO_LABEL)
    p_a, p_v, cache = M.forward(net, x)
    g = M.backward(net, p_a, p_v, cache, variants, a, v, 1.0)
    assert np.all(g[-2] == 0) and np.any(g[-4] != 0)


def test_init_network_contract():
    dims = [20, 10, 7, 5, 3]
    n1, n2 = M.init_network(dims, seed=4), M.init_network(dims, seed=4)
    assert M.param_hash(n1.params()) == M.param_hash(n2.params())
    assert M.param_hash(M.init_network(dims, seed=5).params()) != M.param_hash(n1.params())
    assert n1.dims == dims
    layers = n1.trunk + [n1.head_a, n1.head_v]
    for w, b in layers:
        bound = math.sqrt(6.0 / sum(w.shape))
        assert np.all(np.abs(w) <= bound) and np.all(b == 0)


def test_suppress():
    x = np.random.default_rng(0).normal(size=140)
    s = M.suppress(x, "audio", 1e-5)
    assert np.all(s[:40] == 1e-5) and np.array_equal(s[40:], x[40:])
    assert np.array_equal(M.suppress(s, "audio"), s)
    t = M.suppress(x, "visual")
    assert not np.any(s == t)
    with pytest.raises(ValueError):
        M.suppress(x, "smell")


def test_make_instances():
    rng = np.random.default_rng(0)
    fused = rng.normal(size=(7, 140))
    a, v = rng.integers(0, 9, 7), rng.integers(0, 9, 7)
    inst = M.make_instances(fused, a, v)
    assert len(inst) == 21
    for i, x in enumerate(inst):
        assert x.input.shape == (1540,)
        if x.variant == "V":
            assert x.visual_label == v[i // 3] and x.acoustic_label == a[i // 3]
            blocks = x.input.reshape(11, 140)
            assert np.all(blocks[:, :AUDIO_DIM] == M.SUPPRESS_EPS)
        else:
            assert x.visual_label is None
        if x.variant == "A":
            assert np.all(x.input.reshape(11, 140)[:, AUDIO_DIM:] == M.SUPPRESS_EPS)
    with pytest.raises(ValueError):
        M.make_instances(fused, a[:6], v)


def test_instance_set_matches_make_instances():
    rng = np.random.default_rng(1)
    fused = [rng.normal(size=(n, FUSED_DIM)) for n in (4, 9)]
    ac = [rng.integers(0, 5, len(f)) for f in fused]
    vi = [rng.integers(0, 5, len(f)) for f in fused]
    s = M.InstanceSet.from_utterances(fused, ac, vi, dtype=np.float64)
    ref = M.make_instances(fused[0], ac[0], vi[0]) + M.make_instances(fused[1], ac[1], vi[1])
    assert len(s) == len(ref) == 39
    got = s.instances(np.arange(39))
    for g, r in zip(got, ref):
        assert np.array_equal(g.input, r.input)
        assert (g.variant, g.acoustic_label, g.visual_label) == (r.variant, r.acoustic_label,
                                                                 r.visual_label)
    # utterance boundaries are respected by the context window
    assert np.array_equal(got[3 * 4].input, splice(fused[1])[0])


def test_forward_contract():
    net = M.init_network([8, 6, 3, 2], seed=0)
    for w, b in net.trunk + [net.head_a, net.head_v]:
        w[:] = 0
    p_a, p_v, _ = M.forward(net, np.random.default_rng(0).normal(size=(5, 8)))
    assert np.allclose(p_a, 1 / 3) and np.allclose(p_v, 1 / 2)
    net = M.init_network([8, 6, 3, 2], seed=1)
    x = np.random.default_rng(1).normal(size=(50, 8))
    p_a, p_v, _ = M.forward(net, x)
    assert np.allclose(p_a.sum(1), 1, atol=1e-6) and np.allclose(p_v.sum(1), 1, atol=1e-6)
    p_a2, _, _ = M.forward(net, x)
    assert np.array_equal(p_a, p_a2)
    shifted = net.copy()
    shifted.head_a[1][:] += 7.5
    assert np.allclose(M.forward(shifted, x)[0], p_a, atol=1e-9)
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        M.forward(net, bad)
    with pytest.raises(ValueError):
        M.forward(net, x[:, :7])


def test_loss_hand_oracle():
    p_a = np.array([[0.25, 0.75], [0.6, 0.4]])
    p_v = np.array([[0.9, 0.1], [0.5, 0.5]])
    variants = np.array([M.AV, M.V_ONLY])
    a = np.array([1, 0])
    v = np.array([M.NO_LABEL, 1])
    c_mtl, c_main, c_1 = M.mtl_loss(p_a, p_v, variants, a, v, 0.3)
    assert c_main == pytest.approx(-math.log(0.75) - math.log(0.6), abs=1e-15)
    assert c_1 == pytest.approx(-math.log(0.5), abs=1e-15)
    assert c_mtl == pytest.approx(-math.log(0.75) + 0.3 * -math.log(0.5) - math.log(0.6), abs=1e-14)
    assert c_mtl == c_main + 0.3 * c_1
    assert M.mtl_loss(p_a, p_v, variants, a, v, 0.0)[0] == c_main


def test_loss_label_checks():
    p = np.full((2, 2), 0.5)
    with pytest.raises(ValueError):
        M.mtl_loss(p, p, np.array([M.AV, M.V_ONLY]), np.array([0, 1]), np.array([M.NO_LABEL, -1]), 0.1)
    with pytest.raises(ValueError):
        M.mtl_loss(p, p, np.array([M.AV, M.AV]), np.array([0, 1]), np.array([0, M.NO_LABEL]), 0.1)
    with pytest.raises(ValueError):
        M.mtl_loss(p, p, np.array([M.AV, M.AV]), np.array([0, -1]),
                   np.array([M.NO_LABEL, M.NO_LABEL]), 0.1)


def test_uniform_cross_entropy():
    B, K = 37, 11
    p = np.full((B, K), 1.0 / K)
    labels = np.arange(B) % K
    c, _, _ = M.mtl_loss(p, p[:, :2], np.full(B, M.AV), labels, np.full(B, M.NO_LABEL), 0.3)
    assert c == pytest.approx(B * math.log(K), abs=1e-9)


def small_set(rng, n_utts=3, frames=10, k=4, dtype=np.float64):
    fused = [rng.normal(size=(frames, FUSED_DIM)) for _ in range(n_utts)]
    ac = [rng.integers(0, k, frames) for _ in range(n_utts)]
    vi = [rng.integers(0, k, frames) for _ in range(n_utts)]
    return M.InstanceSet.from_utterances(fused, ac, vi, dtype=dtype)


def test_sgd_zero_lr_is_noop():
    rng = np.random.default_rng(0)
    s = small_set(rng)
    net = M.init_network([1540, 16, 4, 4], seed=0)
    h = M.param_hash(net.params())
    cfg = M.TrainConfig(hidden_layers=1, hidden_dim=16, batch_size=7)
    M.sgd_epoch(net, s, cfg, 3, lr=0.0)
    assert M.param_hash(net.params()) == h


def test_sgd_single_step_oracle():
    rng = np.random.default_rng(0)
    s = small_set(rng, n_utts=1, frames=1)
    net = M.init_network([1540, 16, 4, 4], seed=0)
    before = net.copy()
    order = np.random.default_rng(5).permutation(3)
    # restrict the epoch to its first instance
    cfg = M.TrainConfig(lam=0.3, batch_size=1, hidden_layers=1, hidden_dim=16,
                        epoch_fraction=1 / 3)
    M.sgd_epoch(net, s, cfg, 5, lr=0.01)
    x, var, a, v = s.batch(order[:1])
    p_a, p_v, cache = M.forward(before, x)
    grads = M.backward(before, p_a, p_v, cache, var, a, v, 0.3)
    for p_new, p_old, g in zip(net.params(), before.params(), grads):
        assert np.allclose(p_new, p_old - 0.01 * g, rtol=0, atol=1e-15)


def test_sgd_deterministic_and_lowers_loss():
    rng = np.random.default_rng(0)
    s = small_set(rng, n_utts=4, frames=20, dtype=np.float64)
    cfg = M.TrainConfig(lam=0.3, batch_size=8, hidden_layers=1, hidden_dim=16)
    a = M.init_network([1540, 16, 4, 4], seed=0)
    b = M.init_network([1540, 16, 4, 4], seed=0)
    losses = [M.sgd_epoch(a, s, cfg, e, lr=0.01)[1] for e in range(5)]
    for e in range(5):
        M.sgd_epoch(b, s, cfg, e, lr=0.01)
    assert M.param_hash(a.params()) == M.param_hash(b.params())
    assert losses[-1] < losses[0]


def test_newbob_examples():
    assert M.newbob_step(50.0, 52.0, 0.008, False) == (0.008, False, False)
    assert M.newbob_step(52.0, 52.4, 0.008, False) == (0.004, True, False)
    assert M.newbob_step(52.4, 52.45, 0.004, True) == (0.004, True, True)
    assert M.newbob_step(10.0, 10.5, 0.008, False) == (0.008, False, False)
    assert M.newbob_step(10.0, 10.6, 0.004, True) == (0.002, True, False)
    assert M.newbob_step(10.0, 10.25, 0.004, True) == (0.002, True, False)
    assert M.newbob_step(10.0, 10.05, 0.004, True) == (0.004, True, True)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=30))
def test_newbob_property(accs):
    lr, started, history = 0.008, False, []
    for prev, curr in zip(accs[:-1], accs[1:]):
        lr, now_started, stop = M.newbob_step(prev, curr, lr, started)
        assert not (started and not now_started)
        started = now_started
        history.append(lr)
        h = round(math.log2(0.008 / lr))
        assert lr == 0.008 * 2.0 ** -h
        if stop:
            break
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_frame_accuracy_stubs():
    net = M.init_network([1540, 4, 3, 2], seed=0)
    for w, b in net.trunk + [net.head_a]:
        w[:] = 0
        b[:] = 0
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 40)
    s = M.InstanceSet.from_utterances([rng.normal(size=(40, 140))], [labels], [labels],
                                      dtype=np.float64)
    # uniform posteriors: argmax picks index 0
    assert M.frame_accuracy(net, s) == pytest.approx(100.0 * np.mean(labels == 0))
    net.head_a[1][:] = [0, 0, 50.0]
    assert M.frame_accuracy(net, s) == pytest.approx(100.0 * np.mean(labels == 2))
    empty = M.InstanceSet(np.zeros((0, 140)), np.zeros((0, 11), int), np.zeros(0, int),
                          np.zeros(0, int))
    with pytest.raises(ValueError):
        M.frame_accuracy(net, empty)


def test_train_records_and_stl_head_v_frozen(tmp_path):
    rng = np.random.default_rng(0)
    tr, cv = small_set(rng, 4, 20), small_set(rng, 2, 20)
    cfg = M.TrainConfig(lam=0.0, batch_size=16, hidden_layers=1, hidden_dim=8, max_epochs=3,
                        dtype="float64")
    net = M.init_network([1540, 8, 4, 4], seed=1)
    v0 = (net.head_v[0].copy(), net.head_v[1].copy())
    net, recs = M.train(net, tr, cv, cfg, tmp_path / "log.txt")
    assert 1 <= len(recs) <= 3
    assert recs[0].lr == 0.008
    assert np.array_equal(net.head_v[0], v0[0]) and np.array_equal(net.head_v[1], v0[1])
    lines = (tmp_path / "log.txt").read_text().splitlines()
    assert len(lines) == len(recs) and lines[0].split("\t")[0] == "1"


def test_train_config_validation():
    with pytest.raises(ValueError):
        M.TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        M.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        M.TrainConfig(activation="softplus")
    with pytest.raises(ValueError):
        M.TrainConfig(halve_threshold_pct=0)


def test_network_file_round_trip(tmp_path):
    net = M.init_network([1540, 8, 7, 5], "relu", seed=2)
    M.write_network(tmp_path / "n.net", net)
    back = M.read_network(tmp_path / "n.net")
    assert back.activation == "relu" and back.dims == net.dims
    assert M.param_hash(back.params()) == M.param_hash(net.params())
    (tmp_path / "x.net").write_bytes(b"nope")
    with pytest.raises(ValueError):
        M.read_network(tmp_path / "x.net")
