import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoiplaus import surrogate as S


def small_net(seed, channels=4, hidden=(6, 8), head=5):
    names = tuple(f"c{i}" for i in range(channels))
    scale = np.linspace(0.5, 2.0, channels)
    net = S.SurrogateNet.init("test", names, scale, seed, hidden=hidden, head=head)
    # Nonzero biases keep pre-activations off the relu kink at exactly 0.
    rng = np.random.default_rng(seed + 1000)
    for k in ("b1", "b2", "b3", "b4"):
        net.params[k] = rng.normal(0, 0.1, net.params[k].shape)
    return net


def fd_check(net, x, t_hard, t_soft, h=1e-6):
    """Norm-wise relative error of analytic vs central-difference gradients, per tensor."""
    _, grads, dx = net.loss_and_gradients(x, t_hard, t_soft)
    errs = {}

    def loss():
        return net.loss_and_gradients(x, t_hard, t_soft)[0]

    for k, W in net.params.items():
        num = np.zeros_like(W)
        for i in np.ndindex(W.shape):
            old = W[i]
            W[i] = old + h
            up = loss()
            W[i] = old - h
            dn = loss()
            W[i] = old
            num[i] = (up - dn) / (2 * h)
        errs[k] = _rel(grads[k], num)
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = loss()
        x[i] = old - h
        dn = loss()
        x[i] = old
        num[i] = (up - dn) / (2 * h)
    errs["x"] = _rel(dx, num)
    return errs


def _rel(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------- targets
def test_grasp_targets():
    assert S.grasp_targets(0.015) == (1, 0.5)
    assert S.grasp_targets(0.0) == (0, 0.0)
    hard, soft = S.grasp_targets(0.0149)
    assert hard == 0 and soft < 0.5
    with pytest.raises(ValueError):
        S.grasp_targets(-0.001)


def test_manip_targets():
    assert S.manip_targets(0.5, 1.0) == (1, 0.75)
    assert S.manip_targets(0.05, 3.0) == (0, 0.0)
    assert S.manip_targets(0.1, 0.0) == (1, 0.5)
    assert S.manip_targets(1.0, 1e6)[1] == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0))
def test_soft_above_half_iff_hard(pd):
    hard, soft = S.grasp_targets(pd)
    assert (soft >= 0.5) == (hard == 1)
    assert 0.0 <= soft <= 1.0


def test_bce_and_sigmoid():
    assert S.bce(0.5, 1.0) == pytest.approx(np.log(2))
    assert S.bce(0.0, 1.0) == pytest.approx(-np.log(S.EPS))
    assert S.bce(1.0, 1.0) == pytest.approx(-np.log(1 - S.EPS), abs=1e-12)
    z = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    s = S.sigmoid(z)
    assert np.all(np.isfinite(s)) and s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0
    assert s[1] + s[3] == pytest.approx(1.0)


def test_f_score():
    assert S.f_score([0.9, 0.1, 0.8, 0.2], [1, 0, 0, 1]) == pytest.approx(0.5)
    assert S.f_score([0.1, 0.2], [0, 0]) == 1.0
    assert S.f_score([0.9, 0.9], [0, 0]) == 0.0


# ---------------------------------------------------------------- network
def test_zero_net_scores_half():
    net = S.SurrogateNet.zeros_like(S.new_grasp_net(0))
    x = np.random.default_rng(0).normal(size=(3, 277, 5))
    assert np.all(net.forward(x) == 0.5)


def test_permutation_invariance():
    net = S.new_manip_net(1, n_samples=64)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(64, len(S.MANIP_CHANNELS)))
    perm = rng.permutation(64)
    assert net.forward(x) == net.forward(x[perm])
    s, dx = net.score_gradient(x)
    s2, dx2 = net.score_gradient(x[perm])
    assert s == s2 and np.array_equal(dx[perm], dx2)


def test_batch_matches_single():
    net = small_net(2)
    x = np.random.default_rng(2).normal(size=(4, 9, 4))
    batch = net.forward(x)
    assert np.allclose(batch, [net.forward(xi) for xi in x], rtol=0, atol=1e-15)


def test_layout_errors():
    net = S.new_grasp_net(0)
    with pytest.raises(S.LayoutError):
        net.forward(np.zeros((277, 4)))
    with pytest.raises(S.LayoutError):
        net.forward(np.zeros((100, 5)))
    with pytest.raises(S.LayoutError):
        S.SurrogateNet(net.params, "grasp", ("a", "b"), (1, 1))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(10):
        net = small_net(seed)
        x = rng.normal(size=(3, 7, 4))
        errs = fd_check(net, x, rng.integers(0, 2, 3).astype(float), rng.uniform(0, 1, 3))
        worst = max(worst, max(errs.values()))
    assert worst < 1e-4


def test_score_gradient_matches_finite_differences():
    net = small_net(3)
    x = np.random.default_rng(3).normal(size=(7, 4))
    s, dx = net.score_gradient(x)
    num = np.zeros_like(x)
    h = 1e-6
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num[i] = (net.forward(xp) - net.forward(xm)) / (2 * h)
    assert _rel(dx, num) < 1e-5


def test_float32_training_path_is_close():
    net = S.new_manip_net(4, n_samples=128)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(8, 128, len(S.MANIP_CHANNELS)))
    th, ts = rng.integers(0, 2, 8), rng.uniform(0, 1, 8)
    a = net.loss_and_gradients(x, th, ts)
    b = net.loss_and_gradients(x, th, ts, dtype=np.float32)
    assert b[0] == pytest.approx(a[0], rel=1e-4)
    for k in a[1]:
        assert _rel(a[1][k], b[1][k]) < 1e-3


# ------------------------------------------------------------ persistence
def test_save_load_round_trip(tmp_path):
    net = S.new_grasp_net(5)
    net.params = {k: v.astype(np.float32).astype(np.float64) for k, v in net.params.items()}
    p = tmp_path / "g.net"
    net.save(p)
    back = S.SurrogateNet.load(p)
    x = np.random.default_rng(5).normal(size=(277, 5))
    assert back.forward(x) == net.forward(x)
    assert back.kind == "grasp" and back.channels == S.GRASP_CHANNELS and back.n_points == 277
    raw = p.read_bytes()
    assert raw[:8] == S.MAGIC and struct.unpack_from("<I", raw, 8)[0] == 4
    assert struct.unpack_from("<II", raw, 12) == (5, 64)
    side = json.loads(S.sidecar_path(p).read_text())
    assert side["layers"] == [[5, 64], [64, 128], [128, 64], [64, 1]]


def test_load_rejects_bad_files(tmp_path):
    net = S.new_grasp_net(6)
    p = tmp_path / "g.net"
    net.save(p)
    bad = tmp_path / "bad.net"
    bad.write_bytes(b"NOTANET!" + p.read_bytes()[8:])
    S.sidecar_path(bad).write_text(S.sidecar_path(p).read_text())
    with pytest.raises(S.LayoutError):
        S.SurrogateNet.load(bad)
    short = tmp_path / "short.net"
    short.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(S.LayoutError):
        S.SurrogateNet.load(short)
    with pytest.raises(FileNotFoundError):
        S.SurrogateNet.load(tmp_path / "missing.net")
    S.sidecar_path(p).unlink()
    with pytest.raises(FileNotFoundError):
        S.SurrogateNet.load(p)


# --------------------------------------------------------------- training
def _toy(n, seed):
    """Label is whether any point lies outside the unit ball."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 0.45, size=(n, 16, 3))
    far = np.linalg.norm(x, axis=2).max(1) > 1.0
    return S.TrainSet(x, far.astype(float), far * 0.75)


def test_training_learns_toy_task():
    net = S.SurrogateNet.init("toy", ("x", "y", "z"), (1, 1, 1), 0, hidden=(16, 32), head=16)
    res = S.train(net, _toy(400, 0), S.TrainConfig(epochs=40, lr=3e-3), _toy(100, 1), _toy(200, 2))
    assert res.f_score >= 0.85
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
    assert res.net.meta["f_score"] == res.f_score


def test_training_is_deterministic():
    cfg = S.TrainConfig(epochs=3)
    a = S.train(small_net(7, 3), _toy(64, 3), cfg, _toy(32, 4))
    b = S.train(small_net(7, 3), _toy(64, 3), cfg, _toy(32, 4))
    assert all(np.array_equal(a.net.params[k], b.net.params[k]) for k in a.net.params)


def test_train_config_validation():
    with pytest.raises(ValueError):
        S.TrainConfig(alpha_hard=0, alpha_soft=0)
    with pytest.raises(ValueError):
        S.TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ValueError):
        S.train(small_net(0), S.TrainSet(np.zeros((0, 3, 4)), np.zeros(0), np.zeros(0)), S.TrainConfig())
