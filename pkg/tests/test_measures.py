import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_net
from hessfine import hessian as hess
from hessfine import measures as ms
from hessfine.data import gaussian_blobs
from hessfine.errors import ConfigError, DataError, SingularMatrixError
from hessfine.net import LossSpec, Network
from hessfine.noise import uniform_confusion


def perturbed(net, scale, seed):
    rng = np.random.default_rng(seed)
    return net.with_weights([w + scale * rng.normal(size=w.shape) for w in net.weights])


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(11)
    init = random_net(rng, [4, 6, 5, 3], ["tanh", "tanh", "identity"], "sqerr_prob", scale=0.8)
    net = perturbed(init, 0.3, 1)
    X = rng.normal(size=(40, 4))
    y = rng.integers(0, 3, size=40)
    return net, init, X, y


def test_norm_1inf_examples():
    assert ms.norm_1inf(np.eye(4)) == 1.0
    assert ms.norm_1inf([[3, -2], [-2, 3]]) == 5.0
    assert ms.norm_1inf(np.zeros((3, 2))) == 0.0


def test_distance_vector(pair):
    net, init, _, _ = pair
    d = ms.DistanceVector.between(net, init)
    for v, n, f, w, w0 in zip(d.vectors, d.norms, d.frobenius, net.weights, init.weights):
        assert abs(n - np.linalg.norm(w - w0, "fro")) <= 1e-12
        assert abs(n - f) <= 1e-12
        np.testing.assert_array_equal(v.reshape(w.shape), w - w0)


def test_no_finetuning_gives_zero(pair):
    _, init, X, y = pair
    H, total = ms.hessian_distance_measure(init, init, X, y, C=2.0, n=100)
    assert total == 0.0 and all(h == 0.0 for h in H)
    F = uniform_confusion(3, 0.3)
    assert ms.noisy_measure(pair[0], init, X, [0.0, 0.0, 0.0], F, 2.0, 100) == 0.0
    with pytest.warns(UserWarning, match="radius"):
        assert ms.trace_distance_measure(pair[0], init, X, y, 0.0, 2.0, 100) == 0.0


def test_synthetic_hand_examples():
    q = hess.quadratic_form_pos(np.diag([2.0, -3.0]), np.array([1.0, 1.0]))
    assert ms.distance_measure_from_values([q], C=2, n=100) == pytest.approx(0.2, abs=1e-14)
    assert math.sqrt(1 * 2**2 * 5 / 100) == pytest.approx(0.4472, abs=1e-4)


def test_trace_measure_single_layer_plug_in():
    init = Network((np.zeros((2, 2)),), ("identity",), LossSpec("sqerr_prob"))
    net = init.with_weights([np.array([[1.0, 0.0], [0.0, 0.0]])])
    x = np.array([[1.0, 0.0]])
    tr = ms.layer_traces(net, x, [0])[0, 0]
    alpha, C, n = 2.0, 1.0, 100
    got = ms.trace_distance_measure(net, init, x, [0], alpha, C, n)
    assert got == pytest.approx(math.sqrt(C * alpha**2 * tr / n), rel=1e-12)


def test_factored_equals_dense(pair):
    net, init, X, y = pair
    Hf, tf = ms.hessian_distance_measure(net, init, X[:12], y[:12], 2.0, 100, method="factored")
    Hd, td = ms.hessian_distance_measure(net, init, X[:12], y[:12], 2.0, 100, method="dense")
    np.testing.assert_allclose(Hf, Hd, rtol=1e-8, atol=1e-12)
    assert tf == pytest.approx(td, rel=1e-8)


def test_traces_match_dense_oracle(pair):
    net, _, X, y = pair
    tr_pos = ms.layer_traces(net, X[:5], y[:5], positive=True)
    tr = ms.layer_traces(net, X[:5], y[:5], positive=False)
    for s in range(5):
        for i in range(net.num_layers):
            H = hess.layer_hessian_dense(net, X[s], y[s], i).matrix
            assert tr[s, i] == pytest.approx(np.trace(H), abs=1e-10)
            w = np.linalg.eigvalsh(H)
            assert tr_pos[s, i] == pytest.approx(np.sum(np.maximum(w, 0)), abs=1e-8)


def test_trace_measure_dominates(pair):
    net, init, X, y = pair
    d = ms.DistanceVector.between(net, init)
    _, total = ms.hessian_distance_measure(net, init, X, y, 2.0, 100)
    assert ms.trace_distance_measure(net, init, X, y, d.norms, 2.0, 100) >= total - 1e-12
    with pytest.warns(UserWarning, match="radius"):
        ms.trace_distance_measure(net, init, X, y, [0.1 * a for a in d.norms], 2.0, 100)


@given(st.floats(0.01, 100.0))
def test_scale_covariance_in_C(t):
    net, init, X, y = _PAIR
    _, base = ms.hessian_distance_measure(net, init, X, y, 1.0, 50)
    _, scaled = ms.hessian_distance_measure(net, init, X, y, t, 50)
    assert scaled == pytest.approx(math.sqrt(t) * base, rel=1e-12)


_rng = np.random.default_rng(11)
_init = random_net(_rng, [3, 4, 2], ["tanh", "identity"], "sqerr_prob", scale=0.8)
_PAIR = (perturbed(_init, 0.3, 2), _init, _rng.normal(size=(10, 3)), _rng.integers(0, 2, size=10))


def test_ordering_and_jobs_invariance(pair):
    net, init, X, y = pair
    H1, t1 = ms.hessian_distance_measure(net, init, X, y, 2.0, 100)
    perm = np.random.default_rng(0).permutation(len(y))
    H2, t2 = ms.hessian_distance_measure(net, init, X[perm], y[perm], 2.0, 100, jobs=4)
    assert H1 == H2 and t1 == t2


def test_superset_never_decreases(pair):
    net, init, X, y = pair
    small, _ = ms.hessian_distance_measure(net, init, X[:10], y[:10], 2.0, 100)
    big, _ = ms.hessian_distance_measure(net, init, X, y, 2.0, 100)
    assert all(b >= s for b, s in zip(big, small))


def test_empty_eval_set(pair):
    net, init, _, _ = pair
    with pytest.raises(DataError):
        ms.hessian_distance_measure(net, init, np.empty((0, 4)), np.empty(0, dtype=int), 2.0, 100)
    with pytest.raises(DataError):
        ms.eval_set()


def test_noisy_measure_identity_reduction(pair):
    net, init, X, _ = pair
    d = ms.DistanceVector.between(net, init)
    C, n = 2.0, 100
    got = ms.noisy_measure(net, init, X, d.norms, np.eye(3), C, n)
    tr = np.max(np.abs(ms.all_label_traces(net, X)), axis=(0, 1))
    expect = sum(math.sqrt(C * a * a * t / n) for a, t in zip(d.norms, tr))
    assert got == pytest.approx(expect, rel=1e-12)


def test_noise_factor_examples():
    assert ms.noise_factor(np.eye(4)) == 1.0
    F = uniform_confusion(2, 0.4)
    assert ms.noise_factor(F) == pytest.approx(5.0, abs=1e-12)
    assert math.sqrt(2.0 * ms.noise_factor(F)) == pytest.approx(math.sqrt(10.0))
    with pytest.warns(UserWarning):
        bad = uniform_confusion(3, 2 / 3)
    with pytest.raises(SingularMatrixError):
        ms.noise_factor(bad)


def test_all_label_traces_shape(pair):
    net, _, X, _ = pair
    t = ms.all_label_traces(net, X[:7])
    assert t.shape == (7, 3, 3)
    np.testing.assert_allclose(t[:, 2, :], ms.layer_traces(net, X[:7], np.full(7, 2), positive=False))


def test_kl_examples():
    W = [np.ones((2, 2))]
    assert ms.kl_divergence(W, W, 1.0) == 0.0
    assert ms.kl_divergence([np.array([[3.0]])], [np.array([[0.0]])], 1.0) == 4.5
    with pytest.raises(ConfigError):
        ms.kl_divergence(W, W, [0.0])


def test_kl_matches_gaussian_closed_form():
    rng = np.random.default_rng(3)
    W = [rng.normal(size=(2, 3)), rng.normal(size=(3, 2))]
    Ws = [w + rng.normal(size=w.shape) for w in W]
    sig = [0.7, 1.9]
    mu1 = np.concatenate([w.ravel() for w in W])
    mu0 = np.concatenate([w.ravel() for w in Ws])
    var = np.concatenate([np.full(w.size, s * s) for w, s in zip(W, sig)])
    S = np.diag(var)
    Sinv = np.linalg.inv(S)
    d = mu1 - mu0
    # general formula with equal covariances
    kl = 0.5 * (np.trace(Sinv @ S) - len(d) + d @ Sinv @ d + np.log(np.linalg.det(S) / np.linalg.det(S)))
    assert ms.kl_divergence(W, Ws, sig) == pytest.approx(kl, rel=1e-12)


def test_margin_selection_examples():
    grid = [0.5, 2.0, 10.0]
    assert ms.margin_selection(np.full(20, 10.0), grid) == 10.0
    assert ms.margin_selection(np.full(20, -1.0), grid) == 10.0
    m = np.r_[np.full(50, 0.5), np.full(50, 2.0)]
    # gamma = 1.0 already puts the 0.5 group under the margin; only 0.1 keeps the gap below 1%
    assert ms.margin_selection(m, [0.1, 1.0, 3.0]) == 0.1
    with pytest.raises(ConfigError):
        ms.margin_selection(m, [])


def test_margin_selection_brute_force():
    rng = np.random.default_rng(0)
    m = rng.normal(1.0, 1.0, size=300)
    grid = np.linspace(0.01, 3, 60)
    ok = [g for g in grid if np.mean(m < g) - np.mean(m <= 0) < 0.01]
    assert ms.margin_selection(m, grid) == max(ok)


def test_margins_definition():
    net = Network((np.eye(3),), ("identity",))
    X = np.array([[1.0, 3.0, 2.0], [5.0, 1.0, 0.0]])
    np.testing.assert_allclose(ms.margins(net, X, [1, 1]), [1.0, -4.0])


def test_prior_bounds_vanish_at_init(pair):
    _, init, X, y = pair
    pb = ms.prior_bounds(init, init, X, y, gamma=1.0, eps=0.1)
    assert pb.gouk == pb.li == pb.long == pb.pitas == 0.0
    assert pb.neyshabur > 0


def test_prior_bounds_hand_plug_in():
    # ||W||_2 = 2, ||W - Ws||_F = 1, ||Ws||_2 = 1, ||W||_F^2 = 5, M = 4, n = 100, gamma = 1, eps = 0.1
    net = Network((np.diag([2.0, 1.0]),), ("identity",))
    init = Network((np.eye(2),), ("identity",))
    X = np.tile([[1.0, 0.0]], (100, 1))
    pb = ms.prior_bounds(net, init, X, np.zeros(100, dtype=int), gamma=1.0, eps=0.1)
    assert pb.gouk == pytest.approx(2 * 2 * (1 / 2) / 10)
    assert pb.li == pytest.approx(math.sqrt(1 * 1 / (0.01 * 100)))
    assert pb.long == pytest.approx(math.sqrt(4 / 100 * 4 * 1))
    assert pb.neyshabur == pytest.approx(math.sqrt(4 * (5 / 4) / 100))
    assert pb.pitas == pytest.approx(math.sqrt(4 * (1 / 4) / 100))


def test_prior_bounds_scale_as_inverse_root_n():
    rng = np.random.default_rng(0)
    W = [rng.normal(size=(3, 2)), rng.normal(size=(2, 3))]
    Ws = [w + 0.1 * rng.normal(size=w.shape) for w in W]
    spec = [np.linalg.norm(w, 2) for w in W]
    B = [np.linalg.norm(w, 2) for w in Ws]
    D = [np.linalg.norm(w - w0) for w, w0 in zip(W, Ws)]
    sd = [np.linalg.norm(w - w0, 2) for w, w0 in zip(W, Ws)]
    frob = [np.linalg.norm(w) for w in W]
    fns = [
        lambda n: ms.gouk_bound(W, Ws, n),
        lambda n: ms.li_bound(B, D, 0.1, n),
        lambda n: ms.long_bound(spec, sd, 12, n),
        lambda n: ms.neyshabur_bound(spec, frob, 0.5, n),
        lambda n: ms.pitas_bound(spec, D, 0.5, n),
    ]
    for f in fns:
        assert f(400) < f(100)
        assert f(400) == pytest.approx(f(100) / 2, rel=1e-12)
    with pytest.raises(ConfigError):
        ms.neyshabur_bound(spec, frob, 0.0, 10)


def test_eval_set_cap_is_sorted_and_seeded():
    a = gaussian_blobs(3, 2, 200, seed=0)
    b = gaussian_blobs(3, 2, 200, seed=1)
    X1, y1 = ms.eval_set(a, b, cap=50, seed=4)
    X2, y2 = ms.eval_set(a, b, cap=50, seed=4)
    assert X1.shape == (50, 2)
    np.testing.assert_array_equal(X1, X2)
    full = np.concatenate([a.X, b.X])
    idx = [int(np.flatnonzero((full == row).all(axis=1))[0]) for row in X1]
    assert idx == sorted(idx)


def test_bound_report_round_trip(tmp_path):
    init = Network.random([3, 4, 3], ["tanh", "identity"], LossSpec("ce"), rng=0)
    net = perturbed(init, 0.2, 5)
    tr = gaussian_blobs(3, 3, 60, seed=0)
    te = gaussian_blobs(3, 3, 30, seed=1)
    rep = ms.bound_report(net, init, tr, te, C=2.0, kind="sqerr_prob", eval_cap=40)
    assert rep.metadata["n"] == 60 and rep.metadata["eval_size"] == 40
    assert set(rep.prior) == {"gouk", "li", "long", "neyshabur", "pitas"}
    rep.write(tmp_path)
    lines = (tmp_path / "bounds.csv").read_text().splitlines()
    assert lines[0] == "bound,value" and len(lines) == 1 + 2 + 4 + 5
    same = ms.bound_report(net, init, tr, te, C=2.0, kind="sqerr_prob", eval_cap=40)
    assert same.to_dict() == rep.to_dict()
    emp = ms.bound_report(net, init, tr, te, C="empirical", kind="sqerr_prob", eval_cap=40)
    assert 0 < emp.metadata["C"] <= 2.0
