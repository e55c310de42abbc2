import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize, stats
from scipy.special import log_expit

from hessfine import data
from hessfine.errors import DataError


def test_zero_spread_puts_points_on_centers():
    ds = data.gaussian_blobs(4, 3, 40, spread=0.0, center_scale=2.0, seed=1)
    centers = data.blob_centers(4, 3, 2.0, 1)
    np.testing.assert_array_equal(ds.X, centers[ds.y])


def test_blobs_deterministic_and_balanced():
    a = data.gaussian_blobs(3, 5, 101, seed=7)
    b = data.gaussian_blobs(3, 5, 101, seed=7)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)
    counts = np.bincount(a.y)
    assert counts.max() - counts.min() <= 1
    with pytest.raises(DataError):
        data.gaussian_blobs(3, 5, 2)


def test_well_separated_blobs_nearest_centroid():
    for seed in range(10):
        ds = data.gaussian_blobs(5, 20, 500, spread=0.1, center_scale=3.0, seed=seed)
        cents = np.stack([ds.X[ds.y == c].mean(axis=0) for c in range(5)])
        pred = np.argmin(((ds.X[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == ds.y) > 0.99


def test_spirals_on_curve_and_balanced():
    ds = data.two_spirals(301, turns=2.0, noise=0.0, seed=3)
    counts = np.bincount(ds.y)
    assert abs(counts[0] - counts[1]) <= 1
    # recover the angle from the radius and check the point lies on the curve
    t = np.linalg.norm(ds.X, axis=1)
    assert np.max(np.abs(ds.X - data.spiral_points(t, ds.y))) < 1e-12
    np.testing.assert_array_equal(ds.X, data.two_spirals(301, turns=2.0, seed=3).X)
    with pytest.raises(DataError):
        data.two_spirals(1)


def test_spirals_defeat_linear_classifier():
    ds = data.two_spirals(600, turns=1.5, noise=0.0, seed=0)
    Z = np.c_[ds.X, np.ones(len(ds))]
    s = np.where(ds.y == 1, 1.0, -1.0)

    def nll(w):
        return -np.sum(log_expit(s * (Z @ w)))

    w = optimize.minimize(nll, np.zeros(3), method="BFGS").x
    assert np.mean((Z @ w > 0) == (ds.y == 1)) < 0.70


def test_related_task_identity_and_determinism():
    src = data.gaussian_blobs(3, 4, 30, center_scale=2.0, seed=5)
    np.testing.assert_array_equal(
        data.related_centers(3, 4, 2.0, 5, 0.0, jitter_seed=9), data.blob_centers(3, 4, 2.0, 5)
    )
    a = data.related_task(src.provenance, 0.5, seed=2)
    b = data.related_task(src.provenance, 0.5, seed=2)
    np.testing.assert_array_equal(a.X, b.X)
    assert len(a) == 30 and a.k == 3


def test_related_displacement_follows_chi():
    k, d, p = 400, 20, 0.5
    base = data.blob_centers(k, d, 3.0, 0)
    disp = np.linalg.norm(data.related_centers(k, d, 3.0, 0, p, jitter_seed=1) - base, axis=1)
    chi = stats.chi(d)
    tol = 4 * p * chi.std() / np.sqrt(k)
    assert abs(disp.mean() - p * chi.mean()) < tol
    assert disp.mean() == pytest.approx(p * np.sqrt(d), rel=0.05)


def test_csv_round_trip_and_errors(tmp_path):
    good = tmp_path / "d.csv"
    good.write_text("a,label,b\n1.0,0,2.5\n-3,1,4\n\n0.5,2,0\n")
    ds = data.load_csv(good)
    np.testing.assert_array_equal(ds.X, [[1.0, 2.5], [-3.0, 4.0], [0.5, 0.0]])
    np.testing.assert_array_equal(ds.y, [0, 1, 2])
    bad = tmp_path / "bad.csv"
    bad.write_text("a,label\n1,0\n2,x\n")
    with pytest.raises(DataError, match=":3:"):
        data.load_csv(bad)
    short = tmp_path / "short.csv"
    short.write_text("a,label\n1,0\n2\n")
    with pytest.raises(DataError, match=":3:"):
        data.load_csv(short)
    with pytest.raises(DataError, match="label column"):
        data.load_csv(good, label_column="y")


def test_split_full_train():
    ds = data.gaussian_blobs(3, 2, 30, seed=0)
    tr, va, te = data.split(ds, (1.0, 0.0, 0.0), seed=4)
    assert va is None and te is None
    np.testing.assert_array_equal(tr.X, ds.X)


@given(st.integers(3, 200), st.integers(2, 5), st.integers(0, 10_000),
       st.sampled_from([(0.8, 0.1, 0.1), (0.5, 0.25, 0.25), (0.34, 0.33, 0.33), (0.0, 0.5, 0.5)]))
def test_split_is_partition(n, k, seed, fr):
    y = np.random.default_rng(seed).integers(0, k, size=n)
    parts = data.split_indices(y, k, fr, seed=seed)
    allidx = np.concatenate(parts)
    assert len(allidx) == n
    np.testing.assert_array_equal(np.sort(allidx), np.arange(n))


def test_stratified_proportions():
    ds = data.gaussian_blobs(4, 2, 403, seed=1)
    fr = (0.7, 0.2, 0.1)
    parts = data.split_indices(ds.y, 4, fr, seed=3)
    glob = np.bincount(ds.y, minlength=4) / len(ds)
    for f, idx in zip(fr, parts):
        counts = np.bincount(ds.y[idx], minlength=4)
        assert np.all(np.abs(counts - glob * len(idx)) <= 1 + 1e-9)
    with pytest.raises(DataError):
        data.split_indices(ds.y, 4, (0.5, 0.5, 0.5))


def test_dataset_validation():
    with pytest.raises(DataError):
        data.Dataset(np.array([[np.nan]]), [0], 1)
    with pytest.raises(DataError):
        data.Dataset(np.zeros((2, 2)), [0, 3], 2)
