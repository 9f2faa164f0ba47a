import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idbooth.distmetrics import (FeatureSet, MetricReport, TABLE1_HEADER, density_coverage, frechet_distance,
                                 kernel_distance, metric_report, polynomial_kernel, vendi_score, write_metric_rows)
from oracles import density_coverage_loop, frechet_scipy, mmd_loop, vendi_eig


def test_frechet_identical_and_1d():
    x = np.random.default_rng(0).standard_normal((50, 3))
    assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-6)
    a = np.array([[-1.0], [1.0], [0.0], [0.0]])
    a = a / a.std(ddof=1)
    assert frechet_distance(a, a + 1.0) == pytest.approx(1.0, abs=1e-6)


def test_frechet_matches_scipy_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 3))
        y = rng.standard_normal((30, 3)) @ rng.standard_normal((3, 3)) + rng.standard_normal(3)
        assert frechet_distance(x, y) == pytest.approx(frechet_scipy(x, y), rel=1e-6, abs=1e-8)
        assert frechet_distance(x, y) == pytest.approx(frechet_distance(y, x), abs=1e-6)


def test_frechet_errors_and_warning():
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.warns(UserWarning, match="singular"):
        frechet_distance(np.random.default_rng(0).standard_normal((3, 5)), np.random.default_rng(1).standard_normal((3, 5)))


def test_kernel_distance_cases():
    x = np.random.default_rng(2).standard_normal((10, 4))
    assert abs(kernel_distance(x, x)) <= 1e-6
    e1 = np.array([[1.0, 0.0], [1.0, 0.0]])
    e2 = np.array([[0.0, 1.0], [0.0, 1.0]])
    # hand computation: k(e1,e1)=k(e2,e2)=(1/2+1)^3, k(e1,e2)=1
    assert kernel_distance(e1, e2) == pytest.approx(2 * 1.5**3 - 2 * 1.0)
    assert kernel_distance(e1, e2) == pytest.approx(mmd_loop(e1, e2))
    with pytest.raises(ValueError):
        kernel_distance(x[:1], x)


def test_kernel_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((7, 3)), rng.standard_normal((5, 3)) + 0.5
    assert kernel_distance(x, y) == pytest.approx(mmd_loop(x, y), rel=1e-10)
    assert kernel_distance(x[:5], y) == pytest.approx(mmd_loop(x[:5], y), rel=1e-10)


def test_kernel_duplicate_dims_invariance():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    np.testing.assert_allclose(polynomial_kernel(a, b), polynomial_kernel(np.hstack([a, a]), np.hstack([b, b])))


def test_kernel_distance_unbiased():
    rng = np.random.default_rng(5)
    for m in (20, 25):
        est = np.array([kernel_distance(rng.standard_normal((20, 4)), rng.standard_normal((m, 4))) for _ in range(200)])
        assert abs(est.mean()) <= 3 * est.std(ddof=1) / np.sqrt(len(est))


def test_density_coverage_cases():
    x = np.random.default_rng(6).standard_normal((20, 3))
    assert density_coverage(x, x, k=1)[1] == 1.0
    assert density_coverage(x, x + 1000.0, k=3) == (0.0, 0.0)
    with pytest.raises(ValueError):
        density_coverage(x, x, k=20)


def test_density_coverage_hand_instance():
    real = np.array([[0.0], [1.0], [2.0], [4.0], [8.0]])
    fake = np.array([[0.5], [3.0], [9.0]])
    assert density_coverage(real, fake, k=1) == pytest.approx(density_coverage_loop(real, fake, 1))
    # radii k=1: 1,1,1,2,4 -> fake 0.5 in balls 0,1; 3.0 in balls 2(|1|<=1),3(1<=2); 9.0 in ball 4
    assert density_coverage(real, fake, k=1) == pytest.approx((5 / 3, 1.0))


def test_density_coverage_brute_force_random():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n, m = rng.integers(3, 33), rng.integers(1, 33)
        k = int(rng.integers(1, min(n, 6)))
        real = rng.integers(-3, 4, size=(n, 2)).astype(float)  # integer grid forces distance ties
        fake = rng.integers(-3, 4, size=(m, 2)).astype(float)
        assert density_coverage(real, fake, k) == pytest.approx(density_coverage_loop(real, fake, k), abs=1e-12)


def test_vendi_cases():
    assert vendi_score(np.tile([1.0, 2.0, 3.0], (5, 1))) == pytest.approx(1.0, abs=1e-6)
    assert vendi_score(np.eye(6)) == pytest.approx(6.0, abs=1e-6)
    x = np.random.default_rng(8).standard_normal((6, 4))
    assert vendi_score(x) == pytest.approx(vendi_eig(x), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_vendi_bounds_and_permutation(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 5))
    v = vendi_score(x)
    assert 1 - 1e-9 <= v <= n + 1e-9
    assert vendi_score(x[rng.permutation(n)]) == pytest.approx(v, rel=1e-9)


def test_vendi_per_id():
    fs = FeatureSet(np.vstack([np.eye(3), np.ones((2, 3))]), ["a", "a", "a", "b", "b"])
    v = vendi_score(fs, per_id=True)
    assert v["a"] == pytest.approx(3.0) and v["b"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        vendi_score(np.eye(3), per_id=True)


def test_featureset_roundtrip_and_validation(tmp_path):
    fs = FeatureSet(np.random.default_rng(9).standard_normal((4, 3)), ["a", "b", "a", "b"], "face")
    fs.save(tmp_path / "feat.f32")
    back = FeatureSet.load(tmp_path / "feat.f32")
    np.testing.assert_array_equal(back.features, fs.features)
    assert back.ids == fs.ids and back.mode == "face"
    assert (tmp_path / "feat.f32").stat().st_size == 4 * 3 * 4
    with pytest.raises(ValueError):
        FeatureSet(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((2, 2)), ["a"])


def test_metric_report_and_csv(tmp_path):
    rng = np.random.default_rng(10)
    real = FeatureSet(rng.standard_normal((40, 3)))
    fake = FeatureSet(rng.standard_normal((30, 3)), [str(i % 3) for i in range(30)])
    r = metric_report(real, fake, k=5)
    assert isinstance(r, MetricReport) and 0 <= r.coverage <= 1 and set(r.vendi_per_id) == {"0", "1", "2"}
    write_metric_rows(tmp_path / "t1.csv", [("idbooth", "entire", r), ("idbooth", "face", r)])
    lines = (tmp_path / "t1.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == TABLE1_HEADER and len(lines) == 3
