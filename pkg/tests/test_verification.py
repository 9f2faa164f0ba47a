import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idbooth.verification import (ScoreSet, VerificationReport, build_pairs, cosine_scores, error_rates, fdr,
                                  fdr_from_moments, plot_score_histogram, read_reports, report_equal,
                                  verification_report, write_reports)
from oracles import fdr_loop, rates_exhaustive


def test_pair_counts_full_scale():
    labels = np.repeat(np.arange(107), 21).astype(str)
    p = build_pairs(labels, mode="among", seed=0)
    assert len(p.genuine) == 107 * math.comb(21, 2) == 22470
    assert len(p.imposter) == len(p.genuine)


def test_pairs_small_and_deterministic():
    p = build_pairs(["a", "a", "b", "b"], mode="among", seed=3)
    assert sorted(map(tuple, p.genuine)) == [(0, 1), (2, 3)]
    assert len(p.imposter) == 2
    lab = np.asarray(["a", "a", "b", "b"])
    assert all(lab[i] != lab[j] for i, j in p.imposter)
    q = build_pairs(["a", "a", "b", "b"], mode="among", seed=3)
    np.testing.assert_array_equal(p.imposter, q.imposter)
    assert len({tuple(r) for r in p.imposter}) == len(p.imposter)


def test_pairs_versus():
    p = build_pairs(["a", "b"], ["a", "a", "b"], mode="versus", seed=0)
    assert sorted(map(tuple, p.genuine)) == [(0, 0), (0, 1), (1, 2)]
    with pytest.raises(ValueError):
        build_pairs(["a"], mode="versus")


def test_pairs_errors():
    with pytest.raises(ValueError):
        build_pairs(["a", "b", "c"], mode="among")
    with pytest.raises(ValueError):
        build_pairs(["a", "a"], mode="sideways")


def test_cosine_scores():
    e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    p = build_pairs(["x", "x", "y"], mode="among", seed=0)
    s = cosine_scores(p, e)
    assert s.genuine.tolist() == [1.0] and s.imposter.tolist() == [0.0]
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((12, 5))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    labels = np.repeat(np.arange(4), 3).astype(str)
    p = build_pairs(labels, mode="among", seed=1)
    s = cosine_scores(p, emb)
    for (i, j), v in zip(p.genuine, s.genuine):
        assert v == pytest.approx(sum(a * b for a, b in zip(emb[i], emb[j])))
    with pytest.raises(IndexError):
        cosine_scores(p, emb[:5])


def test_rates_perfect_separation():
    r = error_rates(ScoreSet([0.9, 0.8, 0.95], [0.1, 0.2, 0.0]))
    assert (r.eer, r.fmr100, r.fmr1000, r.fnmr100, r.fnmr1000) == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_rates_identical_distributions():
    vals = np.linspace(-1, 1, 50)
    r = error_rates(ScoreSet(vals, vals))
    assert abs(r.eer - 0.5) <= 1 / 50


def test_rates_hand_instance_matches_oracle():
    g = [0.9, 0.85, 0.7, 0.65, 0.6, 0.55, 0.5, 0.45, 0.3, 0.2]
    im = [0.1, 0.2, 0.25, 0.35, 0.4, 0.5, 0.52, 0.05, 0.0, -0.1]
    r = error_rates(ScoreSet(g, im))
    assert (r.eer, r.fmr100, r.fmr1000, r.fnmr100, r.fnmr1000) == pytest.approx(rates_exhaustive(g, im), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=32), st.lists(st.integers(-20, 20), min_size=1, max_size=32))
def test_rates_match_oracle_with_ties(g, im):
    g, im = [v / 20 for v in g], [v / 20 for v in im]
    r = error_rates(ScoreSet(g, im))
    assert (r.eer, r.fmr100, r.fmr1000, r.fnmr100, r.fnmr1000) == pytest.approx(rates_exhaustive(g, im), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rates_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    g, im = rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 25)
    a = error_rates(ScoreSet(g, im))
    b = error_rates(ScoreSet(np.tanh(3 * g) * 2 + 5, np.tanh(3 * im) * 2 + 5))
    assert (a.eer, a.fmr100, a.fmr1000, a.fnmr100, a.fnmr1000) == pytest.approx(
        (b.eer, b.fmr100, b.fmr1000, b.fnmr100, b.fnmr1000), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_eer_monotone_in_bad_genuine(seed):
    rng = np.random.default_rng(seed)
    g, im = rng.uniform(-1, 1, 15), rng.uniform(-1, 1, 15)
    worse = np.append(g, im.min() - 1.0)
    assert error_rates(ScoreSet(worse, im)).eer >= error_rates(ScoreSet(g, im)).eer - 1e-12


def test_rates_require_scores():
    with pytest.raises(ValueError):
        error_rates(ScoreSet([], [0.1]))
    with pytest.raises(ValueError):
        ScoreSet([float("nan")], [0.0])


def test_fdr():
    assert fdr_from_moments(0.871, 0.070, 0.021, 0.0725) == pytest.approx(70.969, rel=0.01)
    rng = np.random.default_rng(1)
    g, im = rng.normal(0.8, 0.1, 40), rng.normal(0.1, 0.1, 50)
    assert fdr(ScoreSet(g, im)) == pytest.approx(fdr_loop(g, im), rel=1e-12)
    assert fdr(ScoreSet([0.1, 0.3], [0.3, 0.1])) == 0.0
    with pytest.raises(ValueError):
        fdr(ScoreSet([0.5, 0.5], [0.5, 0.5]))
    with pytest.raises(ValueError):
        fdr(ScoreSet([0.5], [0.1, 0.2]))


def test_report_csv_and_scores_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    s = ScoreSet(rng.normal(0.7, 0.1, 30), rng.normal(0.0, 0.1, 30))
    r = verification_report(s)
    assert 0 <= r.eer <= 1 and r.fdr >= 0
    write_reports(tmp_path / "t3.csv", [("among_synthetic", "idbooth", r)])
    (setting, method, back), = read_reports(tmp_path / "t3.csv")
    assert (setting, method) == ("among_synthetic", "idbooth") and report_equal(r, back)
    header = (tmp_path / "t3.csv").read_text().splitlines()[0]
    assert header.startswith("csv_version,setting,method,eer,fmr100,fmr1000,fnmr100,fnmr1000")
    s.save(tmp_path / "scores")
    t = ScoreSet.load(tmp_path / "scores")
    np.testing.assert_array_equal(s.genuine, t.genuine)
    plot_score_histogram(s, tmp_path / "h.png", "x")
    assert (tmp_path / "h.png").stat().st_size > 0
