import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from femkan.evaluation import (VerificationThreshold, asr, calibrate_threshold, cosine, cosine_rows,
                               impostor_scores, mmd, sample_impostor_pairs, similarity_histogram,
                               similarity_report, write_report, write_scores_csv)

# frozen golden master (seeded data, 50 bins over [-1, 1])
GOLDEN_HISTOGRAM = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 2, 0, 0, 0, 1, 2, 3, 1, 3, 4, 8, 9, 12, 12, 22, 29, 22, 28, 16, 17, 8, 0, 0]


def brute_force_threshold(scores, far):
    """Scan every candidate in sorted order; first one meeting the FAR target wins.

    The 1e-9 slack absorbs decimal FAR values that are inexact in binary
    (0.29 * 100 = 28.999999999999996).
    """
    n = len(scores)
    for t in sorted(scores):
        above = sum(1 for s in scores if s > t)
        if above <= far * n + 1e-9:
            return t, above / n
    raise AssertionError("unreachable")


def double_loop_mmd(X, Y, h):
    def k(a, b):
        return np.exp(-np.sum((a - b) ** 2) / (2 * h * h))

    m, n = len(X), len(Y)
    sxx = sum(k(X[i], X[j]) for i in range(m) for j in range(m)) / (m * m)
    syy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n)) / (n * n)
    sxy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def median_pairwise(Z):
    d = [np.sqrt(np.sum((Z[i] - Z[j]) ** 2)) for i in range(len(Z)) for j in range(i + 1, len(Z))]
    return float(np.median(d))


class TestCosine:
    def test_basic(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine(v, v) == pytest.approx(1.0)
        assert cosine([1, 0], [0, 1]) == 0.0
        assert cosine(v, 2 * v) == pytest.approx(1.0)
        with pytest.raises(ZeroDivisionError):
            cosine([0, 0], [1, 0])

    @given(arrays(np.float64, 5, elements=st.floats(-10, 10)),
           arrays(np.float64, 5, elements=st.floats(-10, 10)),
           st.floats(0.01, 100), st.floats(0.01, 100))
    def test_scale_invariance_and_range(self, a, b, alpha, beta):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        c = cosine(a, b)
        assert -1.0 <= c <= 1.0
        assert cosine(alpha * a, beta * b) == pytest.approx(c, abs=1e-9)

    def test_rows(self):
        A = np.random.default_rng(0).standard_normal((4, 3))
        B = np.random.default_rng(1).standard_normal((4, 3))
        np.testing.assert_allclose(cosine_rows(A, B), [cosine(a, b) for a, b in zip(A, B)])


class TestThreshold:
    def test_hundred_scores(self):
        scores = np.arange(100) / 100
        thr = calibrate_threshold(scores, 0.01)
        assert thr.value == pytest.approx(0.98)
        assert thr.achieved_far == pytest.approx(0.01)
        assert (thr.value, thr.achieved_far) == pytest.approx(brute_force_threshold(list(scores), 0.01))

    def test_constant_scores(self):
        thr = calibrate_threshold(np.full(50, 0.3), 0.01)
        assert thr.value == 0.3 and thr.achieved_far == 0.0

    def test_half_far_symmetric(self):
        s = np.random.default_rng(0).standard_normal(101)
        s = np.concatenate([s, -s])
        thr = calibrate_threshold(s, 0.5)
        assert (thr.value, thr.achieved_far) == pytest.approx(brute_force_threshold(list(s), 0.5))

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=60), st.floats(0.01, 0.6))
    def test_matches_brute_force(self, scores, far):
        thr = calibrate_threshold(scores, far)
        t, achieved = brute_force_threshold(scores, far)
        assert thr.value == t and thr.achieved_far == pytest.approx(achieved)
        assert thr.achieved_far <= far + 1e-12

    @given(st.lists(st.floats(-1, 1), min_size=5, max_size=60), st.floats(0.01, 0.5),
           st.floats(0.01, 0.5))
    def test_monotone_in_far(self, scores, f1, f2):
        lo, hi = sorted((f1, f2))
        assert calibrate_threshold(scores, lo).value >= calibrate_threshold(scores, hi).value

    def test_errors(self):
        with pytest.raises(ValueError):
            calibrate_threshold([], 0.01)
        with pytest.raises(ValueError):
            calibrate_threshold([0.1], 0.0)

    def test_impostor_pairs_cross_identity(self):
        labels = np.repeat(np.arange(10), 3)
        pairs = sample_impostor_pairs(labels, 500, np.random.default_rng(0))
        assert pairs.shape == (500, 2)
        assert np.all(labels[pairs[:, 0]] != labels[pairs[:, 1]])
        with pytest.raises(ValueError):
            sample_impostor_pairs(np.zeros(5), 3, np.random.default_rng(0))


class TestAsr:
    def test_identical(self):
        E = np.random.default_rng(0).standard_normal((6, 4))
        rep = asr(E, E, np.arange(6), VerificationThreshold(0.5, 0.01, 0.01, 100))
        assert rep.asr == 1.0 and rep.successes == 6

    def test_orthogonal(self):
        rng = np.random.default_rng(0)
        E = rng.standard_normal((50, 512))
        P = rng.standard_normal((50, 512))
        assert asr(P, E, np.arange(50), VerificationThreshold(0.5, 0.01, 0.01, 1)).asr == 0.0

    def test_hand_count(self):
        sims = [0.9, 0.2, 0.6, 0.7, 0.1, 0.95]
        labels = np.array([0, 0, 1, 1, 2, 2])
        enrolled = np.tile([1.0, 0.0], (6, 1))
        probes = np.array([[s, np.sqrt(1 - s * s)] for s in sims])
        rep = asr(probes, enrolled, labels, VerificationThreshold(0.5, 0.01, 0.0, 1))
        assert rep.asr == pytest.approx(4 / 6) and rep.successes == 4
        assert rep.identity_asr == 1.0
        np.testing.assert_array_equal(rep.success, [1, 0, 1, 1, 0, 1])

    @given(st.floats(-1, 1), st.floats(-1, 1))
    def test_monotone_in_threshold(self, t1, t2):
        rng = np.random.default_rng(1)
        P, E = rng.standard_normal((2, 40, 8))
        lo, hi = sorted((t1, t2))
        a = asr(P, E, np.arange(40), VerificationThreshold(lo, 0.01, 0, 1)).asr
        b = asr(P, E, np.arange(40), VerificationThreshold(hi, 0.01, 0, 1)).asr
        assert b <= a

    def test_label_mismatch(self):
        with pytest.raises(ValueError):
            asr(np.ones((3, 2)), np.ones((3, 2)), np.arange(2), VerificationThreshold(0, 0, 0, 0))


class TestMmd:
    def test_identical_sets_exactly_zero(self):
        X = np.random.default_rng(0).standard_normal((30, 4))
        assert mmd(X, X.copy()) == 0.0
        assert mmd(np.ones((3, 2)), np.ones((3, 2))) == 0.0

    def test_shifted_gaussians_match_double_loop(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((500, 8))
        Y = rng.standard_normal((500, 8)) + 1.0
        h = median_pairwise(np.concatenate([X, Y]))
        got = mmd(X, Y)
        ref = double_loop_mmd(X, Y, h)
        assert abs(got - ref) <= 1e-9
        assert got > 0.05

    @given(st.integers(0, 2 ** 16))
    def test_symmetric_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        X, Y = rng.standard_normal((2, 12, 3))
        assert mmd(X, Y) == pytest.approx(mmd(Y, X), abs=1e-12)
        assert mmd(X, Y) >= 0.0

    def test_unbiased_variant(self):
        rng = np.random.default_rng(3)
        X, Y = rng.standard_normal((2, 20, 3))
        h = 1.3
        g = lambda A, B: np.exp(-((A[:, None] - B[None]) ** 2).sum(-1) / (2 * h * h))
        kxx, kyy, kxy = g(X, X), g(Y, Y), g(X, Y)
        ref = ((kxx.sum() - 20) / 380 + (kyy.sum() - 20) / 380 - 2 * kxy.mean())
        assert mmd(X, Y, bandwidth=h, unbiased=True) == pytest.approx(ref, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            mmd(np.zeros((0, 2)), np.zeros((3, 2)))


class TestReports:
    def test_identical_pairs_top_bin(self):
        E = np.random.default_rng(0).standard_normal((7, 5))
        rep = similarity_report(E, E, np.arange(7))
        assert rep.mean_cosine == pytest.approx(1.0)
        assert rep.histogram[-1] == 7 and sum(rep.histogram) == 7

    @given(st.integers(0, 2 ** 16), st.integers(1, 50))
    def test_histogram_conservation(self, seed, n):
        rng = np.random.default_rng(seed)
        P, E = rng.standard_normal((2, n, 6))
        rep = similarity_report(P, E, np.arange(n))
        assert sum(rep.histogram) == n and len(rep.histogram) == 50

    def test_golden_histogram(self):
        rng = np.random.default_rng(2024)
        E = rng.standard_normal((200, 16))
        P = E + rng.standard_normal((200, 16))
        assert similarity_report(P, E, np.arange(200)).histogram == GOLDEN_HISTOGRAM

    def test_serialisation(self, tmp_path):
        E = np.random.default_rng(0).standard_normal((4, 3))
        rep = asr(E, E, np.array([0, 0, 1, 1]), calibrate_threshold([0.1, 0.2, 0.3], 0.34))
        write_report({"results": rep.as_dict()}, tmp_path / "r.json")
        loaded = json.loads((tmp_path / "r.json").read_text())
        assert loaded["report_version"] == 1 and loaded["results"]["asr"] == 1.0
        write_scores_csv(rep, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[1] == "probe,label,cosine,success" and len(lines) == 6


def test_fresh_impostor_far():
    """Threshold calibrated on one impostor sample holds its FAR on a fresh one."""
    rng = np.random.default_rng(0)
    centres = rng.standard_normal((300, 64))
    labels = np.repeat(np.arange(300), 5)
    emb = centres[labels] + 0.5 * rng.standard_normal((1500, 64))
    thr = calibrate_threshold(impostor_scores(emb, labels, 100_000, np.random.default_rng(1)), 0.01)
    fresh = impostor_scores(emb, labels, 20_000, np.random.default_rng(2))
    assert 0.005 <= np.mean(fresh > thr.value) <= 0.02
