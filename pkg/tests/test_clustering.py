import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
import synth
from ldpo.clustering import (RimModel, default_oversegment, fit_multilogit, kmeans,
                             kmeans_plusplus, kmeans_rim, lloyd, rim_fit, rim_gradient,
                             rim_objective, rim_posterior)
from ldpo.core import FeatureMatrix, LabelVector, ValidationError
from ldpo.metrics import purity


def rel_err(a, b, floor=1e-4):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


class TestKmeans:
    def test_k_equals_n(self):
        x = np.random.default_rng(0).normal(size=(7, 3))
        res = kmeans(x, 7, seed=1)
        assert res.objective == 0.0
        assert sorted(res.labels.labels) == list(range(7))

    def test_k_one(self):
        x = np.random.default_rng(1).normal(size=(20, 4))
        res = kmeans(x, 1)
        np.testing.assert_allclose(res.centers[0], x.mean(axis=0), atol=1e-12)
        assert res.objective == pytest.approx(x.var(axis=0).sum() * len(x), rel=1e-12)

    def test_exhaustive_optimum(self):
        rng = np.random.default_rng(2)
        hits = 0
        for _ in range(20):
            x = rng.normal(size=(8, 2))
            best = oracles.best_two_partition(x.tolist())
            obj = kmeans(x, 2, seed=0).objective
            assert obj >= best * (1 - 1e-9)
            hits += obj <= best * (1 + 1e-9)
        # Lloyd can settle in a local optimum despite restarts
        assert hits >= 18

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(2, 6))
    def test_lloyd_monotone(self, seed, k):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(40, 3))
        _, labels, obj, trace = lloyd(x, kmeans_plusplus(x, k, rng))
        assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(trace, trace[1:]))
        assert obj == pytest.approx(oracles.sse(x.tolist(), labels.tolist(), k), rel=1e-9)

    def test_empty_cluster_reseeded(self):
        x = np.array([[0.0], [0.1], [10.0], [10.1]])
        centers = np.array([[0.05], [5.0], [100.0]])
        _, labels, _, trace = lloyd(x, centers)
        assert np.unique(labels).size == 3
        assert trace[-1] <= trace[0]

    def test_deterministic(self):
        x = np.random.default_rng(3).normal(size=(60, 2))
        assert kmeans(x, 4, seed=5).labels == kmeans(x, 4, seed=5).labels

    def test_bad_k(self):
        with pytest.raises(ValidationError):
            kmeans(np.zeros((3, 2)), 4)

    def test_duplicates(self):
        res = kmeans(np.zeros((5, 2)), 3, seed=0)
        assert res.objective == 0.0


def _random_model(rng, k, d, lam=0.3):
    return RimModel(rng.normal(size=(k, d)), rng.normal(size=k), lam)


class TestRimPosterior:
    def test_uniform(self):
        m = RimModel(np.zeros((4, 3)), np.zeros(4))
        np.testing.assert_allclose(rim_posterior(m, np.ones(3)), 0.25)

    def test_saturation(self):
        m = RimModel(np.zeros((3, 2)), np.array([0.0, 50.0, 0.0]))
        p = rim_posterior(m, np.zeros(2))
        assert p[0] + p[2] < 1e-20 and p[1] == 1.0

    def test_oracle_and_invariants(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            m = _random_model(rng, 5, 3)
            f = rng.normal(size=3)
            ref = oracles.softmax([oracles.dot(w, f) + b for w, b in zip(m.weights, m.biases)])
            p = rim_posterior(m, f)
            np.testing.assert_allclose(p, ref, rtol=0, atol=1e-12)
            assert p.sum() == pytest.approx(1.0, abs=1e-12)
            shifted = RimModel(m.weights, m.biases + 7.5, m.lam)
            assert np.argmax(rim_posterior(shifted, f)) == np.argmax(p)


class TestRimObjective:
    def test_zero_model(self):
        x = np.random.default_rng(5).normal(size=(10, 3))
        assert rim_objective(RimModel(np.zeros((4, 3)), np.zeros(4)), x) == \
            pytest.approx(0.0, abs=1e-12)

    def test_single_class(self):
        w = np.array([[1.0, -2.0]])
        m = RimModel(w, np.zeros(1), lam=0.5)
        x = np.random.default_rng(6).normal(size=(8, 2))
        assert rim_objective(m, x) == pytest.approx(-0.5 * 5.0, abs=1e-12)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            m = _random_model(rng, 4, 3)
            x = rng.normal(size=(20, 3))
            ref = oracles.rim_objective(m.weights.tolist(), m.biases.tolist(), m.lam, x.tolist())
            assert rim_objective(m, x) == pytest.approx(ref, abs=1e-10)


class TestRimGradient:
    def test_stationary_biases(self):
        x = np.random.default_rng(8).normal(size=(30, 3))
        x -= x.mean(axis=0)
        g = rim_gradient(RimModel(np.zeros((3, 3)), np.zeros(3)), x)
        np.testing.assert_allclose(g.biases, 0.0, atol=1e-15)

    def test_penalty_term(self):
        rng = np.random.default_rng(9)
        m = _random_model(rng, 3, 2, lam=0.0)
        x = rng.normal(size=(15, 2))
        g0 = rim_gradient(m, x)
        g1 = rim_gradient(RimModel(m.weights, m.biases, 1.7), x)
        np.testing.assert_allclose(g1.weights - g0.weights, -2 * 1.7 * m.weights, atol=1e-13)
        np.testing.assert_array_equal(g1.biases, g0.biases)

    def test_finite_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            k, d = rng.integers(2, 5), rng.integers(1, 4)
            m = _random_model(rng, k, d)
            x = rng.normal(size=(rng.integers(5, 25), d))
            theta = m.pack()
            fd = np.array(oracles.central_difference(
                lambda t: rim_objective(RimModel.unpack(np.array(t), k, d, m.lam), x),
                theta.tolist(), h=1e-5))
            g = rim_gradient(m, x)
            assert rel_err(np.concatenate([g.weights.ravel(), g.biases]), fd) < 1e-4


class TestRimFit:
    def test_three_gaussians(self):
        x, y = synth.gaussian_mixture(0, 3)
        km = kmeans(x, 30, seed=0, restarts=3)
        model, res = rim_fit(x, km.labels)
        assert res.k_effective == 3 == model.n_classes
        assert purity(res.labels.labels, y) >= 0.95

    def test_identical_points(self):
        x = np.ones((30, 2))
        init = LabelVector.from_labels(np.arange(30) % 4)
        _, res = rim_fit(x, init)
        assert res.k_effective == 1

    def test_trace_and_k(self):
        x = np.random.default_rng(11).normal(size=(100, 3))
        init = kmeans(x, 10, seed=0).labels
        _, res = rim_fit(x, init, lam=0.5)
        assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
        assert res.k_effective <= init.k
        assert res.k_effective == np.unique(res.labels.labels).size

    def test_deterministic(self):
        x, _ = synth.gaussian_mixture(1, 3, n_per=50)
        a = kmeans_rim(x, 15, seed=2)[1]
        b = kmeans_rim(x, 15, seed=2)[1]
        assert a.labels == b.labels and a.objective == b.objective

    def test_misaligned(self):
        x = FeatureMatrix.from_array(np.zeros((3, 1)), ["a", "b", "c"])
        with pytest.raises(ValidationError):
            rim_fit(x, LabelVector.from_labels([0, 1, 0], ["a", "c", "b"]))


def test_multilogit_warm_start_fits_partition():
    x, y = synth.gaussian_mixture(2, 4, n_per=30)
    m = fit_multilogit(x, LabelVector.from_labels(y), lam=1e-3)
    assert np.mean(np.argmax(rim_posterior(m, x), axis=1) == y) == 1.0


def test_default_oversegment():
    assert default_oversegment(50) == 5
    assert default_oversegment(5) == 2
    assert default_oversegment(10 ** 6) == 1000
