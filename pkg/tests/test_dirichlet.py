"""Closed-set label fusion: conjugate updates, invariances, and densities."""

import numpy as np
import pytest
import scipy.stats
from bayes_oracles import dirichlet_posterior_mean_quad

from semvox import ClosedSetConfig, FusionConfig, SemvoxError, make_grids
from semvox.dirichlet import (
    absorb,
    alpha_at,
    argmax_class,
    counts_at,
    label_map,
    log_pdf,
    predictive,
    predictive_at,
)


class TestAbsorb:
    def test_single_observations(self):
        a = np.array([1.0, 1.0, 1.0])
        a = absorb(a, 1)
        a = absorb(a, 1)
        a = absorb(a, 3)
        assert np.array_equal(a, [3.0, 1.0, 2.0])

    def test_batched_count(self):
        assert np.array_equal(absorb(np.array([2.0, 5.0]), 2, c=3), [2.0, 8.0])

    def test_input_not_mutated(self):
        a = np.array([1.0, 1.0])
        absorb(a, 1)
        assert np.array_equal(a, [1.0, 1.0])

    @pytest.mark.parametrize("z", [0, 4, -1])
    def test_class_id_range_checked(self, z):
        with pytest.raises(SemvoxError, match="class id"):
            absorb(np.ones(3), z)

    @pytest.mark.parametrize("c", [0, -2, 1.5])
    def test_count_must_be_positive_integer(self, c):
        with pytest.raises(SemvoxError, match="positive integer"):
            absorb(np.ones(3), 1, c=c)


class TestPredictive:
    def test_hand_normalization(self):
        p = predictive(np.array([3.0, 1.0, 2.0]))
        assert np.allclose(p, [0.5, 1 / 6, 1 / 3], atol=1e-15)

    def test_symmetric_is_uniform(self):
        assert np.allclose(predictive(np.full(5, 0.3)), 0.2, atol=1e-15)

    def test_overwhelming_evidence(self):
        p = predictive(np.array([1e6, 1.0]))
        assert p[0] >= 0.999998

    def test_nonpositive_rejected(self):
        with pytest.raises(SemvoxError, match="positive"):
            predictive(np.array([1.0, 0.0]))

    def test_sums_to_one(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.01, 10, (50, 4))
        assert np.allclose(predictive(a).sum(axis=-1), 1.0, atol=1e-12)


class TestArgmax:
    def test_plain(self):
        assert argmax_class(np.array([0.1, 5.0, 2.0])) == 2

    def test_tie_resolves_to_lowest_id(self):
        assert argmax_class(np.array([2.0, 2.0, 1.0])) == 1
        assert argmax_class(np.array([0.5, 2.0, 2.0])) == 2

    def test_batched(self):
        a = np.array([[1.0, 2.0], [3.0, 0.5]])
        assert np.array_equal(argmax_class(a), [2, 1])


class TestFusionInvariances:
    def test_stream_equals_batch_exactly_on_counts(self):
        # fused state is integer counts (prior joins at read time), so
        # one-at-a-time and batched absorption agree bit for bit
        rng = np.random.default_rng(17)
        for _ in range(30):
            k = int(rng.integers(2, 6))
            obs = rng.integers(1, k + 1, size=rng.integers(1, 60))
            stream = np.zeros(k)
            for z in obs:
                stream = absorb(stream, int(z))
            totals = np.bincount(obs, minlength=k + 1)[1:]
            batch = np.zeros(k)
            for z in range(1, k + 1):
                if totals[z - 1] > 0:
                    batch = absorb(batch, z, c=int(totals[z - 1]))
            assert np.array_equal(stream, batch)
            assert np.array_equal(stream, totals.astype(np.float64))

    def test_stream_tracks_batch_on_real_base(self):
        # on a fractional base the two orders agree to rounding only
        rng = np.random.default_rng(18)
        obs = rng.integers(1, 4, size=50)
        stream = np.full(3, 0.001)
        for z in obs:
            stream = absorb(stream, int(z))
        totals = np.bincount(obs, minlength=4)[1:]
        batch = np.full(3, 0.001)
        for z in range(1, 4):
            batch = absorb(batch, z, c=int(totals[z - 1]))
        assert np.allclose(stream, batch, rtol=1e-12, atol=0)

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(23)
        obs = rng.integers(1, 5, size=200)
        a1 = np.full(4, 0.001)
        for z in obs:
            a1 = absorb(a1, int(z))
        a2 = np.full(4, 0.001)
        for z in rng.permutation(obs):
            a2 = absorb(a2, int(z))
        assert np.array_equal(a1, a2)

    def test_flickering_labels_converge(self):
        # observations carry the true class with p = 0.8; after 50 updates
        # the MAP label should almost always be the true one
        rng = np.random.default_rng(41)
        k, n_obs, trials = 5, 50, 1000
        true = rng.integers(1, k + 1, size=trials)
        hit = 0
        for t in range(trials):
            u = rng.random(n_obs)
            others = rng.integers(1, k, size=n_obs)
            obs = np.where(u < 0.8, true[t], np.where(others >= true[t], others + 1, others))
            a = np.full(k, 0.001)
            for z in obs:
                a = absorb(a, int(z))
            hit += int(argmax_class(a) == true[t])
        assert hit / trials >= 0.99


class TestLogPdf:
    def test_matches_scipy(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            k = int(rng.integers(2, 5))
            alpha = rng.uniform(0.2, 8.0, k)
            theta = rng.dirichlet(np.full(k, 2.0))
            want = scipy.stats.dirichlet.logpdf(theta, alpha)
            assert log_pdf(theta, alpha) == pytest.approx(want, abs=1e-9)

    def test_normalizes_to_one(self):
        # midpoint quadrature over the 2-simplex in (theta_1, theta_2)
        alpha = np.array([2.5, 3.0, 4.5])
        n = 800
        t = (np.arange(n) + 0.5) / n
        t1, t2 = np.meshgrid(t, t, indexing="ij")
        inside = t1 + t2 < 1.0
        dens = np.exp(
            scipy.stats.dirichlet.logpdf(
                np.stack([t1[inside], t2[inside], 1 - t1[inside] - t2[inside]]),
                alpha,
            )
        )
        ours = np.array(
            [
                log_pdf(np.array([a, b, 1 - a - b]), alpha)
                for a, b in zip(t1[inside][:50], t2[inside][:50])
            ]
        )
        assert np.allclose(
            ours,
            scipy.stats.dirichlet.logpdf(
                np.stack([t1[inside][:50], t2[inside][:50], 1 - t1[inside][:50] - t2[inside][:50]]),
                alpha,
            ),
            atol=1e-9,
        )
        assert dens.sum() / (n * n) == pytest.approx(1.0, abs=1e-3)

    def test_off_simplex_rejected(self):
        with pytest.raises(SemvoxError, match="simplex"):
            log_pdf(np.array([0.5, 0.6]), np.ones(2))
        with pytest.raises(SemvoxError, match="simplex"):
            log_pdf(np.array([-0.1, 1.1]), np.ones(2))

    def test_bad_alpha_rejected(self):
        with pytest.raises(SemvoxError, match="positive"):
            log_pdf(np.array([0.5, 0.5]), np.array([1.0, 0.0]))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(SemvoxError, match="dimensionality"):
            log_pdf(np.array([0.5, 0.5]), np.ones(3))


class TestQuadratureOracle:
    def test_predictive_matches_posterior_mean_k2(self):
        counts = np.array([3.0, 2.0])
        want = dirichlet_posterior_mean_quad(counts, 0.001, n=20000)
        got = predictive(counts + 0.001)
        assert np.abs(got - want).max() < 5e-4

    def test_predictive_matches_posterior_mean_k3(self):
        counts = np.array([4.0, 1.0, 7.0])
        want = dirichlet_posterior_mean_quad(counts, 0.001, n=900)
        got = predictive(counts + 0.001)
        assert np.abs(got - want).max() < 1e-3


class TestGridReads:
    def setup_method(self):
        cfg = FusionConfig(voxel_size=0.05, truncation=0.15)
        self.tsdf, self.sem = make_grids(cfg, closed=ClosedSetConfig(num_classes=3))

    def test_counts_alpha_predictive_roundtrip(self):
        self.sem.set((1, 2, 3), [np.array([2.0, 0.0, 1.0])])
        assert np.array_equal(counts_at(self.sem, (1, 2, 3)), [2, 0, 1])
        assert np.allclose(alpha_at(self.sem, (1, 2, 3)), [2.001, 0.001, 1.001])
        p = predictive_at(self.sem, (1, 2, 3))
        assert np.allclose(p, np.array([2.001, 0.001, 1.001]) / 3.003, atol=1e-12)

    def test_unobserved_voxel_reads_prior(self):
        assert np.array_equal(counts_at(self.sem, (9, 9, 9)), [0, 0, 0])
        assert np.allclose(predictive_at(self.sem, (9, 9, 9)), 1 / 3, atol=1e-12)

    def test_label_map(self):
        self.sem.set((0, 0, 0), [np.array([2.0, 0.0, 1.0])])
        self.sem.set((1, 0, 0), [np.array([0.0, 5.0, 1.0])])
        coords, labels = label_map(self.sem)
        got = {tuple(c): int(z) for c, z in zip(coords, labels)}
        assert got == {(0, 0, 0): 1, (1, 0, 0): 2}
