"""Open-set feature fusion: conjugate updates, predictives, and queries."""

import numpy as np
import pytest
import scipy.stats
from bayes_oracles import nig_posterior_mean_quad

from semvox import (
    ClosedSetConfig,
    FusionConfig,
    OpenSetConfig,
    SemvoxError,
    make_grids,
    one_hot_bridge_ratio,
)
from semvox.gaussian import (
    absorb_batch,
    classify_means,
    cosine_to_embeddings,
    nig_log_pdf,
    predictive_variance,
    query_classes,
    student_t_log_pdf,
    student_t_params,
    tied_argmax,
)

LAMBDA_FLOOR = 1e-3


class TestAbsorbBatch:
    def test_hand_example(self):
        m, beta = absorb_batch(np.zeros(1), np.ones(1), 1.0, np.array([[2.0]]))
        assert m[0] == pytest.approx(1.0, abs=1e-15)
        assert beta[0] == pytest.approx(2.0, abs=1e-15)

    def test_empty_batch_unchanged(self):
        m0 = np.array([0.4, -0.2])
        b0 = np.array([0.01, 0.02])
        m, b = absorb_batch(m0, b0, 0.5, np.empty((0, 2)))
        assert np.array_equal(m, m0)
        assert np.array_equal(b, b0)

    def test_copies_of_prior_mean_change_nothing(self):
        m0 = np.array([0.3, -1.1])
        b0 = np.array([0.7, 0.2])
        batch = np.repeat(m0[None, :], 5, axis=0)
        m, b = absorb_batch(m0, b0, LAMBDA_FLOOR, batch)
        assert np.allclose(m, m0, atol=1e-14)
        assert np.allclose(b, b0, rtol=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(SemvoxError, match="dim"):
            absorb_batch(np.zeros(2), np.ones(2), 1.0, np.ones((3, 4)))

    def test_nonpositive_lambda_rejected(self):
        with pytest.raises(SemvoxError, match="lambda"):
            absorb_batch(np.zeros(1), np.ones(1), 0.0, np.ones((1, 1)))

    def test_batch_equals_sequential_on_mean(self):
        # one call with n samples vs one-by-one with the weight coupling
        # advanced per step; beta is defined per batch, so only m is compared
        rng = np.random.default_rng(77)
        for _ in range(20):
            ell = int(rng.integers(1, 4))
            n = int(rng.integers(2, 11))
            w0 = float(rng.integers(1, 6))
            batch = rng.normal(0, 1, (n, ell))
            m0 = rng.normal(0, 1, ell)
            mb, _ = absorb_batch(m0, np.full(ell, 1e-3), w0, batch)
            m = m0.copy()
            b = np.full(ell, 1e-3)
            w = w0
            for i in range(n):
                m, b = absorb_batch(m, b, max(w, LAMBDA_FLOOR), batch[i : i + 1])
                w += 1.0
            assert np.abs(m - mb).max() < 1e-6

    def test_sequential_from_fresh_voxel_discounts_prior_mass(self):
        # the weight-coupled lambda keeps the prior's pseudo-mass only for
        # the first update; afterwards lambda reads the integer weight, so
        # the one-by-one path drifts from the single batch by about
        # lambda_floor * spread / n and no further
        rng = np.random.default_rng(78)
        for _ in range(10):
            n = int(rng.integers(2, 9))
            batch = rng.normal(0, 1, (n, 1))
            mb, _ = absorb_batch(np.zeros(1), np.full(1, 1e-3), LAMBDA_FLOOR, batch)
            m = np.zeros(1)
            b = np.full(1, 1e-3)
            w = 0.0
            for i in range(n):
                m, b = absorb_batch(m, b, max(w, LAMBDA_FLOOR), batch[i : i + 1])
                w += 1.0
            assert np.abs(m - mb).max() < 2e-3

    def test_mean_stays_in_observed_hull(self):
        # m is a convex combination of the prior mean and the features
        rng = np.random.default_rng(13)
        for _ in range(25):
            ell = 3
            m = np.zeros(ell)
            b = np.full(ell, 1e-3)
            w = 0.0
            lo = np.zeros(ell)
            hi = np.zeros(ell)
            for _ in range(int(rng.integers(1, 8))):
                batch = rng.normal(0, 2, (int(rng.integers(1, 6)), ell))
                lo = np.minimum(lo, batch.min(axis=0))
                hi = np.maximum(hi, batch.max(axis=0))
                m, b = absorb_batch(m, b, max(w, LAMBDA_FLOOR), batch)
                w += batch.shape[0]
                assert np.all(m >= lo - 1e-12)
                assert np.all(m <= hi + 1e-12)
                assert np.all(b > 0)

    def test_identical_observations_converge_monotonically(self):
        z = np.array([0.8])
        m = np.zeros(1)
        b = np.full(1, 1e-3)
        w = 0.0
        errs, scales = [], []
        for _ in range(60):
            m, b = absorb_batch(m, b, max(w, LAMBDA_FLOOR), z[None, :])
            w += 1.0
            _, _, s2 = student_t_params(m, b, w)
            errs.append(abs(m[0] - z[0]))
            scales.append(s2[0])
        # the first update's prior-mass offset decays like 1/n
        assert errs[-1] < 1e-4
        for i in range(10, 59):
            assert scales[i + 1] < scales[i]
            assert errs[i + 1] <= errs[i]


class TestPredictive:
    def test_hand_example(self):
        mean, dof, scale2 = student_t_params(np.array([1.0]), np.array([2.0]), 4.0)
        assert mean[0] == 1.0
        assert dof == 4.0
        assert scale2[0] == pytest.approx(1.25, abs=1e-15)
        assert predictive_variance(np.array([1.0]), np.array([2.0]), 4.0)[0] == pytest.approx(
            2.5, abs=1e-15
        )

    def test_unobserved_rejected(self):
        with pytest.raises(SemvoxError, match="unobserved"):
            student_t_params(np.zeros(1), np.ones(1), 0.0)

    def test_variance_undefined_at_low_dof(self):
        with pytest.raises(SemvoxError, match="dof"):
            predictive_variance(np.zeros(1), np.ones(1), 1.0)

    def test_log_pdf_matches_scipy(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            ell = int(rng.integers(1, 4))
            m = rng.normal(0, 1, ell)
            scale2 = rng.uniform(0.1, 2.0, ell)
            dof = float(rng.uniform(1.0, 20.0))
            z = rng.normal(0, 2, ell)
            want = scipy.stats.t.logpdf(z, dof, loc=m, scale=np.sqrt(scale2)).sum()
            assert student_t_log_pdf(z, m, dof, scale2) == pytest.approx(want, abs=1e-10)


class TestNigLogPdf:
    def test_matches_scipy(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            m, lam, nu, beta = rng.uniform(0.2, 3.0, 4)
            mu = float(rng.normal(m, 1.0))
            s2 = float(rng.uniform(0.05, 4.0))
            want = scipy.stats.norm.logpdf(mu, m, np.sqrt(s2 / lam)) + scipy.stats.invgamma.logpdf(
                s2, nu, scale=beta
            )
            got = nig_log_pdf(mu, s2, np.array([m]), lam, nu, np.array([beta]))
            assert got == pytest.approx(want, abs=1e-10)

    def test_normalizes_to_one(self):
        m, lam, nu, beta = 0.5, 2.0, 3.0, 1.5
        s2 = np.exp(np.linspace(np.log(1e-4), np.log(80.0), 3000))
        mu = np.linspace(m - 40.0, m + 40.0, 3000)
        MU, S2 = np.meshgrid(mu, s2, indexing="ij")
        logp = (
            0.5 * (np.log(lam) - np.log(2 * np.pi * S2))
            - lam * (MU - m) ** 2 / (2 * S2)
            + nu * np.log(beta)
            - scipy.special.gammaln(nu)
            - (nu + 1) * np.log(S2)
            - beta / S2
        )
        spot = nig_log_pdf(MU[700, 900], S2[700, 900], np.array([m]), lam, nu, np.array([beta]))
        assert spot == pytest.approx(logp[700, 900], abs=1e-10)
        w_mu = mu[1] - mu[0]
        w_s2 = np.gradient(s2)
        total = (np.exp(logp) * w_s2[None, :]).sum() * w_mu
        assert total == pytest.approx(1.0, abs=1e-2)

    def test_symmetric_in_mu(self):
        a = nig_log_pdf(0.9, 0.5, np.array([0.5]), 1.0, 2.0, np.array([1.0]))
        b = nig_log_pdf(0.1, 0.5, np.array([0.5]), 1.0, 2.0, np.array([1.0]))
        assert a == pytest.approx(b, abs=1e-12)

    def test_large_lambda_concentrates_mu(self):
        lo = nig_log_pdf(0.6, 0.5, np.array([0.5]), 1.0, 2.0, np.array([1.0]))
        hi = nig_log_pdf(0.6, 0.5, np.array([0.5]), 1e6, 2.0, np.array([1.0]))
        at_m_lo = nig_log_pdf(0.5, 0.5, np.array([0.5]), 1.0, 2.0, np.array([1.0]))
        at_m_hi = nig_log_pdf(0.5, 0.5, np.array([0.5]), 1e6, 2.0, np.array([1.0]))
        assert (at_m_hi - hi) > (at_m_lo - lo)

    def test_nonpositive_sigma2_rejected(self):
        with pytest.raises(SemvoxError, match="positive"):
            nig_log_pdf(0.0, 0.0, np.zeros(1), 1.0, 1.0, np.ones(1))


class TestPosteriorQuadrature:
    def test_posterior_mean_of_mu_matches_update(self):
        rng = np.random.default_rng(31)
        z = rng.normal(0.7, 0.4, 6)
        m, _ = absorb_batch(np.zeros(1), np.full(1, 1e-3), LAMBDA_FLOOR, z[:, None])
        want = nig_posterior_mean_quad(z, 0.0, LAMBDA_FLOOR, 5e-4, 1e-3)
        assert abs(m[0] - want) < 1e-2


class TestQueries:
    def test_matching_label_wins_decisively(self):
        emb = np.eye(2)
        p, accepted = query_classes(np.array([1.0, 0.0]), 3.0, emb)
        assert accepted
        assert p[0] > 0.99

    def test_orthogonal_mean_is_uniform_borderline(self):
        ell, k = 12, 10
        emb = np.eye(ell)[:k]
        m = np.zeros(ell)
        m[11] = 1.0
        p, accepted = query_classes(m, 2.0, emb)
        assert np.allclose(p, 0.1, atol=1e-12)
        assert accepted  # 0.1 meets the default threshold exactly

    def test_single_label_is_certain(self):
        p, accepted = query_classes(np.array([0.2, 0.1]), 1.0, np.array([[0.5, -0.5]]))
        assert accepted
        assert np.array_equal(p, [1.0])

    def test_zero_mean_rejected_as_unobserved(self):
        p, accepted = query_classes(np.zeros(3), 5.0, np.eye(3))
        assert not accepted
        assert np.all(np.isnan(p))

    def test_zero_weight_rejected(self):
        p, accepted = query_classes(np.array([1.0, 0.0]), 0.0, np.eye(2))
        assert not accepted

    def test_zero_norm_embedding_rejected(self):
        with pytest.raises(SemvoxError, match="zero-norm"):
            query_classes(np.array([1.0, 0.0]), 1.0, np.array([[0.0, 0.0], [1.0, 0.0]]))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(SemvoxError, match="incompatible"):
            query_classes(np.ones(3), 1.0, np.eye(2))

    def test_classify_means_labels_and_rejections(self):
        emb = np.eye(3)
        means = np.array(
            [
                [1.0, 0.0, 0.0],
                [0.0, 0.0, 2.0],
                [0.0, 0.0, 0.0],  # degenerate
                [0.0, 1.0, 0.0],  # weight zero below
            ]
        )
        weights = np.array([1.0, 4.0, 2.0, 0.0])
        labels, best = classify_means(means, weights, emb)
        assert labels.tolist() == [1, 3, 0, 0]
        assert best[0] > 0.99 and best[1] > 0.99
        assert best[2] == 0.0 and best[3] == 0.0

    def test_classify_means_threshold_rejects(self):
        # high temperature flattens the softmax under a strict threshold
        labels, _ = classify_means(
            np.array([[1.0, 0.0]]),
            np.array([1.0]),
            np.eye(2),
            temperature=1000.0,
            confidence_threshold=0.6,
        )
        assert labels[0] == 0

    def test_cosine_hand_values(self):
        sims = cosine_to_embeddings(
            np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([[2.0, 0.0], [0.0, 3.0]])
        )
        want = np.array([[1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5)]])
        assert np.allclose(sims, want, atol=1e-12)

    def test_cosine_zero_mean_gives_nan_row(self):
        sims = cosine_to_embeddings(np.zeros((1, 2)), np.eye(2))
        assert np.all(np.isnan(sims))


class TestTiedArgmax:
    def test_clear_winner(self):
        assert tied_argmax(np.array([[0.5, 1.0]]))[0] == 1

    def test_near_tie_resolves_low(self):
        assert tied_argmax(np.array([[0.9996, 1.0]]), rtol=5e-3)[0] == 0
        assert tied_argmax(np.array([[1.0, 0.9996]]), rtol=5e-3)[0] == 0

    def test_outside_tolerance_not_tied(self):
        assert tied_argmax(np.array([[0.99, 1.0]]), rtol=5e-3)[0] == 1


class TestBridgeTrivials:
    def make_pair(self, k=3):
        cfg = FusionConfig(voxel_size=0.05, truncation=0.15)
        _, closed = make_grids(cfg, closed=ClosedSetConfig(num_classes=k))
        _, open_g = make_grids(cfg, open_set=OpenSetConfig(feature_dim=k))
        return closed, open_g

    def test_empty_grids_rejected(self):
        closed, open_g = self.make_pair()
        with pytest.raises(SemvoxError, match="no active voxels"):
            one_hot_bridge_ratio(open_g, closed)

    def test_single_voxel_single_observation(self):
        closed, open_g = self.make_pair()
        closed.set((1, 1, 1), [np.array([1.0, 0.0, 0.0])])
        m = np.array([1.0, 0.0, 0.0])
        beta = np.full(3, 1e-3)
        open_g.set((1, 1, 1), [m, beta])
        assert one_hot_bridge_ratio(open_g, closed) == 1.0

    def test_disagreeing_voxel_counts(self):
        closed, open_g = self.make_pair()
        for i, (cz, oz) in enumerate([(0, 0), (1, 2)]):
            cvec = np.zeros(3)
            cvec[cz] = 5.0
            closed.set((i, 0, 0), [cvec])
            ovec = np.zeros(3)
            ovec[oz] = 1.0
            open_g.set((i, 0, 0), [ovec, np.full(3, 1e-3)])
        assert one_hot_bridge_ratio(open_g, closed) == 0.5
