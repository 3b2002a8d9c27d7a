import numpy as np
import pytest

from auricle.project import (
    ProjectionResult,
    TsneParams,
    joint_probabilities,
    kl_divergence,
    kl_gradient,
    perplexity_calibration,
    project_or_bypass,
    squared_distances,
    tsne_embed,
)


def three_clusters(seed=7, n=50):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0, 0, 0, 0], [10, 0, 0, 0, 0], [0, 10, 0, 0, 0]], dtype=float)
    sizes = [n - 2 * (n // 3), n // 3, n // 3]
    return np.vstack([rng.normal(c, 1.0, size=(s, 5)) for c, s in zip(centers, sizes)])


class TestPerplexityCalibration:
    def test_equidistant_row_is_uniform(self):
        row = np.full(3, 4.0)
        cal = perplexity_calibration(row, 3.0)
        np.testing.assert_allclose(cal.probs, 1.0 / 3.0)
        assert cal.entropy_bits == pytest.approx(np.log2(3.0), abs=1e-9)
        assert cal.converged

    def test_probability_ordering_matches_inverse_distance(self):
        row = np.array([0.5, 0.6, 25.0])
        cal = perplexity_calibration(row, 2.0)
        assert cal.probs[0] > cal.probs[1] > cal.probs[2]
        # oracle: recompute softmax at the returned sigma
        beta = 1.0 / (2.0 * cal.sigma ** 2)
        q = np.exp(-beta * (row - row.min()))
        np.testing.assert_allclose(cal.probs, q / q.sum(), rtol=1e-9)

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            row = rng.uniform(0.1, 50.0, 30)
            cal = perplexity_calibration(row, 10.0)
            assert cal.probs.sum() == pytest.approx(1.0, abs=1e-9)
            if cal.converged:
                assert abs(cal.entropy_bits - np.log2(10.0)) <= 1e-5

    def test_duplicate_row_degenerates_to_uniform(self):
        cal = perplexity_calibration(np.zeros(5), 2.0)
        np.testing.assert_allclose(cal.probs, 0.2)

    def test_perplexity_at_least_n_rejected_by_params(self):
        with pytest.raises(ValueError, match="must be < N"):
            TsneParams(perplexity=10.0).effective_perplexity(8)


class TestJointProbabilities:
    def test_symmetric_and_normalized(self):
        X = three_clusters(n=20)
        P, unconverged = joint_probabilities(X, 5.0)
        assert np.array_equal(P, P.T)
        assert P.sum() == pytest.approx(1.0, abs=1e-6)
        assert (np.diag(P) == 0).all()
        assert P[~np.eye(len(X), dtype=bool)].min() >= 1e-12
        assert unconverged == []


class TestGradient:
    def test_matches_central_differences_on_5_points(self):
        rng = np.random.default_rng(3)
        X = rng.normal(0, 1, (5, 4))
        P, _ = joint_probabilities(X, 1.2)
        Y = rng.normal(0, 1.0, (5, 2))
        analytic = kl_gradient(P, Y)
        numeric = np.zeros_like(Y)
        eps = 1e-5
        for i in range(5):
            for j in range(2):
                up = Y.copy()
                up[i, j] += eps
                dn = Y.copy()
                dn[i, j] -= eps
                numeric[i, j] = (kl_divergence(P, up) - kl_divergence(P, dn)) / (2 * eps)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-12)
        assert rel.max() <= 1e-4


class TestTsneEmbed:
    def test_bit_identical_for_fixed_seed(self):
        X = three_clusters(n=20)
        params = TsneParams(perplexity=5.0, n_iter=300, seed=11)
        a = tsne_embed(X, params)
        b = tsne_embed(X, params)
        assert np.array_equal(a.coordinates, b.coordinates)
        assert a.kl_trace == b.kl_trace

    def test_kl_trace_nonnegative(self):
        X = three_clusters(n=16)
        result = tsne_embed(X, TsneParams(perplexity=4.0, n_iter=300, seed=2))
        assert all(v >= 0.0 for v in result.kl_trace)

    def test_three_cluster_kl_decreases(self):
        X = three_clusters(seed=7, n=50)
        result = tsne_embed(X, TsneParams(seed=7))
        kl_250 = result.kl_trace[250 // 50 - 1]
        kl_1000 = result.kl_trace[1000 // 50 - 1]
        assert kl_1000 < kl_250
        # oracle: KL definition evaluated directly from P and the final Y
        P, _ = joint_probabilities(X, TsneParams().effective_perplexity(50))
        off = ~np.eye(50, dtype=bool)
        sq = squared_distances(result.coordinates)
        W = 1.0 / (1.0 + sq)
        np.fill_diagonal(W, 0.0)
        Q = np.maximum(W / W.sum(), 1e-12)
        direct = float(np.sum(P[off] * (np.log(P[off]) - np.log(Q[off]))))
        assert kl_1000 == pytest.approx(direct, rel=1e-9)

    def test_translation_invariance_exact(self):
        rng = np.random.default_rng(5)
        # values on a 1/1024 grid so that +4.0 is exactly representable
        X = np.round(rng.uniform(0, 1, (12, 3)) * 1024) / 1024
        params = TsneParams(perplexity=3.0, n_iter=260, seed=8)
        a = tsne_embed(X, params)
        b = tsne_embed(X + 4.0, params)
        assert np.array_equal(a.coordinates, b.coordinates)

    def test_output_shape(self):
        X = three_clusters(n=15)
        result = tsne_embed(X, TsneParams(perplexity=4.0, n_iter=250, seed=0))
        assert result.coordinates.shape == (15, 2)
        assert isinstance(result, ProjectionResult)

    def test_n_iter_too_small_rejected(self):
        with pytest.raises(ValueError, match="n_iter"):
            TsneParams(n_iter=100)


class TestProjectOrBypass:
    def test_disabled_passes_through(self):
        X = np.arange(12.0).reshape(3, 4)
        out = project_or_bypass(X, TsneParams(), enabled=False)
        np.testing.assert_array_equal(out, X)

    def test_enabled_projects_to_n_components(self):
        X = three_clusters(n=20)
        out = project_or_bypass(X, TsneParams(perplexity=5.0, n_iter=250, seed=1), enabled=True)
        assert out.shape == (20, 2)

    def test_tiny_n_advises_bypass(self):
        X = np.arange(12.0).reshape(3, 4)
        with pytest.raises(ValueError, match="bypass"):
            project_or_bypass(X, TsneParams(), enabled=True)
