import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medsynth.errors import (ConfigError, ContractError,
                             InsufficientSampleError)
from medsynth.metrics import (EmbeddingSet, GaussianStats, agreement,
                              aggregate_runs, diversity, embed_images, fbd,
                              fid, fidelity, fit_gaussian, format_mean_std,
                              frechet_distance, matrix_sqrt_spd)
from medsynth.rng import Stream
from medsynth.synthdata import SceneAttributes, render_scene


def unit_rows(n, d, seed):
    e = Stream(seed, "rows").normal((n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


class TestEmbedImages:
    def _scenes(self, n, attrs, seed0=0):
        return [render_scene(attrs, seed0 + i) for i in range(n)]

    def test_identical_images_identical_embeddings(self):
        imgs = self._scenes(1, SceneAttributes("polyp", 1, "endo", "warm")) * 2
        es = embed_images(imgs, "random-projection", seed=0)
        assert np.array_equal(es.embeddings[0], es.embeddings[1])

    def test_unit_norm(self):
        imgs = self._scenes(5, SceneAttributes("polyp", 2, "endo", "cool"))
        es = embed_images(imgs, "random-projection", seed=0)
        assert np.allclose(np.linalg.norm(es.embeddings, axis=1), 1.0, atol=1e-12)

    def test_different_scenes_not_identical(self):
        a = self._scenes(1, SceneAttributes("polyp", 3, "endo", "warm"))
        b = self._scenes(1, SceneAttributes("clean", 0, "xray", "dark"), seed0=50)
        es = embed_images(a + b, "random-projection", seed=0)
        cos = es.embeddings[0] @ es.embeddings[1]
        assert cos < 1.0

    def test_unknown_embedder_rejected(self):
        with pytest.raises(ConfigError):
            embed_images([], "inception-v3")

    def test_vae_embedder(self):
        from medsynth.nets import init_vae
        vae = init_vae(0)
        imgs = self._scenes(3, SceneAttributes("polyp", 1, "endo", "warm"))
        es = embed_images(imgs, "vae-encoder", vae=vae)
        assert es.embeddings.shape == (3, 4 * 8 * 8)
        assert np.allclose(np.linalg.norm(es.embeddings, axis=1), 1.0)


class TestFitGaussian:
    def test_two_identical_points(self):
        es = EmbeddingSet(np.array([[1.0, 2.0], [1.0, 2.0]]))
        g = fit_gaussian(es, "full")
        assert np.allclose(g.mean, [1.0, 2.0])
        assert np.allclose(g.cov, 1e-6 * np.eye(2))
        gd = fit_gaussian(es, "diagonal")
        assert np.allclose(gd.cov, 1e-6 * np.eye(2))

    def test_one_dimensional_pair(self):
        g = fit_gaussian(EmbeddingSet(np.array([[0.0], [2.0]])), "full")
        assert np.allclose(g.mean, [1.0])
        assert np.allclose(g.cov, [[2.0 + 1e-6]])

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSampleError):
            fit_gaussian(EmbeddingSet(np.ones((1, 3))))

    def test_matches_two_pass_oracle(self):
        x = Stream(1, "g").normal((100, 5))
        g = fit_gaussian(EmbeddingSet(x), "full")
        mu = x.sum(axis=0) / 100                      # pass one
        cov = np.zeros((5, 5))                        # pass two
        for row in x:
            cov += np.outer(row - mu, row - mu)
        cov /= 99
        assert np.abs(g.mean - mu).max() < 1e-10
        assert np.abs(g.cov - (cov + 1e-6 * np.eye(5))).max() < 1e-10

    def test_diagonal_zeroes_off_diagonals(self):
        x = Stream(2, "g").normal((50, 4))
        g = fit_gaussian(EmbeddingSet(x), "diagonal")
        off = g.cov - np.diag(np.diag(g.cov))
        assert np.allclose(off, 0.0)


class TestMatrixSqrt:
    def test_identity(self):
        assert np.allclose(matrix_sqrt_spd(np.eye(4)), np.eye(4))

    def test_diagonal(self):
        assert np.allclose(matrix_sqrt_spd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_squaring_residual(self):
        for d in (2, 8, 32):
            g = Stream(d, "spd").normal((d, d))
            a = g @ g.T
            r = matrix_sqrt_spd(a)
            res = np.linalg.norm(r @ r - a) / np.linalg.norm(a)
            assert res < 1e-8

    def test_negative_eigenvalues_clamped(self):
        m = np.diag([1.0, -1e-9])
        r = matrix_sqrt_spd(m)
        assert np.all(np.linalg.eigvalsh(r) >= 0)

    def test_nonfinite_rejected(self):
        from medsynth.errors import NumericError
        with pytest.raises(NumericError):
            matrix_sqrt_spd(np.array([[np.nan, 0], [0, 1.0]]))


class TestFrechet:
    def test_identical_gaussians_zero(self):
        g = GaussianStats(np.ones(3), np.eye(3) * 0.5)
        assert frechet_distance(g, g) <= 1e-6

    def test_1d_mean_shift(self):
        a = GaussianStats(np.array([0.0]), np.array([[1.0]]))
        b = GaussianStats(np.array([3.0]), np.array([[1.0]]))
        assert np.isclose(frechet_distance(a, b), 9.0, atol=1e-9)

    def test_1d_variance_gap(self):
        a = GaussianStats(np.array([0.0]), np.array([[1.0]]))
        b = GaussianStats(np.array([0.0]), np.array([[4.0]]))
        assert np.isclose(frechet_distance(a, b), 1.0, atol=1e-9)

    def test_1d_closed_form_random_cases(self):
        s = Stream(7, "cases")
        for _ in range(100):
            m1, m2 = s.normal(), s.normal()
            s1, s2 = abs(s.normal()) + 0.1, abs(s.normal()) + 0.1
            a = GaussianStats(np.array([m1]), np.array([[s1**2]]))
            b = GaussianStats(np.array([m2]), np.array([[s2**2]]))
            expected = (m1 - m2) ** 2 + (s1 - s2) ** 2
            assert abs(frechet_distance(a, b) - expected) < 1e-9

    def test_symmetry(self):
        s = Stream(8, "sym")
        g1 = GaussianStats(s.normal(4), (lambda m: m @ m.T)(s.normal((4, 4))))
        g2 = GaussianStats(s.normal(4), (lambda m: m @ m.T)(s.normal((4, 4))))
        assert abs(frechet_distance(g1, g2) - frechet_distance(g2, g1)) < 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            frechet_distance(GaussianStats(np.zeros(2), np.eye(2)),
                             GaussianStats(np.zeros(3), np.eye(3)))

    def test_mode_mismatch(self):
        with pytest.raises(ContractError):
            frechet_distance(GaussianStats(np.zeros(2), np.eye(2), "full"),
                             GaussianStats(np.zeros(2), np.eye(2), "diagonal"))


class TestFid:
    def test_self_fid_tiny(self):
        x = unit_rows(50, 8, seed=1)
        assert fid(EmbeddingSet(x), EmbeddingSet(x.copy())) <= 1e-6

    def test_mean_shift_law(self):
        x = Stream(2, "fid").normal((64, 8))
        v = np.full(8, 0.25)
        d = fid(EmbeddingSet(x), EmbeddingSet(x + v))
        assert abs(d - v @ v) < 1e-8

    def test_diagonal_fallback_when_small(self):
        # n < D forces diagonal mode and still returns a finite value
        x = Stream(3, "fid").normal((10, 32))
        y = Stream(4, "fid").normal((10, 32))
        assert np.isfinite(fid(EmbeddingSet(x), EmbeddingSet(y)))

    def test_matches_independent_formula_script(self):
        # independent recomputation: eigendecomposition-free scipy-style path
        x = Stream(5, "fid").normal((40, 6))
        y = Stream(6, "fid").normal((40, 6)) + 0.3
        got = fid(EmbeddingSet(x), EmbeddingSet(y))
        mu1, mu2 = x.mean(0), y.mean(0)
        c1 = np.cov(x, rowvar=False) + 1e-6 * np.eye(6)
        c2 = np.cov(y, rowvar=False) + 1e-6 * np.eye(6)
        vals, vecs = np.linalg.eigh(c1)
        s1h = (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T
        inner = s1h @ c2 @ s1h
        vals2, vecs2 = np.linalg.eigh((inner + inner.T) / 2)
        tr_cross = np.sqrt(np.clip(vals2, 0, None)).sum()
        expected = (mu1 - mu2) @ (mu1 - mu2) + np.trace(c1) + np.trace(c2) - 2 * tr_cross
        assert abs(got - expected) / max(1.0, expected) < 1e-8

    def test_insufficient(self):
        with pytest.raises(InsufficientSampleError):
            fid(EmbeddingSet(np.ones((1, 3))), EmbeddingSet(np.ones((5, 3))))


class TestReportMetrics:
    def test_fidelity_bounds_and_examples(self):
        assert fidelity([0.0, 0.0]) == 1000.0
        assert np.isclose(fidelity([999.0]), 1.0)
        assert round(fidelity([2776.78]), 2) == 0.36

    def test_fidelity_monotone_decreasing(self):
        vals = [fidelity([f]) for f in (0.0, 1.0, 10.0, 100.0, 1000.0)]
        assert vals == sorted(vals, reverse=True)

    def test_fidelity_empty_rejected(self):
        with pytest.raises(ContractError):
            fidelity([])

    def test_agreement_identical_sets(self):
        x = unit_rows(6, 4, seed=9)
        pids = ["p0"] * 3 + ["p1"] * 3
        a = EmbeddingSet(x, prompt_ids=pids)
        b = EmbeddingSet(x.copy(), prompt_ids=list(pids))
        assert np.isclose(agreement(a, b), 1.0)

    def test_agreement_orthogonal_and_antipodal(self):
        e1 = np.array([[1.0, 0.0]])
        e2 = np.array([[0.0, 1.0]])
        assert np.isclose(agreement(EmbeddingSet(e1, prompt_ids=["p"]),
                                    EmbeddingSet(e2, prompt_ids=["p"])), 0.0)
        assert np.isclose(agreement(EmbeddingSet(e1, prompt_ids=["p"]),
                                    EmbeddingSet(-e1, prompt_ids=["p"])), -1.0)

    def test_agreement_unmatched_pairs_rejected(self):
        a = EmbeddingSet(np.ones((2, 2)), prompt_ids=["p0", "p0"])
        b = EmbeddingSet(np.ones((2, 2)), prompt_ids=["p1", "p1"])
        with pytest.raises(ContractError):
            agreement(a, b)

    def test_diversity_identical_images_zero(self):
        e = np.tile(unit_rows(1, 8, seed=1), (5, 1))
        assert diversity(EmbeddingSet(e)) == 0.0

    def test_diversity_single_pair_closed_form(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.5, np.sqrt(1 - 0.25), 0.0])
        assert np.isclose(diversity(EmbeddingSet(np.stack([a, b]))), 0.5)

    def test_diversity_matches_double_loop_oracle(self):
        e = unit_rows(10, 16, seed=11)
        got = diversity(EmbeddingSet(e))
        total, count = 0.0, 0
        for i in range(10):
            for j in range(i + 1, 10):
                total += 1.0 - float(e[i] @ e[j])
                count += 1
        assert count == 45
        assert abs(got - total / 45) < 1e-12

    def test_diversity_bounds(self):
        e = unit_rows(12, 8, seed=12)
        assert 0.0 <= diversity(EmbeddingSet(e)) <= 2.0

    def test_fbd_equals_pooled_fid(self):
        x = Stream(13, "f").normal((40, 5))
        y = Stream(14, "f").normal((40, 5))
        assert fbd(EmbeddingSet(x), EmbeddingSet(y)) == fid(EmbeddingSet(x), EmbeddingSet(y))

    def test_fbd_self_zero(self):
        x = unit_rows(30, 6, seed=15)
        assert fbd(EmbeddingSet(x), EmbeddingSet(x.copy())) <= 1e-6


class TestAggregation:
    def test_constant_runs(self):
        mean, std = aggregate_runs([5.0, 5.0, 5.0])
        assert mean == 5.0 and std == 0.0

    def test_two_runs(self):
        mean, std = aggregate_runs([1.0, 3.0])
        assert mean == 2.0 and np.isclose(std, np.sqrt(2.0))

    def test_single_run_rejected(self):
        with pytest.raises(InsufficientSampleError):
            aggregate_runs([1.0])

    def test_format(self):
        assert format_mean_std(72.96, 4.05) == "72.96 ± 4.05"
        fids = [72.96 - 4.05, 72.96, 72.96 + 4.05, 72.96, 72.96]
        mean, _ = aggregate_runs(fids)
        assert format_mean_std(mean, 4.05).startswith("72.96")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=1e5), min_size=1, max_size=20))
def test_fidelity_in_range_property(fids):
    f = fidelity(fids)
    assert 0.0 < f <= 1000.0


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=2**32 - 1))
def test_diversity_bounds_property(n, seed):
    e = unit_rows(n, 6, seed=seed)
    assert 0.0 <= diversity(EmbeddingSet(e)) <= 2.0
