import math
import warnings

import numpy as np
import pytest
from scipy.stats import multivariate_normal, spearmanr

from kpeflow.density import (
    FEATURE_NAMES,
    extract_features,
    kde_bandwidth,
    kde_density,
    knn_density,
    pca2,
    unit_ball_volume,
)
from kpeflow.errors import ValidationError
from kpeflow.fields import scaling_flow
from kpeflow.mixture import Component, LabeledMixtureSpec, mixture_logpdf, two_class_mixture
from kpeflow.sampler import sample_batch

F = {name: i for i, name in enumerate(FEATURE_NAMES)}


class TestFeatures:
    def test_names(self):
        assert len(FEATURE_NAMES) == 22 and len(set(FEATURE_NAMES)) == 22

    def test_constant_gray(self):
        f = extract_features(np.full((16, 16, 3), 0.5))
        assert f.shape == (22,)
        np.testing.assert_allclose(f[[F["mean_r"], F["mean_g"], F["mean_b"]]], 0.5)
        for name in ("std_r", "std_g", "std_b", "grad_mean", "grad_std", "edge_density", "lap_abs_mean", "lap_var", "hist_entropy"):
            assert f[F[name]] == pytest.approx(0.0, abs=1e-15), name

    def test_checkerboard(self):
        # 2-pixel squares: a 1-pixel checkerboard lies in the Sobel null space
        ij = np.add.outer(np.arange(16) // 2, np.arange(16) // 2) % 2
        img = np.repeat(ij[:, :, None], 3, axis=2).astype(float)
        f = extract_features(img)
        assert f[F["edge_density"]] > 0.5
        assert f[F["row_var_mean"]] == pytest.approx(f[F["col_var_mean"]], rel=1e-12)
        assert f[F["row_var_mean"]] == pytest.approx(0.25, rel=1e-12)
        assert f[F["hist_entropy"]] == pytest.approx(math.log(2), rel=1e-12)

    def test_noise_entropy_near_max(self):
        img = np.random.default_rng(0).random((64, 64, 3))
        f = extract_features(img)
        assert np.all(np.isfinite(f))
        # gray of three uniform channels is not uniform, so allow some slack below log(32)
        assert f[F["hist_entropy"]] > 0.8 * math.log(32)

    def test_step_edge_gradient(self):
        img = np.zeros((10, 10, 3))
        img[:, 5:] = 1.0
        f = extract_features(img)
        # Sobel/8 on a unit step: 0.5 on the two columns adjacent to the step
        assert f[F["grad_mean"]] == pytest.approx(2 * 10 * 0.5 / 100, rel=1e-12)
        assert f[F["edge_density"]] == pytest.approx(0.2)

    @pytest.mark.parametrize("shape", [(16, 16), (16, 16, 4), (4, 16, 3)])
    def test_bad_shapes(self, shape):
        with pytest.raises(ValidationError):
            extract_features(np.zeros(shape))


class TestPca:
    def test_two_d_data(self, rng):
        x = rng.standard_normal((200, 2)) @ np.array([[2.0, 0.3], [0.0, 0.5]])
        e = pca2(x)
        assert e.explained_variance == pytest.approx(1.0, abs=1e-12)
        z = (x - x.mean(0)) / x.std(0, ddof=1)
        # coordinates are an orthogonal rotation of the standardized input
        np.testing.assert_allclose(np.linalg.norm(e.coords, axis=1), np.linalg.norm(z, axis=1), rtol=1e-10)

    def test_rank_one(self, rng):
        base = rng.standard_normal(500)
        x = np.outer(base, [1.0, -2.0, 0.5, 3.0, 1.0]) + 1e-3 * rng.standard_normal((500, 5))
        assert pca2(x).explained_variance > 0.99

    def test_isotropic(self, rng):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            e = pca2(rng.standard_normal((2000, 5)))
        assert e.explained_variance == pytest.approx(0.4, abs=0.05)
        assert e.low_variance_warning

    def test_low_variance_warns(self, rng):
        with pytest.warns(UserWarning, match="explains only"):
            pca2(rng.standard_normal((100, 6)))

    def test_loadings_orthonormal_and_sorted(self, rng):
        x = rng.standard_normal((300, 7)) @ rng.standard_normal((7, 7))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            e = pca2(x)
        np.testing.assert_allclose(e.loadings @ e.loadings.T, np.eye(2), atol=1e-10)
        assert e.eigenvalues[0] >= e.eigenvalues[1]
        # matches an SVD of the standardized data up to sign
        z = (x - x.mean(0)) / x.std(0, ddof=1)
        _, s, vt = np.linalg.svd(z, full_matrices=False)
        np.testing.assert_allclose(np.abs(e.loadings), np.abs(vt[:2]), atol=1e-8)
        assert e.explained_variance == pytest.approx((s[:2] ** 2).sum() / (s**2).sum(), rel=1e-10)

    def test_constant_column_dropped(self, rng):
        x = np.column_stack([rng.standard_normal((50, 3)), np.full(50, 7.0)])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            e = pca2(x)
        assert any("constant" in str(w.message) for w in caught)
        assert e.kept_columns.tolist() == [0, 1, 2]

    def test_transform_matches_fit(self, rng):
        x = rng.standard_normal((80, 3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            e = pca2(x)
        np.testing.assert_allclose(e.transform(x), e.coords, atol=1e-12)

    def test_too_few_rows(self):
        with pytest.raises(ValidationError):
            pca2(np.zeros((2, 3)))


class TestKnn:
    def test_three_points(self):
        est = knn_density(np.array([[0.0], [1.0], [2.0]]), k=1)
        np.testing.assert_allclose(est.densities, 0.25)

    def test_uniform_grid(self):
        # On the 50x50 lattice (spacing h) the 8 nearest others are the 4 axis
        # neighbours at h and the 4 diagonal ones at sqrt(2) h, so interior
        # points get 8 / (2499 * pi * 2 h^2) ~= 1.274, not ~1: the k-th
        # distance sits on the outer edge of a completed shell.
        h = 1 / 50
        g = (np.arange(50) + 0.5) * h
        pts = np.array([(a, b) for a in g for b in g])
        interior = np.all((pts > 0.1) & (pts < 0.9), axis=1)
        est = knn_density(pts, k=8)
        np.testing.assert_allclose(est.densities[interior], 8 / (2499 * math.pi * 2 * h * h), rtol=1e-9)
        # k = 12 ends on the shell at 2h, which straddles the unit density
        est12 = knn_density(pts, k=12)
        assert np.all(np.abs(est12.densities[interior] - 1.0) < 0.2)

    def test_uniform_random_points(self):
        pts = np.random.default_rng(4).random((2500, 2))
        est = knn_density(pts, k=8)
        interior = np.all((pts > 0.1) & (pts < 0.9), axis=1)
        assert abs(np.median(est.densities[interior]) - 1.0) < 0.2

    def test_k_too_large(self):
        with pytest.raises(ValidationError):
            knn_density(np.zeros((5, 1)) + np.arange(5)[:, None], k=5)

    def test_duplicates_capped(self):
        pts = np.array([[0.0], [0.0], [1.0], [3.0]])
        with pytest.warns(UserWarning, match="capped"):
            est = knn_density(pts, k=1)
        assert est.capped.tolist() == [True, True, False, False]
        assert np.all(np.isfinite(est.log_densities))
        assert est.log_densities[0] == est.log_densities[~est.capped].max()

    def test_permutation_equivariant(self, rng):
        x = rng.standard_normal((200, 2))
        perm = rng.permutation(200)
        a = knn_density(x, 10).log_densities
        b = knn_density(x[perm], 10).log_densities
        np.testing.assert_array_equal(a[perm], b)

    def test_reference_mode(self, rng):
        ref = rng.standard_normal((300, 2))
        q = rng.standard_normal((20, 2))
        est = knn_density(q, 5, reference=ref)
        r = np.sort(np.linalg.norm(q[:, None] - ref[None], axis=2), axis=1)[:, 4]
        np.testing.assert_allclose(est.densities, 5 / (300 * math.pi * r**2), rtol=1e-12)

    def test_unit_ball(self):
        assert unit_ball_volume(1) == pytest.approx(2.0)
        assert unit_ball_volume(2) == pytest.approx(math.pi)
        assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)


class TestKde:
    def test_symmetric_pair(self):
        est = kde_density(np.array([[-1.3], [1.3]]))
        assert est.densities[0] == est.densities[1]

    def test_standard_normal_at_zero(self):
        ref = np.random.default_rng(0).standard_normal((5000, 1))
        est = kde_density(np.zeros((1, 1)), reference=ref)
        assert est.densities[0] == pytest.approx(1 / math.sqrt(2 * math.pi), rel=0.1)

    def test_integrates_to_one(self):
        ref = np.random.default_rng(0).standard_normal((5000, 1))
        grid = np.linspace(-7, 7, 2801)
        dens = kde_density(grid[:, None], reference=ref).densities
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=0.02)

    def test_direct_formula_with_self_term(self, rng):
        x = rng.standard_normal((60, 2))
        h = kde_bandwidth(x)
        np.testing.assert_allclose(h, x.std(0, ddof=1) * 60 ** (-1 / 6))
        direct = np.array([np.mean(np.prod(np.exp(-0.5 * ((p - x) / h) ** 2) / (h * math.sqrt(2 * math.pi)), axis=1)) for p in x])
        est = kde_density(x)
        np.testing.assert_allclose(est.densities, direct, rtol=1e-12)
        np.testing.assert_allclose(np.log(est.densities), est.log_densities, rtol=1e-12)

    def test_zero_variance(self):
        with pytest.raises(ValidationError):
            kde_density(np.column_stack([np.arange(5.0), np.zeros(5)]))

    def test_positive(self, rng):
        assert np.all(kde_density(rng.standard_normal((100, 2)) * 50).densities > 0)


class TestMixtureLogpdf:
    def test_standard_normal(self):
        spec = LabeledMixtureSpec((Component(0, 1.0, np.zeros(2), np.eye(2)),))
        assert mixture_logpdf(spec, np.zeros(2)) == pytest.approx(math.log(1 / (2 * math.pi)), rel=1e-14)

    def test_symmetric_point(self):
        spec = two_class_mixture(4.0, 1.0)
        lp = spec.component_logpdfs(np.zeros((1, 2)))[0]
        assert lp[0] == lp[1]
        assert mixture_logpdf(spec, np.zeros(2)) == pytest.approx(lp[0] + math.log(2), rel=1e-14)

    def test_direct_sum(self, rng):
        comps = []
        for w in (0.2, 0.3, 0.5):
            a = rng.standard_normal((3, 3))
            comps.append(Component(0, w, rng.standard_normal(3), a @ a.T + 0.5 * np.eye(3)))
        spec = LabeledMixtureSpec(tuple(comps))
        x = rng.standard_normal((10, 3))
        direct = sum(c.weight * multivariate_normal(c.mean, c.cov).pdf(x) for c in comps)
        np.testing.assert_allclose(np.exp(mixture_logpdf(spec, x)), direct, rtol=1e-12)

    @pytest.mark.parametrize(
        "comps",
        [
            (Component(0, 0.5, [0.0], [[1.0]]),),
            (Component(0, 1.0, [0.0], [[-1.0]]),),
            (Component(0, 1.0, [0.0, 0.0], [[1.0, 2.0], [0.0, 1.0]]),),
        ],
    )
    def test_invalid_spec(self, comps):
        with pytest.raises(ValidationError):
            LabeledMixtureSpec(comps)


def test_estimated_density_tracks_analytic_on_scaling_flow():
    f = scaling_flow(2, 2.0)
    x = np.array([t.final_state for t in sample_batch(f, 2000, 4, master_seed=0)])
    truth = f.target_logpdf(x)
    rho_knn = spearmanr(knn_density(x, 50).log_densities, truth)[0]
    rho_kde = spearmanr(kde_density(x).log_densities, truth)[0]
    assert rho_knn > 0.9 and rho_kde > 0.9
