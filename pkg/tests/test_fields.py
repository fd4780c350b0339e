import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpeflow.errors import ValidationError
from kpeflow.fields import (
    NULL_LABEL,
    ConstantField,
    GaussianMixtureField,
    GaussianOTField,
    GaussianOTParams,
    GuidanceConfig,
    cfg_mix,
    field_from_dict,
    gaussian_ot_velocity,
    scaling_flow,
)
from kpeflow.mixture import Component, LabeledMixtureSpec, mixture_logpdf, two_class_mixture
from kpeflow.sampler import integrate


def random_spd(rng, n, lo=0.5, hi=4.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(rng.uniform(lo, hi, n)) @ q.T


class TestConstant:
    def test_eval(self):
        f = ConstantField([1.0, 0.0])
        for t in (0.0, 0.3, 1.0):
            np.testing.assert_array_equal(f.eval(np.array([5.0, -2.0]), t), [1.0, 0.0])

    def test_rotation_invariant_energy(self, rng):
        c = np.array([3.0, -1.0, 2.0])
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        e1 = integrate(ConstantField(c), np.zeros(3), 7).kpe
        e2 = integrate(ConstantField(q @ c), np.zeros(3), 7).kpe
        assert e1 == pytest.approx(e2, rel=1e-12)
        assert e1 == pytest.approx(0.5 * c @ c, rel=1e-12)


class TestEvalContract:
    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            ConstantField([1.0, 0.0]).eval(np.zeros(3), 0.5)

    def test_nonfinite_state(self):
        with pytest.raises(ValidationError):
            ConstantField([1.0]).eval(np.array([np.nan]), 0.5)

    @pytest.mark.parametrize("t", [-0.1, 1.5])
    def test_time_range(self, t):
        with pytest.raises(ValidationError):
            ConstantField([1.0]).eval(np.zeros(1), t)

    def test_batch_and_single_agree(self, rng):
        f = GaussianOTField([1.0, -1.0], random_spd(rng, 2))
        x = rng.standard_normal((5, 2))
        batch = f.eval(x, 0.4)
        for i in range(5):
            np.testing.assert_array_equal(f.eval(x[i], 0.4), batch[i])


class TestGaussianOT:
    def test_scalar_examples(self):
        f = GaussianOTField([0.0], [[9.0]])
        assert f.eval(np.array([1.0]), 0.0)[0] == pytest.approx(2.0, abs=1e-14)
        # x0 = 1 sits at x = 2 when t = 0.5
        assert f.eval(np.array([2.0]), 0.5)[0] == pytest.approx(2.0, abs=1e-14)

    def test_scalar_example_by_finite_differences(self):
        p = GaussianOTParams.from_target([0.0], [[9.0]])
        h = 1e-6
        fd = (p.characteristic(np.array([1.0]), 0.5 + h) - p.characteristic(np.array([1.0]), 0.5 - h)) / (2 * h)
        assert fd[0] == pytest.approx(2.0, abs=1e-8)

    def test_translation(self):
        m = np.array([0.5, -2.0, 1.0])
        f = GaussianOTField(m, np.eye(3))
        x = np.random.default_rng(1).standard_normal((10, 3))
        np.testing.assert_allclose(f.eval(x, 0.7), np.tile(m, (10, 1)), atol=1e-14)

    def test_time_zero_formula(self, rng):
        sigma = random_spd(rng, 4)
        mu = rng.standard_normal(4)
        p = GaussianOTParams.from_target(mu, sigma)
        x = rng.standard_normal((6, 4))
        np.testing.assert_allclose(gaussian_ot_velocity(p, x, 0.0), mu + x @ (p.a - np.eye(4)).T, atol=1e-12)

    def test_matches_direct_matrix_formula(self, rng):
        sigma = random_spd(rng, 5)
        mu = rng.standard_normal(5)
        p = GaussianOTParams.from_target(mu, sigma)
        x = rng.standard_normal((8, 5))
        for t in (0.0, 0.2, 0.9, 1.0):
            m_t = (1 - t) * np.eye(5) + t * p.a
            direct = mu + np.linalg.solve(m_t, (x - t * mu).T).T @ (p.a - np.eye(5)).T
            np.testing.assert_allclose(gaussian_ot_velocity(p, x, t), direct, atol=1e-11)

    def test_lagrangian_consistency(self):
        f = GaussianOTField([1.0, 0.0], np.diag([4.0, 1.0]))
        p = f.params
        x0 = np.random.default_rng(3).standard_normal((500, 2))
        lagrangian = p.transport(x0) - x0
        for k in range(11):
            t = k / 10
            np.testing.assert_allclose(f.eval(p.characteristic(x0, t), t), lagrangian, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_constant_along_characteristics(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 6))
        f = GaussianOTField(rng.standard_normal(d), random_spd(rng, d, 0.1, 10.0))
        x0 = rng.standard_normal(d)
        v0 = f.eval(x0, 0.0)
        for t in (0.25, 0.5, 0.75, 1.0):
            np.testing.assert_allclose(f.eval(f.params.characteristic(x0, t), t), v0, rtol=1e-9, atol=1e-9)

    def test_expected_kpe_monte_carlo(self, rng):
        sigma = random_spd(rng, 3)
        mu = np.array([1.0, 0.0, -1.0])
        p = GaussianOTParams.from_target(mu, sigma)
        x0 = rng.standard_normal((4096, 3))
        v = p.transport(x0) - x0
        mc = 0.5 * np.mean(np.sum(v * v, axis=1))
        assert mc == pytest.approx(p.expected_kpe(), rel=0.03)

    def test_w2_matches_trace_form(self, rng):
        sigma = random_spd(rng, 4)
        mu = rng.standard_normal(4)
        p = GaussianOTParams.from_target(mu, sigma)
        a_minus = p.a - np.eye(4)
        assert p.w2_squared() == pytest.approx(mu @ mu + np.trace(a_minus @ a_minus), rel=1e-12)

    def test_target_logpdf(self, rng):
        from scipy.stats import multivariate_normal

        sigma = random_spd(rng, 3)
        mu = rng.standard_normal(3)
        x = rng.standard_normal((7, 3))
        np.testing.assert_allclose(GaussianOTField(mu, sigma).target_logpdf(x), multivariate_normal(mu, sigma).logpdf(x), rtol=1e-12)

    def test_scaling_flow_formula(self, rng):
        f = scaling_flow(2, 2.0)
        x = rng.standard_normal((5, 2))
        for t in (0.0, 0.5, 1.0):
            np.testing.assert_allclose(f.eval(x, t), x / (1.0 + t), atol=1e-14)

    def test_rejects_non_spd(self):
        with pytest.raises(ValidationError):
            GaussianOTField([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])


def mixture_marginal_logpdf(spec, x, t, label=None):
    """log p_t(x) for the straight interpolant from N(0, I) to ``spec``, optionally one class."""
    d = spec.dim
    comps = [c for c in spec.components if label is None or c.label == label]
    total = sum(c.weight for c in comps)
    shifted = LabeledMixtureSpec(
        tuple(Component(c.label, c.weight / total, t * c.mean, (1 - t) ** 2 * np.eye(d) + t**2 * c.cov) for c in comps)
    )
    return mixture_logpdf(shifted, x)


def continuity_residual(field, spec, x, t, label=None, h=1e-5):
    """|d_t p + div(p v)| / |d_t p| by central differences."""
    lab = None if label is None else np.array([label])

    def p(y, s):
        return math.exp(mixture_marginal_logpdf(spec, y, s, label))

    def flux(y, s):
        return p(y, s) * field.eval(y[None, :], s, lab)[0]

    dpdt = (p(x, t + h) - p(x, t - h)) / (2 * h)
    div = 0.0
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        div += (flux(x + e, t)[j] - flux(x - e, t)[j]) / (2 * h)
    return abs(dpdt + div) / max(abs(dpdt), 1e-12)


class TestGaussianMixtureField:
    @pytest.fixture
    def spec(self):
        rng = np.random.default_rng(8)
        comps = [
            Component(0, 0.3, rng.standard_normal(2), random_spd(rng, 2, 0.2, 1.5)),
            Component(0, 0.2, rng.standard_normal(2) + 2, random_spd(rng, 2, 0.2, 1.5)),
            Component(1, 0.5, rng.standard_normal(2) - 2, random_spd(rng, 2, 0.2, 1.5)),
        ]
        return LabeledMixtureSpec(tuple(comps))

    @pytest.mark.parametrize("label", [None, 0, 1])
    def test_continuity_equation(self, spec, label):
        f = GaussianMixtureField(spec)
        rng = np.random.default_rng(0)
        for t in (0.2, 0.5, 0.8):
            for _ in range(4):
                x = rng.standard_normal(2) * 1.5
                assert continuity_residual(f, spec, x, t, label) < 1e-5

    def test_single_isotropic_component_matches_ot(self, rng):
        # For a target N(mu, s^2 I) the straight interpolant with independent
        # pairs has the same Gaussian marginals only at t = 0; check t = 0 formula.
        mu = np.array([1.0, 2.0])
        spec = LabeledMixtureSpec((Component(0, 1.0, mu, 4.0 * np.eye(2)),))
        x = rng.standard_normal((5, 2))
        np.testing.assert_allclose(GaussianMixtureField(spec).eval(x, 0.0), mu - x, atol=1e-12)

    def test_null_label_is_unconditional(self, spec, rng):
        f = GaussianMixtureField(spec)
        x = rng.standard_normal((6, 2))
        np.testing.assert_array_equal(f.eval(x, 0.3, NULL_LABEL), f.eval(x, 0.3))

    def test_unknown_label(self, spec):
        with pytest.raises(ValidationError):
            GaussianMixtureField(spec).eval(np.zeros(2), 0.5, 7)

    def test_endpoint_time_one_is_finite(self, spec, rng):
        v = GaussianMixtureField(spec).eval(rng.standard_normal((4, 2)), 1.0)
        assert np.all(np.isfinite(v))

    def test_roundtrip(self, spec, rng):
        f = GaussianMixtureField(spec)
        g = field_from_dict(f.to_dict())
        x = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(f.eval(x, 0.6, 1), g.eval(x, 0.6, 1))


class TestGuidance:
    def test_endpoints_exact(self, rng):
        vu, vc = rng.standard_normal(5), rng.standard_normal(5)
        assert np.array_equal(cfg_mix(vu, vc, 0.0), vu)
        assert np.array_equal(cfg_mix(vu, vc, 1.0), vc)

    def test_linear(self):
        assert cfg_mix(np.array([0.0]), np.array([1.0]), 4.0)[0] == 4.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 10), st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.lists(st.floats(-100, 100), min_size=3, max_size=3))
    def test_matches_textbook_form(self, w, a, b):
        vu, vc = np.array(a), np.array(b)
        np.testing.assert_allclose(cfg_mix(vu, vc, w), vu + w * (vc - vu), atol=1e-9 * (1 + w) * 100)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            cfg_mix(np.zeros(2), np.zeros(3), 1.0)

    @pytest.mark.parametrize("w", [-0.5, float("nan"), float("inf")])
    def test_config_rejects_bad_scale(self, w):
        with pytest.raises(ValidationError):
            GuidanceConfig(w, 0)

    def test_guided_sampling_scale_one_is_conditional(self):
        f = GaussianMixtureField(two_class_mixture(4.0, 1.0))
        x0 = np.array([0.3, -0.2])
        guided = integrate(f, x0, 20, guidance=GuidanceConfig(1.0, 1), label=1)
        plain = integrate(f, x0, 20, label=1)
        assert np.array_equal(guided.states, plain.states)
        assert guided.kpe == plain.kpe


def test_field_from_dict_roundtrips(rng):
    for f in (ConstantField([1.0, 2.0]), GaussianOTField([1.0, 0.0], random_spd(rng, 2))):
        g = field_from_dict(f.to_dict())
        x = rng.standard_normal((4, f.dim))
        np.testing.assert_array_equal(f.eval(x, 0.5), g.eval(x, 0.5))


def test_field_from_dict_rejects_unknown():
    with pytest.raises(ValidationError):
        field_from_dict({"kind": "nope"})
