import numpy as np
import pytest

from mixproj.dynamics import DiscreteObsModel, likelihood
from mixproj.errors import DegenerateFamilyError, ValidationError
from mixproj.families import (
    BasisDensity,
    GaussianComponent,
    MixtureCoords,
    bayes_update_basis,
    extend_coords,
    gaussian_mixture_family,
    make_family,
    mixture_density,
    mixture_metric,
    posterior_weights,
    tangent_basis,
)
from mixproj.geometry import ParametricFamily, l2_distance, l2_metric
from mixproj.quad import QuadratureSpec, ScalarField, integrate, nodes_weights

SPEC = QuadratureSpec()


def gaussian_overlap(m1, v1, m2, v2):
    s = v1 + v2
    return np.exp(-0.5 * (m1 - m2) ** 2 / s) / np.sqrt(2.0 * np.pi * s)


def linear_obs(noise_var=1.0, times=(1.0,)):
    return DiscreteObsModel(
        h=lambda x: x,
        times=np.asarray(times),
        noise_var=noise_var,
        linear=(1.0, 0.0),
        h_dx=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        h_dxx=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    )


def two_gaussian_family(spec=SPEC):
    return gaussian_mixture_family([-1.0, 1.0], [1.0, 1.0], spec)


class TestCoords:
    def test_extend(self):
        np.testing.assert_allclose(extend_coords(np.array([0.2, 0.3])), [0.2, 0.3, 0.5])

    def test_extend_zero(self):
        out = extend_coords(np.zeros(3))
        np.testing.assert_allclose(out, [0.0, 0.0, 0.0, 1.0])
        assert out.sum() == 1.0

    def test_constraint_violations(self):
        with pytest.raises(ValidationError):
            extend_coords(np.array([0.5, 0.6]))
        with pytest.raises(ValidationError, match="0"):
            MixtureCoords(np.array([-0.1, 0.3]))

    def test_interior_margin(self):
        MixtureCoords(np.array([0.5])).require_interior()
        with pytest.raises(ValidationError):
            MixtureCoords(np.array([0.0, 0.5])).require_interior()


class TestMixtureDensity:
    def test_near_vertex_matches_component(self):
        fam = two_gaussian_family()
        p = mixture_density(fam, np.array([1.0 - 1e-12]))
        q1 = fam.components[0].field()
        x = np.linspace(-4, 4, 101)
        np.testing.assert_allclose(p(x), q1(x), atol=1e-12)

    def test_midpoint_average(self):
        fam = two_gaussian_family()
        p = mixture_density(fam, np.array([0.5]))
        x = np.linspace(-3, 3, 51)
        q1, q2 = (c.field() for c in fam.components)
        np.testing.assert_allclose(p(x), 0.5 * q1(x) + 0.5 * q2(x), rtol=1e-14)

    def test_normalization(self):
        fam = gaussian_mixture_family([-1.0, 0.5, 2.0], [0.8, 1.0, 1.2], SPEC)
        rng = np.random.default_rng(3)
        t = rng.dirichlet(np.ones(3))[:2] * 0.9
        assert integrate(mixture_density(fam, t), SPEC) == pytest.approx(1.0, abs=1e-6)

    def test_dimension_mismatch(self):
        fam = two_gaussian_family()
        with pytest.raises(ValidationError):
            mixture_density(fam, np.array([0.2, 0.3]))


class TestTangentBasis:
    def test_zero_mass(self):
        fam = gaussian_mixture_family([-1.0, 0.0, 1.0], [1.0, 0.7, 1.3], SPEC)
        for u in tangent_basis(fam):
            assert integrate(u, SPEC) == pytest.approx(0.0, abs=1e-8)

    def test_gram_equals_metric(self):
        fam = gaussian_mixture_family([-1.0, 0.0, 1.0], [1.0, 0.7, 1.3], SPEC)
        x, w = nodes_weights(SPEC, fam.hint)
        u = np.stack([f(x) for f in tangent_basis(fam)])
        gram = (u * w) @ u.T
        np.testing.assert_allclose(gram, fam.metric.values, atol=1e-10)

    def test_symmetry_zero_crossing(self):
        fam = two_gaussian_family()
        u1 = tangent_basis(fam)[0]
        assert u1(np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-15)


class TestMixtureMetric:
    def test_duplicate_component_degenerate(self):
        comps = [
            BasisDensity(GaussianComponent(0.0, 1.0)),
            BasisDensity(GaussianComponent(0.0, 1.0)),
            BasisDensity(GaussianComponent(1.0, 1.0)),
        ]
        with pytest.raises(DegenerateFamilyError):
            mixture_metric(comps, SPEC)

    def test_closed_form_overlaps(self):
        fam = gaussian_mixture_family([0.0, 0.0], [1.0, 4.0], SPEC)
        h11 = (
            gaussian_overlap(0, 1, 0, 1)
            + gaussian_overlap(0, 4, 0, 4)
            - 2 * gaussian_overlap(0, 1, 0, 4)
        )
        assert fam.metric.values[0, 0] == pytest.approx(h11, rel=1e-9)

    def test_theta_independence_via_parametric_family(self):
        fam = two_gaussian_family()

        def density(x, theta):
            return mixture_density(fam, theta)(x)

        pf = ParametricFamily(
            dim=1,
            density=density,
            hint=lambda theta: fam.hint,
            dtheta=lambda x, theta, i: tangent_basis(fam)[i](x),
        )
        h1 = l2_metric(pf, np.array([0.1]), SPEC).values
        h2 = l2_metric(pf, np.array([0.7]), SPEC).values
        np.testing.assert_allclose(h1, h2, rtol=1e-12)
        np.testing.assert_allclose(h1, fam.metric.values, atol=1e-8)


class TestBayesUpdate:
    def test_constant_likelihood_identity(self):
        fam = two_gaussian_family()
        obs = DiscreteObsModel(h=lambda x: np.zeros_like(x), times=[1.0], linear=(0.0, 0.0))
        new_fam, c = bayes_update_basis(fam, likelihood(0.0, obs))
        np.testing.assert_allclose(c, np.ones(2))
        assert new_fam.components == fam.components
        assert new_fam.generation == fam.generation + 1

    def test_conjugate_update_closed_form(self):
        fam = gaussian_mixture_family([0.0, 3.0], [1.0, 1.0], SPEC)
        psi = likelihood(1.0, linear_obs())
        new_fam, c = bayes_update_basis(fam, psi)
        g = new_fam.components[0].gaussian
        assert g == pytest.approx((0.5, 0.5))
        # int Psi q = sqrt(2 pi r) N(z; m, v + r): direct closed form
        expected_c0 = 1.0 / (np.sqrt(2.0 * np.pi) * gaussian_overlap(1.0, 1.0, 0.0, 1.0))
        mass = np.sqrt(2.0 * np.pi) * np.exp(-0.5 * 1.0 / 2.0) / np.sqrt(2.0 * np.pi * 2.0)
        assert c[0] == pytest.approx(1.0 / mass, rel=1e-12)
        assert expected_c0 == pytest.approx(c[0], rel=1e-12)

    def test_component_normalization_after_update(self):
        fam = gaussian_mixture_family([-1.0, 1.0], [0.8, 1.2], SPEC)
        new_fam, _ = bayes_update_basis(fam, likelihood(0.4, linear_obs()))
        for comp in new_fam.components:
            assert integrate(comp.field(), SPEC) == pytest.approx(1.0, abs=1e-6)

    def test_conjugate_and_generic_paths_agree(self):
        fam = gaussian_mixture_family([-1.0, 1.0], [1.0, 1.0], SPEC)
        z, r = 0.7, 1.3
        conj_fam, c_conj = bayes_update_basis(fam, likelihood(z, linear_obs(noise_var=r)))
        generic_obs = DiscreteObsModel(
            h=lambda x: x,
            times=[1.0],
            noise_var=r,
            h_dx=lambda x: np.ones_like(np.asarray(x, dtype=float)),
            h_dxx=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        )
        gen_fam, c_gen = bayes_update_basis(fam, likelihood(z, generic_obs))
        np.testing.assert_allclose(c_gen, c_conj, rtol=1e-8)
        for bc, bg in zip(conj_fam.components, gen_fam.components):
            mc, vc = bc.moments(SPEC)
            mg, vg = bg.moments(SPEC)
            assert mg == pytest.approx(mc, abs=1e-8)
            assert vg == pytest.approx(vc, abs=1e-8)
        np.testing.assert_allclose(gen_fam.metric.values, conj_fam.metric.values, rtol=1e-6)

    def test_updated_metric_matches_closed_form(self):
        fam = gaussian_mixture_family([-1.0, 1.0], [1.0, 1.0], SPEC)
        new_fam, _ = bayes_update_basis(fam, likelihood(0.0, linear_obs()))
        (m1, v1), (m2, v2) = (c.gaussian for c in new_fam.components)
        h11 = (
            gaussian_overlap(m1, v1, m1, v1)
            + gaussian_overlap(m2, v2, m2, v2)
            - 2 * gaussian_overlap(m1, v1, m2, v2)
        )
        assert new_fam.metric.values[0, 0] == pytest.approx(h11, rel=1e-8)


class TestPosteriorWeights:
    def test_uniform_constants_cancel(self):
        theta = posterior_weights(np.array([0.3, 0.2, 0.5]), np.full(3, 4.2))
        np.testing.assert_allclose(theta.theta, [0.3, 0.2], atol=1e-15)

    def test_stated_arithmetic(self):
        theta = posterior_weights(np.array([0.5, 0.5]), np.array([2.0, 1.0]))
        np.testing.assert_allclose(extend_coords(theta), [1.0 / 3.0, 2.0 / 3.0])

    def test_compat_flag_keeps_weights(self):
        theta = posterior_weights(np.array([0.5, 0.5]), np.array([2.0, 1.0]), reweight=False)
        np.testing.assert_allclose(theta.theta, [0.5])

    def test_correction_exactness(self):
        # reconstructed posterior equals the pointwise Bayes product
        fam = gaussian_mixture_family([-1.0, 0.5, 2.0], [0.9, 1.1, 0.7], SPEC)
        theta_minus = np.array([0.3, 0.4])
        psi = likelihood(0.8, linear_obs(noise_var=0.7))
        new_fam, c = bayes_update_basis(fam, psi)
        theta_n = posterior_weights(extend_coords(theta_minus), c)
        posterior = mixture_density(new_fam, theta_n)

        prior = mixture_density(fam, theta_minus)
        x, w = nodes_weights(SPEC, fam.hint)
        bayes_vals = psi(x) * prior(x)
        bayes_vals = bayes_vals / np.dot(w, bayes_vals)
        oracle = ScalarField(fn=lambda xx: np.interp(xx, x, bayes_vals), hint=fam.hint)
        assert l2_distance(posterior, oracle, SPEC) <= 1e-9

    def test_exactness_invariant_random(self):
        rng = np.random.default_rng(11)
        fam = gaussian_mixture_family([-1.5, 0.0, 1.5], [1.0, 0.8, 1.2], SPEC)
        for _ in range(5):
            t = rng.dirichlet(np.ones(3)) * 0.95
            theta_minus = t[:2]
            z = rng.normal()
            psi = likelihood(z, linear_obs())
            new_fam, c = bayes_update_basis(fam, psi)
            theta_n = posterior_weights(extend_coords(theta_minus), c)
            posterior = mixture_density(new_fam, theta_n)
            prior = mixture_density(fam, theta_minus)
            x, w = nodes_weights(SPEC, fam.hint)
            bayes_vals = psi(x) * prior(x)
            bayes_vals = bayes_vals / np.dot(w, bayes_vals)
            resid = np.sqrt(np.dot(w, (posterior(x) - bayes_vals) ** 2))
            assert resid <= 1e-8
