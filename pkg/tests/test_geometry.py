import numpy as np
import pytest

from mixproj.errors import DegenerateFamilyError, DomainError, ValidationError
from mixproj.geometry import (
    MetricMatrix,
    canonical_from_moment,
    canonical_moment_jacobian,
    change_coordinates_metric,
    fisher_metric,
    gaussian_family_canonical,
    gaussian_family_expectation,
    gaussian_fisher_canonical,
    gaussian_fisher_expectation,
    gaussian_l2_canonical,
    gaussian_l2_expectation,
    gaussian_l2_expectation_alt11,
    hellinger_distance,
    kl_divergence,
    kl_quadratic_remainder,
    l2_distance,
    l2_metric,
    moment_from_canonical,
    project_fisher,
    project_l2,
)
from mixproj.quad import QuadratureSpec, ScalarField, gaussian_field, inner_product, nodes_weights

SPEC = QuadratureSpec()


def gaussian_overlap(m1, v1, m2, v2):
    s = v1 + v2
    return np.exp(-0.5 * (m1 - m2) ** 2 / s) / np.sqrt(2.0 * np.pi * s)


def gaussian_kl(m1, v1, m2, v2):
    return 0.5 * (v1 / v2 + (m2 - m1) ** 2 / v2 - 1.0 + np.log(v2 / v1))


class TestDistances:
    def test_hellinger_identity(self):
        g = gaussian_field(0.0, 1.0)
        assert hellinger_distance(g, g, SPEC) == pytest.approx(0.0, abs=1e-12)

    def test_hellinger_closed_form(self):
        # equal-variance Gaussians: ||sqrt p - sqrt q||^2 = 2 - 2 exp(-mu^2/8)
        mu = 2.0
        p, q = gaussian_field(0.0, 1.0), gaussian_field(mu, 1.0)
        expected = np.sqrt(2.0 - 2.0 * np.exp(-mu * mu / 8.0))
        assert hellinger_distance(p, q, SPEC) == pytest.approx(expected, rel=1e-9)

    def test_hellinger_symmetry_exact(self):
        p, q = gaussian_field(-0.5, 0.7), gaussian_field(1.0, 2.0)
        assert hellinger_distance(p, q, SPEC) == hellinger_distance(q, p, SPEC)

    def test_hellinger_rejects_negative(self):
        g = gaussian_field(0.0, 1.0)
        neg = ScalarField(fn=lambda x: g(x) - 0.2, hint=g.hint)
        with pytest.raises(DomainError):
            hellinger_distance(neg, g, SPEC)

    def test_hellinger_squared_identity(self):
        # d_H^2 = 2 - 2 <sqrt p, sqrt q> for normalized densities
        p, q = gaussian_field(0.3, 1.2), gaussian_field(-0.8, 0.6)
        sp = ScalarField(fn=lambda x: np.sqrt(p(x)), hint=p.hint)
        sq = ScalarField(fn=lambda x: np.sqrt(q(x)), hint=q.hint)
        d2 = hellinger_distance(p, q, SPEC) ** 2
        assert d2 == pytest.approx(2.0 - 2.0 * inner_product(sp, sq, SPEC), abs=1e-9)

    def test_l2_identity(self):
        g = gaussian_field(0.0, 1.0)
        assert l2_distance(g, g, SPEC) == 0.0

    def test_l2_overlap_algebra(self):
        p, q = gaussian_field(0.0, 1.0), gaussian_field(0.0, 4.0)
        d2 = (
            gaussian_overlap(0.0, 1.0, 0.0, 1.0)
            + gaussian_overlap(0.0, 4.0, 0.0, 4.0)
            - 2.0 * gaussian_overlap(0.0, 1.0, 0.0, 4.0)
        )
        assert l2_distance(p, q, SPEC) == pytest.approx(np.sqrt(d2), rel=1e-9)

    def test_triangle_inequalities(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            m = rng.uniform(-2, 2, size=3)
            v = rng.uniform(0.3, 3.0, size=3)
            p, q, r = (gaussian_field(mi, vi) for mi, vi in zip(m, v))
            for dist in (hellinger_distance, l2_distance):
                dpq, dqr, dpr = dist(p, q, SPEC), dist(q, r, SPEC), dist(p, r, SPEC)
                assert dpr <= dpq + dqr + 1e-8
                assert dist(p, q, SPEC) == dist(q, p, SPEC)


class TestKL:
    def test_identity(self):
        g = gaussian_field(0.0, 1.0)
        assert kl_divergence(g, g, SPEC) == pytest.approx(0.0, abs=1e-12)

    def test_mean_shift(self):
        p, q = gaussian_field(0.0, 1.0), gaussian_field(1.0, 1.0)
        assert kl_divergence(p, q, SPEC) == pytest.approx(0.5, abs=1e-8)

    def test_asymmetry(self):
        p, q = gaussian_field(0.0, 1.0), gaussian_field(0.0, 4.0)
        a, b = kl_divergence(p, q, SPEC), kl_divergence(q, p, SPEC)
        assert a == pytest.approx(gaussian_kl(0, 1, 0, 4), abs=1e-8)
        assert b == pytest.approx(gaussian_kl(0, 4, 0, 1), abs=1e-8)
        assert abs(a - b) > 0.1

    def test_nonnegative(self):
        p, q = gaussian_field(0.4, 0.8), gaussian_field(-0.3, 1.7)
        assert kl_divergence(p, q, SPEC) >= -1e-9


class TestMetrics:
    def test_fisher_canonical_closed_form(self):
        g = gaussian_fisher_canonical((0.0, -0.5))
        np.testing.assert_allclose(g.values, [[1.0, 0.0], [0.0, 2.0]], atol=1e-14)

    def test_fisher_expectation_closed_form(self):
        g = gaussian_fisher_expectation(0.0, 1.0)
        np.testing.assert_allclose(g.values, [[1.0, 0.0], [0.0, 0.5]], atol=1e-14)

    def test_l2_canonical_closed_form(self):
        h = gaussian_l2_canonical((0.0, -0.5))
        expected = np.array([[1.0, 0.0], [0.0, 1.5]]) / (4.0 * np.sqrt(np.pi))
        np.testing.assert_allclose(h.values, expected, rtol=1e-14)

    def test_l2_expectation_entries(self):
        h = gaussian_l2_expectation(0.0, 1.0)
        assert h.values[1, 1] == pytest.approx(3.0 / (32.0 * np.sqrt(np.pi)), rel=1e-14)
        assert h.values[0, 0] == pytest.approx(1.0 / (4.0 * np.sqrt(np.pi)), rel=1e-14)

    def test_quadrature_matches_closed_forms(self):
        fam_c = gaussian_family_canonical()
        fam_e = gaussian_family_expectation()
        for t1 in (-1.0, 0.0, 1.0):
            for t2 in (-1.0, -0.5):
                theta = np.array([t1, t2])
                gq = fisher_metric(fam_c, theta, SPEC).values
                np.testing.assert_allclose(gq, gaussian_fisher_canonical(theta).values, rtol=1e-6, atol=1e-10)
                hq = l2_metric(fam_c, theta, SPEC).values
                np.testing.assert_allclose(hq, gaussian_l2_canonical(theta).values, rtol=1e-6, atol=1e-10)
                mu, v = moment_from_canonical(theta)
                ge = fisher_metric(fam_e, np.array([mu, v]), SPEC).values
                np.testing.assert_allclose(ge, gaussian_fisher_expectation(mu, v).values, rtol=1e-6, atol=1e-10)
                he = l2_metric(fam_e, np.array([mu, v]), SPEC).values
                np.testing.assert_allclose(he, gaussian_l2_expectation(mu, v).values, rtol=1e-6, atol=1e-10)

    def test_fisher_equals_four_times_hellinger_gram(self):
        # Gram of (1/(2 sqrt p)) dp/dtheta_i equals g/4
        fam = gaussian_family_expectation()
        theta = np.array([0.4, 1.3])
        x, w = nodes_weights(SPEC, fam.hint(theta))
        p = fam.density(x, theta)
        basis = fam.tangent_values(x, theta) / (2.0 * np.sqrt(p))
        gram = (basis * w) @ basis.T
        g = fisher_metric(fam, theta, SPEC).values
        np.testing.assert_allclose(4.0 * gram, g, rtol=1e-8, atol=1e-12)

    def test_alt11_discrepancy_is_factor_two(self):
        h = gaussian_l2_expectation(0.0, 1.0)
        alt = gaussian_l2_expectation_alt11(0.0, 1.0)
        assert h.values[0, 0] == pytest.approx(2.0 * alt, rel=1e-14)
        # quadrature sides with the corrected entry, not the alternative
        fam = gaussian_family_expectation()
        hq = l2_metric(fam, np.array([0.0, 1.0]), SPEC).values
        assert hq[0, 0] == pytest.approx(h.values[0, 0], rel=1e-6)
        assert abs(hq[0, 0] - alt) > 0.4 * alt

    def test_domain_validation(self):
        with pytest.raises(ValidationError):
            gaussian_fisher_canonical((0.0, 0.5))
        with pytest.raises(ValidationError):
            gaussian_l2_expectation(0.0, -1.0)

    def test_metric_matrix_rejects_indefinite(self):
        with pytest.raises(DegenerateFamilyError):
            MetricMatrix(np.array([[1.0, 0.0], [0.0, -1.0]]))
        with pytest.raises(ValidationError):
            MetricMatrix(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestCoordinateChange:
    def test_identity_jacobian(self):
        g = gaussian_fisher_canonical((0.3, -0.8))
        out = change_coordinates_metric(g, np.eye(2))
        np.testing.assert_allclose(out.values, g.values, rtol=1e-15)

    def test_fisher_canonical_to_expectation(self):
        mu, v = 0.0, 1.0
        theta = canonical_from_moment(mu, v)
        j = canonical_moment_jacobian(mu, v)
        out = change_coordinates_metric(gaussian_fisher_canonical(theta), j)
        np.testing.assert_allclose(out.values, gaussian_fisher_expectation(mu, v).values, rtol=1e-12)

    def test_l2_canonical_to_expectation(self):
        mu, v = 0.0, 1.0
        theta = canonical_from_moment(mu, v)
        j = canonical_moment_jacobian(mu, v)
        out = change_coordinates_metric(gaussian_l2_canonical(theta), j)
        expected = np.diag([1.0 / (4.0 * np.sqrt(np.pi)), 3.0 / (32.0 * np.sqrt(np.pi))])
        np.testing.assert_allclose(out.values, expected, rtol=1e-12)
        np.testing.assert_allclose(out.values, gaussian_l2_expectation(mu, v).values, rtol=1e-12)

    def test_covariance_at_generic_points(self):
        fam_c = gaussian_family_canonical()
        fam_e = gaussian_family_expectation()
        for mu, v in [(-1.0, 0.7), (0.5, 2.0), (1.5, 1.2)]:
            theta = canonical_from_moment(mu, v)
            j = canonical_moment_jacobian(mu, v)
            direct = fisher_metric(fam_e, np.array([mu, v]), SPEC).values
            moved = change_coordinates_metric(fisher_metric(fam_c, theta, SPEC), j).values
            np.testing.assert_allclose(moved, direct, rtol=1e-6, atol=1e-10)

    def test_singular_jacobian(self):
        g = gaussian_fisher_canonical((0.0, -0.5))
        with pytest.raises(ValidationError):
            change_coordinates_metric(g, np.array([[1.0, 0.0], [2.0, 0.0]]))


def brute_force_l2_coeffs(v, fam, theta, spec):
    """Independent check: weighted least squares on the quadrature nodes."""
    from mixproj.quad import envelope_hint

    hint = envelope_hint([v.hint, fam.hint(theta)])
    x, w = nodes_weights(spec, hint)
    design = (fam.tangent_values(x, theta) * np.sqrt(w)).T
    target = v(x) * np.sqrt(w)
    coeffs, *_ = np.linalg.lstsq(design, target, rcond=None)
    return coeffs


class TestProjections:
    def setup_method(self):
        self.fam = gaussian_family_expectation()
        self.theta = np.array([0.2, 1.1])

    def field_from_coeffs(self, coeffs):
        fam, theta = self.fam, self.theta
        return ScalarField(
            fn=lambda x: sum(c * fam.dtheta_values(x, theta, i) for i, c in enumerate(coeffs)),
            hint=fam.hint(theta),
        )

    def test_basis_vector(self):
        v = self.field_from_coeffs([1.0, 0.0])
        np.testing.assert_allclose(project_l2(v, self.fam, self.theta, SPEC), [1.0, 0.0], atol=1e-10)

    def test_tangent_reproduced(self):
        v = self.field_from_coeffs([0.7, -0.4])
        c = project_l2(v, self.fam, self.theta, SPEC)
        np.testing.assert_allclose(c, [0.7, -0.4], atol=1e-8)

    def test_matches_brute_force(self):
        bump = gaussian_field(1.4, 0.3)
        c = project_l2(bump, self.fam, self.theta, SPEC)
        expected = brute_force_l2_coeffs(bump, self.fam, self.theta, SPEC)
        np.testing.assert_allclose(c, expected, rtol=1e-8, atol=1e-12)

    def test_orthogonality_and_pythagoras(self):
        bump = gaussian_field(-1.0, 0.4)
        c = project_l2(bump, self.fam, self.theta, SPEC)
        from mixproj.quad import envelope_hint

        hint = envelope_hint([bump.hint, self.fam.hint(self.theta)])
        x, w = nodes_weights(SPEC, hint)
        d = self.fam.tangent_values(x, self.theta)
        vv = bump(x)
        resid = vv - c @ d
        vnorm = np.sqrt(np.dot(w, vv * vv))
        for j in range(self.fam.dim):
            assert abs(np.dot(w, resid * d[j])) <= 1e-8 * vnorm
        proj_sq = np.dot(w, (c @ d) ** 2)
        resid_sq = np.dot(w, resid * resid)
        assert vnorm ** 2 == pytest.approx(proj_sq + resid_sq, rel=1e-8)

    def test_idempotence(self):
        bump = gaussian_field(0.9, 0.5)
        c1 = project_l2(bump, self.fam, self.theta, SPEC)
        c2 = project_l2(self.field_from_coeffs(c1), self.fam, self.theta, SPEC)
        np.testing.assert_allclose(c2, c1, atol=1e-10)

    def test_fisher_projection_basis_vector(self):
        fam, theta = self.fam, self.theta
        x_probe = np.array([0.0])

        def sqrt_basis(i):
            return ScalarField(
                fn=lambda x: fam.dtheta_values(x, theta, i) / (2.0 * np.sqrt(fam.density(x, theta))),
                hint=fam.hint(theta),
            )

        v = sqrt_basis(1)
        c = project_fisher(v, fam, theta, SPEC)
        np.testing.assert_allclose(c, [0.0, 1.0], atol=1e-8)
        assert np.isfinite(v(x_probe)).all()

    def test_fisher_projection_matches_normal_equations(self):
        fam, theta = self.fam, self.theta
        bump = gaussian_field(0.8, 0.6)
        c = project_fisher(bump, fam, theta, SPEC)
        from mixproj.quad import envelope_hint

        hint = envelope_hint([bump.hint, fam.hint(theta)])
        x, w = nodes_weights(SPEC, hint)
        p = fam.density(x, theta)
        basis = (fam.tangent_values(x, theta) / (2.0 * np.sqrt(p)) * np.sqrt(w)).T
        target = bump(x) * np.sqrt(w)
        expected, *_ = np.linalg.lstsq(basis, target, rcond=None)
        np.testing.assert_allclose(c, expected, rtol=1e-8, atol=1e-12)


class TestKLRemainder:
    def test_zero_displacement(self):
        fam = gaussian_family_expectation()
        r = kl_quadratic_remainder(fam, np.array([0.0, 1.0]), np.zeros(2), SPEC)
        assert r == pytest.approx(0.0, abs=1e-10)

    def test_half_convention_ratio(self):
        # mean shift: K = eps^2/2 exactly, g_11 = 1 at (0,1)
        fam = gaussian_family_expectation()
        theta = np.array([0.0, 1.0])
        for eps in (0.1, 0.05):
            p, q = gaussian_field(0.0, 1.0), gaussian_field(eps, 1.0)
            k = kl_divergence(p, q, SPEC)
            assert k / (0.5 * eps * eps) == pytest.approx(1.0, rel=1e-6)
            r = kl_quadratic_remainder(fam, theta, np.array([eps, 0.0]), SPEC)
            assert abs(r) / eps ** 2 < 1e-6

    def test_cubic_scaling(self):
        fam = gaussian_family_expectation()
        theta = np.array([0.0, 1.0])
        d = np.array([1.0, 1.0])
        r1 = kl_quadratic_remainder(fam, theta, 0.1 * d, SPEC)
        r2 = kl_quadratic_remainder(fam, theta, 0.05 * d, SPEC)
        ratio = abs(r1) / abs(r2)
        assert 8.0 / 1.5 < ratio < 8.0 * 1.5
