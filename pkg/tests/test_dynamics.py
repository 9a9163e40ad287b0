import numpy as np
import pytest

from mixproj.dynamics import (
    ContinuousObsModel,
    DiffusionModel,
    DiscreteObsModel,
    backward_operator,
    bimodal_drift_model,
    check_assumptions,
    forward_operator,
    forward_operator_field,
    gamma0,
    gammak,
    likelihood,
    linear_ou_model,
    preset_continuous_obs,
    preset_discrete_obs,
    preset_model,
)
from mixproj.errors import ValidationError
from mixproj.quad import QuadratureSpec, ScalarField, SupportHint, UniformGrid, gaussian_field, integrate

SPEC = QuadratureSpec()


def zero_model():
    return DiffusionModel(
        drift=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        diffusion=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
    )


class TestBackwardOperator:
    def test_zero_model(self):
        phi = gaussian_field(0.0, 1.0)
        out = backward_operator(zero_model(), phi, 0.0)
        x = np.linspace(-3, 3, 50)
        np.testing.assert_allclose(out(x), 0.0, atol=1e-15)

    def test_first_order_term(self):
        model = bimodal_drift_model(sigma=0.0)
        phi = ScalarField(
            fn=lambda x: x,
            hint=SupportHint(np.array([0.0]), np.array([1.0])),
            grad=lambda x: np.ones_like(x),
            hess=lambda x: np.zeros_like(x),
        )
        out = backward_operator(model, phi, 0.0)
        x = np.linspace(-2, 2, 41)
        np.testing.assert_allclose(out(x), x - x ** 3, rtol=1e-12)

    def test_quadratic_test_function(self):
        sigma = 0.7
        model = linear_ou_model(alpha=1.0, sigma=sigma)
        phi = ScalarField(
            fn=lambda x: x * x,
            hint=SupportHint(np.array([0.0]), np.array([1.0])),
            grad=lambda x: 2.0 * x,
            hess=lambda x: np.full_like(x, 2.0),
        )
        out = backward_operator(model, phi, 0.0)
        x = np.linspace(-4, 4, 100)
        np.testing.assert_allclose(out(x), -2.0 * x * x + sigma ** 2, rtol=1e-12)


class TestForwardOperator:
    def test_ou_stationary_density(self):
        alpha, sigma = 1.0, 1.0
        model = linear_ou_model(alpha=alpha, sigma=sigma)
        grid = UniformGrid(-8.0, 8.0, 1601)
        v = sigma ** 2 / (2.0 * alpha)
        p = np.exp(-0.5 * grid.nodes ** 2 / v) / np.sqrt(2.0 * np.pi * v)
        out = forward_operator(model, grid, p, 0.0)
        assert np.abs(out).max() < 10.0 * grid.dx ** 2

    def test_zero_model(self):
        grid = UniformGrid(-5.0, 5.0, 257)
        p = np.exp(-0.5 * grid.nodes ** 2) / np.sqrt(2 * np.pi)
        np.testing.assert_allclose(forward_operator(zero_model(), grid, p, 0.0), 0.0)

    def test_mass_conservation(self):
        model = bimodal_drift_model(sigma=0.9)
        grid = UniformGrid(-10.0, 10.0, 2001)
        p = np.exp(-0.5 * grid.nodes ** 2) / np.sqrt(2 * np.pi)
        assert abs(forward_operator(model, grid, p, 0.0).sum() * grid.dx) < 1e-8

    def test_adjoint_identity(self):
        model = linear_ou_model(alpha=0.8, sigma=1.1)
        grid = UniformGrid(-10.0, 10.0, 2001)
        x = grid.nodes
        p = np.exp(-0.5 * (x - 0.3) ** 2 / 0.8) / np.sqrt(2 * np.pi * 0.8)
        phi = gaussian_field(0.5, 1.4)
        lhs = np.sum(forward_operator(model, grid, p, 0.0) * phi(x)) * grid.dx
        lphi = backward_operator(model, phi, 0.0)
        rhs = np.sum(p * lphi(x)) * grid.dx
        assert lhs == pytest.approx(rhs, abs=1e-6)

    def test_coarse_grid_rejected(self):
        grid = UniformGrid(-5.0, 5.0, 32)
        with pytest.raises(ValidationError):
            forward_operator(zero_model(), grid, np.zeros(32), 0.0)

    def test_field_form_matches_grid_form(self):
        model = bimodal_drift_model(sigma=0.8)
        p = gaussian_field(0.2, 0.9)
        grid = UniformGrid(-9.0, 9.0, 3001)
        grid_out = forward_operator(model, grid, p(grid.nodes), 0.0)
        field_out = forward_operator_field(model, p, 0.0)(grid.nodes)
        interior = slice(10, -10)
        assert np.abs(grid_out[interior] - field_out[interior]).max() < 20.0 * grid.dx ** 2


class TestLikelihood:
    def test_standard_form(self):
        obs = preset_discrete_obs("linear-ou", times=np.array([1.0]))
        psi = likelihood(0.0, obs)
        x = np.linspace(-3, 3, 61)
        np.testing.assert_allclose(psi(x), np.exp(-0.5 * x * x), rtol=1e-14)

    def test_peak_value_one(self):
        obs = preset_discrete_obs("cubic-sensor", times=np.array([1.0]))
        z = 0.7
        psi = likelihood(z, obs)
        assert psi(np.array([z ** (1.0 / 3.0)]))[0] == pytest.approx(1.0, abs=1e-12)
        assert psi(np.linspace(-2, 2, 101)).max() <= 1.0 + 1e-12

    def test_noise_var_generalization(self):
        r = 2.5
        obs = preset_discrete_obs("linear-ou", times=np.array([1.0]), noise_var=r)
        psi = likelihood(1.0, obs)
        x = np.linspace(-2, 2, 11)
        np.testing.assert_allclose(psi(x), np.exp(-0.5 * (1.0 - x) ** 2 / r), rtol=1e-14)
        obs1 = preset_discrete_obs("linear-ou", times=np.array([1.0]), noise_var=1.0)
        np.testing.assert_allclose(
            likelihood(1.0, obs1)(x), np.exp(-0.5 * (1.0 - x) ** 2), rtol=1e-14
        )


class TestGammaFields:
    def test_constant_sensor_vanishes(self):
        p = gaussian_field(0.3, 1.1)
        obs = ContinuousObsModel(b=lambda t, x: np.full_like(x, 2.0), obs_dim=1)
        x = np.linspace(-3, 3, 101)
        np.testing.assert_allclose(gamma0(p, obs, 0.0, SPEC)(x), 0.0, atol=1e-12)
        np.testing.assert_allclose(gammak(p, obs, 0, 0.0, SPEC)(x), 0.0, atol=1e-12)

    def test_linear_sensor_standard_normal(self):
        p = gaussian_field(0.0, 1.0)
        obs = preset_continuous_obs("linear-ou")
        x = np.linspace(-4, 4, 201)
        np.testing.assert_allclose(gammak(p, obs, 0, 0.0, SPEC)(x), x * p(x), atol=1e-10)
        np.testing.assert_allclose(
            gamma0(p, obs, 0.0, SPEC)(x), 0.5 * (x * x - 1.0) * p(x), atol=1e-9
        )

    def test_mean_zero(self):
        p = gaussian_field(0.4, 0.7)
        obs = preset_continuous_obs("cubic-sensor")
        g0 = gamma0(p, obs, 0.0, SPEC)
        g1 = gammak(p, obs, 0, 0.0, SPEC)
        assert integrate(g0, SPEC) == pytest.approx(0.0, abs=1e-8)
        assert integrate(g1, SPEC) == pytest.approx(0.0, abs=1e-8)


class TestPresets:
    def test_preset_names(self):
        for name in ("linear-ou", "bimodal-drift", "cubic-sensor"):
            assert preset_model(name) is not None
        with pytest.raises(ValidationError):
            preset_model("unknown")

    def test_assumption_constants(self):
        model = preset_model("bimodal-drift", sigma=0.8)
        obs = preset_continuous_obs("cubic-sensor")
        report = check_assumptions(model, obs, -3.0, 3.0)
        assert report["lipschitz_K_R"] > 0
        assert report["non_explosion_K"] > 0
        assert report["growth_r"] == 3

    def test_observation_times_validation(self):
        with pytest.raises(ValidationError):
            DiscreteObsModel(h=lambda x: x, times=np.array([1.0, 0.5]))
        with pytest.raises(ValidationError):
            DiscreteObsModel(h=lambda x: x, times=np.array([1.0]), noise_var=0.0)
