"""Filtering-system definitions: diffusions, sensors, operators, likelihoods.

The state follows ``dX = f(t, X) dt + sigma(t, X) dW`` on the real line with
noise covariance ``Q``; observations are either discrete-time
``Z_n = h(X_{t_n}) + V_n`` or continuous-time ``dY = b(t, X) dt + dV`` with
unit observation noise.  The generator pair implemented here,

    L  phi = f phi' + (1/2) a phi''          (backward, on test functions)
    L* phi = -(f phi)' + (1/2) (a phi)''     (forward, on densities)

with ``a = sigma^2 Q``, drives both projection filters and the PDE oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, ValidationError
from .quad import (
    FD_STEP_GRAD,
    FD_STEP_HESS,
    QuadratureSpec,
    ScalarField,
    SupportHint,
    UniformGrid,
    nodes_weights,
)

__all__ = [
    "DiffusionModel",
    "DiscreteObsModel",
    "ContinuousObsModel",
    "LikelihoodField",
    "backward_operator",
    "forward_operator",
    "forward_operator_field",
    "likelihood",
    "gamma0",
    "gammak",
    "linear_ou_model",
    "bimodal_drift_model",
    "preset_model",
    "preset_discrete_obs",
    "preset_continuous_obs",
    "check_assumptions",
]

MIN_INTERIOR_NODES = 64


@dataclass(frozen=True)
class DiffusionModel:
    """Scalar state diffusion dX = f dt + sigma dW with noise covariance Q."""

    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    noise_cov: Callable[[float], float] = lambda t: 1.0
    dim: int = 1
    drift_dx: Callable[[float, np.ndarray], np.ndarray] | None = None
    diff_dx: Callable[[float, np.ndarray], np.ndarray] | None = None
    diff_dxx: Callable[[float, np.ndarray], np.ndarray] | None = None
    time_invariant: bool = True

    def __post_init__(self):
        if self.dim != 1:
            raise ValidationError("only scalar state models are supported")

    def a(self, t: float, x: np.ndarray) -> np.ndarray:
        s = np.asarray(self.diffusion(t, x), dtype=float)
        return s * s * self.noise_cov(t)

    def a_dx(self, t: float, x: np.ndarray, scale: float) -> np.ndarray:
        if self.diff_dx is not None:
            s = np.asarray(self.diffusion(t, x), dtype=float)
            return 2.0 * s * np.asarray(self.diff_dx(t, x), dtype=float) * self.noise_cov(t)
        h = FD_STEP_GRAD * scale
        return (self.a(t, x + h) - self.a(t, x - h)) / (2.0 * h)

    def a_dxx(self, t: float, x: np.ndarray, scale: float) -> np.ndarray:
        if self.diff_dx is not None and self.diff_dxx is not None:
            s = np.asarray(self.diffusion(t, x), dtype=float)
            s1 = np.asarray(self.diff_dx(t, x), dtype=float)
            s2 = np.asarray(self.diff_dxx(t, x), dtype=float)
            return 2.0 * (s1 * s1 + s * s2) * self.noise_cov(t)
        h = FD_STEP_HESS * scale
        return (self.a(t, x + h) - 2.0 * self.a(t, x) + self.a(t, x - h)) / (h * h)

    def drift_dx_values(self, t: float, x: np.ndarray, scale: float) -> np.ndarray:
        if self.drift_dx is not None:
            return np.asarray(self.drift_dx(t, x), dtype=float)
        h = FD_STEP_GRAD * scale
        f = self.drift
        return (np.asarray(f(t, x + h), dtype=float) - np.asarray(f(t, x - h), dtype=float)) / (
            2.0 * h
        )


@dataclass(frozen=True)
class DiscreteObsModel:
    """Z_n = h(X_{t_n}) + V_n with Var(V_n) = noise_var at the given times."""

    h: Callable[[np.ndarray], np.ndarray]
    times: np.ndarray
    noise_var: float = 1.0
    linear: tuple[float, float] | None = None
    h_dx: Callable[[np.ndarray], np.ndarray] | None = None
    h_dxx: Callable[[np.ndarray], np.ndarray] | None = None
    state_hint: SupportHint | None = None

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        object.__setattr__(self, "times", times)
        if times.size and np.any(np.diff(times) <= 0):
            raise ValidationError("observation times must be strictly increasing")
        if self.noise_var <= 0:
            raise ValidationError("observation noise variance must be positive")


@dataclass(frozen=True)
class ContinuousObsModel:
    """dY = b(t, X) dt + dV with R = I; b maps (N,) points to (N,) or (N, d)."""

    b: Callable[[float, np.ndarray], np.ndarray]
    obs_dim: int = 1
    linear: tuple[float, float] | None = None
    time_invariant: bool = True

    def values(self, t: float, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.b(t, np.asarray(x, dtype=float)), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape[1] != self.obs_dim:
            raise ValidationError("sensor output does not match obs_dim")
        if not np.isfinite(out).all():
            raise DomainError("sensor value not finite on the sampled domain")
        return out


def backward_operator(model: DiffusionModel, phi: ScalarField, t: float) -> ScalarField:
    """L phi = f phi' + (1/2) a phi'' as an evaluable field."""

    def fn(x):
        x = np.asarray(x, dtype=float)
        return np.asarray(model.drift(t, x), dtype=float) * phi.gradient(x) + 0.5 * model.a(
            t, x
        ) * phi.hessian(x)

    return ScalarField(fn=fn, hint=phi.hint)


def forward_operator(
    model: DiffusionModel, grid: UniformGrid, values: np.ndarray, t: float
) -> np.ndarray:
    """Divergence-form L* on a uniform grid with zero ghost cells.

    Central differences throughout, so the discrete integral of the output
    vanishes up to the (decayed) boundary values.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n,):
        raise ValidationError("values must live on the grid nodes")
    if grid.n - 2 < MIN_INTERIOR_NODES:
        raise ValidationError(f"grid too coarse: needs at least {MIN_INTERIOR_NODES} interior nodes")
    x = grid.nodes
    dx = grid.dx
    flux = np.asarray(model.drift(t, x), dtype=float) * values
    diff = model.a(t, x) * values
    fpad = np.pad(flux, 1)
    dpad = np.pad(diff, 1)
    d1 = (fpad[2:] - fpad[:-2]) / (2.0 * dx)
    d2 = (dpad[2:] - 2.0 * dpad[1:-1] + dpad[:-2]) / (dx * dx)
    return -d1 + 0.5 * d2


def forward_operator_field(model: DiffusionModel, p: ScalarField, t: float) -> ScalarField:
    """L* p in expanded form, using analytic coefficient derivatives when present.

    L* p = -(f' p + f p') + (1/2)(a'' p + 2 a' p' + a p'').
    """
    scale = float(np.max(p.hint.scale))

    def fn(x):
        x = np.asarray(x, dtype=float)
        pv = p(x)
        p1 = p.gradient(x)
        p2 = p.hessian(x)
        f = np.asarray(model.drift(t, x), dtype=float)
        f1 = model.drift_dx_values(t, x, scale)
        a = model.a(t, x)
        a1 = model.a_dx(t, x, scale)
        a2 = model.a_dxx(t, x, scale)
        return -(f1 * pv + f * p1) + 0.5 * (a2 * pv + 2.0 * a1 * p1 + a * p2)

    return ScalarField(fn=fn, hint=p.hint)


@dataclass(frozen=True)
class LikelihoodField(ScalarField):
    """Psi(x) = exp(-(z - h(x))^2 / (2 r)) plus the metadata updates need."""

    z: float = 0.0
    noise_var: float = 1.0
    linear: tuple[float, float] | None = None
    log_fn: Callable[[np.ndarray], np.ndarray] | None = None
    log_d1: Callable[[np.ndarray], np.ndarray] | None = None
    log_d2: Callable[[np.ndarray], np.ndarray] | None = None


def likelihood(z: float, obs: DiscreteObsModel) -> LikelihoodField:
    """Single-observation likelihood; strictly positive, bounded by one."""
    if not np.isfinite(z):
        raise ValidationError("observation must be finite")
    z = float(z)
    r = obs.noise_var
    h = obs.h

    def log_fn(x):
        return -0.5 * (z - np.asarray(h(x), dtype=float)) ** 2 / r

    def fn(x):
        return np.exp(log_fn(x))

    log_d1 = log_d2 = None
    if obs.h_dx is not None:
        def log_d1(x):  # noqa: F811
            return (z - np.asarray(h(x), dtype=float)) * np.asarray(obs.h_dx(x), dtype=float) / r

        if obs.h_dxx is not None:
            def log_d2(x):  # noqa: F811
                hv = np.asarray(h(x), dtype=float)
                h1 = np.asarray(obs.h_dx(x), dtype=float)
                h2 = np.asarray(obs.h_dxx(x), dtype=float)
                return (-h1 * h1 + (z - hv) * h2) / r

    if obs.linear is not None and obs.linear[0] != 0.0:
        a, b = obs.linear
        hint = SupportHint(np.array([(z - b) / a]), np.array([max(np.sqrt(r) / abs(a), 1e-6)]))
    elif obs.state_hint is not None:
        hint = obs.state_hint
    else:
        hint = SupportHint(np.array([0.0]), np.array([max(1.0, abs(z))]))
    return LikelihoodField(
        fn=fn,
        hint=hint,
        z=z,
        noise_var=r,
        linear=obs.linear,
        log_fn=log_fn,
        log_d1=log_d1,
        log_d2=log_d2,
    )


def _centered(
    p: ScalarField, obs: ContinuousObsModel, t: float, spec: QuadratureSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x, w = nodes_weights(spec, p.hint)
    pv = np.asarray(p(x), dtype=float)
    bv = obs.values(t, x)
    means = (w * pv) @ bv
    if not np.isfinite(means).all():
        raise DomainError("sensor expectation diverged under quadrature")
    return x, w, pv, means


def gamma0(
    p: ScalarField, obs: ContinuousObsModel, t: float, spec: QuadratureSpec
) -> ScalarField:
    """(1/2) [|b|^2 - E_p |b|^2] p; integrates to zero by construction."""
    x, w, pv, _ = _centered(p, obs, t, spec)
    sq = (obs.values(t, x) ** 2).sum(axis=1)
    mean_sq = float(np.dot(w * pv, sq))
    if not np.isfinite(mean_sq):
        raise DomainError("sensor second moment diverged under quadrature")

    def fn(xx):
        s = (obs.values(t, np.asarray(xx, dtype=float)) ** 2).sum(axis=1)
        return 0.5 * (s - mean_sq) * p(xx)

    return ScalarField(fn=fn, hint=p.hint)


def gammak(
    p: ScalarField, obs: ContinuousObsModel, k: int, t: float, spec: QuadratureSpec
) -> ScalarField:
    """[b_k - E_p b_k] p for one sensor channel."""
    if not (0 <= k < obs.obs_dim):
        raise ValidationError(f"sensor channel {k} out of range")
    _, _, _, means = _centered(p, obs, t, spec)
    mean_k = float(means[k])

    def fn(xx):
        return (obs.values(t, np.asarray(xx, dtype=float))[:, k] - mean_k) * p(xx)

    return ScalarField(fn=fn, hint=p.hint)


# ---------------------------------------------------------------------------
# Named presets: linear-ou, bimodal-drift, cubic-sensor
# ---------------------------------------------------------------------------


def linear_ou_model(alpha: float = 1.0, sigma: float = 1.0) -> DiffusionModel:
    """dX = -alpha X dt + sigma dW."""
    return DiffusionModel(
        drift=lambda t, x: -alpha * x,
        diffusion=lambda t, x: np.full_like(np.asarray(x, dtype=float), sigma),
        drift_dx=lambda t, x: np.full_like(np.asarray(x, dtype=float), -alpha),
        diff_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        diff_dxx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
    )


def bimodal_drift_model(sigma: float = 1.0) -> DiffusionModel:
    """dX = (X - X^3) dt + sigma dW; two stable wells at +-1."""
    return DiffusionModel(
        drift=lambda t, x: x - x ** 3,
        diffusion=lambda t, x: np.full_like(np.asarray(x, dtype=float), sigma),
        drift_dx=lambda t, x: 1.0 - 3.0 * x ** 2,
        diff_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        diff_dxx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
    )


def preset_model(name: str, alpha: float = 1.0, sigma: float = 1.0) -> DiffusionModel:
    if name == "linear-ou":
        return linear_ou_model(alpha=alpha, sigma=sigma)
    if name == "bimodal-drift":
        return bimodal_drift_model(sigma=sigma)
    if name == "cubic-sensor":
        # cubic-sensor names the observation map; the state is an OU diffusion
        return linear_ou_model(alpha=alpha, sigma=sigma)
    raise ValidationError(f"unknown model preset {name!r}")


def preset_discrete_obs(name: str, times: np.ndarray, noise_var: float = 1.0) -> DiscreteObsModel:
    if name in ("linear-ou", "bimodal-drift"):
        return DiscreteObsModel(
            h=lambda x: x,
            times=times,
            noise_var=noise_var,
            linear=(1.0, 0.0),
            h_dx=lambda x: np.ones_like(np.asarray(x, dtype=float)),
            h_dxx=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        )
    if name == "cubic-sensor":
        return DiscreteObsModel(
            h=lambda x: x ** 3,
            times=times,
            noise_var=noise_var,
            h_dx=lambda x: 3.0 * x ** 2,
            h_dxx=lambda x: 6.0 * np.asarray(x, dtype=float),
            state_hint=SupportHint(np.array([0.0]), np.array([2.0])),
        )
    raise ValidationError(f"unknown observation preset {name!r}")


def preset_continuous_obs(name: str) -> ContinuousObsModel:
    if name in ("linear-ou", "bimodal-drift"):
        return ContinuousObsModel(b=lambda t, x: x, obs_dim=1, linear=(1.0, 0.0))
    if name == "cubic-sensor":
        return ContinuousObsModel(b=lambda t, x: x ** 3, obs_dim=1)
    raise ValidationError(f"unknown sensor preset {name!r}")


def check_assumptions(
    model: DiffusionModel,
    obs: ContinuousObsModel | None,
    lo: float,
    hi: float,
    n: int = 400,
    t: float = 0.0,
) -> dict:
    """Sampled growth/Lipschitz constants over [lo, hi]; diagnostic only.

    Reports the empirical local Lipschitz constant of f and a, the
    non-explosion constant, and a polynomial growth exponent for the sensor.
    """
    x = np.linspace(lo, hi, n)
    f = np.asarray(model.drift(t, x), dtype=float)
    a = model.a(t, x)
    dx = x[1] - x[0]
    lipschitz = float(max(np.abs(np.diff(f)).max() / dx, np.abs(np.diff(a)).max() / dx))
    non_explosion = float(max((x * f / (1.0 + x * x)).max(), (a / (1.0 + x * x)).max()))
    out = {"lipschitz_K_R": lipschitz, "non_explosion_K": non_explosion}
    if obs is not None:
        mag = np.abs(obs.values(t, x)).max(axis=1)
        outer = np.abs(x) > 0.5 * max(abs(lo), abs(hi))
        usable = outer & (mag > 1e-12)
        if usable.sum() >= 2:
            slope = np.polyfit(np.log(np.abs(x[usable])), np.log(mag[usable]), 1)[0]
            r = int(np.clip(round(slope), 0, 8))
        else:
            r = 0
        out["growth_r"] = r
        out["growth_K"] = float((mag / (1.0 + np.abs(x) ** r)).max())
    return out
