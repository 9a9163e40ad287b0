"""Continuous-time mixture projection filter.

The conditional-density SPDE in Stratonovich form,

    dp = L* p dt - gamma0(p) dt + sum_k gammak(p) o dY^k,

is projected onto the mixture tangent space, giving a finite SDE for theta:

    d theta = h^{-1}[ <p, L u> - <gamma0(p), u> ] dt
            + h^{-1} sum_k <gammak(p), u> o dY^k.

With p = theta_hat^T q every pairing is affine in theta_hat, so for
time-invariant coefficients the drift and diffusion reduce to cached tensor
contractions (quadratic in theta overall).  Steps use the Heun
predictor-corrector, the standard strong-order-1/2 Stratonovich scheme.
The basis is never updated during a continuous run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .discrete_filter import CLIP_TOL, FamilyTable, clip_to_simplex
from .dynamics import (
    ContinuousObsModel,
    DiffusionModel,
    backward_operator,
    forward_operator_field,
    gamma0,
    gammak,
)
from .errors import (
    DomainError,
    ExplosionError,
    FilterAbort,
    MixProjError,
    ValidationError,
)
from .families import (
    SIMPLEX_MARGIN,
    MixtureCoords,
    MixtureFamily,
    extend_coords,
    tangent_basis,
)
from .quad import QuadratureSpec, ScalarField, linear_combination, nodes_weights
from .seeding import make_rng
from .trajectory import FilterTrajectory, TrajectoryRecorder

__all__ = [
    "SdeCoefficients",
    "PathBundle",
    "assemble_sde_coefficients",
    "coefficients_by_quadrature",
    "stratonovich_step",
    "simulate_truth_and_observations",
    "run_continuous_filter",
    "projection_residual",
]

EXPLOSION_BOUND = 1e6


@dataclass(frozen=True)
class SdeCoefficients:
    """Cached tensors for the projected filtering SDE (time-invariant case).

    All pairings are against the tangent basis u_j and components q_l:
    A = <q_l, L u_j>, C^k = <b_k q_l, u_j>, beta^k = int b_k q_l,
    D = <|b|^2 q_l, u_j>, delta = int |b|^2 q_l, G = <q_l, u_j>.
    """

    fam: MixtureFamily
    a_mat: np.ndarray        # (m, m+1)
    c_mat: np.ndarray        # (d, m, m+1)
    beta: np.ndarray         # (d, m+1)
    d_mat: np.ndarray        # (m, m+1)
    delta: np.ndarray        # (m+1,)
    g_mat: np.ndarray        # (m, m+1)

    @property
    def obs_dim(self) -> int:
        return self.c_mat.shape[0]

    def drift(self, theta_hat: np.ndarray) -> np.ndarray:
        gth = self.g_mat @ theta_hat
        raw = self.a_mat @ theta_hat - 0.5 * (
            self.d_mat @ theta_hat - float(self.delta @ theta_hat) * gth
        )
        return self.fam.metric.solve(raw)

    def diffusion(self, theta_hat: np.ndarray) -> np.ndarray:
        """(m, d) matrix of diffusion columns."""
        gth = self.g_mat @ theta_hat
        cols = np.stack(
            [
                self.c_mat[k] @ theta_hat - float(self.beta[k] @ theta_hat) * gth
                for k in range(self.obs_dim)
            ],
            axis=1,
        )
        return self.fam.metric.solve(cols)


def assemble_sde_coefficients(
    fam: MixtureFamily,
    model: DiffusionModel,
    obs: ContinuousObsModel,
    t: float = 0.0,
    spec: QuadratureSpec | None = None,
) -> SdeCoefficients:
    """Quadrature of every tensor entry on the family's node set."""
    spec = spec or fam.qspec
    table = FamilyTable.build(fam, spec)
    x, w, q, u = table.x, table.w, table.q, table.u
    lu = np.stack([backward_operator(model, uf, t)(x) for uf in tangent_basis(fam)])
    a_mat = (lu * w) @ q.T
    b = obs.values(t, x)                      # (N, d)
    d = b.shape[1]
    c_mat = np.stack([(u * (w * b[:, k])) @ q.T for k in range(d)])
    beta = np.stack([q @ (w * b[:, k]) for k in range(d)])
    s = (b * b).sum(axis=1)
    d_mat = (u * (w * s)) @ q.T
    delta = q @ (w * s)
    for name, arr in (("A", a_mat), ("C", c_mat), ("beta", beta), ("D", d_mat), ("delta", delta)):
        if not np.isfinite(arr).all():
            raise DomainError(f"tensor entry in {name} diverged under quadrature")
    g_mat = (u * w) @ q.T
    return SdeCoefficients(
        fam=fam, a_mat=a_mat, c_mat=c_mat, beta=beta, d_mat=d_mat, delta=delta, g_mat=g_mat
    )


def _raw_mixture_field(fam: MixtureFamily, theta_hat: np.ndarray) -> ScalarField:
    # no simplex validation: Heun predictor states may sit slightly outside
    return linear_combination(fam.fields(), theta_hat)


def coefficients_by_quadrature(
    fam: MixtureFamily,
    theta_hat: np.ndarray,
    model: DiffusionModel,
    obs: ContinuousObsModel,
    t: float,
    spec: QuadratureSpec | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Field-level drift and diffusion at one state; independent of the tensors.

    Used for the tensor-vs-field consistency checks and for time-varying
    coefficients, where caching is unsound.
    """
    spec = spec or fam.qspec
    x, w = nodes_weights(spec, fam.hint)
    ubasis = tangent_basis(fam)
    uv = np.stack([uf(x) for uf in ubasis])
    p = _raw_mixture_field(fam, theta_hat)
    pv = p(x)
    lu = np.stack([backward_operator(model, uf, t)(x) for uf in ubasis])
    pred = lu @ (w * pv)
    g0 = gamma0(p, obs, t, spec)(x)
    drift_raw = pred - uv @ (w * g0)
    cols = np.stack(
        [uv @ (w * gammak(p, obs, k, t, spec)(x)) for k in range(obs.obs_dim)], axis=1
    )
    return fam.metric.solve(drift_raw), fam.metric.solve(cols)


class _FieldCoefficients:
    """Per-step quadrature closures for time-varying models."""

    def __init__(self, fam, model, obs, spec):
        self.fam, self.model, self.obs, self.spec = fam, model, obs, spec
        self.t = 0.0

    def at(self, t):
        self.t = t
        return self

    def drift(self, theta_hat):
        mu, _ = coefficients_by_quadrature(
            self.fam, theta_hat, self.model, self.obs, self.t, self.spec
        )
        return mu

    def diffusion(self, theta_hat):
        _, sig = coefficients_by_quadrature(
            self.fam, theta_hat, self.model, self.obs, self.t, self.spec
        )
        return sig


def stratonovich_step(
    theta: MixtureCoords | np.ndarray,
    coeffs,
    dy: np.ndarray,
    dt: float,
    *,
    margin: float = SIMPLEX_MARGIN,
    clip: bool = True,
) -> tuple[np.ndarray | MixtureCoords, dict | None]:
    """One Heun predictor-corrector step of the projected Stratonovich SDE."""
    if dt <= 0:
        raise ValidationError("step size must be positive")
    th = theta.theta if isinstance(theta, MixtureCoords) else np.asarray(theta, dtype=float)
    dy = np.atleast_1d(np.asarray(dy, dtype=float))

    def hat(v):
        return np.concatenate([v, [1.0 - v.sum()]])

    mu1 = coeffs.drift(hat(th))
    sig1 = coeffs.diffusion(hat(th))
    pred = th + mu1 * dt + sig1 @ dy
    if not np.isfinite(pred).all():
        raise DomainError(f"non-finite predictor state at theta={th}, dY={dy}")
    mu2 = coeffs.drift(hat(pred))
    sig2 = coeffs.diffusion(hat(pred))
    out = th + 0.5 * (mu1 + mu2) * dt + (0.5 * (sig1 + sig2)) @ dy
    if not np.isfinite(out).all():
        raise DomainError(f"non-finite corrector state at theta={th}, dY={dy}")
    if not clip:
        return out, None
    clipped, info = clip_to_simplex(out, margin=margin, tol=CLIP_TOL)
    return MixtureCoords(clipped), info


@dataclass(frozen=True)
class PathBundle:
    """Coupled signal and observation paths on a uniform time grid."""

    times: np.ndarray
    x: np.ndarray            # (n+1,)
    y: np.ndarray            # (n+1, d)
    seed: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "y", y)
        if np.abs(y[0]).max() != 0.0:
            raise ValidationError("observation path must start at zero")
        if not (np.isfinite(self.x).all() and np.isfinite(y).all()):
            raise ValidationError("paths must be finite")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.y, axis=0)


def simulate_truth_and_observations(
    model: DiffusionModel,
    obs: ContinuousObsModel,
    T: float,
    dt: float,
    seed: int,
    x0: float | Callable[[np.random.Generator], float] = 0.0,
) -> PathBundle:
    """Euler-Maruyama signal path and observation increments dY = b dt + dV."""
    if T <= 0 or dt <= 0:
        raise ValidationError("horizon and step must be positive")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValidationError("step must divide the horizon")
    d = obs.obs_dim
    times = np.linspace(0.0, T, n + 1)
    x = np.empty(n + 1)
    y = np.zeros((n + 1, d))
    if callable(x0):
        x[0] = float(x0(make_rng(seed, "path", "init")))
    else:
        x[0] = float(x0)
    sq = np.sqrt(dt)
    for i in range(n):
        rng = make_rng(seed, "path", i)
        xi = rng.standard_normal()
        eta = rng.standard_normal(d)
        t = times[i]
        state = np.array([x[i]])
        f = float(np.asarray(model.drift(t, state), dtype=float)[0])
        s = float(np.asarray(model.diffusion(t, state), dtype=float)[0])
        q = float(model.noise_cov(t))
        x[i + 1] = x[i] + f * dt + s * np.sqrt(q) * sq * xi
        if abs(x[i + 1]) > EXPLOSION_BOUND:
            raise ExplosionError(f"signal path exploded at step {i} (|x| > {EXPLOSION_BOUND:g})")
        bval = obs.values(t, state)[0]
        y[i + 1] = y[i] + bval * dt + sq * eta
    return PathBundle(times=times, x=x, y=y, seed=seed)


def run_continuous_filter(
    fam: MixtureFamily,
    theta0: MixtureCoords,
    model: DiffusionModel,
    obs: ContinuousObsModel,
    path: PathBundle,
    *,
    record_every: int = 1,
    record_residuals: bool = False,
    margin: float = SIMPLEX_MARGIN,
) -> FilterTrajectory:
    """Step theta along the observation path with the Heun scheme.

    Tensors are cached only when both the model and the sensor declare
    themselves time-invariant; otherwise every step re-quadratures the
    coefficient fields.  No basis update happens during a continuous run.
    """
    theta = theta0 if isinstance(theta0, MixtureCoords) else MixtureCoords(theta0)
    cached = model.time_invariant and obs.time_invariant
    coeffs = (
        assemble_sde_coefficients(fam, model, obs, float(path.times[0]))
        if cached
        else _FieldCoefficients(fam, model, obs, fam.qspec)
    )
    table = FamilyTable.build(fam)
    rec = TrajectoryRecorder()
    dt = path.dt
    incs = path.increments

    def record(i):
        mean, var = table.moments(extend_coords(theta))
        if record_residuals:
            r_drift, r_diff = projection_residual(
                fam, theta, model, obs, float(path.times[i]), fam.qspec, table=table
            )
        else:
            r_drift, r_diff = np.nan, None
        rec.append(
            path.times[i],
            theta.theta,
            fam.generation,
            mean,
            var,
            residual_drift=r_drift,
            residual_diff=r_diff,
            family=fam if i == 0 else None,
        )

    try:
        record(0)
        for i in range(incs.shape[0]):
            step_coeffs = coeffs if cached else coeffs.at(float(path.times[i]))
            theta, clip = stratonovich_step(theta, step_coeffs, incs[i], dt, margin=margin)
            if clip is not None:
                rec.log(path.times[i + 1], i, "clip", f"magnitude {clip['magnitude']:.3e}")
            if (i + 1) % record_every == 0 or i + 1 == incs.shape[0]:
                record(i + 1)
    except MixProjError as exc:
        if isinstance(exc, FilterAbort):
            raise
        raise FilterAbort(str(exc), trajectory=rec.build()) from exc
    return rec.build()


def projection_residual(
    fam: MixtureFamily,
    theta: MixtureCoords | np.ndarray,
    model: DiffusionModel,
    obs: ContinuousObsModel | None,
    t: float = 0.0,
    spec: QuadratureSpec | None = None,
    table: FamilyTable | None = None,
) -> tuple[float, np.ndarray]:
    """L2 norms of the out-of-tangent parts of the filtering right-hand side.

    Drift residual: ||(L* p - gamma0(p)) - Pi(...)||; diffusion residual per
    channel: ||gammak(p) - Pi gammak(p)||.  Without a sensor the drift
    residual reduces to the pure prediction residual.
    """
    spec = spec or fam.qspec
    table = table or FamilyTable.build(fam, spec)
    th = extend_coords(theta)
    p = _raw_mixture_field(fam, th)
    drift_vals = forward_operator_field(model, p, t)(table.x)
    if obs is not None:
        drift_vals = drift_vals - gamma0(p, obs, t, spec)(table.x)

    def resid_norm(vals):
        coeffs = fam.metric.solve(table.u @ (table.w * vals))
        r = vals - coeffs @ table.u
        return float(np.sqrt(max(np.dot(table.w, r * r), 0.0)))

    r_drift = resid_norm(drift_vals)
    if obs is None:
        return r_drift, np.zeros(0)
    r_diff = np.array(
        [resid_norm(gammak(p, obs, k, t, spec)(table.x)) for k in range(obs.obs_dim)]
    )
    return r_drift, r_diff
