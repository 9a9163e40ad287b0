"""Independent reference solvers used to verify the projection filters.

Nothing here reuses the filter assembly paths: the Galerkin generator is
assembled from the forward operator with its own Gram matrix and linear
solver, the grid solvers discretize the PDEs directly, and the particle
filter is plain sequential Monte Carlo.  Agreement between these oracles
and the projection filters is the package's acceptance evidence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .continuous_filter import PathBundle
from .discrete_filter import CLIP_TOL, clip_to_simplex
from .dynamics import (
    ContinuousObsModel,
    DiffusionModel,
    DiscreteObsModel,
    forward_operator,
    forward_operator_field,
    gamma0,
    gammak,
    likelihood,
)
from .errors import DegeneracyError, DomainError, ValidationError
from .families import MixtureCoords, MixtureFamily, extend_coords
from .quad import QuadratureSpec, ScalarField, UniformGrid, linear_combination, nodes_weights
from .seeding import make_rng

__all__ = [
    "GridDensity",
    "MomentTrajectory",
    "grid_fokker_planck_solve",
    "grid_kushner_solve",
    "grid_discrete_filter",
    "particle_filter_discrete",
    "particle_filter_continuous",
    "gaussian_sampler",
    "kalman_discrete",
    "kalman_bucy",
    "riccati_fixed_point",
    "galerkin_prediction_generator",
    "galerkin_ito_continuous_step",
    "run_galerkin_ito_filter",
]

CFL_LIMIT = 0.45


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative density values on a uniform grid."""

    grid: UniformGrid
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (self.grid.n,):
            raise ValidationError("values must match the grid size")
        if np.any(v < 0):
            raise ValidationError("grid density values must be nonnegative")
        if self.normalized and abs(self.mass - 1.0) > 1e-8:
            raise ValidationError(f"grid density mass {self.mass} is not 1")

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.dx)

    def moments(self) -> tuple[float, float]:
        x = self.grid.nodes
        m = self.mass
        mean = float(np.sum(x * self.values) * self.grid.dx / m)
        second = float(np.sum(x * x * self.values) * self.grid.dx / m)
        return mean, second - mean * mean

    def normalize(self) -> "GridDensity":
        return GridDensity(self.grid, self.values / self.mass, normalized=True)

    @classmethod
    def from_field(cls, field: ScalarField, grid: UniformGrid) -> "GridDensity":
        vals = np.maximum(np.asarray(field(grid.nodes), dtype=float), 0.0)
        return cls(grid, vals / (vals.sum() * grid.dx), normalized=True)


@dataclass(frozen=True)
class MomentTrajectory:
    """Posterior mean/variance per time, plus Monte Carlo diagnostics."""

    times: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    ess: np.ndarray | None = None
    se_mean: np.ndarray | None = None


def _floor_and_renormalize(values: np.ndarray, dx: float, event_log: list | None, t: float):
    neg = values < 0
    if np.any(neg):
        if event_log is not None:
            event_log.append(f"floor t={t:.6g} nodes={int(neg.sum())}")
        values = np.where(neg, 0.0, values)
        values = values / (values.sum() * dx)
    return values


def _forward_matrix(model: DiffusionModel, grid: UniformGrid, t: float) -> sp.spmatrix:
    x = grid.nodes
    dx = grid.dx
    f = np.asarray(model.drift(t, x), dtype=float)
    a = model.a(t, x)
    n = grid.n
    lower = f[:-1] / (2.0 * dx) + a[:-1] / (2.0 * dx * dx)
    diag = -a / (dx * dx)
    upper = -f[1:] / (2.0 * dx) + a[1:] / (2.0 * dx * dx)
    return sp.diags([lower, diag, upper], offsets=[-1, 0, 1], format="csc")


def grid_fokker_planck_solve(
    model: DiffusionModel,
    p0: GridDensity,
    t0: float,
    t1: float,
    dt: float,
    scheme: str = "explicit",
    event_log: list | None = None,
) -> GridDensity:
    """March the density PDE dp/dt = L* p from t0 to t1 on p0's grid."""
    if t1 < t0:
        raise ValidationError("t1 must not precede t0")
    if t1 == t0:
        return p0
    steps = int(round((t1 - t0) / dt))
    if abs(steps * dt - (t1 - t0)) > 1e-9 * max(t1 - t0, 1.0):
        raise ValidationError("dt must divide the solve interval")
    grid = p0.grid
    values = p0.values.copy()
    if scheme == "explicit":
        amax = float(np.max(model.a(t0, grid.nodes)))
        cfl = amax * dt / grid.dx ** 2
        if cfl > CFL_LIMIT:
            raise ValidationError(
                f"explicit scheme violates the CFL bound: a dt/dx^2 = {cfl:.3f} > {CFL_LIMIT}"
            )
        t = t0
        for _ in range(steps):
            values = values + dt * forward_operator(model, grid, values, t)
            values = _floor_and_renormalize(values, grid.dx, event_log, t)
            t += dt
    elif scheme == "crank-nicolson":
        ident = sp.identity(grid.n, format="csc")
        t = t0
        lu = None
        for k in range(steps):
            if lu is None or not model.time_invariant:
                a_mat = _forward_matrix(model, grid, t)
                lu = splu(ident - 0.5 * dt * a_mat)
                rhs_mat = ident + 0.5 * dt * a_mat
            values = lu.solve(rhs_mat @ values)
            values = _floor_and_renormalize(values, grid.dx, event_log, t)
            t += dt
    else:
        raise ValidationError(f"unknown scheme {scheme!r}")
    mass = values.sum() * grid.dx
    if abs(mass - 1.0) > 1e-6 and event_log is not None:
        event_log.append(f"mass-drift {mass - 1.0:.3e}")
    return GridDensity(grid, values / mass, normalized=True)


def grid_kushner_solve(
    model: DiffusionModel,
    obs: ContinuousObsModel,
    p0: GridDensity,
    path: PathBundle,
    scheme: str = "crank-nicolson",
    event_log: list | None = None,
) -> tuple[np.ndarray, list[GridDensity]]:
    """Splitting scheme for the conditional-density SPDE along one path.

    Each step runs one prediction substep followed by the multiplicative
    likelihood update exp(b dY - |b|^2 dt / 2), applied in log form and
    renormalized.
    """
    dt = path.dt
    grid = p0.grid
    x = grid.nodes
    densities = [p0]
    current = p0
    incs = path.increments
    for i in range(incs.shape[0]):
        t = float(path.times[i])
        predicted = grid_fokker_planck_solve(
            model, current, t, t + dt, dt, scheme=scheme, event_log=event_log
        )
        b = obs.values(t, x)
        log_update = b @ incs[i] - 0.5 * (b * b).sum(axis=1) * dt
        log_update -= log_update.max()
        values = predicted.values * np.exp(log_update)
        mass = values.sum() * grid.dx
        if mass <= 0 or not np.isfinite(mass):
            raise DomainError(f"grid filter lost all mass at step {i}")
        current = GridDensity(grid, values / mass, normalized=True)
        densities.append(current)
    return path.times, densities


def gaussian_sampler(mean: float, var: float) -> Callable[[np.random.Generator, int], np.ndarray]:
    sd = float(np.sqrt(var))
    return lambda rng, n: mean + sd * rng.standard_normal(n)


def _systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


def _weighted_moments(x: np.ndarray, w: np.ndarray) -> tuple[float, float, float, float]:
    mean = float(np.dot(w, x))
    var = float(np.dot(w, (x - mean) ** 2))
    ess = 1.0 / float(np.dot(w, w))
    se = float(np.sqrt(max(var, 0.0) / max(ess, 1.0)))
    return mean, var, ess, se


def _propagate(model, x, t, dt, rng):
    f = np.asarray(model.drift(t, x), dtype=float)
    s = np.asarray(model.diffusion(t, x), dtype=float)
    q = float(model.noise_cov(t))
    return x + f * dt + s * np.sqrt(q * dt) * rng.standard_normal(x.size)


def _normalize_log_weights(logw: np.ndarray, step) -> np.ndarray:
    peak = logw.max()
    if not np.isfinite(peak):
        raise DegeneracyError(f"particle weights collapsed at step {step}")
    w = np.exp(logw - peak)
    return w / w.sum()


def particle_filter_discrete(
    model: DiffusionModel,
    obs: DiscreteObsModel,
    zs: Sequence[float],
    x0_sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_particles: int,
    seed: int,
    *,
    substeps: int = 10,
    resample_threshold: float = 0.5,
    start_time: float = 0.0,
) -> MomentTrajectory:
    """Bootstrap filter for discrete observations; systematic resampling."""
    if n_particles < 100:
        raise ValidationError("need at least 100 particles")
    zs = np.asarray(zs, dtype=float)
    times = obs.times
    if zs.shape != times.shape:
        raise ValidationError("one observation per observation time required")
    x = np.asarray(x0_sampler(make_rng(seed, "pf", "init"), n_particles), dtype=float)
    logw = np.zeros(n_particles)
    out_t, out_m, out_v, out_ess, out_se = [], [], [], [], []
    t = start_time
    w = np.full(n_particles, 1.0 / n_particles)

    def record(time):
        mean, var, ess, se = _weighted_moments(x, w)
        out_t.append(time)
        out_m.append(mean)
        out_v.append(var)
        out_ess.append(ess)
        out_se.append(se)

    record(t)
    for step, (tn, zn) in enumerate(zip(times, zs)):
        if tn > t:
            sub_dt = (tn - t) / substeps
            for j in range(substeps):
                rng = make_rng(seed, "pf", step, j)
                x = _propagate(model, x, t + j * sub_dt, sub_dt, rng)
        psi = likelihood(zn, obs)
        logw = logw + np.asarray(psi.log_fn(x), dtype=float)
        w = _normalize_log_weights(logw, step)
        ess = 1.0 / float(np.dot(w, w))
        if ess < resample_threshold * n_particles:
            idx = _systematic_resample(w, make_rng(seed, "pf", step, "resample"))
            x = x[idx]
            logw = np.zeros(n_particles)
            w = np.full(n_particles, 1.0 / n_particles)
        t = tn
        record(t)
    return MomentTrajectory(
        times=np.asarray(out_t),
        means=np.asarray(out_m),
        variances=np.asarray(out_v),
        ess=np.asarray(out_ess),
        se_mean=np.asarray(out_se),
    )


def particle_filter_continuous(
    model: DiffusionModel,
    obs: ContinuousObsModel,
    path: PathBundle,
    x0_sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_particles: int,
    seed: int,
    *,
    resample_threshold: float = 0.5,
) -> MomentTrajectory:
    """Bootstrap filter against a continuous observation path."""
    if n_particles < 100:
        raise ValidationError("need at least 100 particles")
    x = np.asarray(x0_sampler(make_rng(seed, "pf", "init"), n_particles), dtype=float)
    logw = np.zeros(n_particles)
    dt = path.dt
    incs = path.increments
    n_steps = incs.shape[0]
    means = np.empty(n_steps + 1)
    variances = np.empty(n_steps + 1)
    ess_arr = np.empty(n_steps + 1)
    se_arr = np.empty(n_steps + 1)
    w = np.full(n_particles, 1.0 / n_particles)
    means[0], variances[0], ess_arr[0], se_arr[0] = _weighted_moments(x, w)
    for i in range(n_steps):
        t = float(path.times[i])
        rng = make_rng(seed, "pf", i)
        x = _propagate(model, x, t, dt, rng)
        b = obs.values(t, x)
        logw = logw + b @ incs[i] - 0.5 * (b * b).sum(axis=1) * dt
        w = _normalize_log_weights(logw, i)
        ess = 1.0 / float(np.dot(w, w))
        if ess < resample_threshold * n_particles:
            idx = _systematic_resample(w, make_rng(seed, "pf", i, "resample"))
            x = x[idx]
            logw = np.zeros(n_particles)
            w = np.full(n_particles, 1.0 / n_particles)
        means[i + 1], variances[i + 1], ess_arr[i + 1], se_arr[i + 1] = _weighted_moments(x, w)
    return MomentTrajectory(
        times=path.times.copy(),
        means=means,
        variances=variances,
        ess=ess_arr,
        se_mean=se_arr,
    )


def _exact_ou_moments(F: float, diff2: float, m: float, p: float, dt: float) -> tuple[float, float]:
    e = np.exp(F * dt)
    m_new = e * m
    if abs(F) > 1e-12:
        p_new = e * e * p + diff2 * (e * e - 1.0) / (2.0 * F)
    else:
        p_new = p + diff2 * dt
    return m_new, p_new


def kalman_discrete(
    F: float,
    diff2: float,
    m0: float,
    p0: float,
    obs: DiscreteObsModel,
    zs: Sequence[float],
    start_time: float = 0.0,
) -> MomentTrajectory:
    """Exact conditional moments for dX = F X dt + sigma dW, Z = a X + b + noise."""
    if obs.linear is None:
        raise ValidationError("discrete Kalman recursion requires a linear sensor")
    a, b = obs.linear
    r = obs.noise_var
    zs = np.asarray(zs, dtype=float)
    if zs.shape != obs.times.shape:
        raise ValidationError("one observation per observation time required")
    m, p = float(m0), float(p0)
    t = start_time
    out_t, out_m, out_v = [t], [m], [p]
    for tn, zn in zip(obs.times, zs):
        if tn > t:
            m, p = _exact_ou_moments(F, diff2, m, p, tn - t)
        s = a * a * p + r
        k = p * a / s
        m = m + k * (zn - (a * m + b))
        p = (1.0 - k * a) * p
        t = tn
        out_t.append(t)
        out_m.append(m)
        out_v.append(p)
    return MomentTrajectory(
        times=np.asarray(out_t), means=np.asarray(out_m), variances=np.asarray(out_v)
    )


def kalman_bucy(
    F: float,
    diff2: float,
    obs: ContinuousObsModel,
    path: PathBundle,
    m0: float,
    p0: float,
) -> MomentTrajectory:
    """Kalman-Bucy moments integrated along the observed path (R = I)."""
    if obs.linear is None:
        raise ValidationError("Kalman-Bucy requires a linear sensor")
    a, b = obs.linear
    dt = path.dt
    incs = path.increments
    n = incs.shape[0]
    means = np.empty(n + 1)
    variances = np.empty(n + 1)
    means[0], variances[0] = m0, p0
    m, p = float(m0), float(p0)
    for i in range(n):
        innovation = float(incs[i][0]) - (a * m + b) * dt
        m = m + F * m * dt + p * a * innovation
        p = p + (2.0 * F * p + diff2 - p * p * a * a) * dt
        means[i + 1] = m
        variances[i + 1] = p
    return MomentTrajectory(times=path.times.copy(), means=means, variances=variances)


def riccati_fixed_point(F: float, diff2: float, a: float) -> float:
    """Positive root of 2 F P + diff2 - a^2 P^2 = 0."""
    return (F + np.sqrt(F * F + a * a * diff2)) / (a * a)


def grid_discrete_filter(
    model: DiffusionModel,
    obs: DiscreteObsModel,
    zs: Sequence[float],
    p0: GridDensity,
    dt: float,
    scheme: str = "crank-nicolson",
    start_time: float = 0.0,
    event_log: list | None = None,
) -> tuple[np.ndarray, list[GridDensity]]:
    """Dense-grid reference for the discrete filter: FP march + pointwise Bayes."""
    zs = np.asarray(zs, dtype=float)
    if zs.shape != obs.times.shape:
        raise ValidationError("one observation per observation time required")
    grid = p0.grid
    x = grid.nodes
    t = start_time
    current = p0
    times = [t]
    densities = [current]
    for tn, zn in zip(obs.times, zs):
        if tn > t:
            steps = max(int(round((tn - t) / dt)), 1)
            current = grid_fokker_planck_solve(
                model, current, t, tn, (tn - t) / steps, scheme=scheme, event_log=event_log
            )
        psi = likelihood(zn, obs)
        values = current.values * psi(x)
        mass = values.sum() * grid.dx
        if mass <= 0 or not np.isfinite(mass):
            raise DomainError(f"grid Bayes update lost all mass at t={tn}")
        current = GridDensity(grid, values / mass, normalized=True)
        t = tn
        times.append(t)
        densities.append(current)
    return np.asarray(times), densities


def run_galerkin_ito_filter(
    fam: MixtureFamily,
    theta0: MixtureCoords,
    model: DiffusionModel,
    obs: ContinuousObsModel,
    path: PathBundle,
    spec: QuadratureSpec | None = None,
    record_every: int = 1,
) -> MomentTrajectory:
    """Step the Ito-form weak projection along a path; moments per record."""
    from .discrete_filter import FamilyTable

    spec = spec or fam.qspec
    table = FamilyTable.build(fam, spec)
    theta = theta0 if isinstance(theta0, MixtureCoords) else MixtureCoords(theta0)
    incs = path.increments
    dt = path.dt
    out_t, out_m, out_v = [], [], []

    def record(i):
        mean, var = table.moments(extend_coords(theta))
        out_t.append(float(path.times[i]))
        out_m.append(mean)
        out_v.append(var)

    record(0)
    for i in range(incs.shape[0]):
        theta, _ = galerkin_ito_continuous_step(
            theta, fam, model, obs, incs[i], dt, spec, t=float(path.times[i])
        )
        if (i + 1) % record_every == 0 or i + 1 == incs.shape[0]:
            record(i + 1)
    return MomentTrajectory(
        times=np.asarray(out_t), means=np.asarray(out_m), variances=np.asarray(out_v)
    )


def galerkin_prediction_generator(
    fam: MixtureFamily,
    model: DiffusionModel,
    t: float = 0.0,
    spec: QuadratureSpec | None = None,
) -> np.ndarray:
    """Weak-form prediction generator, assembled independently of the filter.

    Trial space: the mixture components themselves; test functions: the
    tangent differences.  Entries come from the forward operator (its own
    differentiation route), the Gram matrix is rebuilt from scratch, and a
    plain dense solve replaces the filter's Cholesky path.
    """
    spec = spec or fam.qspec
    x, w = nodes_weights(spec, fam.hint)
    fields = fam.fields()
    qv = np.stack([f(x) for f in fields])
    uv = qv[:-1] - qv[-1]
    gram = (uv * w) @ uv.T
    raw = np.empty((fam.m, fam.m + 1))
    for k, f in enumerate(fields):
        lstar = forward_operator_field(model, f, t)(x)
        raw[:, k] = uv @ (w * lstar)
    return np.linalg.solve(gram, raw)


def galerkin_ito_continuous_step(
    theta: MixtureCoords | np.ndarray,
    fam: MixtureFamily,
    model: DiffusionModel,
    obs: ContinuousObsModel,
    dy: np.ndarray,
    dt: float,
    spec: QuadratureSpec | None = None,
    *,
    t: float = 0.0,
    clip: bool = True,
) -> tuple[MixtureCoords | np.ndarray, dict | None]:
    """One Euler-Maruyama step of the Ito-form weak projection.

    The Ito conditional-density equation contributes
    ``<L* p, u> dt + sum_k <gammak(p), u> (dY^k - E_p[b_k] dt)``; unlike the
    Stratonovich route there is no gamma0 drift term, and the scheme is the
    Ito-consistent Euler step.
    """
    spec = spec or fam.qspec
    th = theta.theta if isinstance(theta, MixtureCoords) else np.asarray(theta, dtype=float)
    dy = np.atleast_1d(np.asarray(dy, dtype=float))
    th_hat = np.concatenate([th, [1.0 - th.sum()]])
    x, w = nodes_weights(spec, fam.hint)
    fields = fam.fields()
    qv = np.stack([f(x) for f in fields])
    uv = qv[:-1] - qv[-1]
    gram = (uv * w) @ uv.T
    p = linear_combination(fields, th_hat)
    pv = p(x)
    lstar = forward_operator_field(model, p, t)(x)
    drift_raw = uv @ (w * lstar)
    bv = obs.values(t, x)
    eb = (w * pv) @ bv
    delta = np.linalg.solve(gram, drift_raw) * dt
    for k in range(obs.obs_dim):
        gk = gammak(p, obs, k, t, spec)(x)
        coeff = np.linalg.solve(gram, uv @ (w * gk))
        delta = delta + coeff * (float(dy[k]) - float(eb[k]) * dt)
    out = th + delta
    if not clip:
        return out, None
    clipped, info = clip_to_simplex(out, tol=CLIP_TOL)
    return MixtureCoords(clipped), info
