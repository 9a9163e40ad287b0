"""Mixture projection filter with discrete-time observations.

Between observations the projected density evolution reduces to the affine
ODE ``d theta/dt = M theta + c`` obtained by pairing the forward generator
with the (constant) tangent basis:

    d theta/dt = h^{-1} < L(q_{1:m} - q_{m+1}), q > theta_hat = B theta_hat.

Time-invariant models use the exact affine-exponential flow (computed via
the augmented matrix exponential, which also covers singular M); otherwise
a classical 4th-order one-step integrator runs on substeps.  At observation
times the basis densities absorb the likelihood and the weights are
re-solved, which keeps the Bayes correction exact inside the new family.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .dynamics import (
    DiffusionModel,
    DiscreteObsModel,
    backward_operator,
    forward_operator_field,
    likelihood,
)
from .errors import FilterAbort, ManifoldExitError, MixProjError, ValidationError
from .families import (
    SIMPLEX_MARGIN,
    MixtureCoords,
    MixtureFamily,
    bayes_update_basis,
    extend_coords,
    mixture_density,
    posterior_weights,
    tangent_basis,
)
from .quad import QuadratureSpec, nodes_weights
from .trajectory import FilterTrajectory, TrajectoryRecorder

__all__ = [
    "PredictionGenerator",
    "FamilyTable",
    "assemble_prediction_generator",
    "predict",
    "clip_to_simplex",
    "correct",
    "run_discrete_filter",
    "drift_residual",
]

CLIP_TOL = 1e-6


@dataclass(frozen=True)
class FamilyTable:
    """Component values tabulated on the family's quadrature nodes."""

    x: np.ndarray
    w: np.ndarray
    q: np.ndarray          # (m+1, N) component values
    u: np.ndarray          # (m, N) tangent values q_i - q_{m+1}

    @classmethod
    def build(cls, fam: MixtureFamily, spec: QuadratureSpec | None = None) -> "FamilyTable":
        spec = spec or fam.qspec
        x, w = nodes_weights(spec, fam.hint)
        q = np.stack([f(x) for f in fam.fields()])
        return cls(x=x, w=w, q=q, u=q[:-1] - q[-1])

    def moments(self, theta_hat: np.ndarray) -> tuple[float, float]:
        p = theta_hat @ self.q
        mean = float(np.dot(self.w, self.x * p))
        second = float(np.dot(self.w, self.x * self.x * p))
        return mean, second - mean * mean


@dataclass(frozen=True)
class PredictionGenerator:
    """B = h^{-1} <L u, q> with its affine reduction d theta/dt = M theta + c."""

    b_matrix: np.ndarray   # (m, m+1)
    time: float = 0.0

    @property
    def affine_m(self) -> np.ndarray:
        return self.b_matrix[:, :-1] - self.b_matrix[:, -1:]

    @property
    def affine_c(self) -> np.ndarray:
        return self.b_matrix[:, -1]

    def rate(self, theta_hat: np.ndarray) -> np.ndarray:
        return self.b_matrix @ theta_hat


def assemble_prediction_generator(
    fam: MixtureFamily,
    model: DiffusionModel,
    t: float = 0.0,
    spec: QuadratureSpec | None = None,
) -> PredictionGenerator:
    """Pair the backward generator applied to the tangent basis with the components.

    Entry (j, k) of the pre-metric matrix is <q_k, L u_j>; the adjoint form
    avoids differentiating the model coefficients.
    """
    spec = spec or fam.qspec
    table = FamilyTable.build(fam, spec)
    lu = np.stack([backward_operator(model, u, t)(table.x) for u in tangent_basis(fam)])
    raw = (lu * table.w) @ table.q.T
    return PredictionGenerator(b_matrix=fam.metric.solve(raw), time=t)


def clip_to_simplex(
    theta: np.ndarray, margin: float = SIMPLEX_MARGIN, tol: float = CLIP_TOL
) -> tuple[np.ndarray, dict | None]:
    """Force theta into the simplex interior; losses above tol are an error.

    Returns (clipped theta, clip info or None).  Leaving the simplex by more
    than ``tol`` means the density left the family's positivity region.
    """
    theta = np.asarray(theta, dtype=float)
    violation = max(float(np.maximum(-theta, 0.0).max(initial=0.0)), float(max(theta.sum() - 1.0, 0.0)))
    if violation > tol:
        raise ManifoldExitError(
            f"coordinates {theta} left the simplex by {violation:.3e} (clip tolerance {tol})"
        )
    needs_clip = bool(np.any(theta < margin) or theta.sum() > 1.0 - margin)
    if not needs_clip:
        return theta, None
    clipped = np.maximum(theta, margin)
    s = clipped.sum()
    if s > 1.0 - margin:
        clipped = clipped * (1.0 - margin) / s
    return clipped, {"magnitude": violation}


def _exact_affine_step(m: np.ndarray, c: np.ndarray, theta: np.ndarray, dt: float) -> np.ndarray:
    # augmented exponential: exp([[M, c], [0, 0]] dt) embeds the affine flow
    n = m.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = m * dt
    aug[:n, n] = c * dt
    e = expm(aug)
    return e[:n, :n] @ theta + e[:n, n]


def predict(
    theta0: MixtureCoords,
    gen: PredictionGenerator,
    dt: float,
    *,
    method: str = "exact",
    delta: float | None = None,
    generator_at: Callable[[float], PredictionGenerator] | None = None,
    t0: float = 0.0,
    margin: float = SIMPLEX_MARGIN,
) -> tuple[MixtureCoords, dict | None]:
    """Advance theta through the prediction ODE over an interval of length dt."""
    if dt <= 0:
        raise ValidationError("prediction interval must be positive")
    theta = theta0.theta if isinstance(theta0, MixtureCoords) else np.asarray(theta0, dtype=float)

    if method == "exact":
        if generator_at is not None:
            raise ValidationError("exact flow requires a time-invariant generator")
        out = _exact_affine_step(gen.affine_m, gen.affine_c, theta, dt)
    elif method == "rk4":
        target = delta if delta is not None else 1e-3 * dt
        steps = max(int(np.ceil(dt / target)), 1)
        h = dt / steps
        out = theta.copy()
        t = t0
        for _ in range(steps):
            def rate(tt, th):
                g = generator_at(tt) if generator_at is not None else gen
                return g.affine_m @ th + g.affine_c

            k1 = rate(t, out)
            k2 = rate(t + 0.5 * h, out + 0.5 * h * k1)
            k3 = rate(t + 0.5 * h, out + 0.5 * h * k2)
            k4 = rate(t + h, out + h * k3)
            out = out + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
    else:
        raise ValidationError(f"unknown integrator {method!r}")

    clipped, info = clip_to_simplex(out, margin=margin)
    return MixtureCoords(clipped), info


def correct(
    theta_minus: MixtureCoords,
    fam: MixtureFamily,
    z: float,
    obs: DiscreteObsModel,
    *,
    reweight: bool = True,
) -> tuple[MixtureCoords, MixtureFamily]:
    """Bayes step: likelihood -> basis update -> posterior weights."""
    psi = likelihood(z, obs)
    new_fam, c = bayes_update_basis(fam, psi)
    theta_n = posterior_weights(extend_coords(theta_minus), c, reweight=reweight)
    return theta_n, new_fam


def drift_residual(
    fam: MixtureFamily,
    theta: MixtureCoords | np.ndarray,
    model: DiffusionModel,
    t: float = 0.0,
    spec: QuadratureSpec | None = None,
    table: FamilyTable | None = None,
) -> float:
    """|| L* p - Pi L* p || in L2 at the current state (prediction residual)."""
    table = table or FamilyTable.build(fam, spec)
    th = extend_coords(theta)
    p = mixture_density(fam, th[:-1])
    rhs = forward_operator_field(model, p, t)(table.x)
    return _residual_norm(rhs, table, fam)


def _residual_norm(values: np.ndarray, table: FamilyTable, fam: MixtureFamily) -> float:
    rhs = table.u @ (table.w * values)
    coeffs = fam.metric.solve(rhs)
    resid = values - coeffs @ table.u
    return float(np.sqrt(max(np.dot(table.w, resid * resid), 0.0)))


def run_discrete_filter(
    fam: MixtureFamily,
    theta0: MixtureCoords,
    model: DiffusionModel,
    obs: DiscreteObsModel,
    observations: Sequence[float],
    *,
    start_time: float = 0.0,
    method: str = "exact",
    delta: float | None = None,
    reweight: bool = True,
    assemble: Callable[..., PredictionGenerator] = assemble_prediction_generator,
    record_residuals: bool = True,
    record_families: bool = True,
) -> FilterTrajectory:
    """Alternate prediction and correction over the observation schedule.

    The generator is reassembled after every basis update (the metric and
    tangent basis change) and cached within each inter-observation interval.
    Any step failure aborts with the trajectory recorded so far attached.
    """
    observations = np.asarray(observations, dtype=float)
    times = obs.times
    if observations.shape != times.shape:
        raise ValidationError("need exactly one observation per observation time")
    rec = TrajectoryRecorder()
    theta = theta0 if isinstance(theta0, MixtureCoords) else MixtureCoords(theta0)
    current = fam
    t = start_time
    table = FamilyTable.build(current)

    def record(time):
        mean, var = table.moments(extend_coords(theta))
        resid = (
            drift_residual(current, theta, model, time, table=table)
            if record_residuals
            else np.nan
        )
        rec.append(
            time,
            theta.theta,
            current.generation,
            mean,
            var,
            residual_drift=resid,
            family=current if record_families else None,
        )

    try:
        record(t)
        gen = None
        for step, (tn, zn) in enumerate(zip(times, observations)):
            if tn < t - 1e-12:
                raise ValidationError("observation time precedes the current filter time")
            if tn > t + 1e-12:
                if gen is None:
                    gen = assemble(current, model, t)
                theta, clip = predict(theta, gen, tn - t, method=method, delta=delta)
                if clip is not None:
                    rec.log(tn, step, "clip", f"magnitude {clip['magnitude']:.3e}")
                t = tn
            theta, current = correct(theta, current, zn, obs, reweight=reweight)
            gen = None  # new basis -> new metric and generator
            table = FamilyTable.build(current)
            t = tn
            record(t)
    except MixProjError as exc:
        if isinstance(exc, FilterAbort):
            raise
        raise FilterAbort(str(exc), trajectory=rec.build()) from exc
    return rec.build()
