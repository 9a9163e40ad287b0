"""The simple mixture manifold: convex combinations of m+1 fixed densities.

A point is ``p(x, theta) = theta_hat(theta)^T q(x)`` with
``theta_hat = [theta_1, ..., theta_m, 1 - sum(theta)]``.  The tangent space
is spanned by ``u_i = q_i - q_{m+1}`` and is independent of theta, so the
direct L2 metric ``h_ij = <u_i, u_j>`` is a constant matrix cached on the
family together with its Cholesky factor.

Observation updates multiply every basis density by the likelihood and
renormalize (``q_i -> c_i Psi q_i``), which keeps the Bayes correction step
exact inside the updated family.  Gaussian components hit by a
linear-Gaussian likelihood stay Gaussian and are updated in closed form;
anything else accumulates the log-likelihood exponent in a factor list and
renormalizes by quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegeneracyError,
    DegenerateFamilyError,
    DomainError,
    StarvationError,
    ValidationError,
)
from .geometry import MetricMatrix
from .quad import (
    QuadratureSpec,
    ScalarField,
    SupportHint,
    envelope_hint,
    gaussian_field,
    linear_combination,
    nodes_weights,
)

__all__ = [
    "GaussianComponent",
    "LogFactor",
    "BasisDensity",
    "MixtureFamily",
    "MixtureCoords",
    "extend_coords",
    "mixture_density",
    "tangent_basis",
    "mixture_metric",
    "make_family",
    "gaussian_mixture_family",
    "bayes_update_basis",
    "posterior_weights",
]

SIMPLEX_MARGIN = 1e-10
METRIC_EIG_FLOOR = 1e-12  # relative to trace(h)
MAX_LOG_FACTORS = 64
STARVATION_FLOOR = 1e-100


@dataclass(frozen=True)
class GaussianComponent:
    mean: float
    var: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.var) and self.var > 0):
            raise ValidationError("Gaussian component needs finite mean and positive variance")

    def field(self) -> ScalarField:
        return gaussian_field(self.mean, self.var)

    @property
    def hint(self) -> SupportHint:
        return SupportHint(np.array([self.mean]), np.array([np.sqrt(self.var)]))


@dataclass(frozen=True)
class LogFactor:
    """One accumulated log-likelihood exponent with optional derivatives."""

    fn: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray] | None = None
    d2: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class BasisDensity:
    """A normalized basis density: base times accumulated likelihood factors."""

    base: GaussianComponent | ScalarField
    log_factors: tuple[LogFactor, ...] = ()
    log_norm: float = 0.0
    hint_override: SupportHint | None = None

    @property
    def gaussian(self) -> tuple[float, float] | None:
        """(mean, var) when the density is exactly Gaussian, else None."""
        if isinstance(self.base, GaussianComponent) and not self.log_factors:
            return self.base.mean, self.base.var
        return None

    @property
    def hint(self) -> SupportHint:
        if self.hint_override is not None:
            return self.hint_override
        return self.base.hint

    def field(self) -> ScalarField:
        if self.gaussian is not None:
            return self.base.field()
        factors = self.log_factors
        log_norm = self.log_norm

        if isinstance(self.base, GaussianComponent):
            m, v = self.base.mean, self.base.var
            base_log = lambda x: -0.5 * (x - m) ** 2 / v - 0.5 * np.log(2.0 * np.pi * v)
            base_d1 = lambda x: -(x - m) / v
            base_d2 = lambda x: np.full_like(np.asarray(x, dtype=float), -1.0 / v)

            def fn(x):
                s = base_log(x) - log_norm
                for f in factors:
                    s = s + f.fn(x)
                return np.exp(s)

            grad = hess = None
            if all(f.d1 is not None for f in factors):
                def d1_total(x):
                    s = base_d1(x)
                    for f in factors:
                        s = s + f.d1(x)
                    return s

                grad = lambda x: fn(x) * d1_total(x)
                if all(f.d2 is not None for f in factors):
                    def hess(x):  # noqa: F811
                        s2 = base_d2(x)
                        for f in factors:
                            s2 = s2 + f.d2(x)
                        return fn(x) * (s2 + d1_total(x) ** 2)

            return ScalarField(fn=fn, hint=self.hint, grad=grad, hess=hess)

        base = self.base

        def fn(x):
            s = -log_norm
            for f in factors:
                s = s + f.fn(x)
            return base(x) * np.exp(s)

        return ScalarField(fn=fn, hint=self.hint)

    def moments(self, spec: QuadratureSpec) -> tuple[float, float]:
        g = self.gaussian
        if g is not None:
            return g
        f = self.field()
        x, w = nodes_weights(spec, self.hint)
        vals = f(x)
        mass = float(np.dot(w, vals))
        m1 = float(np.dot(w, x * vals)) / mass
        m2 = float(np.dot(w, x * x * vals)) / mass
        return m1, max(m2 - m1 * m1, 1e-300)


@dataclass(frozen=True)
class MixtureFamily:
    """m+1 basis densities with the cached constant direct-L2 metric."""

    components: tuple[BasisDensity, ...]
    metric: MetricMatrix
    qspec: QuadratureSpec
    generation: int = 0

    @property
    def m(self) -> int:
        return len(self.components) - 1

    @property
    def hint(self) -> SupportHint:
        return envelope_hint([c.hint for c in self.components])

    def fields(self) -> list[ScalarField]:
        return [c.field() for c in self.components]


@dataclass(frozen=True)
class MixtureCoords:
    """theta in the open simplex: theta_i >= 0, sum < 1."""

    theta: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "theta", t)
        if t.ndim != 1 or t.size < 1:
            raise ValidationError("coordinates must be a nonempty vector")
        if not np.isfinite(t).all():
            raise ValidationError("coordinates must be finite")
        neg = np.flatnonzero(t < 0)
        if neg.size:
            raise ValidationError(f"coordinate {neg[0]} is negative ({t[neg[0]]})")
        if t.sum() >= 1.0:
            raise ValidationError(f"coordinates sum to {t.sum()} >= 1")

    @property
    def m(self) -> int:
        return self.theta.size

    def require_interior(self, margin: float = SIMPLEX_MARGIN) -> "MixtureCoords":
        t = self.theta
        if np.any(t < margin) or t.sum() > 1.0 - margin:
            raise ValidationError(f"coordinates {t} not in the simplex interior (margin {margin})")
        return self


def extend_coords(theta: MixtureCoords | np.ndarray) -> np.ndarray:
    """[theta_1, ..., theta_m, 1 - sum] with an exact unit sum."""
    coords = theta if isinstance(theta, MixtureCoords) else MixtureCoords(np.asarray(theta))
    t = coords.theta
    return np.concatenate([t, [1.0 - t.sum()]])


def mixture_density(fam: MixtureFamily, theta: MixtureCoords | np.ndarray) -> ScalarField:
    """The mixture theta_hat^T q as an evaluable field."""
    th = extend_coords(theta)
    if th.size != fam.m + 1:
        raise ValidationError(f"coordinates have {th.size - 1} entries, family needs {fam.m}")
    return linear_combination(fam.fields(), th)


def tangent_basis(fam: MixtureFamily) -> list[ScalarField]:
    """u_i = q_i - q_{m+1}, i = 1..m; each integrates to zero."""
    fields = fam.fields()
    last = fields[-1]
    return [linear_combination([f, last], [1.0, -1.0]) for f in fields[:-1]]


def _component_matrix(
    components: Sequence[BasisDensity], spec: QuadratureSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    hint = envelope_hint([c.hint for c in components])
    x, w = nodes_weights(spec, hint)
    q = np.stack([c.field()(x) for c in components])
    if not np.isfinite(q).all():
        raise DomainError("component density not finite on the quadrature nodes")
    return x, w, q


def mixture_metric(components: Sequence[BasisDensity], spec: QuadratureSpec) -> MetricMatrix:
    """Constant metric h_ij = <q_i - q_{m+1}, q_j - q_{m+1}> by quadrature."""
    _, w, q = _component_matrix(components, spec)
    u = q[:-1] - q[-1]
    h = (u * w) @ u.T
    h = 0.5 * (h + h.T)
    eigs = np.linalg.eigvalsh(h)
    if h.trace() <= 0 or eigs.min() < METRIC_EIG_FLOOR * h.trace():
        raise DegenerateFamilyError(
            f"mixture components are too close in L2 (min eig {eigs.min():.3e})"
        )
    return MetricMatrix(h, chart="mixture")


def make_family(
    components: Sequence[BasisDensity], spec: QuadratureSpec, generation: int = 0
) -> MixtureFamily:
    components = tuple(components)
    if len(components) < 2:
        raise ValidationError("a mixture family needs at least two components")
    return MixtureFamily(
        components=components,
        metric=mixture_metric(components, spec),
        qspec=spec,
        generation=generation,
    )


def gaussian_mixture_family(
    means: Sequence[float], variances: Sequence[float], spec: QuadratureSpec
) -> MixtureFamily:
    if len(means) != len(variances):
        raise ValidationError("means and variances must match in length")
    comps = [BasisDensity(GaussianComponent(m, v)) for m, v in zip(means, variances)]
    return make_family(comps, spec)


def _conjugate_params(psi: ScalarField) -> tuple[float, float] | None:
    """(z_eff, r_eff) when psi is exp(-(z - a x - b)^2 / (2 r)) with a != 0."""
    lin = getattr(psi, "linear", None)
    if lin is None:
        return None
    a, b = lin
    if a == 0.0:
        return None
    z = getattr(psi, "z")
    r = getattr(psi, "noise_var")
    return (z - b) / a, r / (a * a)


def _collapse(bd: BasisDensity, spec: QuadratureSpec) -> BasisDensity:
    # factor list hit the cap: snapshot the density onto a dense table
    f = bd.field()
    lo = bd.hint.center[0] - 12.0 * bd.hint.scale[0]
    hi = bd.hint.center[0] + 12.0 * bd.hint.scale[0]
    xs = np.linspace(lo, hi, 4 * spec.nodes + 1)
    ys = f(xs)
    table = ScalarField(fn=lambda x: np.interp(x, xs, ys, left=0.0, right=0.0), hint=bd.hint)
    return BasisDensity(base=table, hint_override=bd.hint)


def _update_component(
    bd: BasisDensity, psi: ScalarField, spec: QuadratureSpec, index: int
) -> tuple[BasisDensity, float]:
    """Return (c_i * Psi * q_i as a BasisDensity, c_i)."""
    conj = _conjugate_params(psi)
    g = bd.gaussian
    if conj is not None and g is not None:
        z_eff, r_eff = conj
        m, v = g
        new_var = 1.0 / (1.0 / v + 1.0 / r_eff)
        new_mean = new_var * (m / v + z_eff / r_eff)
        # mass int Psi q_i for Psi = exp(-(z - a x - b)^2 / (2 r)):
        # sqrt(2 pi r) * N(z_eff; m, v + r_eff) / |a|
        a = getattr(psi, "linear")[0]
        r = getattr(psi, "noise_var")
        s = v + r_eff
        mass = (
            np.sqrt(2.0 * np.pi * r)
            / abs(a)
            * np.exp(-0.5 * (z_eff - m) ** 2 / s)
            / np.sqrt(2.0 * np.pi * s)
        )
        if not np.isfinite(mass) or mass < STARVATION_FLOOR:
            raise StarvationError(f"component {index} received vanishing likelihood mass")
        return BasisDensity(GaussianComponent(new_mean, new_var)), 1.0 / mass

    field = bd.field()
    hint = envelope_hint([bd.hint, psi.hint])
    x, w = nodes_weights(spec, hint)
    qv = field(x)
    pv = psi(x)
    if np.any(pv < 0) or not np.isfinite(pv).all():
        raise DomainError("likelihood must be finite and nonnegative")
    mass = float(np.dot(w, qv * pv))
    if not np.isfinite(mass) or mass < STARVATION_FLOOR:
        raise StarvationError(f"component {index} received vanishing likelihood mass")
    log_psi = getattr(psi, "log_fn", None)
    factor = LogFactor(
        fn=log_psi if log_psi is not None else (lambda x: np.log(np.maximum(psi(x), 1e-300))),
        d1=getattr(psi, "log_d1", None),
        d2=getattr(psi, "log_d2", None),
    )
    updated = replace(
        bd,
        log_factors=bd.log_factors + (factor,),
        log_norm=bd.log_norm + float(np.log(mass)),
    )
    # recenter the hint at the updated component's mass
    vals = qv * pv / mass
    m1 = float(np.dot(w, x * vals))
    m2 = float(np.dot(w, x * x * vals))
    sd = float(np.sqrt(max(m2 - m1 * m1, 1e-12)))
    updated = replace(updated, hint_override=SupportHint(np.array([m1]), np.array([sd])))
    if len(updated.log_factors) > MAX_LOG_FACTORS:
        updated = _collapse(updated, spec)
    return updated, 1.0 / mass


def bayes_update_basis(
    fam: MixtureFamily, psi: ScalarField
) -> tuple[MixtureFamily, np.ndarray]:
    """Multiply every basis density by the likelihood and renormalize.

    Returns the next-generation family (with its recomputed metric) and the
    normalizing constants ``c_i = 1 / int(Psi q_i)``.
    """
    lin = getattr(psi, "linear", None)
    if lin is not None and lin[0] == 0.0:
        # constant likelihood: nothing changes except a uniform constant
        z = getattr(psi, "z")
        r = getattr(psi, "noise_var")
        kappa = float(np.exp(-0.5 * (z - lin[1]) ** 2 / r))
        c = np.full(fam.m + 1, 1.0 / kappa)
        return replace(fam, generation=fam.generation + 1), c

    out = [_update_component(bd, psi, fam.qspec, i) for i, bd in enumerate(fam.components)]
    new_components = tuple(u for u, _ in out)
    c = np.array([ci for _, ci in out])
    new_fam = make_family(new_components, fam.qspec, generation=fam.generation + 1)
    return new_fam, c


def posterior_weights(
    theta_hat_minus: np.ndarray, c: np.ndarray, reweight: bool = True
) -> MixtureCoords:
    """Mixture weights after a basis update.

    In the updated basis ``q_i^n = c_i Psi q_i``, the Bayes posterior
    ``Psi p(., theta^-) / Z`` has weights proportional to
    ``theta_hat_i / c_i``.  ``reweight=False`` keeps the prior weights
    unchanged (comparison mode; not exact for unequal c).
    """
    th = np.asarray(theta_hat_minus, dtype=float)
    c = np.asarray(c, dtype=float)
    if th.shape != c.shape:
        raise ValidationError("weights and constants must have the same shape")
    if np.any(c <= 0) or not np.isfinite(c).all():
        raise ValidationError("normalizing constants must be positive and finite")
    if not reweight:
        return MixtureCoords(th[:-1])
    w = th / c
    s = w.sum()
    if s <= 0 or not np.isfinite(s):
        raise DegeneracyError("all posterior weights vanished in the Bayes update")
    w = w / s
    return MixtureCoords(w[:-1])
