"""Distances, metric matrices, and tangent-space projections on density manifolds.

Two geometric structures are implemented side by side:

* the Hellinger structure, whose tangent Gram matrix is a quarter of the
  Fisher information matrix and whose projection weighs by ``1/(2 sqrt(p))``;
* the direct L2 structure, where densities themselves are the points of the
  manifold and the metric is the plain Gram matrix of the parameter
  derivatives.

Closed-form matrices for the scalar Gaussian family are provided in both
canonical (``theta_1 x + theta_2 x^2``) and moment ``(mu, v)`` charts, with
one documented correction: the moment-chart L2 matrix below carries the
``(1,1)`` entry obtained by direct integration, ``1/(4 v sqrt(v pi))``; a
factor-2 smaller variant of that entry circulates and is kept in
:func:`gaussian_l2_expectation_alt11` so the discrepancy stays pinned by a
test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DegenerateFamilyError, DomainError, ValidationError
from .quad import (
    QuadratureSpec,
    ScalarField,
    SupportHint,
    envelope_hint,
    nodes_weights,
)

__all__ = [
    "ParametricFamily",
    "MetricMatrix",
    "hellinger_distance",
    "l2_distance",
    "kl_divergence",
    "fisher_metric",
    "l2_metric",
    "change_coordinates_metric",
    "project_l2",
    "project_fisher",
    "kl_quadratic_remainder",
    "gaussian_fisher_canonical",
    "gaussian_fisher_expectation",
    "gaussian_l2_canonical",
    "gaussian_l2_expectation",
    "gaussian_l2_expectation_alt11",
    "canonical_from_moment",
    "moment_from_canonical",
    "canonical_moment_jacobian",
    "gaussian_family_canonical",
    "gaussian_family_expectation",
]

THETA_FD_STEP = 1e-6
MIN_METRIC_EIGENVALUE = 1e-12


@dataclass(frozen=True)
class MetricMatrix:
    """Symmetric positive-definite metric with a cached Cholesky factor."""

    values: np.ndarray
    chart: str = ""

    def __post_init__(self):
        a = np.asarray(self.values, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError("metric must be a square matrix")
        scale = max(np.abs(a).max(), 1.0)
        if np.abs(a - a.T).max() > 1e-12 * scale:
            raise ValidationError("metric must be symmetric")
        a = 0.5 * (a + a.T)
        object.__setattr__(self, "values", a)
        if np.linalg.eigvalsh(a).min() < MIN_METRIC_EIGENVALUE:
            raise DegenerateFamilyError("metric is not positive definite (degenerate chart)")
        try:
            c = cho_factor(a, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - eig check fires first
            raise DegenerateFamilyError("metric Cholesky factorization failed") from exc
        object.__setattr__(self, "_cho", c)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self._cho, np.asarray(rhs, dtype=float))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))


@dataclass(frozen=True)
class ParametricFamily:
    """Finite-dimensional density family p(x, theta) with a parameter chart.

    ``dtheta(x, theta, i)`` should give the analytic derivative of the
    density in the i-th parameter when available; otherwise a central
    difference in theta with step 1e-6 is used.
    """

    dim: int
    density: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hint: Callable[[np.ndarray], SupportHint]
    dtheta: Callable[[np.ndarray, np.ndarray, int], np.ndarray] | None = None
    in_domain: Callable[[np.ndarray], bool] = lambda theta: True

    def check_domain(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValidationError(f"parameter must have shape ({self.dim},)")
        if not self.in_domain(theta):
            raise ValidationError(f"parameter {theta} outside the family domain")
        return theta

    def density_field(self, theta: np.ndarray) -> ScalarField:
        theta = self.check_domain(theta)
        return ScalarField(fn=lambda x: self.density(x, theta), hint=self.hint(theta))

    def dtheta_values(self, x: np.ndarray, theta: np.ndarray, i: int) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.dtheta is not None:
            return np.asarray(self.dtheta(x, theta, i), dtype=float)
        e = np.zeros(self.dim)
        e[i] = THETA_FD_STEP
        return (self.density(x, theta + e) - self.density(x, theta - e)) / (2.0 * THETA_FD_STEP)

    def tangent_values(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """All parameter derivatives stacked into an (m, N) array."""
        return np.stack([self.dtheta_values(x, theta, i) for i in range(self.dim)])


def _paired_nodes(p: ScalarField, q: ScalarField, spec: QuadratureSpec):
    hint = envelope_hint([p.hint, q.hint])
    x, w = nodes_weights(spec, hint)
    pv = np.asarray(p(x), dtype=float)
    qv = np.asarray(q(x), dtype=float)
    for name, vals in (("first density", pv), ("second density", qv)):
        bad = ~np.isfinite(vals)
        if np.any(bad):
            raise DomainError(f"{name} is not finite at node {x[np.argmax(bad)]}")
    return x, w, pv, qv


def hellinger_distance(p: ScalarField, q: ScalarField, spec: QuadratureSpec) -> float:
    """||sqrt(p) - sqrt(q)|| in L2; densities must be nonnegative on the nodes."""
    x, w, pv, qv = _paired_nodes(p, q, spec)
    for name, vals in (("first density", pv), ("second density", qv)):
        if np.any(vals < 0):
            raise DomainError(f"{name} is negative at node {x[np.argmax(vals < 0)]}")
    d2 = float(np.dot(w, (np.sqrt(pv) - np.sqrt(qv)) ** 2))
    return float(np.sqrt(max(d2, 0.0)))


def l2_distance(p: ScalarField, q: ScalarField, spec: QuadratureSpec) -> float:
    """||p - q|| in L2, taken directly on the densities."""
    _, w, pv, qv = _paired_nodes(p, q, spec)
    return float(np.sqrt(max(float(np.dot(w, (pv - qv) ** 2)), 0.0)))


def kl_divergence(p: ScalarField, q: ScalarField, spec: QuadratureSpec) -> float:
    """Kullback-Leibler information K(p, q) = int p log(p/q)."""
    x, w, pv, qv = _paired_nodes(p, q, spec)
    support = pv > spec.atol
    if np.any(support & (qv <= 0.0)):
        bad = np.argmax(support & (qv <= 0.0))
        raise DomainError(f"second density is nonpositive at node {x[bad]} inside the support")
    out = np.zeros_like(pv)
    pos = pv > 0.0
    ratio = np.ones_like(pv)
    ratio[pos] = pv[pos] / np.maximum(qv[pos], np.finfo(float).tiny)
    out[pos] = pv[pos] * np.log(ratio[pos])
    return float(np.dot(w, out))


def _family_nodes(fam: ParametricFamily, theta: np.ndarray, spec: QuadratureSpec):
    theta = fam.check_domain(theta)
    x, w = nodes_weights(spec, fam.hint(theta))
    return theta, x, w


def fisher_metric(fam: ParametricFamily, theta: np.ndarray, spec: QuadratureSpec) -> MetricMatrix:
    """g_ij = int (1/p) dp/dtheta_i dp/dtheta_j; requires p > 0 on the nodes."""
    theta, x, w = _family_nodes(fam, theta, spec)
    p = np.asarray(fam.density(x, theta), dtype=float)
    if np.any(p <= 0.0) or np.any(~np.isfinite(p)):
        raise DomainError("density must be finite and strictly positive on the quadrature nodes")
    d = fam.tangent_values(x, theta)
    g = (d * (w / p)) @ d.T
    return MetricMatrix(0.5 * (g + g.T), chart="fisher")


def l2_metric(fam: ParametricFamily, theta: np.ndarray, spec: QuadratureSpec) -> MetricMatrix:
    """h_ij = int dp/dtheta_i dp/dtheta_j, the direct L2 metric."""
    theta, x, w = _family_nodes(fam, theta, spec)
    d = fam.tangent_values(x, theta)
    h = (d * w) @ d.T
    return MetricMatrix(0.5 * (h + h.T), chart="l2")


def change_coordinates_metric(g: MetricMatrix, jacobian: np.ndarray, chart: str = "") -> MetricMatrix:
    """Transport a metric through a chart change: J^T g J for J = d theta / d eta."""
    j = np.asarray(jacobian, dtype=float)
    if j.shape != (g.dim, g.dim):
        raise ValidationError("jacobian shape does not match the metric")
    if abs(np.linalg.det(j)) < 1e-14:
        raise ValidationError("jacobian is singular")
    return MetricMatrix(j.T @ g.values @ j, chart=chart or g.chart)


def project_l2(
    v: ScalarField, fam: ParametricFamily, theta: np.ndarray, spec: QuadratureSpec
) -> np.ndarray:
    """Coefficients c with Pi[v] = sum_i c_i dp/dtheta_i in the direct L2 sense.

    Metric and right-hand side are assembled on the same node set, so the
    residual v - Pi[v] is orthogonal to every tangent direction up to the
    linear-solve roundoff.
    """
    theta = fam.check_domain(theta)
    hint = envelope_hint([v.hint, fam.hint(theta)])
    x, w = nodes_weights(spec, hint)
    d = fam.tangent_values(x, theta)
    h = MetricMatrix((d * w) @ d.T, chart="l2")
    rhs = d @ (w * np.asarray(v(x), dtype=float))
    return h.solve(rhs)


def project_fisher(
    v: ScalarField, fam: ParametricFamily, theta: np.ndarray, spec: QuadratureSpec
) -> np.ndarray:
    """Coefficients of the projection onto span{(1/(2 sqrt(p))) dp/dtheta_i}."""
    theta = fam.check_domain(theta)
    hint = envelope_hint([v.hint, fam.hint(theta)])
    x, w = nodes_weights(spec, hint)
    p = np.asarray(fam.density(x, theta), dtype=float)
    if np.any(p <= 0.0):
        raise DomainError("density must be strictly positive on the quadrature nodes")
    basis = fam.tangent_values(x, theta) / (2.0 * np.sqrt(p))
    gram = MetricMatrix((basis * w) @ basis.T, chart="fisher/4")
    rhs = basis @ (w * np.asarray(v(x), dtype=float))
    return gram.solve(rhs)


def kl_quadratic_remainder(
    fam: ParametricFamily, theta: np.ndarray, dtheta: np.ndarray, spec: QuadratureSpec
) -> float:
    """K(p(theta), p(theta + dtheta)) minus the quadratic form (1/2) dtheta^T g dtheta.

    The 1/2 is the second-order Taylor coefficient; the remainder scales as
    O(|dtheta|^3) for smooth families.
    """
    theta = fam.check_domain(theta)
    dtheta = np.asarray(dtheta, dtype=float)
    shifted = fam.check_domain(theta + dtheta)
    k = kl_divergence(fam.density_field(theta), fam.density_field(shifted), spec)
    g = fisher_metric(fam, theta, spec)
    return k - 0.5 * float(dtheta @ g.values @ dtheta)


# ---------------------------------------------------------------------------
# Scalar Gaussian family: closed-form metrics and chart transforms
# ---------------------------------------------------------------------------


def _check_canonical(theta) -> tuple[float, float]:
    t1, t2 = float(theta[0]), float(theta[1])
    if not (np.isfinite(t1) and np.isfinite(t2) and t2 < 0):
        raise ValidationError("canonical Gaussian parameters need theta_2 < 0")
    return t1, t2


def _check_moment(mu, v) -> tuple[float, float]:
    mu, v = float(mu), float(v)
    if not (np.isfinite(mu) and np.isfinite(v) and v > 0):
        raise ValidationError("moment Gaussian parameters need v > 0")
    return mu, v


def gaussian_fisher_canonical(theta) -> MetricMatrix:
    """Fisher matrix of exp(theta_1 x + theta_2 x^2 - psi(theta)) (Hessian of psi)."""
    t1, t2 = _check_canonical(theta)
    g11 = -1.0 / (2.0 * t2)
    g12 = t1 / (2.0 * t2 * t2)
    g22 = 1.0 / (2.0 * t2 * t2) - t1 * t1 / (2.0 * t2 ** 3)
    return MetricMatrix(np.array([[g11, g12], [g12, g22]]), chart="canonical")


def gaussian_fisher_expectation(mu, v) -> MetricMatrix:
    """Fisher matrix of N(mu, v) in the (mu, v) chart: diag(1/v, 1/(2 v^2))."""
    _, v = _check_moment(mu, v)
    return MetricMatrix(np.array([[1.0 / v, 0.0], [0.0, 1.0 / (2.0 * v * v)]]), chart="expectation")


def gaussian_l2_canonical(theta) -> MetricMatrix:
    """Direct L2 metric of the canonical-chart Gaussian family."""
    t1, t2 = _check_canonical(theta)
    pref = (np.sqrt(2.0) / 8.0) / np.sqrt(-t2 * np.pi)
    off = t1 / (-t2)
    h22 = 0.75 / (-t2) + t1 * t1 / (t2 * t2)
    return MetricMatrix(pref * np.array([[1.0, off], [off, h22]]), chart="canonical")


def gaussian_l2_expectation(mu, v) -> MetricMatrix:
    """Direct L2 metric of N(mu, v) in the (mu, v) chart.

    diag(1/(4 v sqrt(v pi)), 3/(32 v^2 sqrt(v pi))).  The (1,1) entry is the
    value of int (d_mu N(mu,v))^2 dx; see the module docstring for the
    factor-2 variant kept for the discrepancy test.
    """
    _, v = _check_moment(mu, v)
    root = np.sqrt(v * np.pi)
    return MetricMatrix(
        np.array([[1.0 / (4.0 * v * root), 0.0], [0.0, 3.0 / (32.0 * v * v * root)]]),
        chart="expectation",
    )


def gaussian_l2_expectation_alt11(mu, v) -> float:
    """Factor-2 variant of the (mu, v)-chart L2 metric (1,1) entry.

    Equal to ``1/(8 v sqrt(v pi))``; direct integration and the chart-change
    rule both give twice this value.  Kept only so the discrepancy is pinned.
    """
    _, v = _check_moment(mu, v)
    return 1.0 / (8.0 * v * np.sqrt(v * np.pi))


def canonical_from_moment(mu, v) -> np.ndarray:
    """(mu, v) -> (theta_1, theta_2) = (mu/v, -1/(2v))."""
    mu, v = _check_moment(mu, v)
    return np.array([mu / v, -0.5 / v])


def moment_from_canonical(theta) -> tuple[float, float]:
    """(theta_1, theta_2) -> (mu, v) = (-theta_1/(2 theta_2), -1/(2 theta_2))."""
    t1, t2 = _check_canonical(theta)
    return -t1 / (2.0 * t2), -1.0 / (2.0 * t2)


def canonical_moment_jacobian(mu, v) -> np.ndarray:
    """Jacobian d theta / d(mu, v) of the chart map above."""
    mu, v = _check_moment(mu, v)
    return np.array([[1.0 / v, -mu / (v * v)], [0.0, 0.5 / (v * v)]])


def gaussian_family_canonical() -> ParametricFamily:
    """Gaussian family in canonical coordinates, with analytic derivatives."""

    def psi(theta):
        t1, t2 = theta
        return 0.5 * np.log(np.pi / (-t2)) - t1 * t1 / (4.0 * t2)

    def density(x, theta):
        return np.exp(theta[0] * x + theta[1] * x * x - psi(theta))

    def dtheta(x, theta, i):
        mu, v = moment_from_canonical(theta)
        p = density(x, theta)
        return p * (x - mu) if i == 0 else p * (x * x - (v + mu * mu))

    def hint(theta):
        mu, v = moment_from_canonical(theta)
        return SupportHint(np.array([mu]), np.array([np.sqrt(v)]))

    return ParametricFamily(
        dim=2,
        density=density,
        hint=hint,
        dtheta=dtheta,
        in_domain=lambda theta: np.isfinite(theta).all() and theta[1] < 0,
    )


def gaussian_family_expectation() -> ParametricFamily:
    """Gaussian family in the (mu, v) chart, with analytic derivatives."""

    def density(x, theta):
        mu, v = theta
        return np.exp(-0.5 * (x - mu) ** 2 / v) / np.sqrt(2.0 * np.pi * v)

    def dtheta(x, theta, i):
        mu, v = theta
        p = density(x, theta)
        if i == 0:
            return p * (x - mu) / v
        return p * ((x - mu) ** 2 / (2.0 * v * v) - 0.5 / v)

    def hint(theta):
        return SupportHint(np.array([theta[0]]), np.array([np.sqrt(theta[1])]))

    return ParametricFamily(
        dim=2,
        density=density,
        hint=hint,
        dtheta=dtheta,
        in_domain=lambda theta: np.isfinite(theta).all() and theta[1] > 0,
    )
