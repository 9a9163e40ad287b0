"""Numerical integration backbone: L2 inner products and integrals on R^n.

Everything downstream (metrics, projections, filter assembly) funnels
through :func:`integrate` / :func:`inner_product`, so quadrature choices
are concentrated here.  Two rules are provided:

* ``uniform-grid`` (default): composite Simpson weights on
  ``center +- 10 * scale``, 2001 nodes per axis.  Robust for mixtures with
  well-separated components.
* ``gauss-hermite``: 64-node rule mapped through a single Gaussian weight,
  spectrally accurate when the integrand is one Gaussian times something
  smooth.

Only n = 1 and n = 2 are supported.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import DomainError, ValidationError

__all__ = [
    "SupportHint",
    "ScalarField",
    "QuadratureSpec",
    "UniformGrid",
    "nodes_weights",
    "integrate",
    "inner_product",
    "gaussian_field",
    "linear_combination",
    "envelope_hint",
]

# central-difference steps relative to hint.scale; the second-difference step
# is larger because h ~ eps**(1/4) balances truncation and roundoff there
FD_STEP_GRAD = 1e-5
FD_STEP_HESS = 3e-4

DEFAULT_NODES = 2001
DEFAULT_GH_NODES = 64
HINT_HALF_WIDTH = 10.0


@dataclass(frozen=True)
class SupportHint:
    """Effective support of a field: ``center +- scale`` per axis."""

    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)
        if center.shape != scale.shape or center.ndim != 1:
            raise ValidationError("hint center and scale must be 1-d and match")
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(scale))):
            raise ValidationError("hint must be finite")
        if np.any(scale <= 0):
            raise ValidationError("hint scale must be positive")

    @property
    def dim(self) -> int:
        return self.center.size


def envelope_hint(hints: Sequence[SupportHint]) -> SupportHint:
    """Smallest axis-aligned hint whose center+-scale box covers all inputs."""
    lo = np.min([h.center - h.scale for h in hints], axis=0)
    hi = np.max([h.center + h.scale for h in hints], axis=0)
    return SupportHint(center=(lo + hi) / 2.0, scale=np.maximum((hi - lo) / 2.0, 1e-12))


@dataclass(frozen=True)
class ScalarField:
    """Evaluable real function on R^n with optional analytic derivatives.

    ``fn`` must accept an ``(N,)`` array for n = 1 or an ``(N, 2)`` array for
    n = 2 and return ``(N,)`` values.  ``grad``/``hess`` follow the same
    convention (``(N,)``/``(N,)`` in 1-d, ``(N,2)``/``(N,2,2)`` in 2-d).
    When absent they fall back to central differences with steps
    proportional to ``hint.scale``.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    hint: SupportHint
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    hess: Callable[[np.ndarray], np.ndarray] | None = None
    allow_fd: bool = True

    @property
    def dim(self) -> int:
        return self.hint.dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    def _fd_steps(self, rel: float) -> np.ndarray:
        return rel * self.hint.scale

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.grad is not None:
            return np.asarray(self.grad(np.asarray(x, dtype=float)), dtype=float)
        self._require_fd("gradient")
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            h = self._fd_steps(FD_STEP_GRAD)[0]
            return (self(x + h) - self(x - h)) / (2.0 * h)
        steps = self._fd_steps(FD_STEP_GRAD)
        out = np.empty_like(x)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = steps[i]
            out[:, i] = (self(x + e) - self(x - e)) / (2.0 * steps[i])
        return out

    def hessian(self, x: np.ndarray) -> np.ndarray:
        if self.hess is not None:
            return np.asarray(self.hess(np.asarray(x, dtype=float)), dtype=float)
        self._require_fd("hessian")
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            h = self._fd_steps(FD_STEP_HESS)[0]
            return (self(x + h) - 2.0 * self(x) + self(x - h)) / (h * h)
        steps = self._fd_steps(FD_STEP_HESS)
        n = x.shape[0]
        out = np.empty((n, self.dim, self.dim))
        f0 = self(x)
        for i in range(self.dim):
            ei = np.zeros(self.dim)
            ei[i] = steps[i]
            out[:, i, i] = (self(x + ei) - 2.0 * f0 + self(x - ei)) / steps[i] ** 2
            for j in range(i + 1, self.dim):
                ej = np.zeros(self.dim)
                ej[j] = steps[j]
                mixed = (
                    self(x + ei + ej) - self(x + ei - ej) - self(x - ei + ej) + self(x - ei - ej)
                ) / (4.0 * steps[i] * steps[j])
                out[:, i, j] = mixed
                out[:, j, i] = mixed
        return out

    def _require_fd(self, what: str) -> None:
        if not self.allow_fd:
            from .errors import CapabilityError

            raise CapabilityError(f"field has no analytic {what} and finite differences are disabled")


def gaussian_field(mean: float, var: float) -> ScalarField:
    """Normalized 1-d Gaussian density with analytic derivatives."""
    if var <= 0:
        raise ValidationError("variance must be positive")
    m, v = float(mean), float(var)
    norm = 1.0 / np.sqrt(2.0 * np.pi * v)

    def fn(x):
        return norm * np.exp(-0.5 * (x - m) ** 2 / v)

    def grad(x):
        return fn(x) * (-(x - m) / v)

    def hess(x):
        return fn(x) * (((x - m) / v) ** 2 - 1.0 / v)

    return ScalarField(fn=fn, hint=SupportHint(np.array([m]), np.array([np.sqrt(v)])), grad=grad, hess=hess)


def linear_combination(fields: Sequence[ScalarField], coeffs: Sequence[float]) -> ScalarField:
    """Pointwise sum(c_i * f_i); analytic derivatives survive when all terms have them."""
    fields = list(fields)
    coeffs = np.asarray(coeffs, dtype=float)
    if len(fields) != coeffs.size:
        raise ValidationError("fields and coefficients must match in length")
    hint = envelope_hint([f.hint for f in fields])

    def fn(x):
        return sum(c * f(x) for c, f in zip(coeffs, fields))

    grad = None
    if all(f.grad is not None for f in fields):
        def grad(x):  # noqa: F811
            return sum(c * f.grad(x) for c, f in zip(coeffs, fields))

    hess = None
    if all(f.hess is not None for f in fields):
        def hess(x):  # noqa: F811
            return sum(c * f.hess(x) for c, f in zip(coeffs, fields))

    return ScalarField(fn=fn, hint=hint, grad=grad, hess=hess)


@dataclass(frozen=True)
class UniformGrid:
    """Endpoint-inclusive uniform 1-d grid, shared by the PDE oracles."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
            raise ValidationError("grid bounds must be finite with lo < hi")
        if self.n < 8:
            raise ValidationError("grid needs at least 8 nodes")

    @property
    def dx(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)


@dataclass(frozen=True)
class QuadratureSpec:
    """How to integrate: rule, resolution, and (optional) explicit domain.

    ``bounds`` (grid) or ``weight_center``/``weight_scale`` (gauss-hermite)
    may be left unset, in which case they are derived from the integrand's
    hint at call time.
    """

    kind: str = "uniform-grid"
    nodes: int = DEFAULT_NODES
    bounds: tuple[tuple[float, float], ...] | None = None
    weight_center: tuple[float, ...] | None = None
    weight_scale: tuple[float, ...] | None = None
    atol: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("uniform-grid", "gauss-hermite"):
            raise ValidationError(f"unknown quadrature kind {self.kind!r}")
        if self.nodes < 8:
            raise ValidationError("node count must be >= 8")
        if self.atol <= 0:
            raise ValidationError("tolerance must be positive")
        if self.bounds is not None:
            b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
            for lo, hi in b:
                if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                    raise ValidationError("bounds must be finite with lo < hi")
            object.__setattr__(self, "bounds", b)

    def with_nodes(self, nodes: int) -> "QuadratureSpec":
        return replace(self, nodes=nodes)


def _simpson_weights(n: int, dx: float) -> np.ndarray:
    # classic composite Simpson for odd n; trailing trapezoid panel for even n
    w = np.zeros(n)
    m = n if n % 2 == 1 else n - 1
    w[0:m] = 2.0
    w[1:m:2] = 4.0
    w[0] = 1.0
    w[m - 1] = 1.0
    w[:m] *= dx / 3.0
    if m < n:
        w[m - 1] += dx / 2.0
        w[m] = dx / 2.0
    return w


def _grid_axis(lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.linspace(lo, hi, n)
    return x, _simpson_weights(n, (hi - lo) / (n - 1))


def _gh_axis(center: float, scale: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    t, w = hermgauss(n)
    x = center + np.sqrt(2.0) * scale * t
    total_w = w * np.exp(t * t) * np.sqrt(2.0) * scale
    return x, total_w


_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def nodes_weights(spec: QuadratureSpec, hint: SupportHint) -> tuple[np.ndarray, np.ndarray]:
    """Resolve a spec against a hint into concrete nodes and weights.

    Returns ``(x, w)`` with ``x`` of shape ``(N,)`` for n = 1 and ``(N, 2)``
    for n = 2 (tensor grid, flattened).
    """
    dim = hint.dim
    if dim not in (1, 2):
        raise ValidationError("only dimensions 1 and 2 are supported")
    if spec.kind == "uniform-grid":
        if spec.bounds is not None:
            if len(spec.bounds) != dim:
                raise ValidationError("bounds dimension does not match field hint")
            axes = spec.bounds
        else:
            lo = hint.center - HINT_HALF_WIDTH * hint.scale
            hi = hint.center + HINT_HALF_WIDTH * hint.scale
            axes = tuple((float(a), float(b)) for a, b in zip(lo, hi))
        key = ("uniform-grid", spec.nodes, axes)
        if key not in _cache:
            per_axis = [_grid_axis(lo, hi, spec.nodes) for lo, hi in axes]
            _cache[key] = _tensorize(per_axis)
        return _cache[key]

    if spec.weight_center is not None and spec.weight_scale is not None:
        centers = np.asarray(spec.weight_center, dtype=float)
        scales = np.asarray(spec.weight_scale, dtype=float)
        if centers.size != dim or scales.size != dim:
            raise ValidationError("gauss-hermite weight parameters do not match dimension")
    else:
        centers, scales = hint.center, hint.scale
    key = ("gauss-hermite", spec.nodes, tuple(centers), tuple(scales))
    if key not in _cache:
        per_axis = [_gh_axis(c, s, spec.nodes) for c, s in zip(centers, scales)]
        _cache[key] = _tensorize(per_axis)
    return _cache[key]


def _tensorize(per_axis: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    if len(per_axis) == 1:
        return per_axis[0]
    (x1, w1), (x2, w2) = per_axis
    xx, yy = np.meshgrid(x1, x2, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])
    weights = np.outer(w1, w2).ravel()
    return nodes, weights


def _check_values(vals: np.ndarray, x: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(vals)
    if np.any(bad):
        idx = int(np.argmax(bad))
        node = x[idx] if x.ndim == 1 else tuple(x[idx])
        raise DomainError(f"{what} is not finite at node {node}")


def integrate(f: ScalarField, spec: QuadratureSpec) -> float:
    """Quadrature approximation of the integral of ``f`` over R^n."""
    x, w = nodes_weights(spec, f.hint)
    vals = f(x)
    _check_values(vals, x, "integrand")
    return float(np.dot(w, vals))


def inner_product(f: ScalarField, g: ScalarField, spec: QuadratureSpec) -> float:
    """L2 inner product <f, g> on the envelope of both hints; exactly symmetric."""
    hint = envelope_hint([f.hint, g.hint])
    x, w = nodes_weights(spec, hint)
    fv = f(x)
    gv = g(x)
    _check_values(fv, x, "left factor")
    _check_values(gv, x, "right factor")
    return float(np.dot(w, fv * gv))
