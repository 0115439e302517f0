"""Surfaces as conformal charts ``g = lam(x, y)**2 (dx**2 + dy**2)``.

Everything downstream only needs ``lam`` and the first and second derivatives
of ``log lam``; those are bundled in :class:`MetricJet`.  The built-in constant
curvature models share the factor ``lam = 2 / (1 + K r**2)``, which is the
stereographic sphere for ``K > 0`` and the Poincare disk of radius
``1/sqrt(-K)`` for ``K < 0``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import ContractError, DomainError
from .expressions import ScalarExpression


class ChartKind(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    SPHERICAL = "spherical"
    HYPERBOLIC = "hyperbolic"
    CUSTOM = "custom"


@dataclass(frozen=True)
class Bump:
    """Smooth compactly supported bump ``amplitude * exp(1 - 1/(1 - s**2))``.

    ``s = |p - center| / radius``.  The profile equals ``amplitude`` at the
    center and is exactly zero for ``s >= 1``.
    """

    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    amplitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if not self.radius > 0:
            raise ContractError(f"bump radius must be positive, got {self.radius}", "surface_geometry")

    def jet(self, x, y):
        """Return ``(psi, psi_x, psi_y, psi_xx, psi_xy, psi_yy)`` and the support mask.

        ``psi`` is the unit-amplitude profile; the caller scales it.
        """
        cx, cy = self.center
        r2 = self.radius * self.radius
        dx, dy = x - cx, y - cy
        u = (dx * dx + dy * dy) / r2
        if isinstance(u, float):
            if u >= 1.0:
                return None, False
            w = 1.0 / (1.0 - u)
            psi = math.exp(1.0 - w)
        else:
            mask = u < 1.0
            w = 1.0 / (1.0 - np.where(mask, u, 0.0))
            psi = np.where(mask, np.exp(1.0 - w), 0.0)
        # d psi/du and d2 psi/du2
        pu = -psi * w * w
        puu = psi * w ** 3 * (w - 2.0)
        ux, uy = 2.0 * dx / r2, 2.0 * dy / r2
        uxx = 2.0 / r2
        out = (psi, pu * ux, pu * uy, puu * ux * ux + pu * uxx, puu * ux * uy, puu * uy * uy + pu * uxx)
        return out, (True if isinstance(u, float) else mask)

    def value(self, x, y):
        j, mask = self.jet(x, y)
        if j is None:
            return 0.0
        return self.amplitude * j[0]


def _apply_log_bump(bump: Bump, x, y, base):
    """Multiply ``lam`` by ``1 + a psi`` and update the log-derivatives.

    Outside the support the base jet is returned untouched.
    """
    j, mask = bump.jet(x, y)
    if j is None:
        return base
    a = bump.amplitude
    psi, px, py, pxx, pxy, pyy = j
    f = 1.0 + a * psi
    lx, ly = a * px / f, a * py / f
    lxx = a * pxx / f - lx * lx
    lxy = a * pxy / f - lx * ly
    lyy = a * pyy / f - ly * ly
    lam, gx, gy, hxx, hxy, hyy = base
    new = (lam * f, gx + lx, gy + ly, hxx + lxx, hxy + lxy, hyy + lyy)
    if mask is True:
        return new
    return tuple(np.where(mask, n, np.broadcast_to(b, np.shape(mask))) for n, b in zip(new, base))


@dataclass(frozen=True)
class ChartMetric:
    """A single conformal chart of a Riemannian surface.

    Parameters
    ----------
    kind : ChartKind
        Built-in model or ``custom``.
    curvature : float
        Nominal Gauss curvature of the built-in models (ignored for euclidean).
    custom : ScalarExpression or callable, optional
        The conformal factor for ``custom`` charts.  A plain callable gets its
        derivatives from central differences, which is recorded in
        :attr:`derivative_source`.
    validity_radius : float, optional
        Restricts custom charts to a coordinate disk about the origin.
    perturbation : Bump, optional
        Multiplicative bump applied to ``lam``.
    """

    kind: ChartKind = ChartKind.EUCLIDEAN
    curvature: float = 0.0
    custom: Optional[Union[ScalarExpression, Callable]] = None
    validity_radius: Optional[float] = None
    perturbation: Optional[Bump] = None
    fd_step: float = field(default=1e-4, compare=False)

    def __post_init__(self):
        kind = ChartKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "curvature", float(self.curvature))
        if kind is ChartKind.SPHERICAL and not self.curvature > 0:
            raise ContractError("spherical chart needs curvature > 0", "surface_geometry")
        if kind is ChartKind.HYPERBOLIC and not self.curvature < 0:
            raise ContractError("hyperbolic chart needs curvature < 0", "surface_geometry")
        if kind is ChartKind.CUSTOM and self.custom is None:
            raise ContractError("custom chart needs a conformal factor", "surface_geometry")
        if isinstance(self.custom, str):
            object.__setattr__(self, "custom", ScalarExpression(self.custom))
        if self.perturbation is not None and self.perturbation.amplitude <= -1.0:
            raise ContractError("metric bump amplitude must exceed -1", "surface_geometry")

    # constructors -----------------------------------------------------
    @classmethod
    def euclidean(cls, perturbation=None):
        return cls(ChartKind.EUCLIDEAN, 0.0, perturbation=perturbation)

    @classmethod
    def spherical(cls, curvature=1.0, perturbation=None):
        return cls(ChartKind.SPHERICAL, curvature, perturbation=perturbation)

    @classmethod
    def hyperbolic(cls, curvature=-1.0, perturbation=None):
        return cls(ChartKind.HYPERBOLIC, curvature, perturbation=perturbation)

    @classmethod
    def from_expression(cls, source, validity_radius=None, perturbation=None):
        return cls(ChartKind.CUSTOM, 0.0, ScalarExpression(source), validity_radius, perturbation)

    def with_perturbation(self, bump):
        return ChartMetric(self.kind, self.curvature, self.custom, self.validity_radius, bump, self.fd_step)

    # queries ------------------------------------------------------------
    @property
    def derivative_source(self) -> str:
        if self.kind is ChartKind.CUSTOM:
            return "symbolic" if isinstance(self.custom, ScalarExpression) else "central_difference"
        return "analytic"

    @property
    def radius_of_validity(self) -> float:
        if self.kind is ChartKind.HYPERBOLIC:
            return 1.0 / math.sqrt(-self.curvature)
        if self.validity_radius is not None:
            return float(self.validity_radius)
        return math.inf

    @property
    def length_scale(self) -> float:
        """``1/sqrt|K|`` for the curved models, 1 otherwise."""
        if self.kind in (ChartKind.SPHERICAL, ChartKind.HYPERBOLIC):
            return 1.0 / math.sqrt(abs(self.curvature))
        return 1.0

    def contains(self, x, y):
        rv = self.radius_of_validity
        if rv == math.inf:
            return True if isinstance(x, float) else np.ones(np.shape(x), dtype=bool)
        return x * x + y * y < rv * rv

    def require(self, x, y):
        x, y = float(x), float(y)
        if not (math.isfinite(x) and math.isfinite(y)) or not self.contains(x, y):
            raise DomainError(
                f"point ({x}, {y}) outside the validity region of the {self.kind.value} chart",
                kind=self.kind.value, point=(x, y))

    def _custom_log_jet(self, x, y):
        if isinstance(self.custom, ScalarExpression):
            return self.custom.log_jet(x, y)
        f = self.custom
        h = self.fd_step
        lam = f(x, y)
        lx = (np.log(f(x + h, y)) - np.log(f(x - h, y))) / (2 * h)
        ly = (np.log(f(x, y + h)) - np.log(f(x, y - h))) / (2 * h)
        h2 = 1e-3
        l0 = np.log(lam)
        lxx = (np.log(f(x + h2, y)) - 2 * l0 + np.log(f(x - h2, y))) / (h2 * h2)
        lyy = (np.log(f(x, y + h2)) - 2 * l0 + np.log(f(x, y - h2))) / (h2 * h2)
        lxy = (np.log(f(x + h2, y + h2)) - np.log(f(x + h2, y - h2))
               - np.log(f(x - h2, y + h2)) + np.log(f(x - h2, y - h2))) / (4 * h2 * h2)
        return lam, lx, ly, lxx, lxy, lyy

    def log_jet(self, x, y):
        """``(lam, d_x log lam, d_y log lam, hessian xx, xy, yy)`` at (x, y)."""
        kind = self.kind
        if kind is ChartKind.EUCLIDEAN:
            base = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        elif kind is ChartKind.CUSTOM:
            base = self._custom_log_jet(x, y)
        else:
            K = self.curvature
            d = 1.0 + K * (x * x + y * y)
            c = -2.0 * K / d
            k2 = 4.0 * K * K / (d * d)
            base = (2.0 / d, c * x, c * y, c + k2 * x * x, k2 * x * y, c + k2 * y * y)
        if self.perturbation is not None:
            base = _apply_log_bump(self.perturbation, x, y, base)
        return base

    def log_grad(self, x, y):
        """``(lam, d_x log lam, d_y log lam)``; cheaper than :meth:`log_jet`."""
        kind = self.kind
        if self.perturbation is not None or kind is ChartKind.CUSTOM:
            return self.log_jet(x, y)[:3]
        if kind is ChartKind.EUCLIDEAN:
            return 1.0, 0.0, 0.0
        K = self.curvature
        d = 1.0 + K * (x * x + y * y)
        c = -2.0 * K / d
        return 2.0 / d, c * x, c * y

    def conformal_factor(self, x, y):
        return self.log_grad(x, y)[0]

    def gauss_curvature_at(self, x, y):
        lam, _, _, hxx, _, hyy = self.log_jet(x, y)
        return -(hxx + hyy) / (lam * lam)


@dataclass(frozen=True)
class MetricJet:
    lam: float
    grad_log_lam: np.ndarray
    hess_log_lam: np.ndarray

    def inner(self, u, v) -> float:
        return float(self.lam ** 2 * (u[0] * v[0] + u[1] * v[1]))

    def norm(self, u) -> float:
        return math.sqrt(self.inner(u, u))


def metric_jet(chart: ChartMetric, p) -> MetricJet:
    x, y = float(p[0]), float(p[1])
    chart.require(x, y)
    lam, gx, gy, hxx, hxy, hyy = (float(v) for v in chart.log_jet(x, y))
    if not lam > 0:
        raise DomainError(f"conformal factor {lam} is not positive at ({x}, {y})",
                          kind=chart.kind.value, point=(x, y))
    return MetricJet(lam, np.array([gx, gy]), np.array([[hxx, hxy], [hxy, hyy]]))


def christoffels(jet: MetricJet) -> np.ndarray:
    """Christoffel symbols ``G[k, i, j]`` of the conformal metric.

    ``G^k_ij = delta_ik d_j phi + delta_jk d_i phi - delta_ij d_k phi`` with
    ``phi = log lam``.
    """
    g = jet.grad_log_lam
    eye = np.eye(2)
    return (np.einsum("ki,j->kij", eye, g) + np.einsum("kj,i->kij", eye, g)
            - np.einsum("ij,k->kij", eye, g))


def gauss_curvature(chart: ChartMetric, p) -> float:
    jet = metric_jet(chart, p)
    return float(-np.trace(jet.hess_log_lam) / jet.lam ** 2)


def rot90(jet: Optional[MetricJet], xi) -> np.ndarray:
    """Rotate a tangent vector by +90 degrees in the metric.

    Conformal charts preserve angles, so this is the coordinate rotation and
    the jet is not consulted.
    """
    return np.array([-xi[1], xi[0]], dtype=float)
