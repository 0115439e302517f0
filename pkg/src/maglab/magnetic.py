"""Magnetic fields ``Omega = b dA`` on a conformal chart.

On a surface the Lorentz operator is ``Y = b * rot90``; unit speed orbits then
have geodesic curvature ``b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError
from .expressions import ScalarExpression
from .geometry import Bump, ChartMetric, metric_jet, rot90


@dataclass(frozen=True)
class FieldStrength:
    """Scalar field ``b(x, y)``: a constant or an expression, plus an optional
    additive bump, all multiplied by ``scale``.

    ``scale`` is what :func:`reverse` flips, so reversing twice gives back an
    equal object.
    """

    constant: Optional[float] = None
    expression: Optional[ScalarExpression] = None
    bump: Optional[Bump] = None
    scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.expression, str):
            object.__setattr__(self, "expression", ScalarExpression(self.expression))
        if (self.constant is None) == (self.expression is None):
            raise ContractError("field needs exactly one of constant or expression", "magnetic_system")
        if self.constant is not None:
            object.__setattr__(self, "constant", float(self.constant))

    @property
    def is_constant(self) -> bool:
        return self.bump is None and (self.constant is not None or self.expression.is_constant)

    def value_grad(self, x, y):
        """Return ``(b, d_x b, d_y b)``."""
        if self.constant is not None:
            b, bx, by = self.constant, 0.0, 0.0
        else:
            e = self.expression
            b = e(x, y)
            bx, by = e.grad(x, y)
        if self.bump is not None:
            j, mask = self.bump.jet(x, y)
            if j is not None:
                a = self.bump.amplitude
                b, bx, by = b + a * j[0], bx + a * j[1], by + a * j[2]
        s = self.scale
        if s == 1.0:
            return b, bx, by
        return s * b, s * bx, s * by

    def __call__(self, x, y):
        return self.value_grad(x, y)[0]

    def magnitude_hint(self, x, y) -> float:
        """Rough bound on ``|b|`` near (x, y), used for default step sizes."""
        if self.constant is not None:
            m = abs(self.constant)
        else:
            m = abs(float(self.expression(float(x), float(y))))
        if self.bump is not None:
            m += abs(self.bump.amplitude)
        return m * abs(self.scale)


@dataclass(frozen=True)
class MagneticSystem:
    chart: ChartMetric
    field: FieldStrength = field(default_factory=lambda: FieldStrength(constant=0.0))

    @classmethod
    def constant(cls, chart: ChartMetric, b: float):
        return cls(chart, FieldStrength(constant=b))

    def b(self, x, y):
        return self.field.value_grad(x, y)[0]

    def inner(self, p, u, v) -> float:
        lam = float(self.chart.conformal_factor(float(p[0]), float(p[1])))
        return lam * lam * (u[0] * v[0] + u[1] * v[1])

    def norm(self, p, u) -> float:
        return math.sqrt(self.inner(p, u, u))

    def area_form(self, p, u, v) -> float:
        """``Omega(u, v) = b lam**2 (u1 v2 - u2 v1)``."""
        x, y = float(p[0]), float(p[1])
        lam = float(self.chart.conformal_factor(x, y))
        return float(self.b(x, y)) * lam * lam * (u[0] * v[1] - u[1] * v[0])

    def with_field_scale(self, factor: float):
        """Same system with ``b`` multiplied by ``factor`` (another energy level)."""
        return replace(self, field=replace(self.field, scale=self.field.scale * factor))


def lorentz(sys: MagneticSystem, p, xi) -> np.ndarray:
    """``Y(xi) = b(p) rot90(xi)``."""
    jet = metric_jet(sys.chart, p)
    return float(sys.b(float(p[0]), float(p[1]))) * rot90(jet, xi)


def reverse(sys: MagneticSystem) -> MagneticSystem:
    """The system ``(M, g, -Omega)``: same orbits traversed backwards."""
    return replace(sys, field=replace(sys.field, scale=-sys.field.scale))
