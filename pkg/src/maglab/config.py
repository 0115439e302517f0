"""Run configuration: TOML file, validated in full before any computation.

Layout::

    schema_version = "1"
    seed = 0

    [chart]            # kind = euclidean | spherical | hyperbolic | custom
    [chart.bump]       # center, radius, amplitude (optional)
    [field]            # constant = ... or expression = "...", scale = 1
    [field.bump]       # optional additive bump on b
    [domain]           # kind = disk | ellipse
    [integrator]       # step, adaptive, tolerance, unit_speed_tol
    [grid]             # n_boundary, n_angle
    [trace] [exit] [scatter] [jacobi] [conjugates] [index]
    [convexity] [simplicity] [closure] [compare]
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import List, Literal, Optional, Tuple

import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .boundary import DiskDomain, ParametricDomain
from .errors import MaglabError
from .expressions import ScalarExpression
from .flow import IntegratorSettings
from .geometry import Bump, ChartMetric
from .magnetic import FieldStrength, MagneticSystem

SCHEMA_VERSION = "1"

Vec2 = Tuple[float, float]


class ConfigError(MaglabError):
    """Configuration could not be read or failed validation; lists every problem."""

    module = "cli"

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or []
        self.details = {"errors": self.errors}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BumpSpec(_Strict):
    center: Vec2 = (0.0, 0.0)
    radius: float = Field(gt=0)
    amplitude: float

    def build(self) -> Bump:
        return Bump(tuple(self.center), self.radius, self.amplitude)


def _check_expression(v):
    if v is not None:
        try:
            ScalarExpression(v)
        except MaglabError as exc:
            raise ValueError(str(exc)) from None
    return v


class ChartSpec(_Strict):
    kind: Literal["euclidean", "spherical", "hyperbolic", "custom"] = "euclidean"
    curvature: Optional[float] = None
    expression: Optional[str] = None
    validity_radius: Optional[float] = Field(default=None, gt=0)
    bump: Optional[BumpSpec] = None

    @field_validator("expression")
    @classmethod
    def _expr(cls, v):
        return _check_expression(v)

    @model_validator(mode="after")
    def _consistent(self):
        if self.kind == "spherical" and self.curvature is not None and not self.curvature > 0:
            raise ValueError("spherical chart needs curvature > 0")
        if self.kind == "hyperbolic" and self.curvature is not None and not self.curvature < 0:
            raise ValueError("hyperbolic chart needs curvature < 0")
        if self.kind == "custom" and self.expression is None:
            raise ValueError("custom chart needs 'expression' for the conformal factor")
        if self.kind != "custom" and self.expression is not None:
            raise ValueError("'expression' is only allowed for custom charts")
        if self.bump is not None and self.bump.amplitude <= -1:
            raise ValueError("metric bump amplitude must exceed -1")
        return self

    def build(self) -> ChartMetric:
        bump = self.bump.build() if self.bump else None
        if self.kind == "euclidean":
            return ChartMetric.euclidean(bump)
        if self.kind == "spherical":
            return ChartMetric.spherical(self.curvature or 1.0, bump)
        if self.kind == "hyperbolic":
            return ChartMetric.hyperbolic(self.curvature or -1.0, bump)
        return ChartMetric.from_expression(self.expression, self.validity_radius, bump)


class FieldSpec(_Strict):
    constant: Optional[float] = None
    expression: Optional[str] = None
    scale: float = 1.0
    bump: Optional[BumpSpec] = None

    @field_validator("expression")
    @classmethod
    def _expr(cls, v):
        return _check_expression(v)

    @model_validator(mode="after")
    def _one(self):
        if self.constant is not None and self.expression is not None:
            raise ValueError("give either 'constant' or 'expression', not both")
        if self.constant is not None and not math.isfinite(self.constant):
            raise ValueError("constant must be finite")
        return self

    def build(self) -> FieldStrength:
        bump = self.bump.build() if self.bump else None
        if self.expression is not None:
            return FieldStrength(expression=ScalarExpression(self.expression), bump=bump, scale=self.scale)
        return FieldStrength(constant=self.constant or 0.0, bump=bump, scale=self.scale)


class DomainSpec(_Strict):
    kind: Literal["disk", "ellipse"] = "disk"
    center: Vec2 = (0.0, 0.0)
    radius: Optional[float] = Field(default=None, gt=0)
    a: Optional[float] = Field(default=None, gt=0)
    b: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _shape(self):
        if self.kind == "disk" and self.radius is None:
            raise ValueError("disk domain needs 'radius'")
        if self.kind == "ellipse" and (self.a is None or self.b is None):
            raise ValueError("ellipse domain needs 'a' and 'b'")
        return self

    def build(self):
        if self.kind == "disk":
            return DiskDomain(tuple(self.center), self.radius)
        return ParametricDomain.ellipse(tuple(self.center), self.a, self.b)


class IntegratorSpec(_Strict):
    step: Optional[float] = Field(default=None, gt=0)
    adaptive: bool = False
    tolerance: float = Field(default=1e-12, gt=0)
    unit_speed_tol: float = Field(default=1e-10, gt=0)

    def build(self) -> IntegratorSettings:
        return IntegratorSettings(step=self.step, adaptive=self.adaptive, tolerance=self.tolerance,
                                  unit_speed_tol=self.unit_speed_tol)


class GridSpec(_Strict):
    n_boundary: int = Field(default=16, ge=1, le=4096)
    n_angle: int = Field(default=16, ge=1, le=4096)


class StartSpec(_Strict):
    position: Vec2 = (0.0, 0.0)
    direction: Optional[Vec2] = None
    angle: Optional[float] = None

    @model_validator(mode="after")
    def _dir(self):
        if self.direction is not None and self.angle is not None:
            raise ValueError("give either 'direction' or 'angle', not both")
        if self.direction is not None and self.direction[0] == 0 and self.direction[1] == 0:
            raise ValueError("direction must be nonzero")
        return self

    def vector(self):
        if self.direction is not None:
            return tuple(self.direction)
        a = self.angle or 0.0
        return (math.cos(a), math.sin(a))


class TraceSpec(_Strict):
    start: StartSpec = StartSpec(direction=(1.0, 0.0))
    duration: float = Field(default=2 * math.pi, gt=0)
    every: int = Field(default=1, ge=1)


class ExitSpec(_Strict):
    arclen: float = Field(default=0.0, ge=0)
    angle: float = Field(default=math.pi / 2, gt=0, lt=math.pi)
    tmax: Optional[float] = Field(default=None, gt=0)


class ScatterSpec(_Strict):
    tmax: Optional[float] = Field(default=None, gt=0)


class JacobiSpec(_Strict):
    start: StartSpec = StartSpec(direction=(1.0, 0.0))
    duration: float = Field(default=2 * math.pi, gt=0)
    J0: Vec2 = (0.0, 0.0)
    J0p: Optional[Vec2] = None
    every: int = Field(default=1, ge=1)


class ConjugatesSpec(_Strict):
    position: Vec2 = (0.0, 0.0)
    n_directions: int = Field(default=8, ge=1, le=10000)
    tmax: float = Field(default=10.0, gt=0)


class IndexSpec(_Strict):
    start: StartSpec = StartSpec(direction=(1.0, 0.0))
    duration: float = Field(default=math.pi / 2, gt=0)
    N: int = Field(default=64, ge=4, le=20000)
    amplitudes: List[float] = [1.0]
    sweep_lengths: List[float] = []
    lemma_trials: int = Field(default=0, ge=0)

    @field_validator("sweep_lengths")
    @classmethod
    def _pos(cls, v):
        if any(not (x > 0) for x in v):
            raise ValueError("sweep lengths must be positive")
        return v


class ConvexitySpec(_Strict):
    n_samples: int = Field(default=64, ge=8, le=10 ** 6)


class SimplicitySpec(_Strict):
    n_samples: int = Field(default=64, ge=8, le=10 ** 6)
    h: float = Field(default=1e-4, gt=0)
    tmax: Optional[float] = Field(default=None, gt=0)


class ClosureSpec(_Strict):
    tmax: float = Field(default=10.0, gt=0)
    weight: float = Field(default=1.0, ge=0)
    closure_tol: float = Field(default=1e-6, gt=0)
    baseline: bool = True


class CompareSpec(_Strict):
    chart: Optional[ChartSpec] = None
    field: Optional[FieldSpec] = None
    step_ratio: Optional[float] = Field(default=None, gt=0)
    tmax: Optional[float] = Field(default=None, gt=0)


class RunConfig(_Strict):
    schema_version: str
    seed: int = 0
    chart: ChartSpec = ChartSpec()
    field: FieldSpec = FieldSpec()
    domain: Optional[DomainSpec] = None
    integrator: IntegratorSpec = IntegratorSpec()
    grid: GridSpec = GridSpec()
    trace: TraceSpec = TraceSpec()
    exit: ExitSpec = ExitSpec()
    scatter: ScatterSpec = ScatterSpec()
    jacobi: JacobiSpec = JacobiSpec()
    conjugates: ConjugatesSpec = ConjugatesSpec()
    index: IndexSpec = IndexSpec()
    convexity: ConvexitySpec = ConvexitySpec()
    simplicity: SimplicitySpec = SimplicitySpec()
    closure: ClosureSpec = ClosureSpec()
    compare: CompareSpec = CompareSpec()

    def system(self) -> MagneticSystem:
        return MagneticSystem(self.chart.build(), self.field.build())

    def hash(self) -> str:
        """sha256 of the canonical JSON form of the validated config."""
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _format_errors(exc: ValidationError):
    out = []
    for e in exc.errors():
        key = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append({"key": key, "message": e["msg"]})
    return out


def parse_config(data: dict) -> RunConfig:
    version = data.get("schema_version")
    if version is None:
        raise ConfigError("config is missing 'schema_version'",
                          [{"key": "schema_version", "message": f"add schema_version = \"{SCHEMA_VERSION}\""}])
    if str(version) != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {version!r}; this build reads version {SCHEMA_VERSION!r}",
            [{"key": "schema_version",
              "message": f"migrate by setting schema_version = \"{SCHEMA_VERSION}\" and checking section "
                         "names against the README"}])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        errs = _format_errors(exc)
        keys = ", ".join(e["key"] for e in errs)
        raise ConfigError(f"invalid config ({len(errs)} problem(s)): {keys}", errs) from None


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}",
                          [{"key": "<file>", "message": str(exc)}]) from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}", [{"key": "<file>", "message": str(exc)}]) from None
    return parse_config(data)
