"""Domains with boundary: convexity, exit times, scattering and simplicity.

A domain is a closed convex curve in the chart, traversed counterclockwise
and parameterized by ``tau`` in ``[0, 2 pi)``.  Boundary geodesic curvature for
the conformal metric is

    kappa_g = (kappa_0 - d_nu0 log lam) / lam

with ``kappa_0`` the Euclidean curvature and ``nu0`` the Euclidean inward
normal.  Exit events are found on the fixed RK4 grid and refined with Brent's
method on sub-steps from the last interior sample.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import ContractError, MaglabError
from .flow import PhasePoint, advance, default_step, geodesic_rhs, renormalizer, rk4_step, _check_start
from .magnetic import MagneticSystem, reverse

#: entries with ``<nu, xi>`` below this are treated as tangent to the boundary
EPS_GRAZE = 1e-6
#: relative threshold for the perpendicular part of dc/ds
EPS_CONJ = 1e-6

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


# ---------------------------------------------------------------------------
# domains


class Domain:
    """Common machinery for closed boundary curves in a chart.

    Subclasses supply :meth:`curve` returning ``c, c', c''`` at ``tau`` and
    :meth:`signed`, a function that is negative inside, positive outside and
    zero on the boundary.
    """

    n_panels = 256

    def curve(self, tau):
        raise NotImplementedError

    def signed(self, x, y):
        raise NotImplementedError

    def closest(self, x, y):
        """Parameter ``tau`` of the boundary point closest (in the chart) to (x, y)."""
        raise NotImplementedError

    def inside(self, x, y):
        return self.signed(x, y) < 0

    def extent(self):
        """Chart bounding radius ``(center, r)`` of the domain."""
        tau = np.linspace(0, 2 * np.pi, 257)[:-1]
        c = self.curve(tau)[0]
        ctr = c.mean(axis=0)
        return ctr, float(np.max(np.hypot(*(c - ctr).T)))

    # --- Euclidean frame -------------------------------------------------

    def frame(self, tau):
        """Point, unit tangent, inward unit normal and Euclidean curvature."""
        c, d1, d2 = self.curve(tau)
        speed = np.hypot(d1[..., 0], d1[..., 1])
        t0 = d1 / speed[..., None]
        n0 = np.stack([-t0[..., 1], t0[..., 0]], -1)
        kappa0 = (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]) / speed ** 3
        return c, t0, n0, kappa0

    def euclidean_curvature_fd(self, tau, h=1e-4):
        """Curvature from central differences of the tangent angle."""
        _, d1p, _ = self.curve(tau + h)
        _, d1m, _ = self.curve(tau - h)
        _, d1, _ = self.curve(tau)
        ap = np.arctan2(d1p[..., 1], d1p[..., 0])
        am = np.arctan2(d1m[..., 1], d1m[..., 0])
        dang = np.angle(np.exp(1j * (ap - am)))
        return dang / (2 * h) / np.hypot(d1[..., 0], d1[..., 1])

    # --- metric quantities ----------------------------------------------

    def geodesic_curvature(self, sys: MagneticSystem, tau):
        """Boundary geodesic curvature w.r.t. the inward normal (= II on unit tangents)."""
        c, _, n0, kappa0 = self.frame(tau)
        lam, gx, gy = sys.chart.log_grad(c[..., 0], c[..., 1])
        return (kappa0 - (gx * n0[..., 0] + gy * n0[..., 1])) / lam

    def metric_frame(self, sys: MagneticSystem, tau):
        """Point with g-unit tangent and g-unit inward normal."""
        c, t0, n0, _ = self.frame(tau)
        lam = np.asarray(sys.chart.conformal_factor(c[..., 0], c[..., 1]), dtype=float)[..., None]
        return c, t0 / lam, n0 / lam

    def _panels(self, sys):
        key = id(sys.chart)
        cache = self.__dict__.setdefault("_arc_cache", {})
        if key in cache and cache[key][0] is sys.chart:
            return cache[key][1]
        edges = np.linspace(0.0, 2 * np.pi, self.n_panels + 1)
        half = 0.5 * (edges[1] - edges[0])
        mids = 0.5 * (edges[1:] + edges[:-1])
        nodes = mids[:, None] + half * _GL_NODES[None, :]
        seg = half * (self._density(sys, nodes) * _GL_WEIGHTS).sum(axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        cache[key] = (sys.chart, (edges, cum))
        return edges, cum

    def _density(self, sys, tau):
        c, d1, _ = self.curve(tau)
        lam = np.asarray(sys.chart.conformal_factor(c[..., 0], c[..., 1]), dtype=float)
        return lam * np.hypot(d1[..., 0], d1[..., 1])

    def length(self, sys: MagneticSystem) -> float:
        return float(self._panels(sys)[1][-1])

    def arclength(self, sys: MagneticSystem, tau):
        """Metric arc length from ``tau = 0`` (tau is reduced mod 2 pi)."""
        edges, cum = self._panels(sys)
        tau = np.mod(np.asarray(tau, dtype=float), 2 * np.pi)
        k = np.clip(np.searchsorted(edges, tau, side="right") - 1, 0, self.n_panels - 1)
        a = edges[k]
        half = 0.5 * (tau - a)
        nodes = (a + half)[..., None] + half[..., None] * _GL_NODES
        part = half * (self._density(sys, nodes) * _GL_WEIGHTS).sum(axis=-1)
        out = cum[k] + part
        return float(out) if np.ndim(out) == 0 else out

    def tau_at(self, sys: MagneticSystem, s: float) -> float:
        """Inverse of :meth:`arclength`."""
        edges, cum = self._panels(sys)
        L = cum[-1]
        s = float(s) % L
        k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, self.n_panels - 1))
        if s == cum[k]:
            return float(edges[k])
        return float(brentq(lambda t: self.arclength(sys, t) - s, edges[k], edges[k + 1],
                            xtol=1e-15, rtol=4 * np.finfo(float).eps))

    def check(self, sys: MagneticSystem):
        """Validate orientation, nondegeneracy and chart membership."""
        tau = np.linspace(0, 2 * np.pi, 513)[:-1]
        c, t0, n0, _ = self.frame(tau)
        if not np.all(np.isfinite(c)):
            raise ContractError("boundary curve is not finite", "boundary_scattering")
        area = 0.5 * np.sum(c[:, 0] * np.roll(c[:, 1], -1) - np.roll(c[:, 0], -1) * c[:, 1])
        if not area > 0:
            raise ContractError("boundary must be a counterclockwise curve enclosing positive area",
                                "boundary_scattering", area=float(area))
        if not np.all(np.asarray(sys.chart.contains(c[:, 0], c[:, 1]))):
            raise ContractError("domain leaves the chart's validity region", "boundary_scattering")
        probe = c + 1e-6 * n0
        if not np.all(self.inside(probe[:, 0], probe[:, 1])):
            raise ContractError("inward normal does not point inside", "boundary_scattering")


@dataclass(frozen=True, eq=False)
class DiskDomain(Domain):
    center: tuple = (0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ContractError(f"disk radius must be positive, got {self.radius}",
                                "boundary_scattering", key="radius", value=self.radius)

    def __eq__(self, other):
        return isinstance(other, DiskDomain) and (self.center, self.radius) == (other.center, other.radius)

    def __hash__(self):
        return hash((self.center, self.radius))

    def curve(self, tau):
        tau = np.asarray(tau, dtype=float)
        R = self.radius
        c, s = np.cos(tau), np.sin(tau)
        pt = np.stack([self.center[0] + R * c, self.center[1] + R * s], -1)
        return pt, np.stack([-R * s, R * c], -1), np.stack([-R * c, -R * s], -1)

    def signed(self, x, y):
        dx, dy = x - self.center[0], y - self.center[1]
        if isinstance(dx, float):
            return math.hypot(dx, dy) - self.radius
        return np.hypot(dx, dy) - self.radius

    def closest(self, x, y):
        return np.mod(np.arctan2(y - self.center[1], x - self.center[0]), 2 * np.pi)


class ParametricDomain(Domain):
    """Closed counterclockwise curve given by vectorized ``c(tau)``, ``c'(tau)``, ``c''(tau)``.

    The signed function is the chart distance to the closest boundary point,
    found from a coarse table and refined by Newton's method.
    """

    def __init__(self, point, d1, d2, name="parametric"):
        self._c, self._d1, self._d2 = point, d1, d2
        self.name = name
        tau = np.linspace(0, 2 * np.pi, 513)[:-1]
        self._table_tau = tau
        self._table = self._c(tau)
        seg = np.hypot(*np.diff(np.vstack([self._table, self._table[:1]]), axis=0).T)
        if not np.sum(seg) > 0:
            raise ContractError("degenerate boundary curve (zero length)", "boundary_scattering")

    @classmethod
    def ellipse(cls, center=(0.0, 0.0), a=1.0, b=0.5):
        if not (a > 0 and b > 0):
            raise ContractError("ellipse semi-axes must be positive", "boundary_scattering")
        cx, cy = float(center[0]), float(center[1])

        def c(t):
            return np.stack([cx + a * np.cos(t), cy + b * np.sin(t)], -1)

        def d1(t):
            return np.stack([-a * np.sin(t), b * np.cos(t)], -1)

        def d2(t):
            return np.stack([-a * np.cos(t), -b * np.sin(t)], -1)

        dom = cls(c, d1, d2, name="ellipse")
        dom.params = {"center": (cx, cy), "a": float(a), "b": float(b)}
        return dom

    def curve(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self._c(tau), self._d1(tau), self._d2(tau)

    def closest(self, x, y):
        scalar = np.ndim(x) == 0
        p = np.stack([np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(y, float))], -1)
        d2 = ((p[:, None, :] - self._table[None, :, :]) ** 2).sum(-1)
        tau = self._table_tau[np.argmin(d2, axis=1)]
        for _ in range(30):
            c, c1, c2 = self.curve(tau)
            r = p - c
            g = -(r * c1).sum(-1)
            H = (c1 * c1).sum(-1) - (r * c2).sum(-1)
            H = np.where(H > 1e-14, H, 1e-14)
            dt = np.clip(g / H, -0.05, 0.05)
            tau = tau - dt
            if np.max(np.abs(dt)) < 1e-15:
                break
        tau = np.mod(tau, 2 * np.pi)
        return float(tau[0]) if scalar else tau

    def signed(self, x, y):
        scalar = isinstance(x, float)
        tau = self.closest(x, y)
        c, t0, n0, _ = self.frame(np.atleast_1d(tau))
        px = np.atleast_1d(np.asarray(x, float))
        py = np.atleast_1d(np.asarray(y, float))
        rx, ry = px - c[:, 0], py - c[:, 1]
        dist = np.hypot(rx, ry)
        sgn = np.where(rx * n0[:, 0] + ry * n0[:, 1] > 0, -1.0, 1.0)
        out = sgn * dist
        if scalar:
            return float(out[0])
        return out.reshape(np.shape(x))


# ---------------------------------------------------------------------------
# convexity


@dataclass(frozen=True)
class ConvexityReport:
    margin: float
    position: tuple
    direction: tuple
    boundary_curvature: float
    field: float

    @property
    def strictly_convex(self) -> bool:
        return self.margin > 0


def _arclength_taus(sys, dom, n):
    L = dom.length(sys)
    return np.array([dom.tau_at(sys, i * L / n) for i in range(n)])


def convexity_margin(sys: MagneticSystem, dom: Domain, n_samples: int = 64) -> ConvexityReport:
    """``min kappa_g(x) - <Y(xi), nu(x)>`` over boundary samples and both unit tangents.

    ``<Y(xi), nu> = +b`` for the counterclockwise tangent and ``-b`` for the
    other, so the minimum is ``kappa_g - |b|``.
    """
    if n_samples < 8:
        raise ContractError(f"n_samples must be at least 8, got {n_samples}", "boundary_scattering")
    dom.check(sys)
    if not dom.length(sys) > 0:
        raise ContractError("degenerate boundary (zero length)", "boundary_scattering")
    tau = _arclength_taus(sys, dom, n_samples)
    kappa = np.asarray(dom.geodesic_curvature(sys, tau), dtype=float)
    c, T, _ = dom.metric_frame(sys, tau)
    b = np.broadcast_to(np.asarray(sys.field(c[:, 0], c[:, 1]), dtype=float), kappa.shape)
    margins = kappa - np.abs(b)
    i = int(np.argmin(margins))
    # the worst tangent is the one Y turns outward-most: +T when b > 0
    sgn = 1.0 if b[i] >= 0 else -1.0
    return ConvexityReport(float(margins[i]), tuple(map(float, c[i])), tuple(map(float, sgn * T[i])),
                           float(kappa[i]), float(b[i]))


# ---------------------------------------------------------------------------
# exit events


class ExitStatus(str, enum.Enum):
    EXITED = "exited"
    GRAZING = "grazing"
    TRAPPED = "trapped"
    ERROR = "error"


@dataclass(frozen=True)
class ExitEvent:
    travel_time: float
    exit: PhasePoint
    status: ExitStatus
    tmax: float


def domain_step(sys: MagneticSystem, dom: Domain) -> float:
    """Default step over a domain: the flow rule with ``|b|`` and ``|K|`` sampled on it."""
    ctr, r = dom.extent()
    rr, th = np.meshgrid(np.linspace(0, r, 9), np.linspace(0, 2 * np.pi, 17)[:-1])
    xs = (ctr[0] + rr * np.cos(th)).ravel()
    ys = (ctr[1] + rr * np.sin(th)).ravel()
    inside = np.asarray(dom.signed(xs, ys)) <= 0
    xs, ys = xs[inside], ys[inside]
    bmax = float(np.max(np.abs(np.broadcast_to(sys.field(xs, ys), xs.shape))))
    if sys.field.bump is not None:
        bmax = max(bmax, bmax + abs(sys.field.bump.amplitude * sys.field.scale))
    K = np.abs(np.broadcast_to(np.asarray(sys.chart.gauss_curvature_at(xs, ys), dtype=float), xs.shape))
    scale = 1.0
    if bmax > 0:
        scale = min(scale, 1.0 / bmax)
    if np.max(K) > 0:
        scale = min(scale, 1.0 / math.sqrt(float(np.max(K))))
    return min(1e-3 * scale, default_step(sys, tuple(ctr)))


def default_tmax(sys: MagneticSystem, dom: Domain) -> float:
    """``50 * (diameter + 2 pi / max|b|)``; the diameter is bounded by half the perimeter."""
    diam = 0.5 * dom.length(sys)
    ctr, r = dom.extent()
    tau = np.linspace(0, 2 * np.pi, 65)[:-1]
    c = dom.curve(tau)[0]
    bmax = float(np.max(np.abs(np.broadcast_to(sys.field(c[:, 0], c[:, 1]), tau.shape))))
    bmax = max(bmax, abs(float(sys.field(float(ctr[0]), float(ctr[1])))))
    extra = 2 * math.pi / bmax if bmax > 1e-12 else 0.0
    return 50.0 * (diam + extra)


def _normal_component(sys, dom, p, v):
    tau = dom.closest(p[0], p[1])
    _, _, nu = dom.metric_frame(sys, np.atleast_1d(tau))
    lam = float(sys.chart.conformal_factor(float(p[0]), float(p[1])))
    return lam * lam * (nu[0, 0] * v[0] + nu[0, 1] * v[1]), tau


def _refine(sys, dom, rhs, s_prev, h, first, F0, tol):
    """Exit time offset within ``[0, h]`` from ``s_prev``."""
    def F(dt):
        s = advance(sys, rhs, s_prev, dt)
        return dom.signed(s[0], s[1])

    if first:
        lo = h * 1e-7

        def G(dt):
            return (F(dt) - F0) / dt

        if G(lo) >= 0:
            return lo
        return brentq(G, lo, h, xtol=tol, rtol=4 * np.finfo(float).eps)
    if F(0.0) > 0:
        return 0.0
    return brentq(F, 0.0, h, xtol=tol, rtol=4 * np.finfo(float).eps)


def _march_exits(sys, dom, S0, h, tmax, graze, tol):
    """Batch exit search.  Returns per-entry (time, exit state, status)."""
    rhs = geodesic_rhs(sys)
    renorm = renormalizer(sys)
    n = S0.shape[1]
    F0 = np.asarray(dom.signed(S0[0].copy(), S0[1].copy()), dtype=float)
    results = [None] * n
    brackets = []
    active = np.flatnonzero(~graze)
    for j in np.flatnonzero(graze):
        results[j] = (0.0, S0[:, j].copy(), ExitStatus.GRAZING)
    s = [S0[k, active].copy() for k in range(4)]
    n_steps = int(math.ceil(tmax / h - 1e-9))
    k = 0
    while active.size and k < n_steps:
        prev = [c.copy() for c in s]
        s = rk4_step(rhs, s, h)
        renorm(s)
        k += 1
        F = np.asarray(dom.signed(s[0], s[1]), dtype=float)
        bad = ~np.isfinite(F)
        crossed = (F > 0) | bad
        if np.any(crossed):
            for m in np.flatnonzero(crossed):
                j = int(active[m])
                if bad[m]:
                    results[j] = (math.nan, S0[:, j].copy(), ExitStatus.ERROR)
                else:
                    brackets.append((j, k, [float(c[m]) for c in prev]))
            keep = ~crossed
            active = active[keep]
            s = [c[keep] for c in s]
    for j in active:
        results[int(j)] = (math.inf, None, ExitStatus.TRAPPED)
    for j, k, s_prev in brackets:
        dt = _refine(sys, dom, rhs, s_prev, h, k == 1, float(F0[j]), tol)
        s_exit = advance(sys, rhs, s_prev, dt)
        results[j] = ((k - 1) * h + dt, np.array(s_exit[:4]), ExitStatus.EXITED)
    return results


def _entry_checks(sys, dom, entry: PhasePoint):
    _check_start(sys, entry)
    F = dom.signed(*entry.position)
    if abs(F) > 1e-9:
        raise ContractError(f"entry point is not on the boundary (signed distance {F:.3g})",
                            "boundary_scattering", signed_distance=float(F))
    nv, _ = _normal_component(sys, dom, entry.position, entry.velocity)
    if nv < -EPS_GRAZE:
        raise ContractError(f"entry velocity points outward (<nu, xi> = {nv:.3g})",
                            "boundary_scattering", normal_component=float(nv))
    return nv


def _is_grazing(sys, dom, entry, nv, h):
    if nv >= EPS_GRAZE:
        return False
    s = advance(sys, geodesic_rhs(sys), entry.as_list(), h)
    return dom.signed(s[0], s[1]) > dom.signed(*entry.position)


def exit_event(sys: MagneticSystem, dom: Domain, entry: PhasePoint, tmax: float | None = None,
               step: float | None = None, time_tol: float = 1e-12) -> ExitEvent:
    """Travel time to the boundary and the exit phase point.

    Status is ``grazing`` (time 0) for tangent entries whose orbit leaves at
    once, ``trapped`` when no crossing occurs before ``tmax``.
    """
    nv = _entry_checks(sys, dom, entry)
    h = step or domain_step(sys, dom)
    tmax = default_tmax(sys, dom) if tmax is None else float(tmax)
    graze = np.array([_is_grazing(sys, dom, entry, nv, h)])
    S0 = np.array(entry.as_list(), dtype=float)[:, None]
    t, s, status = _march_exits(sys, dom, S0, h, tmax, graze, time_tol)[0]
    ex = PhasePoint(s[:2], s[2:4]) if s is not None else None
    return ExitEvent(float(t), ex, status, tmax)


def backward_exit_time(sys: MagneticSystem, dom: Domain, point: PhasePoint, tmax=None, step=None) -> float:
    """``l^-``: minus the exit time of ``reverse(sys)`` from the negated point (0 for inward entries)."""
    nv, _ = _normal_component(sys, dom, point.position, point.velocity)
    if nv > 0:
        return 0.0
    ev = exit_event(reverse(sys), dom, point.negated(), tmax, step)
    return -ev.travel_time


# ---------------------------------------------------------------------------
# scattering


@dataclass(frozen=True)
class ScatteringRecord:
    entry: PhasePoint
    exit: PhasePoint | None
    travel_time: float
    backward_time: float
    status: ExitStatus
    arclen_in: float
    angle_in: float
    arclen_out: float = math.nan
    angle_out: float = math.nan
    message: str = ""

    @property
    def restricted(self):
        """Exit position (the restricted scattering relation)."""
        return None if self.exit is None else self.exit.position


def entry_point(sys: MagneticSystem, dom: Domain, arclen: float, angle: float) -> PhasePoint:
    """Unit vector at boundary arc length ``arclen`` making angle ``angle`` with the tangent."""
    tau = dom.tau_at(sys, arclen)
    c, T, nu = dom.metric_frame(sys, np.array([tau]))
    v = math.cos(angle) * T[0] + math.sin(angle) * nu[0]
    lam = float(sys.chart.conformal_factor(float(c[0, 0]), float(c[0, 1])))
    v = v / (lam * math.hypot(v[0], v[1]))
    return PhasePoint(c[0], v)


def _exit_coordinates(sys, dom, ev_state):
    p, v = ev_state[:2], ev_state[2:4]
    tau = dom.closest(float(p[0]), float(p[1]))
    c, T, nu = dom.metric_frame(sys, np.array([tau]))
    lam2 = float(sys.chart.conformal_factor(float(p[0]), float(p[1]))) ** 2
    a = lam2 * (v[0] * T[0, 0] + v[1] * T[0, 1])
    n = lam2 * (v[0] * nu[0, 0] + v[1] * nu[0, 1])
    return float(dom.arclength(sys, tau)), math.atan2(n, a)


@dataclass
class ScatteringTable:
    n_boundary: int
    n_angle: int
    arclen_in: np.ndarray
    angle_in: np.ndarray
    records: list
    length: float
    step: float
    tmax: float

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def statuses(self):
        return [r.status.value for r in self.records]

    def counts(self):
        out = {s.value: 0 for s in ExitStatus}
        for r in self.records:
            out[r.status.value] += 1
        return out

    def rows(self):
        for r in self.records:
            yield (r.arclen_in, r.angle_in, r.arclen_out, r.angle_out, r.travel_time, r.status.value)


def grid_entries(sys: MagneticSystem, dom: Domain, n_boundary: int, n_angle: int):
    """Arc-length uniform boundary points, angles ``(j + 1/2) pi / n_angle``; arc length major."""
    if n_boundary < 1 or n_angle < 1:
        raise ContractError("grid sizes must be positive", "boundary_scattering")
    L = dom.length(sys)
    s = np.arange(n_boundary) * (L / n_boundary)
    th = (np.arange(n_angle) + 0.5) * (math.pi / n_angle)
    entries = []
    for si in s:
        for tj in th:
            entries.append((float(si), float(tj), entry_point(sys, dom, si, tj)))
    return entries


def _scatter_batch(sys, dom, entries, h, tmax, time_tol):
    S0 = np.array([e[2].as_list() for e in entries], dtype=float).T
    graze = np.zeros(len(entries), dtype=bool)
    for i, (_, ang, e) in enumerate(entries):
        nv = math.sin(ang)
        graze[i] = _is_grazing(sys, dom, e, nv, h)
    res = _march_exits(sys, dom, S0, h, tmax, graze, time_tol)
    out = []
    for (s_in, a_in, e), (t, st, status) in zip(entries, res):
        if status is ExitStatus.EXITED:
            ex = PhasePoint(st[:2], st[2:4])
            s_out, a_out = _exit_coordinates(sys, dom, st)
            rec = ScatteringRecord(e, ex, float(t), 0.0, status, s_in, a_in, s_out, a_out)
        elif status is ExitStatus.GRAZING:
            rec = ScatteringRecord(e, e, 0.0, 0.0, status, s_in, a_in, s_in, 0.0)
        elif status is ExitStatus.TRAPPED:
            rec = ScatteringRecord(e, None, math.inf, 0.0, status, s_in, a_in)
        else:
            rec = ScatteringRecord(e, None, math.nan, 0.0, status, s_in, a_in,
                                   message="orbit became non-finite")
        out.append(rec)
    return out


def scattering(sys: MagneticSystem, dom: Domain, entry: PhasePoint, tmax=None, step=None) -> ScatteringRecord:
    """Scattering record of a single entry."""
    ev = exit_event(sys, dom, entry, tmax, step)
    tau = dom.closest(*entry.position)
    s_in = float(dom.arclength(sys, tau))
    nv, _ = _normal_component(sys, dom, entry.position, entry.velocity)
    c, T, _ = dom.metric_frame(sys, np.array([tau]))
    lam2 = float(sys.chart.conformal_factor(*entry.position)) ** 2
    tv = lam2 * (T[0, 0] * entry.velocity[0] + T[0, 1] * entry.velocity[1])
    a_in = math.atan2(nv, tv)
    if ev.status is ExitStatus.EXITED:
        s_out, a_out = _exit_coordinates(sys, dom, np.array([*ev.exit.position, *ev.exit.velocity]))
        return ScatteringRecord(entry, ev.exit, ev.travel_time, 0.0, ev.status, s_in, a_in, s_out, a_out)
    if ev.status is ExitStatus.GRAZING:
        return ScatteringRecord(entry, entry, 0.0, 0.0, ev.status, s_in, a_in, s_in, 0.0)
    return ScatteringRecord(entry, None, ev.travel_time, 0.0, ev.status, s_in, a_in)


def scattering_table(sys: MagneticSystem, dom: Domain, grid=(16, 16), tmax: float | None = None,
                     step: float | None = None, threads: int = 1, chunk: int = 256,
                     time_tol: float = 1e-12) -> ScatteringTable:
    """Scattering records over an ``n_boundary x n_angle`` grid of inward entries.

    Chunks of entries are advanced in lock step; with ``threads > 1`` chunks
    run in a thread pool.  Records are merged in grid order, so the table does
    not depend on ``threads``.  Per-record failures become ``error`` records.
    """
    dom.check(sys)
    n_b, n_a = int(grid[0]), int(grid[1])
    entries = grid_entries(sys, dom, n_b, n_a)
    h = step or domain_step(sys, dom)
    tmax = default_tmax(sys, dom) if tmax is None else float(tmax)
    chunks = [entries[i:i + chunk] for i in range(0, len(entries), chunk)]

    def run(ch):
        try:
            return _scatter_batch(sys, dom, ch, h, tmax, time_tol)
        except MaglabError as exc:
            return [ScatteringRecord(e, None, math.nan, 0.0, ExitStatus.ERROR, s, a, message=str(exc))
                    for s, a, e in ch]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    records = [r for part in parts for r in part]
    L = dom.length(sys)
    return ScatteringTable(n_b, n_a, np.arange(n_b) * (L / n_b), (np.arange(n_a) + 0.5) * (math.pi / n_a),
                           records, L, h, tmax)


@dataclass(frozen=True)
class ScatteringComparison:
    position: float
    direction: float
    travel_time: float
    status_mismatches: int
    compared: int

    @property
    def sup(self) -> float:
        return max(self.position, self.direction, self.travel_time)


def compare_scattering(A: ScatteringTable, B: ScatteringTable) -> ScatteringComparison:
    """Sup discrepancies between two tables on the same grid.

    Exit positions are compared by boundary arc length (circularly), exit
    directions by angle.  Records that are not ``exited`` in both tables are
    compared by status only.
    """
    if (A.n_boundary, A.n_angle) != (B.n_boundary, B.n_angle) or len(A.records) != len(B.records):
        raise ContractError("scattering tables have different grids", "boundary_scattering",
                            a=[A.n_boundary, A.n_angle], b=[B.n_boundary, B.n_angle])
    if not (np.allclose(A.arclen_in, B.arclen_in, rtol=0, atol=1e-12)
            and np.allclose(A.angle_in, B.angle_in, rtol=0, atol=1e-12)):
        raise ContractError("scattering tables have different grids", "boundary_scattering")
    L = A.length
    dp = dd = dl = 0.0
    mism = 0
    compared = 0
    for a, b in zip(A.records, B.records):
        if a.status is not b.status:
            mism += 1
            continue
        if a.status is not ExitStatus.EXITED:
            continue
        compared += 1
        d = abs(a.arclen_out - b.arclen_out) % L
        dp = max(dp, min(d, L - d))
        dd = max(dd, abs(math.remainder(a.angle_out - b.angle_out, 2 * math.pi)))
        dl = max(dl, abs(a.travel_time - b.travel_time))
    return ScatteringComparison(dp, dd, dl, mism, compared)


def travel_time_ratio(table: ScatteringTable):
    """``l / <nu, xi>`` over exited records: ``(max, min)``."""
    vals = [r.travel_time / math.sin(r.angle_in) for r in table.records
            if r.status is ExitStatus.EXITED and math.sin(r.angle_in) >= EPS_GRAZE]
    if not vals:
        return math.nan, math.nan
    return float(max(vals)), float(min(vals))


# ---------------------------------------------------------------------------
# boundary conjugate points and simplicity


@dataclass(frozen=True)
class ConjugateFlag:
    index: int
    arclen_in: float
    angle_in: float
    perpendicular: float
    derivative_norm: float
    travel_time: float


def boundary_conjugate_scan(sys: MagneticSystem, dom: Domain, grid=(16, 16), h: float = 1e-4,
                            tmax: float | None = None, step: float | None = None,
                            eps: float = EPS_CONJ, return_values: bool = False):
    """Flag entries whose exit-point curve ``c(s)`` has ``dc/ds`` nearly parallel to the exit velocity.

    ``c(s)`` is the exit point for the entry direction rotated by ``s``.  The
    component of ``dc/ds`` along ``rot90`` of the exit velocity equals the
    perpendicular part of the Jacobi field vanishing at entry; it starts
    positive and changes sign at a conjugate point.  An entry is flagged when
    this component is at most ``eps * |dc/ds|``.
    """
    if not h > 0:
        raise ContractError("h must be positive", "boundary_scattering")
    conv = convexity_margin(sys, dom)
    if not conv.strictly_convex:
        raise ContractError(f"domain is not strictly magnetically convex (margin {conv.margin:.6g})",
                            "boundary_scattering", margin=conv.margin)
    n_b, n_a = int(grid[0]), int(grid[1])
    base = grid_entries(sys, dom, n_b, n_a)
    expanded = []
    for s, a, e in base:
        for da in (-h, 0.0, h):
            expanded.append((s, a + da, entry_point(sys, dom, s, a + da)))
    step = step or domain_step(sys, dom)
    tmax = default_tmax(sys, dom) if tmax is None else float(tmax)
    recs = _scatter_batch(sys, dom, expanded, step, tmax, 1e-13)
    flags, values = [], []
    for i in range(len(base)):
        rm, r0, rp = recs[3 * i: 3 * i + 3]
        if any(r.status is not ExitStatus.EXITED for r in (rm, r0, rp)):
            values.append(math.nan)
            continue
        dc = (np.array(rp.exit.position) - np.array(rm.exit.position)) / (2 * h)
        p, v = r0.exit.position, r0.exit.velocity
        lam2 = float(sys.chart.conformal_factor(*p)) ** 2
        perp = lam2 * (-v[1] * dc[0] + v[0] * dc[1])
        nrm = math.sqrt(lam2 * (dc[0] ** 2 + dc[1] ** 2))
        values.append(perp)
        if perp <= eps * nrm:
            flags.append(ConjugateFlag(i, base[i][0], base[i][1], perp, nrm, r0.travel_time))
    if return_values:
        return flags, values
    return flags


class VerdictKind(str, enum.Enum):
    SIMPLE = "simple"
    NOT_STRICTLY_CONVEX = "not_strictly_convex"
    TRAPPED = "trapped"
    BOUNDARY_CONJUGATE = "boundary_conjugate"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    witness: dict = field(default_factory=dict)

    def __str__(self):
        return self.kind.value


def simplicity_verdict(sys: MagneticSystem, dom: Domain, grid=(16, 16), n_samples: int = 64,
                       tmax: float | None = None, h: float = 1e-4, step: float | None = None,
                       threads: int = 1) -> Verdict:
    """Convexity, then trapped orbits, then boundary conjugate pairs; otherwise simple."""
    try:
        conv = convexity_margin(sys, dom, n_samples)
    except MaglabError as exc:
        return Verdict(VerdictKind.NOT_STRICTLY_CONVEX, {"error": str(exc)})
    if not conv.strictly_convex:
        return Verdict(VerdictKind.NOT_STRICTLY_CONVEX,
                       {"margin": conv.margin, "position": list(conv.position),
                        "direction": list(conv.direction)})
    table = scattering_table(sys, dom, grid, tmax=tmax, step=step, threads=threads)
    for r in table.records:
        if r.status in (ExitStatus.TRAPPED, ExitStatus.ERROR):
            return Verdict(VerdictKind.TRAPPED, {"arclen_in": r.arclen_in, "angle_in": r.angle_in,
                                                 "status": r.status.value, "tmax": table.tmax})
    flags = boundary_conjugate_scan(sys, dom, grid, h=h, tmax=tmax, step=step)
    if flags:
        f = flags[0]
        return Verdict(VerdictKind.BOUNDARY_CONJUGATE,
                       {"arclen_in": f.arclen_in, "angle_in": f.angle_in, "perpendicular": f.perpendicular,
                        "travel_time": f.travel_time, "count": len(flags)})
    return Verdict(VerdictKind.SIMPLE, {"margin": conv.margin, "records": len(table.records)})
