"""Magnetic geodesic flow: RK4 integration, dense output, exponential map.

The state is ``[x, y, vx, vy]`` in chart coordinates and solves

    x''^k + Gamma^k_ij x'^i x'^j = b(x) rot90(x')^k

with the velocity projected back to unit g-length after every step.  The
stepping helpers work on lists of components; a component may be a float
(single orbit, fast scalar arithmetic) or a numpy array (a batch of orbits
advanced in lock step).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FlowDomainError, StiffnessError
from .magnetic import MagneticSystem


@dataclass(frozen=True)
class PhasePoint:
    position: tuple
    velocity: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        object.__setattr__(self, "velocity", (float(self.velocity[0]), float(self.velocity[1])))

    @classmethod
    def unit(cls, sys: MagneticSystem, position, direction):
        """Scale ``direction`` to unit g-length at ``position``."""
        x, y = float(position[0]), float(position[1])
        sys.chart.require(x, y)
        lam = float(sys.chart.conformal_factor(x, y))
        n = lam * math.hypot(direction[0], direction[1])
        if n == 0:
            raise ContractError("direction must be nonzero", "flow")
        return cls((x, y), (direction[0] / n, direction[1] / n))

    @classmethod
    def at_angle(cls, sys: MagneticSystem, position, angle: float):
        return cls.unit(sys, position, (math.cos(angle), math.sin(angle)))

    def as_list(self):
        return [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]

    def speed(self, sys: MagneticSystem) -> float:
        return sys.norm(self.position, self.velocity)

    def negated(self):
        return PhasePoint(self.position, (-self.velocity[0], -self.velocity[1]))


@dataclass(frozen=True)
class IntegratorSettings:
    """Step control.  ``step=None`` picks the default step for the system."""

    step: float | None = None
    adaptive: bool = False
    tolerance: float = 1e-12
    unit_speed_tol: float = 1e-10
    min_step: float = 1e-12


# ---------------------------------------------------------------------------
# right-hand sides


def geodesic_rhs(sys: MagneticSystem):
    log_grad = sys.chart.log_grad
    field_ = sys.field
    if field_.is_constant:
        b0 = float(field_(0.0, 0.0))

        def bval(x, y):
            return b0
    else:
        def bval(x, y):
            return field_.value_grad(x, y)[0]

    def rhs(s):
        x, y, vx, vy = s[0], s[1], s[2], s[3]
        lam, gx, gy = log_grad(x, y)
        b = bval(x, y)
        gv = gx * vx + gy * vy
        v2 = vx * vx + vy * vy
        return [vx, vy, v2 * gx - 2.0 * vx * gv - b * vy, v2 * gy - 2.0 * vy * gv + b * vx]

    return rhs


def jacobi_rhs(sys: MagneticSystem):
    """Geodesic plus frame Jacobi system, state ``[x, y, vx, vy, f1, f2, f1', f2']``.

    In the frame ``e1 = x'``, ``e2 = rot90(x')``:

        f1'' = b f2' + db(e1) f2
        f2'' = -b f1' - (K - db(e2)) f2
    """
    log_jet = sys.chart.log_jet
    value_grad = sys.field.value_grad

    def rhs(s):
        x, y, vx, vy, f1, f2, p1, p2 = s
        lam, gx, gy, hxx, hxy, hyy = log_jet(x, y)
        b, bx, by = value_grad(x, y)
        K = -(hxx + hyy) / (lam * lam)
        db1 = bx * vx + by * vy
        db2 = by * vx - bx * vy
        gv = gx * vx + gy * vy
        v2 = vx * vx + vy * vy
        return [vx, vy, v2 * gx - 2.0 * vx * gv - b * vy, v2 * gy - 2.0 * vy * gv + b * vx,
                p1, p2, b * p2 + db1 * f2, -b * p1 - (K - db2) * f2]

    return rhs


def renormalizer(sys: MagneticSystem):
    conformal = sys.chart.conformal_factor

    def renorm(s):
        vx, vy = s[2], s[3]
        speed = conformal(s[0], s[1]) * (vx * vx + vy * vy) ** 0.5
        s[2] = vx / speed
        s[3] = vy / speed
        return speed

    return renorm


def rk4_step(rhs, s, h, k1=None):
    if k1 is None:
        k1 = rhs(s)
    hh = 0.5 * h
    k2 = rhs([a + hh * b for a, b in zip(s, k1)])
    k3 = rhs([a + hh * b for a, b in zip(s, k2)])
    k4 = rhs([a + h * b for a, b in zip(s, k3)])
    h6 = h / 6.0
    return [a + h6 * (p + 2.0 * (q + r) + w) for a, p, q, r, w in zip(s, k1, k2, k3, k4)]


def advance(sys: MagneticSystem, rhs, s, dt):
    """One RK4 step of size ``dt`` (float or per-item array) followed by renormalization."""
    out = rk4_step(rhs, list(s), dt)
    renormalizer(sys)(out)
    return out


def default_step(sys: MagneticSystem, start=None) -> float:
    """``1e-3 * min(1, 1/|b|, 1/sqrt|K|)``."""
    x, y = (0.0, 0.0) if start is None else (float(start[0]), float(start[1]))
    scale = 1.0
    bmax = sys.field.magnitude_hint(x, y)
    if bmax > 0:
        scale = min(scale, 1.0 / bmax)
    chart = sys.chart
    if chart.kind.value in ("spherical", "hyperbolic"):
        scale = min(scale, chart.length_scale)
    elif chart.kind.value == "custom" or chart.perturbation is not None:
        K = abs(float(chart.gauss_curvature_at(x, y)))
        if K > 0:
            scale = min(scale, 1.0 / math.sqrt(K))
    return 1e-3 * scale


# ---------------------------------------------------------------------------
# dense output


def hermite(times, states, derivs, t):
    """Cubic Hermite interpolation of sampled states at times ``t``.

    Returns an array of shape ``t.shape + (d,)``.  Sample times are reproduced
    exactly.
    """
    t = np.asarray(t, dtype=float)
    i = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
    t0 = times[i]
    h = times[i + 1] - t0
    th = ((t - t0) / h)[..., None]
    th2, th3 = th * th, th * th * th
    h00 = 2 * th3 - 3 * th2 + 1
    h10 = th3 - 2 * th2 + th
    h01 = -2 * th3 + 3 * th2
    h11 = th3 - th2
    hh = h[..., None]
    return h00 * states[i] + h10 * hh * derivs[i] + h01 * states[i + 1] + h11 * hh * derivs[i + 1]


@dataclass
class Trajectory:
    """Sampled orbit with dense output.

    ``states`` has one row per sample; the first four columns are
    ``x, y, vx, vy`` and further columns (Jacobi data) may follow.
    """

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    system: MagneticSystem
    metadata: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    @property
    def step(self) -> float:
        return float(self.metadata.get("step", self.times[1] - self.times[0]))

    def state_at(self, t):
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < self.times[0] - 1e-12) or np.any(t_arr > self.times[-1] + 1e-12):
            raise ContractError(f"time {t} outside [0, {self.duration}]", "flow")
        return hermite(self.times, self.states, self.derivs, t_arr)

    def position_at(self, t):
        return self.state_at(t)[..., :2]

    def velocity_at(self, t):
        return self.state_at(t)[..., 2:4]

    def phase_point(self, t) -> PhasePoint:
        s = self.state_at(float(t))
        return PhasePoint(s[:2], s[2:4])

    @property
    def start(self) -> PhasePoint:
        return PhasePoint(self.states[0, :2], self.states[0, 2:4])

    @property
    def end(self) -> PhasePoint:
        return PhasePoint(self.states[-1, :2], self.states[-1, 2:4])

    def samples(self):
        """Iterate ``(t, PhasePoint)`` pairs."""
        for t, s in zip(self.times, self.states):
            yield float(t), PhasePoint(s[:2], s[2:4])

    def speeds(self) -> np.ndarray:
        lam = np.asarray(self.system.chart.conformal_factor(self.states[:, 0], self.states[:, 1]))
        return lam * np.hypot(self.states[:, 2], self.states[:, 3])


# ---------------------------------------------------------------------------
# marching


def _exit_estimate(chart, prev, new, t_prev, h):
    rv = chart.radius_of_validity
    r0 = math.hypot(prev[0], prev[1])
    r1 = math.hypot(new[0], new[1]) if math.isfinite(new[0]) and math.isfinite(new[1]) else math.inf
    if math.isfinite(rv) and math.isfinite(r1) and r1 > r0:
        return t_prev + h * min(1.0, max(0.0, (rv - r0) / (r1 - r0)))
    return t_prev + 0.5 * h


def march(sys: MagneticSystem, rhs, s0, T: float, settings: IntegratorSettings | None = None,
          step: float | None = None) -> Trajectory:
    """Integrate a single state (list of floats) over ``[0, T]`` and keep every sample."""
    settings = settings or IntegratorSettings()
    if settings.adaptive:
        return _march_adaptive(sys, rhs, s0, T, settings)
    h = step or settings.step or default_step(sys, s0[:2])
    n = max(1, int(math.ceil(T / h - 1e-9)))
    h = T / n
    renorm = renormalizer(sys)
    contains = sys.chart.contains
    s = [float(v) for v in s0]
    states = [s]
    k = rhs(s)
    derivs = [k]
    max_drift = 0.0
    total_drift = 0.0
    for i in range(n):
        new = rk4_step(rhs, s, h, k)
        speed = renorm(new)
        dev = abs(speed - 1.0)
        if not (dev < 0.5 and contains(new[0], new[1])):
            t_prev = i * h
            raise FlowDomainError(
                f"orbit left the validity region of the {sys.chart.kind.value} chart near t={t_prev + h:.6g}",
                last_state=s[:4], last_time=t_prev, exit_time=_exit_estimate(sys.chart, s, new, t_prev, h))
        total_drift += dev
        if dev > max_drift:
            max_drift = dev
        s = new
        k = rhs(s)
        states.append(s)
        derivs.append(k)
    times = np.arange(n + 1) * h
    times[-1] = T
    meta = {
        "policy": "fixed",
        "step": h,
        "steps": n,
        "renormalizations": n,
        "max_speed_drift_per_step": max_drift,
        "speed_drift_per_unit_time": total_drift / T if T > 0 else 0.0,
        "unit_speed_tol": settings.unit_speed_tol,
    }
    return Trajectory(times, np.array(states, dtype=float), np.array(derivs, dtype=float), sys, meta)


def _march_adaptive(sys, rhs, s0, T, settings):
    renorm = renormalizer(sys)
    contains = sys.chart.contains
    h = settings.step or default_step(sys, s0[:2]) * 10.0
    tol = settings.tolerance
    t = 0.0
    s = [float(v) for v in s0]
    times, states, derivs = [0.0], [s], [rhs(s)]
    rejected = 0
    total_drift = 0.0
    while t < T:
        h = min(h, T - t)
        if h < settings.min_step * max(1.0, t) and T - t > h:
            raise StiffnessError("step size underflow", t, h, s)
        k1 = derivs[-1]
        big = rk4_step(rhs, s, h, k1)
        half = rk4_step(rhs, s, 0.5 * h, k1)
        small = rk4_step(rhs, half, 0.5 * h)
        err = max(abs(a - b) for a, b in zip(big, small)) / 15.0
        if err <= tol or h <= settings.min_step:
            new = [b + (b - a) / 15.0 for a, b in zip(big, small)]
            speed = renorm(new)
            if not (abs(speed - 1.0) < 0.5 and contains(new[0], new[1])):
                raise FlowDomainError("orbit left the validity region", s[:4], t,
                                      _exit_estimate(sys.chart, s, new, t, h))
            total_drift += abs(speed - 1.0)
            t = T if T - (t + h) < 1e-14 * max(1.0, T) else t + h
            s = new
            times.append(t)
            states.append(s)
            derivs.append(rhs(s))
        else:
            rejected += 1
        factor = 0.9 * (tol / err) ** 0.2 if err > 0 else 2.0
        h *= min(2.0, max(0.2, factor))
    meta = {
        "policy": "adaptive",
        "tolerance": tol,
        "steps": len(times) - 1,
        "rejected": rejected,
        "renormalizations": len(times) - 1,
        "speed_drift_per_unit_time": total_drift / T if T > 0 else 0.0,
        "unit_speed_tol": settings.unit_speed_tol,
    }
    return Trajectory(np.array(times), np.array(states), np.array(derivs), sys, meta)


def _check_start(sys: MagneticSystem, start: PhasePoint, tol=1e-9):
    sys.chart.require(*start.position)
    sp = start.speed(sys)
    if abs(sp - 1.0) > tol:
        raise ContractError(f"start velocity has g-length {sp!r}, expected 1", "flow", speed=sp)


def integrate(sys: MagneticSystem, start: PhasePoint, T: float,
              ctrl: IntegratorSettings | None = None) -> Trajectory:
    """Integrate the magnetic geodesic from ``start`` for time ``T``."""
    if not T > 0:
        raise ContractError(f"duration must be positive, got {T}", "flow")
    _check_start(sys, start)
    return march(sys, geodesic_rhs(sys), start.as_list(), float(T), ctrl)


def magnetic_exp(sys: MagneticSystem, x, xi, t: float, ctrl: IntegratorSettings | None = None) -> np.ndarray:
    """Position after following the unit vector ``xi`` at ``x`` for time ``t >= 0``."""
    if t < 0:
        raise ContractError("the magnetic exponential is defined for t >= 0 only", "flow")
    start = PhasePoint(x, xi)
    _check_start(sys, start)
    if t == 0:
        return np.array(start.position)
    s = march(sys, geodesic_rhs(sys), start.as_list(), float(t), ctrl).states[-1]
    return s[:2].copy()


# ---------------------------------------------------------------------------
# batches


def march_batch(sys: MagneticSystem, rhs, S0, T: float, h: float):
    """Advance ``n`` states in lock step on a common fixed grid.

    ``S0`` has shape ``(d, n)``.  Returns ``times`` of shape ``(m+1,)`` and
    ``states``/``derivs`` of shape ``(m+1, d, n)``.  Orbits are not checked
    against the validity region; callers keep them inside.
    """
    n_steps = max(1, int(math.ceil(T / h - 1e-9)))
    h = T / n_steps
    renorm = renormalizer(sys)
    s = [np.array(c, dtype=float) for c in S0]
    d, n = len(s), s[0].shape[0]
    states = np.empty((n_steps + 1, d, n))
    derivs = np.empty((n_steps + 1, d, n))
    k = rhs(s)
    states[0], derivs[0] = s, k
    for i in range(1, n_steps + 1):
        s = rk4_step(rhs, s, h, k)
        renorm(s)
        k = rhs(s)
        states[i], derivs[i] = s, k
    times = np.arange(n_steps + 1) * h
    times[-1] = T
    return times, states, derivs


def integrate_batch(sys: MagneticSystem, starts, T: float, ctrl: IntegratorSettings | None = None,
                    step: float | None = None) -> list:
    """Integrate several unit-speed starts with one common step; one :class:`Trajectory` each."""
    if not T > 0:
        raise ContractError(f"duration must be positive, got {T}", "flow")
    starts = list(starts)
    for st in starts:
        _check_start(sys, st)
    ctrl = ctrl or IntegratorSettings()
    h = step or ctrl.step or min(default_step(sys, st.position) for st in starts)
    S0 = np.array([st.as_list() for st in starts]).T
    times, states, derivs = march_batch(sys, geodesic_rhs(sys), S0, float(T), h)
    inside = np.asarray(sys.chart.contains(states[:, 0], states[:, 1]))
    if not np.all(np.isfinite(states)) or not np.all(inside):
        raise FlowDomainError("a batch orbit left the validity region", last_state=None,
                              last_time=None, exit_time=None)
    out = []
    step_used = float(times[1] - times[0])
    for j in range(len(starts)):
        meta = {"policy": "fixed", "step": step_used, "steps": len(times) - 1,
                "renormalizations": len(times) - 1, "unit_speed_tol": ctrl.unit_speed_tol,
                "batch": True}
        out.append(Trajectory(times, np.ascontiguousarray(states[:, :, j]),
                              np.ascontiguousarray(derivs[:, :, j]), sys, meta))
    return out
