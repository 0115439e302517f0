"""Magnetic Jacobi fields in the adapted frame and conjugate point detection.

Along a unit speed magnetic geodesic the frame ``e1 = gamma'``,
``e2 = rot90(gamma')`` already satisfies ``e_i' = Y(e_i)``.  A field
``J = f1 e1 + f2 e2`` is a magnetic Jacobi field iff

    f1'' - b f2' - db(e1) f2 = 0
    f2'' + b f1' + (K - db(e2)) f2 = 0

together with ``<J', gamma'> = f1' - b f2 = 0``, which the system conserves.
The Jacobi data is integrated in one state vector with the orbit itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .flow import (IntegratorSettings, PhasePoint, Trajectory, advance, integrate, jacobi_rhs,
                   magnetic_exp, march, _check_start)
from .magnetic import MagneticSystem

#: ``|f2|`` below this with no sign change is reported as a marginal (tangential) zero.
MARGINAL_ZERO = 1e-12


@dataclass
class JacobiState:
    """A Jacobi field along a trajectory, stored as frame coefficients.

    ``trajectory.states`` columns: ``x, y, vx, vy, f1, f2, f1', f2'``.
    """

    trajectory: Trajectory
    base: Trajectory

    @property
    def times(self):
        return self.trajectory.times

    @property
    def system(self) -> MagneticSystem:
        return self.trajectory.system

    def coefficients(self, t=None):
        """``(f1, f2, f1', f2')`` at the samples, or at times ``t``."""
        s = self.trajectory.states if t is None else self.trajectory.state_at(t)
        return s[..., 4], s[..., 5], s[..., 6], s[..., 7]

    def _frame(self, s):
        vx, vy = s[..., 2], s[..., 3]
        return np.stack([vx, vy], -1), np.stack([-vy, vx], -1)

    def field_b(self, s):
        b = self.system.field.value_grad(s[..., 0], s[..., 1])[0]
        return np.broadcast_to(np.asarray(b, dtype=float), s[..., 0].shape)

    def J(self, t=None):
        """Coordinate components of ``J``."""
        s = self.trajectory.states if t is None else self.trajectory.state_at(t)
        e1, e2 = self._frame(s)
        return s[..., 4, None] * e1 + s[..., 5, None] * e2

    def frame_J_prime(self, t=None):
        """Frame components of the covariant derivative ``J'``."""
        s = self.trajectory.states if t is None else self.trajectory.state_at(t)
        b = self.field_b(s)
        return s[..., 6] - b * s[..., 5], s[..., 7] + b * s[..., 4]

    def J_prime(self, t=None):
        s = self.trajectory.states if t is None else self.trajectory.state_at(t)
        e1, e2 = self._frame(s)
        a1, a2 = self.frame_J_prime(t)
        return a1[..., None] * e1 + a2[..., None] * e2

    def constraint(self, t=None):
        """``<J', gamma'>``, which vanishes for magnetic Jacobi fields."""
        return self.frame_J_prime(t)[0]

    def perpendicular(self, t=None):
        return self.coefficients(t)[1]


def _frame_components(sys, p, v, w):
    lam2 = float(sys.chart.conformal_factor(p[0], p[1])) ** 2
    return lam2 * (w[0] * v[0] + w[1] * v[1]), lam2 * (-w[0] * v[1] + w[1] * v[0])


def propagate_jacobi(sys: MagneticSystem, traj: Trajectory, J0, J0p, tol: float = 1e-9) -> JacobiState:
    """Solve the Jacobi system along ``traj`` with ``J(0) = J0``, ``J'(0) = J0p``.

    The orbit is re-integrated together with the Jacobi data on the same step
    grid, so the orbit columns coincide with ``traj``.
    """
    s0 = traj.states[0]
    p, v = s0[:2], s0[2:4]
    a1, a2 = _frame_components(sys, p, v, J0p)
    scale = max(1.0, math.hypot(a1, a2))
    if abs(a1) > tol * scale:
        raise ContractError(
            f"initial derivative is not orthogonal to the velocity: <J'(0), gamma'(0)> = {a1!r}",
            "jacobi", inner_product=a1)
    f1, f2 = _frame_components(sys, p, v, J0)
    b = float(sys.b(float(p[0]), float(p[1])))
    state = [*map(float, s0[:4]), f1, f2, a1 + b * f2, a2 - b * f1]
    meta_policy = traj.metadata.get("policy", "fixed")
    if meta_policy == "fixed":
        jt = march(sys, jacobi_rhs(sys), state, traj.duration, step=traj.step)
    else:
        jt = march(sys, jacobi_rhs(sys), state, traj.duration, IntegratorSettings(adaptive=True))
    return JacobiState(jt, traj)


def vanishing_jacobi(sys: MagneticSystem, traj: Trajectory) -> JacobiState:
    """The field with ``J(0) = 0`` and ``J'(0) = e2(0)``."""
    v = traj.states[0, 2:4]
    return propagate_jacobi(sys, traj, (0.0, 0.0), (-v[1], v[0]))


def symplectic_pairing(Jv: JacobiState, Jw: JacobiState, sys: MagneticSystem, traj: Trajectory, t) -> float:
    """``<Jv, Jw'> - <Jv', Jw> + <Y(Jv), Jw>`` at time ``t``.

    Evaluated in the orthonormal frame, where ``Y`` acts as ``b`` times the
    rotation ``(u1, u2) -> (-u2, u1)``.
    """
    for st in (Jv, Jw):
        same = (st.times.shape == traj.times.shape and np.array_equal(st.times, traj.times)
                and np.array_equal(st.trajectory.states[:, :4], traj.states[:, :4]))
        if not same:
            raise ContractError("Jacobi states were not propagated along the given trajectory", "jacobi")
    fv1, fv2, _, _ = Jv.coefficients(t)
    fw1, fw2, _, _ = Jw.coefficients(t)
    pv1, pv2 = Jv.frame_J_prime(t)
    pw1, pw2 = Jw.frame_J_prime(t)
    s = traj.state_at(t)
    b = np.asarray(sys.field.value_grad(s[..., 0], s[..., 1])[0], dtype=float)
    val = (fv1 * pw1 + fv2 * pw2) - (pv1 * fw1 + pv2 * fw2) + b * (-fv2 * fw1 + fv1 * fw2)
    return float(val) if np.ndim(val) == 0 else val


def _rotate(sys, p, xi, angle):
    """Rotate the unit vector ``xi`` by ``angle`` in the metric (= in the chart)."""
    c, s = math.cos(angle), math.sin(angle)
    return (c * xi[0] - s * xi[1], s * xi[0] + c * xi[1])


def variational_consistency(sys: MagneticSystem, x, xi, v, t: float, h: float = 1e-4,
                            ctrl: IntegratorSettings | None = None) -> float:
    """Relative discrepancy between ``J_v(t)`` and a central difference of the exponential map.

    ``J_v`` has ``J(0) = 0``, ``J'(0) = v``; the difference quotient varies the
    initial direction ``xi(s) = cos(s) xi + sin(s) v``.
    """
    if not h > 0:
        raise ContractError("finite difference step must be positive", "jacobi")
    nv = sys.norm(x, v)
    if abs(nv - 1.0) > 1e-9 or abs(sys.inner(x, v, xi)) > 1e-9:
        raise ContractError("v must be a unit vector orthogonal to xi", "jacobi")
    if t == 0:
        return 0.0
    start = PhasePoint(x, xi)
    traj = integrate(sys, start, t, ctrl)
    J = propagate_jacobi(sys, traj, (0.0, 0.0), v).J()[-1]
    # sign of the rotation: v = +rot90(xi) or -rot90(xi)
    sign = 1.0 if (v[1] * xi[0] - v[0] * xi[1]) > 0 else -1.0
    step = traj.step
    plus = magnetic_exp(sys, x, _rotate(sys, x, xi, sign * h), t, IntegratorSettings(step=step))
    minus = magnetic_exp(sys, x, _rotate(sys, x, xi, -sign * h), t, IntegratorSettings(step=step))
    fd = (plus - minus) / (2.0 * h)
    p = traj.states[-1, :2]
    nJ = sys.norm(p, J)
    if nJ == 0:
        return float(sys.norm(p, fd))
    return float(sys.norm(p, J - fd) / nJ)


@dataclass(frozen=True)
class ConjugatePoint:
    time: float
    multiplicity: int = 1
    marginal: bool = False
    position: tuple = ()


def _bisect_zero(sys, rhs, s_left, width, f_left, tol):
    lo, hi = 0.0, width
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = advance(sys, rhs, s_left, mid)[5]
        if (f_mid > 0) == (f_left > 0) and f_mid != 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def scan_conjugate(state: JacobiState, time_tol: float = 1e-9):
    """First zero of ``f2`` in ``(0, T]`` for a field vanishing at 0, or ``None``."""
    sys = state.system
    rhs = jacobi_rhs(sys)
    times = state.times
    S = state.trajectory.states
    f2 = S[:, 5]
    if len(times) < 3:
        return None
    a, c = f2[1:-1], f2[2:]
    change = (a == 0.0) | ((a > 0) != (c > 0)) | (c == 0.0)
    absf = np.abs(f2)
    dip = np.zeros_like(change)
    dip[1:] = (absf[2:-1] < MARGINAL_ZERO) & (absf[2:-1] <= absf[1:-2]) & (absf[2:-1] <= absf[3:])
    events = np.flatnonzero(change | dip)
    if events.size == 0:
        return None
    i = int(events[0]) + 1
    if f2[i] == 0.0:
        return ConjugatePoint(float(times[i]), 1, False, tuple(S[i, :2]))
    if change[i - 1]:
        dt = _bisect_zero(sys, rhs, list(S[i]), times[i + 1] - times[i], f2[i], time_tol)
        t0 = float(times[i] + dt)
        return ConjugatePoint(t0, 1, False, tuple(state.trajectory.state_at(t0)[:2]))
    return ConjugatePoint(float(times[i]), 1, True, tuple(S[i, :2]))


def first_conjugate(sys: MagneticSystem, x, xi, Tmax: float, ctrl: IntegratorSettings | None = None,
                    time_tol: float = 1e-9):
    """First point conjugate to ``x`` along the orbit of ``xi`` within ``(0, Tmax]``.

    Returns a :class:`ConjugatePoint` (multiplicity is always 1 on a surface)
    or ``None``.
    """
    if not Tmax > 0:
        raise ContractError("Tmax must be positive", "jacobi")
    start = PhasePoint(x, xi)
    _check_start(sys, start)
    traj = integrate(sys, start, Tmax, ctrl)
    return scan_conjugate(vanishing_jacobi(sys, traj), time_tol)
