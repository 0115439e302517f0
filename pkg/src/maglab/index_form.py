"""Index form of a magnetic geodesic.

For ``Z = w e1 + u e2`` along a unit speed orbit the integrand
``|Z'|^2 - <C(Z), Z> - <Y(gamma'), Z>^2`` is evaluated in the adapted frame.
On perpendicular fields (``w = 0``) it reduces to ``u'^2 - q u^2`` with
``q = K + b^2 - db(e2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import ContractError
from .flow import IntegratorSettings, PhasePoint, Trajectory, integrate
from .jacobi import JacobiState, propagate_jacobi, scan_conjugate, vanishing_jacobi
from .magnetic import MagneticSystem, reverse

Piece = Callable[[np.ndarray], tuple]

#: default constant in the kernel tolerance ``c / N**2`` of :func:`index_gram`
KERNEL_CONSTANT = 10.0


def _zero_piece(t):
    z = np.zeros_like(np.asarray(t, dtype=float))
    return z, z


@dataclass
class FieldOnGeodesic:
    """Piecewise smooth field ``Z = u(t) e2(t)`` (optionally ``+ w(t) e1(t)``).

    ``pieces[k]`` maps an array of times in ``[breakpoints[k], breakpoints[k+1]]``
    to ``(u, u')``; ``parallel`` does the same for ``(w, w')``.
    """

    breakpoints: np.ndarray
    pieces: Sequence[Piece]
    parallel: Optional[Sequence[Piece]] = None
    vanishes_at_start: bool = False
    vanishes_at_end: bool = False

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        self.breakpoints = bp
        if bp.ndim != 1 or len(bp) < 2 or np.any(np.diff(bp) <= 0):
            raise ContractError("breakpoints must be strictly increasing", "index_form")
        if len(self.pieces) != len(bp) - 1:
            raise ContractError("need one piece per interval", "index_form")
        if self.parallel is not None and len(self.parallel) != len(bp) - 1:
            raise ContractError("need one parallel piece per interval", "index_form")
        if self.vanishes_at_start and self.value(bp[0]) != 0.0:
            raise ContractError("field flagged as vanishing at the start but Z(0) != 0", "index_form")
        if self.vanishes_at_end and self.value(bp[-1]) != 0.0:
            raise ContractError("field flagged as vanishing at the end but Z(T) != 0", "index_form")

    @property
    def T(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def is_perpendicular(self) -> bool:
        return self.parallel is None

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.clip(np.searchsorted(self.breakpoints, t, side="right") - 1, 0, len(self.pieces) - 1)
        return t, k

    def evaluate(self, t, which="perpendicular"):
        """``(u, u')`` (or ``(w, w')``) at times ``t``; at a breakpoint the right piece wins."""
        t, k = self._locate(t)
        pieces = self.pieces if which == "perpendicular" else self.parallel
        u = np.zeros_like(t)
        du = np.zeros_like(t)
        if pieces is None:
            return u, du
        for j in np.unique(k):
            m = k == j
            a, b = pieces[j](t[m])
            u[m], du[m] = a, b
        return u, du

    def value(self, t) -> float:
        if t >= self.breakpoints[-1]:
            a, _ = self.pieces[-1](np.array([float(t)]))
            w = 0.0 if self.parallel is None else self.parallel[-1](np.array([float(t)]))[0][0]
        else:
            a, _ = self.evaluate(t)
            w = 0.0 if self.parallel is None else self.evaluate(t, "parallel")[0][0]
        return float(math.hypot(a[0], w))

    # constructors -----------------------------------------------------
    @classmethod
    def from_function(cls, T, u, du, w=None, dw=None, **flags):
        par = None if w is None else [lambda t: (w(t), dw(t))]
        return cls(np.array([0.0, float(T)]), [lambda t: (u(t), du(t))], par, **flags)

    @classmethod
    def zero(cls, T):
        return cls(np.array([0.0, float(T)]), [_zero_piece], vanishes_at_start=True, vanishes_at_end=True)

    @classmethod
    def from_jacobi(cls, state: JacobiState, scale: float = 1.0, **flags):
        """Perpendicular part ``scale * f2 e2`` of a propagated Jacobi field."""
        tr = state.trajectory

        def piece(t):
            s = tr.state_at(np.clip(t, 0.0, tr.duration))
            return scale * s[..., 5], scale * s[..., 7]

        return cls(np.array([0.0, tr.duration]), [piece], **flags)

    @classmethod
    def hats(cls, T, coefficients):
        """Continuous piecewise linear field with the given interior nodal values."""
        c = np.concatenate([[0.0], np.asarray(coefficients, dtype=float), [0.0]])
        N = len(c) - 1
        nodes = np.linspace(0.0, T, N + 1)
        h = T / N

        def make(k):
            slope = (c[k + 1] - c[k]) / h
            return lambda t: (c[k] + slope * (t - nodes[k]), np.full_like(t, slope))

        return cls(nodes, [make(k) for k in range(N)], vanishes_at_start=True, vanishes_at_end=True)

    def plus(self, other: "FieldOnGeodesic") -> "FieldOnGeodesic":
        """Pointwise sum (perpendicular parts) on the union of breakpoints."""
        bp = np.union1d(self.breakpoints, other.breakpoints)
        pieces = []
        for k in range(len(bp) - 1):
            mid = 0.5 * (bp[k] + bp[k + 1])
            i = min(np.searchsorted(self.breakpoints, mid) - 1, len(self.pieces) - 1)
            j = min(np.searchsorted(other.breakpoints, mid) - 1, len(other.pieces) - 1)
            pieces.append(_sum_piece(self.pieces[i], other.pieces[j]))
        return FieldOnGeodesic(bp, pieces)

    def scaled(self, c: float) -> "FieldOnGeodesic":
        return FieldOnGeodesic(self.breakpoints, [_scale_piece(p, c) for p in self.pieces],
                               None if self.parallel is None else [_scale_piece(p, c) for p in self.parallel],
                               self.vanishes_at_start, self.vanishes_at_end)

    def reflected(self) -> "FieldOnGeodesic":
        """The field ``Z(T - t)`` expressed in the frame of the reversed orbit.

        Reversal flips both ``e1`` and ``e2``, so the coefficients change sign.
        """
        T = self.T
        bp = T - self.breakpoints[::-1]
        bp[0], bp[-1] = 0.0, T

        def refl(p):
            def piece(t):
                a, b = p(T - t)
                return -a, b
            return piece

        par = None if self.parallel is None else [refl(p) for p in self.parallel[::-1]]
        return FieldOnGeodesic(bp, [refl(p) for p in self.pieces[::-1]], par,
                               self.vanishes_at_end, self.vanishes_at_start)


def _sum_piece(p, q):
    def piece(t):
        a, b = p(t)
        c, d = q(t)
        return a + c, b + d
    return piece


def _scale_piece(p, c):
    def piece(t):
        a, b = p(t)
        return c * a, c * b
    return piece


def sine_modes(T, amplitudes) -> FieldOnGeodesic:
    """``sum_m a_m sin(m pi t / T)``; vanishes at both ends."""
    a = np.asarray(amplitudes, dtype=float)
    m = np.arange(1, len(a) + 1)

    def piece(t):
        arg = np.multiply.outer(t, m * math.pi / T)
        return np.sin(arg) @ a, np.cos(arg) @ (a * m * math.pi / T)

    return FieldOnGeodesic(np.array([0.0, float(T)]), [piece])


# ---------------------------------------------------------------------------
# evaluation


def orbit_coefficients(sys: MagneticSystem, states):
    """``b, db(e1), db(e2), K`` at orbit states (rows ``x, y, vx, vy, ...``)."""
    x, y, vx, vy = states[..., 0], states[..., 1], states[..., 2], states[..., 3]
    lam, _, _, hxx, _, hyy = sys.chart.log_jet(x, y)
    b, bx, by = sys.field.value_grad(x, y)
    shape = x.shape
    K = np.broadcast_to(-(np.asarray(hxx) + hyy) / (np.asarray(lam) ** 2), shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), shape)
    db1 = bx * vx + by * vy
    db2 = by * vx - bx * vy
    return b, np.broadcast_to(db1, shape), np.broadcast_to(db2, shape), K


def _integrand(sys, traj, Z, t):
    s = traj.state_at(t)
    b, db1, db2, K = orbit_coefficients(sys, s)
    u, du = Z.evaluate(t)
    if Z.parallel is None:
        return du * du - (K + b * b - db2) * u * u
    w, dw = Z.evaluate(t, "parallel")
    a1 = dw - b * u
    a2 = du + b * w
    cz = w * b * a2 + u * (K * u - b * a1 - (w * db1 + u * db2))
    return a1 * a1 + a2 * a2 - cz - (b * u) ** 2


def _panels(a, b, width):
    n = max(1, int(math.ceil((b - a) / width - 1e-9)))
    return np.linspace(a, b, n + 1)


def index_evaluate(sys: MagneticSystem, traj: Trajectory, Z: FieldOnGeodesic,
                   n_gauss: int = 4, panel: float | None = None) -> float:
    """Composite Gauss-Legendre value of the index form of ``Z`` along ``traj``."""
    T = traj.duration
    bp = Z.breakpoints
    if bp[0] != 0.0 or abs(bp[-1] - T) > 1e-9 * max(1.0, T) or np.any(bp < 0) or np.any(bp > T + 1e-9):
        raise ContractError(f"field breakpoints must span [0, {T}]", "index_form",
                            first=float(bp[0]), last=float(bp[-1]))
    width = panel or traj.step
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    total = 0.0
    for k in range(len(bp) - 1):
        a, c = bp[k], min(bp[k + 1], T)
        edges = _panels(a, c, width)
        lo, hi = edges[:-1, None], edges[1:, None]
        half = 0.5 * (hi - lo)
        t = (lo + half * (xg + 1.0)).ravel()
        weights = (half * wg).ravel()
        # the piece owning this interval, evaluated directly (no breakpoint lookup)
        s = traj.state_at(np.clip(t, 0.0, T))
        b, db1, db2, K = orbit_coefficients(sys, s)
        u, du = Z.pieces[k](t)
        if Z.parallel is None:
            f = du * du - (K + b * b - db2) * u * u
        else:
            w, dw = Z.parallel[k](t)
            a1 = dw - b * u
            a2 = du + b * w
            cz = w * b * a2 + u * (K * u - b * a1 - (w * db1 + u * db2))
            f = a1 * a1 + a2 * a2 - cz - (b * u) ** 2
        total += float(np.dot(weights, f))
    return total


@dataclass(frozen=True)
class GramSummary:
    """Spectrum of the index form restricted to ``N - 1`` hat functions.

    Eigenvalues are those of the pencil ``(A, M)`` with ``M`` the L2 Gram
    matrix of the hats, i.e. extreme values of ``Ind(Z) / |Z|^2``.
    """

    smallest: float
    lowest: tuple
    n_negative: int
    kernel_tolerance: float
    N: int
    T: float

    @property
    def kernel_detected(self) -> bool:
        return abs(self.smallest) <= self.kernel_tolerance

    @property
    def positive_definite(self) -> bool:
        return self.smallest > self.kernel_tolerance

    @property
    def verdict(self) -> str:
        if self.kernel_detected:
            return "kernel"
        return "positive" if self.smallest > 0 else "indefinite"


def gram_matrices(sys: MagneticSystem, traj: Trajectory, N: int, n_gauss: int = 6, T: float | None = None):
    """Stiffness-type matrix ``A`` of the index form and mass matrix ``M`` on hats."""
    T = traj.duration if T is None else T
    nodes = np.linspace(0.0, T, N + 1)
    h = T / N
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    t = (nodes[:-1, None] + 0.5 * h * (xg + 1.0))           # (N, g)
    w = 0.5 * h * wg
    s = traj.state_at(np.clip(t, 0.0, traj.duration))
    b, _, db2, K = orbit_coefficients(sys, s)
    q = K + b * b - db2
    phiR = (t - nodes[:-1, None]) / h
    phiL = 1.0 - phiR
    mLL = (w * phiL * phiL).sum(1)
    mLR = (w * phiL * phiR).sum(1)
    mRR = (w * phiR * phiR).sum(1)
    qLL = (w * q * phiL * phiL).sum(1)
    qLR = (w * q * phiL * phiR).sum(1)
    qRR = (w * q * phiR * phiR).sum(1)
    A = np.zeros((N + 1, N + 1))
    M = np.zeros((N + 1, N + 1))
    e = np.arange(N)
    A[e, e] += 1.0 / h - qLL
    A[e + 1, e + 1] += 1.0 / h - qRR
    A[e, e + 1] += -1.0 / h - qLR
    A[e + 1, e] += -1.0 / h - qLR
    M[e, e] += mLL
    M[e + 1, e + 1] += mRR
    M[e, e + 1] += mLR
    M[e + 1, e] += mLR
    return A[1:-1, 1:-1], M[1:-1, 1:-1]


def index_gram(sys: MagneticSystem, traj: Trajectory, N: int, kernel_constant: float = KERNEL_CONSTANT,
               n_lowest: int = 5) -> GramSummary:
    """Assemble the index form on hat functions and report its lowest eigenvalues."""
    if N < 4:
        raise ContractError(f"need at least 4 segments, got {N}", "index_form")
    A, M = gram_matrices(sys, traj, N)
    ev = linalg.eigh(A, M, eigvals_only=True)
    return GramSummary(float(ev[0]), tuple(float(v) for v in ev[:n_lowest]), int(np.sum(ev < 0)),
                       kernel_constant / N ** 2, N, traj.duration)


@dataclass(frozen=True)
class SweepResult:
    rows: tuple  # (parameter, length, smallest eigenvalue)
    first_crossing: Optional[float]


def index_family_sweep(sys: MagneticSystem, x, directions, lengths, N: int = 64,
                       parameters=None, ctrl: IntegratorSettings | None = None) -> SweepResult:
    """Smallest Gram eigenvalue along a family ``gamma_s(t) = exp_x(t xi(s))``, ``t in [0, T_s]``.

    The hat basis on ``[0, T_s]`` is the rescaling ``t T_0 / T_s`` of the basis
    on ``[0, T_0]``.  Reports the first parameter where the eigenvalue stops
    being positive.
    """
    params = list(range(len(directions))) if parameters is None else list(parameters)
    rows = []
    first = None
    for s, xi, T in zip(params, directions, lengths):
        traj = integrate(sys, PhasePoint(x, xi), T, ctrl)
        lam_min = index_gram(sys, traj, N).smallest
        rows.append((float(s), float(T), lam_min))
        if first is None and lam_min <= 0:
            first = float(s)
    return SweepResult(tuple(rows), first)


# ---------------------------------------------------------------------------
# constructions


def corner_field(sys: MagneticSystem, traj: Trajectory, t0: float) -> FieldOnGeodesic:
    """``J_perp`` of the field vanishing at 0 on ``[0, t0]``, zero afterwards."""
    T = traj.duration
    if not 0 < t0 <= T:
        raise ContractError("corner time must lie in (0, T]", "index_form")
    left = FieldOnGeodesic.from_jacobi(vanishing_jacobi(sys, traj)).pieces[0]
    if t0 >= T:
        return FieldOnGeodesic(np.array([0.0, T]), [left], vanishes_at_start=True)
    return FieldOnGeodesic(np.array([0.0, t0, T]), [left, _zero_piece],
                           vanishes_at_start=True, vanishes_at_end=True)


def _jacobi_from(sys, traj, t_start, duration, J0, J0p):
    s = traj.state_at(t_start)
    start = PhasePoint.unit(sys, s[:2], s[2:4])
    sub = integrate(sys, start, duration, IntegratorSettings(step=traj.step))
    v = sub.states[0, 2:4]
    e2 = np.array([-v[1], v[0]])
    vec = {"zero": np.zeros(2), "e2": e2}
    return propagate_jacobi(sys, sub, vec[J0], vec[J0p])


def cut_corner(sys: MagneticSystem, traj: Trajectory, t0: float, eps: float) -> FieldOnGeodesic:
    """Replace the corner of :func:`corner_field` on ``[t0 - eps, t0 + eps]`` by a Jacobi bridge.

    The bridge is the perpendicular part of the Jacobi field on the window that
    matches ``J_perp(t0 - eps)`` and vanishes at ``t0 + eps``.  Its index is
    strictly negative.
    """
    T = traj.duration
    if not t0 < T:
        raise ContractError(f"no conjugate point before T: t0={t0} >= T={T}", "index_form")
    if not 0 < eps < min(t0, T - t0):
        raise ContractError(f"eps={eps} must lie in (0, {min(t0, T - t0)})", "index_form")
    J = vanishing_jacobi(sys, traj)
    left = FieldOnGeodesic.from_jacobi(J).pieces[0]
    ta, tb = t0 - eps, t0 + eps
    P = _jacobi_from(sys, traj, ta, 2 * eps, "e2", "zero").trajectory
    Q = _jacobi_from(sys, traj, ta, 2 * eps, "zero", "e2").trajectory
    A = float(J.trajectory.state_at(ta)[5])
    B = -A * P.states[-1, 5] / Q.states[-1, 5]

    def bridge(t):
        tt = np.clip(t - ta, 0.0, 2 * eps)
        p, q = P.state_at(tt), Q.state_at(tt)
        u = A * p[..., 5] + B * q[..., 5]
        # the endpoint value is forced to exact zero
        u = np.where(t >= tb, 0.0, u)
        return u, A * p[..., 7] + B * q[..., 7]

    return FieldOnGeodesic(np.array([0.0, ta, tb, T]), [left, bridge, _zero_piece],
                           vanishes_at_start=True, vanishes_at_end=True)


# ---------------------------------------------------------------------------
# index lemma


@dataclass
class IndexLemmaReport:
    trials: int
    jacobi_index: float
    field_index: float
    min_margin: float
    violations: int
    equality_distance: float
    equality_residual: float
    reversed_jacobi_index: float
    reversed_min_margin: float
    reversed_violations: int
    reversal_residual: float
    tolerance: float = 1e-9
    margins: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.reversed_violations == 0


def _l2_distance(Z1, Z2, T, n=2001):
    t = np.linspace(0.0, T, n)
    d = Z1.evaluate(t)[0] - Z2.evaluate(t)[0]
    return float(math.sqrt(np.trapezoid(d * d, t)))


def reversed_trajectory(sys: MagneticSystem, traj: Trajectory) -> Trajectory:
    """The same orbit traversed backwards, as an orbit of ``reverse(sys)``."""
    end = traj.end
    rsys = reverse(sys)
    start = PhasePoint.unit(rsys, end.position, (-end.velocity[0], -end.velocity[1]))
    return integrate(rsys, start, traj.duration, IntegratorSettings(step=traj.step))


def index_lemma_check(sys: MagneticSystem, traj: Trajectory, Z: FieldOnGeodesic, trials: int = 100,
                      seed: int = 0, amplitude: float = 0.5, modes: int = 6,
                      tolerance: float = 1e-9) -> IndexLemmaReport:
    """Sample the inequality ``Ind(J_perp) <= Ind(Z)`` for fields with matched endpoints.

    ``Z`` must vanish at 0.  Trial fields add random sine modes to ``Z``.  The
    reversed variant mirrors ``Z`` so that it vanishes at ``T`` and compares it
    with the Jacobi field obtained from ``reverse(sys)``.
    """
    T = traj.duration
    J = vanishing_jacobi(sys, traj)
    if scan_conjugate(J) is not None:
        raise ContractError("trajectory has a conjugate point in (0, T]", "index_form")
    u0 = Z.value(0.0)
    if u0 != 0.0:
        raise ContractError(f"field must vanish at t=0, got |Z(0)|={u0}", "index_form")
    uT = float(Z.pieces[-1](np.array([T]))[0][0])
    fT = float(J.trajectory.states[-1, 5])
    Jperp = FieldOnGeodesic.from_jacobi(J, uT / fT)
    ind_J = index_evaluate(sys, traj, Jperp)
    ind_Z = index_evaluate(sys, traj, Z)
    dist = _l2_distance(Z, Jperp, T)
    rng = np.random.default_rng(seed)
    scale = amplitude / np.arange(1, modes + 1)
    coeffs = rng.normal(size=(trials, modes)) * scale
    margins = [index_evaluate(sys, traj, Z.plus(sine_modes(T, c))) - ind_J for c in coeffs]

    # reversed variant
    rtraj = reversed_trajectory(sys, traj)
    rsys = reverse(sys)
    Jr = vanishing_jacobi(rsys, rtraj)
    if scan_conjugate(Jr) is not None:
        raise ContractError("reversed trajectory has a conjugate point in (0, T]", "index_form")
    # mirrored field on the original orbit: vanishes at T, equals -uT at 0
    Zm = Z.reflected()
    target = float(Zm.pieces[0](np.array([0.0]))[0][0])
    gT = float(Jr.trajectory.states[-1, 5])
    c = target / (-gT)
    rt = Jr.trajectory

    def jr_piece(t):
        s = rt.state_at(np.clip(T - t, 0.0, T))
        return -c * s[..., 5], c * s[..., 7]

    Jperp_r = FieldOnGeodesic(np.array([0.0, T]), [jr_piece])
    ind_Jr = index_evaluate(sys, traj, Jperp_r)
    coeffs_r = rng.normal(size=(trials, modes)) * scale
    margins_r = [index_evaluate(sys, traj, Zm.plus(sine_modes(T, c_))) - ind_Jr for c_ in coeffs_r]

    # orientation independence
    reversal_residual = abs(index_evaluate(rsys, rtraj, Z.reflected()) - ind_Z)

    return IndexLemmaReport(
        trials=trials, jacobi_index=ind_J, field_index=ind_Z,
        min_margin=float(min(margins)) if margins else math.inf,
        violations=int(sum(m < -tolerance for m in margins)),
        equality_distance=dist, equality_residual=ind_Z - ind_J,
        reversed_jacobi_index=ind_Jr,
        reversed_min_margin=float(min(margins_r)) if margins_r else math.inf,
        reversed_violations=int(sum(m < -tolerance for m in margins_r)),
        reversal_residual=float(reversal_residual), tolerance=tolerance, margins=margins)
