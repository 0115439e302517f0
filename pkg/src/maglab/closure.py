"""Closed orbit detection, pass counts through a region, and the closure census.

The phase distance between ``(x, v)`` and ``(x0, v0)`` is the chart distance
plus ``weight`` times the angle between the velocities (conformal charts
preserve angles).  The first near-return is the first local minimum of that
distance after the orbit has moved away, refined by golden-section search on
the dense output.
"""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .boundary import Domain, compare_scattering, grid_entries, scattering_table
from .errors import ContractError
from .flow import IntegratorSettings, PhasePoint, Trajectory, integrate, integrate_batch
from .magnetic import MagneticSystem

CLOSURE_TOL = 1e-6
OPEN_THRESHOLD = 1e-3
TOUCH_TOL = 1e-9


@dataclass(frozen=True)
class OrbitRecord:
    start: PhasePoint
    period: float
    gap: float
    pass_count: int | None = None
    closure_tol: float = CLOSURE_TOL

    @property
    def closed(self) -> bool:
        return self.gap <= self.closure_tol

    @property
    def status(self) -> str:
        return "closed" if self.closed else "open"


def phase_distance(states, start, weight: float = 1.0):
    """Chart distance plus ``weight`` times the velocity angle, for rows of ``states``."""
    states = np.asarray(states, dtype=float)
    x0, y0 = start.position
    u0, w0 = start.velocity
    dx, dy = states[..., 0] - x0, states[..., 1] - y0
    vx, vy = states[..., 2], states[..., 3]
    ang = np.arctan2(np.abs(u0 * vy - w0 * vx), u0 * vx + w0 * vy)
    return np.hypot(dx, dy) + weight * ang


def _near_return(traj: Trajectory, weight: float):
    start = traj.start
    d = phase_distance(traj.states, start, weight)
    times = traj.times
    half = 0.5 * float(np.max(d))
    away = np.flatnonzero(d > half)
    if away.size == 0:
        i = int(np.argmin(d[1:]) + 1)
        return float(times[i]), float(d[i]), False
    i0 = int(away[0])
    # first sampled local minimum below the half level after leaving
    interior = np.arange(i0 + 1, len(d) - 1)
    cand = interior[(d[interior] <= d[interior - 1]) & (d[interior] <= d[interior + 1])
                    & (d[interior] < half)]
    if cand.size == 0:
        j = i0 + int(np.argmin(d[i0:]))
        return float(times[j]), float(d[j]), False
    j = int(cand[0])

    def f(t):
        return float(phase_distance(traj.state_at(t), start, weight))

    try:
        res = minimize_scalar(f, bracket=(times[j - 1], times[j], times[j + 1]), method="golden",
                              tol=1e-12)
    except ValueError:  # flat bracket
        res = minimize_scalar(f, bounds=(times[j - 1], times[j + 1]), method="bounded",
                              options={"xatol": 1e-13})
    t_star, g = float(res.x), float(res.fun)
    if g > d[j]:
        t_star, g = float(times[j]), float(d[j])
    return t_star, g, True


def closure_gap(sys: MagneticSystem, start: PhasePoint, tmax: float, weight: float = 1.0,
                closure_tol: float = CLOSURE_TOL, ctrl: IntegratorSettings | None = None,
                trajectory: Trajectory | None = None) -> OrbitRecord:
    """First near-return time ``T*`` of the orbit of ``start`` within ``tmax`` and the gap there."""
    if not tmax > 0:
        raise ContractError("Tmax must be positive", "closure")
    traj = trajectory if trajectory is not None else integrate(sys, start, tmax, ctrl)
    t_star, gap, _ = _near_return(traj, weight)
    return OrbitRecord(traj.start, t_star, max(gap, 0.0), None, closure_tol)


def _count_runs(inside: np.ndarray) -> int:
    if inside.size == 0:
        return 0
    rises = int(inside[0]) + int(np.count_nonzero(inside[1:] & ~inside[:-1]))
    if rises > 1 and inside[0] and inside[-1]:
        rises -= 1  # the run through t = 0 continues the last one
    return rises


def pass_count(sys: MagneticSystem, start: PhasePoint, dom: Domain, period: float,
               ctrl: IntegratorSettings | None = None, trajectory: Trajectory | None = None,
               touch_tol: float = TOUCH_TOL) -> int:
    """Number of passes of the orbit through ``dom`` over ``[0, period)``.

    Passes are maximal runs of samples inside the domain.  Local minima of
    the signed boundary function that stay outside at the samples are refined
    on the dense output; a minimum within ``touch_tol`` of the boundary is a
    tangential touch and counts as one pass.
    """
    if not period > 0:
        raise ContractError("period must be positive", "closure")
    traj = trajectory if trajectory is not None else integrate(sys, start, period, ctrl)
    mask = traj.times < period
    times = traj.times[mask]
    S = traj.states[mask]
    F = np.asarray(dom.signed(S[:, 0].copy(), S[:, 1].copy()), dtype=float)
    inside = F < 0
    m = _count_runs(inside)
    if len(F) < 3:
        return m
    i = np.arange(1, len(F) - 1)
    mins = i[(F[i] <= F[i - 1]) & (F[i] <= F[i + 1]) & (F[i] >= 0) & ~inside[i - 1] & ~inside[i + 1]]
    for j in mins:
        if F[j] > 100 * traj.step:
            continue

        def f(t):
            p = traj.state_at(t)
            return float(dom.signed(float(p[0]), float(p[1])))

        res = minimize_scalar(f, bounds=(times[j - 1], times[j + 1]), method="bounded",
                              options={"xatol": 1e-13})
        if min(res.fun, F[j]) <= touch_tol:
            m += 1
    return m


@dataclass
class CensusReport:
    n_orbits: int
    fraction_closed: float
    worst_gap: float
    worst_witness: dict
    pass_counts: dict
    periods: tuple
    records: list = field(repr=False, default_factory=list)
    comparison: object = None
    closure_tol: float = CLOSURE_TOL
    open_threshold: float = OPEN_THRESHOLD

    @property
    def all_closed(self) -> bool:
        return self.fraction_closed == 1.0

    @property
    def single_pass(self) -> bool:
        return all(k <= 1 for k in self.pass_counts)

    def implication(self) -> dict:
        """Closed orbits with single passes preserve scattering; a scattering change shows an open orbit."""
        out = {"all_closed": self.all_closed, "single_pass": self.single_pass,
               "open_orbit_found": self.worst_gap > self.open_threshold}
        if self.comparison is None:
            out["consistent"] = None
            return out
        sup = self.comparison.sup + self.comparison.status_mismatches
        preserved = sup <= self.closure_tol
        changed = sup > self.open_threshold
        out.update(scattering_sup=self.comparison.sup, scattering_preserved=preserved,
                   scattering_changed=changed)
        forward = (not (self.all_closed and self.single_pass)) or preserved
        backward = (not changed) or out["open_orbit_found"]
        out["consistent"] = bool(forward and backward)
        return out

    def summary(self) -> dict:
        return {
            "n_orbits": self.n_orbits,
            "fraction_closed": self.fraction_closed,
            "worst_gap": self.worst_gap,
            "worst_witness": self.worst_witness,
            "pass_counts": {str(k): v for k, v in sorted(self.pass_counts.items())},
            "period_range": list(self.periods),
            "comparison": None if self.comparison is None else {
                "position": self.comparison.position, "direction": self.comparison.direction,
                "travel_time": self.comparison.travel_time,
                "status_mismatches": self.comparison.status_mismatches},
            "implication": self.implication(),
        }


def closure_census(sys: MagneticSystem, dom: Domain, grid=(32, 16), tmax: float = 10.0,
                   baseline: MagneticSystem | None = None, weight: float = 1.0,
                   closure_tol: float = CLOSURE_TOL, step: float | None = None, chunk: int = 128,
                   threads: int = 1, scatter_grid=None) -> CensusReport:
    """Closure gaps and pass counts for orbits entering ``dom`` on a boundary grid.

    Orbits start at the inward boundary entries of a scattering grid, so each
    meets the region.  With a ``baseline`` system the scattering tables of both
    systems are compared on the same grid (``scatter_grid`` overrides it).
    """
    entries = grid_entries(sys, dom, int(grid[0]), int(grid[1]))
    starts = [e[2] for e in entries]
    ctrl = IntegratorSettings(step=step)
    chunks = [starts[i:i + chunk] for i in range(0, len(starts), chunk)]

    def run(ch):
        trajs = integrate_batch(sys, ch, tmax, ctrl)
        out = []
        for tr in trajs:
            rec = closure_gap(sys, tr.start, tmax, weight, closure_tol, trajectory=tr)
            m = pass_count(sys, tr.start, dom, rec.period, trajectory=tr)
            out.append(OrbitRecord(rec.start, rec.period, rec.gap, m, closure_tol))
        return out

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    records = [r for p in parts for r in p]
    gaps = np.array([r.gap for r in records])
    w = int(np.argmax(gaps))
    worst = {"arclen_in": entries[w][0], "angle_in": entries[w][1], "period": records[w].period,
             "position": list(records[w].start.position), "velocity": list(records[w].start.velocity)}
    periods = np.array([r.period for r in records])
    comparison = None
    if baseline is not None:
        g = scatter_grid or grid
        A = scattering_table(baseline, dom, g, step=step, threads=threads)
        B = scattering_table(sys, dom, g, step=step, threads=threads)
        comparison = compare_scattering(A, B)
    return CensusReport(
        n_orbits=len(records),
        fraction_closed=float(np.mean(gaps <= closure_tol)),
        worst_gap=float(gaps[w]),
        worst_witness=worst,
        pass_counts=dict(Counter(int(r.pass_count) for r in records)),
        periods=(float(periods.min()), float(periods.max())),
        records=records, comparison=comparison, closure_tol=closure_tol)
