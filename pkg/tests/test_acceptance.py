"""Acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (shown even under pytest's
output capture) and then asserts.  Run ``pytest tests/test_acceptance.py -v``
or ``python tests/test_acceptance.py``.
"""

import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest

from maglab.boundary import (DiskDomain, ExitStatus, VerdictKind, boundary_conjugate_scan, convexity_margin,
                             exit_event, grid_entries, scattering_table, simplicity_verdict,
                             travel_time_ratio)
from maglab.cli import EXPERIMENTS, run
from maglab.closure import closure_census, closure_gap
from maglab.flow import IntegratorSettings, PhasePoint, integrate
from maglab.geometry import Bump, ChartMetric
from maglab.index_form import FieldOnGeodesic, cut_corner, index_evaluate, index_gram, index_lemma_check
from maglab.jacobi import (first_conjugate, propagate_jacobi, symplectic_pairing, vanishing_jacobi,
                           variational_consistency)
from maglab.magnetic import FieldStrength, MagneticSystem

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} | {detail}"
        if capman is not None:
            with capman.global_and_fixture_disabled():
                print("\n" + line)
        else:
            print(line)
        assert ok, line

    return emit


def flat(b, bump=None):
    return MagneticSystem.constant(ChartMetric.euclidean(bump), b)


def sphere(b, bump=None):
    return MagneticSystem.constant(ChartMetric.spherical(1.0, bump), b)


def test_c01_flat_circle_closure(report):
    t0 = time.perf_counter()
    rec = closure_gap(flat(1.0), PhasePoint((0, 0), (1, 0)), 10.0)
    dt = time.perf_counter() - t0
    err = abs(rec.period - 2 * math.pi)
    report(1, "flat circle closure", err <= 1e-6 and rec.gap <= 1e-8 and dt < 1.0,
           f"|T*-2pi|={err:.2e} gap={rec.gap:.2e} runtime={dt:.2f}s")


def test_c02_conservation(report):
    worst_speed = worst_constraint = worst_pair = 0.0
    systems = [flat(1.0), MagneticSystem(ChartMetric.spherical(1.0), FieldStrength(expression="1 + 0.3*x*y"))]
    for sys in systems:
        tr = integrate(sys, PhasePoint.unit(sys, (0.1, 0.2), (1, 0.5)), 10.0)
        worst_speed = max(worst_speed, tr.metadata["speed_drift_per_unit_time"])
        e2 = np.array([-tr.states[0, 3], tr.states[0, 2]])
        J = propagate_jacobi(sys, tr, (0.2, -0.1), tuple(0.6 * e2))
        worst_constraint = max(worst_constraint, float(np.max(np.abs(J.constraint()))))
        Jv = vanishing_jacobi(sys, tr)
        Jw = propagate_jacobi(sys, tr, (0, 0), tuple(-1.7 * e2))
        for t in np.linspace(0.5, 9.5, 10):
            worst_pair = max(worst_pair, abs(symplectic_pairing(Jv, Jw, sys, tr, t)))
    ok = worst_speed <= 1e-9 and worst_constraint <= 1e-8 and worst_pair <= 1e-8
    report(2, "conservation suite", ok,
           f"speed drift/time={worst_speed:.2e} <J',g'>={worst_constraint:.2e} pairing={worst_pair:.2e}")


def test_c03_variational_consistency(report):
    errs = []
    for sys in (flat(1.0), sphere(0.5)):
        x = (0.1, 0.0)
        xi = PhasePoint.unit(sys, x, (1, 0)).velocity
        v = PhasePoint.unit(sys, x, (0, 1)).velocity
        errs.append(variational_consistency(sys, x, xi, v, 1.0, 1e-4))
    report(3, "Jacobi field vs exponential map", max(errs) <= 1e-3,
           f"flat={errs[0]:.2e} sphere={errs[1]:.2e}")


def test_c04_conjugate_anchors(report):
    a = first_conjugate(flat(1.0), (0, 0), (1, 0), 5.0)
    s = sphere(0.0)
    p = PhasePoint.unit(s, (0.3, 0.0), (0, 1))
    b = first_conjugate(s, p.position, p.velocity, 4.0)
    c = first_conjugate(flat(0.0), (0, 0), (1, 0), 100.0, IntegratorSettings(step=0.01))
    ea = abs(a.time - math.pi) if a else math.inf
    eb = abs(b.time - math.pi) if b else math.inf
    report(4, "conjugate anchors", ea <= 1e-6 and eb <= 1e-5 and c is None,
           f"flat |t0-pi|={ea:.2e} sphere |t0-pi|={eb:.2e} flat b=0: {c}")


def test_c05_index_sign_law(report):
    sys = flat(1.0)

    def orbit(T):
        return integrate(sys, PhasePoint((0, 0), (1, 0)), T)

    lo = index_gram(sys, orbit(math.pi / 2), 64).smallest
    mid = index_gram(sys, orbit(math.pi), 256).smallest
    hi = index_gram(sys, orbit(3 * math.pi / 2), 64).smallest
    tr = orbit(4.0)
    cc = index_evaluate(sys, tr, cut_corner(sys, tr, math.pi, 0.2))
    ok = lo > 0 and abs(mid) <= 1e-3 and hi < 0 and cc < 0
    report(5, "index sign law", ok,
           f"lmin(pi/2)={lo:.4g} lmin(pi,N=256)={mid:.3e} lmin(3pi/2)={hi:.4g} cut corner={cc:.4g}")


def test_c06_index_lemma(report):
    sys = flat(1.0)
    T = 2.0
    tr = integrate(sys, PhasePoint((0, 0), (1, 0)), T)
    Z = FieldOnGeodesic.from_function(T, lambda t: t / 2, lambda t: 0.5 + 0 * t, vanishes_at_start=True)
    rep = index_lemma_check(sys, tr, Z, trials=100, seed=0)
    ok = rep.violations == 0 and rep.reversed_violations == 0 and rep.reversal_residual <= 1e-8
    report(6, "index lemma sampling", ok,
           f"min margin={rep.min_margin:.3e} reversed min margin={rep.reversed_min_margin:.3e} "
           f"reversal residual={rep.reversal_residual:.2e}")


def test_c07_convexity_margin(report):
    worst = 0.0
    for R in (0.5, 1.0, 2.0):
        for b in (0.0, 1.0):
            m = convexity_margin(flat(b), DiskDomain((0, 0), R)).margin
            worst = max(worst, abs(m - (1 / R - b)))
    report(7, "convexity margin", worst <= 1e-8, f"max |margin - (1/R - b)|={worst:.2e}")


def test_c08_scattering_anchor(report):
    ev = exit_event(flat(1.0), DiskDomain((0, 0), 1.0), PhasePoint((-1, 0), (1, 0)))
    el = abs(ev.travel_time - math.pi / 2)
    ex = float(np.max(np.abs(np.array(ev.exit.as_list()) - [0, 1, 0, 1])))
    table = scattering_table(flat(0.0), DiskDomain((0, 0), 1.0), (16, 16))
    th = np.array([r.angle_in for r in table.records])
    chord = float(np.max(np.abs(table.column("travel_time") - 2 * np.sin(th))))
    report(8, "scattering anchor", el <= 1e-7 and ex <= 1e-7 and chord <= 1e-7,
           f"|l-pi/2|={el:.2e} exit err={ex:.2e} chord table err={chord:.2e}")


def test_c09_travel_time_ratio(report):
    sys, dom = flat(1.0), DiskDomain((0, 0), 0.5)
    r16 = travel_time_ratio(scattering_table(sys, dom, (16, 16)))
    r32 = travel_time_ratio(scattering_table(sys, dom, (32, 32)))
    var = max(abs(r32[0] - r16[0]) / r32[0], abs(r32[1] - r16[1]) / r32[1])
    ok = all(math.isfinite(v) for v in (*r16, *r32)) and var <= 0.05
    report(9, "l/<nu,xi> bounded and stable", ok,
           f"16x16 range=[{r16[1]:.4f}, {r16[0]:.4f}] 32x32 range=[{r32[1]:.4f}, {r32[0]:.4f}] "
           f"variation={100 * var:.2f}%")


def _scan_oracle_mismatches(expr, R=0.9, grid=(8, 8)):
    sys = MagneticSystem(ChartMetric.euclidean(), FieldStrength(expression=expr))
    dom = DiskDomain((0, 0), R)
    flags = {f.index for f in boundary_conjugate_scan(sys, dom, grid)}
    # oracle: a conjugate point strictly before the exit, found along each orbit by the Jacobi module
    table = scattering_table(sys, dom, grid)
    mism = 0
    for i, ((s, a, e), rec) in enumerate(zip(grid_entries(sys, dom, *grid), table.records)):
        assert rec.status is ExitStatus.EXITED and rec.entry == e
        cp = first_conjugate(sys, e.position, e.velocity, rec.travel_time)
        oracle = cp is not None and cp.time < rec.travel_time
        mism += oracle != (i in flags)
    return len(flags), mism


def test_c10_simplicity_verdicts(report):
    kinds = {R: simplicity_verdict(flat(1.0), DiskDomain((0, 0), R), (16, 16)).kind for R in (0.5, 2.0, 1.0)}
    ok_kinds = (kinds[0.5] is VerdictKind.SIMPLE and kinds[2.0] is VerdictKind.NOT_STRICTLY_CONVEX
                and kinds[1.0] is VerdictKind.NOT_STRICTLY_CONVEX)
    # weak Gaussian field (no conjugate pairs) and a strong one (many)
    weak = _scan_oracle_mismatches("2*exp(-(x^2+y^2)/0.5)")
    strong = _scan_oracle_mismatches("4*exp(-(x^2+y^2)/0.2)")
    ok = ok_kinds and weak[1] == 0 and strong[1] == 0 and strong[0] > 0
    report(10, "simplicity verdicts and conjugate scan", ok,
           f"R=0.5:{kinds[0.5].value} R=2:{kinds[2.0].value} R=1:{kinds[1.0].value} "
           f"weak field flags={weak[0]} mismatches={weak[1]}; strong field flags={strong[0]} "
           f"mismatches={strong[1]}")


def test_c11_rigidity_smoke(report):
    t0 = time.perf_counter()
    dom = DiskDomain((0, 0), math.tan(0.1))  # geodesic radius 0.2 about the origin
    base = sphere(1.0)
    margin = convexity_margin(base, dom).margin
    plain = closure_census(base, dom, (32, 16), tmax=6.0, baseline=base)
    bumped = closure_census(sphere(1.0, Bump((0.0, 0.0), 0.08, 0.05)), dom, (32, 16), tmax=6.0,
                            baseline=base)
    dt = time.perf_counter() - t0
    ok = (margin > 0 and plain.all_closed and set(plain.pass_counts) <= {0, 1}
          and plain.comparison.sup <= 1e-6 and plain.comparison.status_mismatches == 0
          and bumped.worst_gap > 1e-3 and bumped.comparison.sup > 1e-3 and dt <= 120)
    report(11, "rigidity smoke test", ok,
           f"plain: {100 * plain.fraction_closed:.1f}% closed m={sorted(plain.pass_counts)} "
           f"sup={plain.comparison.sup:.1e}; bumped: worst gap={bumped.worst_gap:.3g} "
           f"sup={bumped.comparison.sup:.3g}; runtime={dt:.1f}s")


def test_c12_determinism(report, tmp_path):
    cfg = str(CONFIGS / "flat_disk.toml")
    a, b = tmp_path / "a", tmp_path / "b"
    codes = []
    for exp in EXPERIMENTS:
        for d in (a, b):
            codes.append(run([exp, "--config", cfg, "--out", str(d)]))
    names = [f"{e}.csv" for e in EXPERIMENTS]
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    ok = all(c == 0 for c in codes) and len(match) == len(EXPERIMENTS)
    report(12, "CLI determinism", ok, f"{len(match)}/{len(EXPERIMENTS)} CSV files byte-identical"
           + (f"; differing: {mismatch + errors}" if mismatch or errors else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
