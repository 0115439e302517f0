"""Command-line front end: ``maglab <experiment> --config run.toml --out DIR``.

Each invocation runs one experiment, writes ``<experiment>.csv`` and a JSON
sidecar ``<experiment>.json`` carrying the config hash, and prints a one-line
summary.  Failures print a JSON error object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .boundary import (ExitStatus, compare_scattering, convexity_margin, entry_point, exit_event,
                       grid_entries, scattering_table, simplicity_verdict, travel_time_ratio)
from .closure import closure_census
from .config import ConfigError, RunConfig, load_config
from .errors import ContractError, MaglabError
from .flow import PhasePoint, integrate
from .index_form import (FieldOnGeodesic, index_evaluate, index_gram, index_lemma_check, sine_modes)
from .jacobi import first_conjugate, propagate_jacobi, scan_conjugate

EXPERIMENTS = ("trace", "exit", "scatter", "jacobi", "conjugates", "index", "convexity",
               "simplicity", "closure", "compare-scatter")


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_domain(cfg: RunConfig, name):
    if cfg.domain is None:
        raise ContractError(f"experiment '{name}' needs a [domain] section", "cli", key="domain")
    return cfg.domain.build()


def _start(sys_, spec):
    return PhasePoint.unit(sys_, spec.position, spec.vector())


# ---------------------------------------------------------------------------
# experiments; each returns (csv header, rows, json payload, summary line)


def run_trace(cfg, sys_, args):
    p = cfg.trace
    traj = integrate(sys_, _start(sys_, p.start), p.duration, cfg.integrator.build())
    idx = list(range(0, len(traj.times), p.every))
    if idx[-1] != len(traj.times) - 1:
        idx.append(len(traj.times) - 1)
    rows = [(traj.times[i], *traj.states[i, :4]) for i in idx]
    meta = dict(traj.metadata)
    meta["derivative_source"] = sys_.chart.derivative_source
    end = traj.states[-1]
    return (["t", "x", "y", "vx", "vy"], rows, {"integrator": meta, "end": list(end[:4])},
            f"trace: {len(rows)} samples, end=({end[0]:.10g}, {end[1]:.10g})")


def run_exit(cfg, sys_, args):
    dom = _require_domain(cfg, "exit")
    p = cfg.exit
    entry = entry_point(sys_, dom, p.arclen, p.angle)
    ev = exit_event(sys_, dom, entry, p.tmax, cfg.integrator.step)
    ex = ev.exit
    row = (ev.travel_time, *(ex.position if ex else (math.nan, math.nan)),
           *(ex.velocity if ex else (math.nan, math.nan)), ev.status.value)
    return (["l", "x", "y", "vx", "vy", "status"], [row],
            {"entry": {"position": list(entry.position), "velocity": list(entry.velocity)},
             "status": ev.status.value, "tmax": ev.tmax},
            f"exit: {ev.status.value} l={ev.travel_time:.12g}")


SCATTER_HEADER = ["arclen_in", "angle_in", "arclen_out", "angle_out", "l", "status"]


def run_scatter(cfg, sys_, args):
    dom = _require_domain(cfg, "scatter")
    g = cfg.grid
    tab = scattering_table(sys_, dom, (g.n_boundary, g.n_angle), tmax=cfg.scatter.tmax,
                           step=cfg.integrator.step, threads=args.threads)
    rmax, rmin = travel_time_ratio(tab)
    counts = tab.counts()
    errors = [{"index": i, "message": r.message} for i, r in enumerate(tab.records)
              if r.status is ExitStatus.ERROR]
    return (SCATTER_HEADER, list(tab.rows()),
            {"counts": counts, "boundary_length": tab.length, "step": tab.step, "tmax": tab.tmax,
             "ratio_max": rmax, "ratio_min": rmin, "errors": errors},
            "scatter: " + ", ".join(f"{k}={v}" for k, v in counts.items()))


def run_jacobi(cfg, sys_, args):
    p = cfg.jacobi
    start = _start(sys_, p.start)
    traj = integrate(sys_, start, p.duration, cfg.integrator.build())
    J0p = p.J0p if p.J0p is not None else (-start.velocity[1], start.velocity[0])
    st = propagate_jacobi(sys_, traj, p.J0, J0p)
    f1, f2, d1, d2 = st.coefficients()
    idx = list(range(0, len(st.times), p.every))
    if idx[-1] != len(st.times) - 1:
        idx.append(len(st.times) - 1)
    rows = [(st.times[i], f1[i], f2[i], d1[i], d2[i]) for i in idx]
    drift = float(np.max(np.abs(st.constraint())))
    cp = scan_conjugate(st) if p.J0 == (0.0, 0.0) else None
    return (["t", "f1", "f2", "f1p", "f2p"], rows,
            {"constraint_max": drift, "first_zero_of_f2": None if cp is None else cp.time},
            f"jacobi: {len(rows)} samples, max |<J',gamma'>|={drift:.3g}")


def run_conjugates(cfg, sys_, args):
    p = cfg.conjugates
    rows = []
    for k in range(p.n_directions):
        ang = 2 * math.pi * k / p.n_directions
        st = PhasePoint.at_angle(sys_, p.position, ang)
        cp = first_conjugate(sys_, st.position, st.velocity, p.tmax, cfg.integrator.build())
        if cp is None:
            rows.append((ang, math.nan, math.nan, math.nan, "none"))
        else:
            rows.append((ang, cp.time, cp.position[0], cp.position[1], "marginal" if cp.marginal else "zero"))
    found = [r[1] for r in rows if r[4] != "none"]
    summary = (f"conjugates: {len(found)}/{len(rows)} directions, first t0={min(found):.10g}" if found
               else f"conjugates: none within Tmax={p.tmax}")
    return (["angle", "t0", "x", "y", "kind"], rows, {"found": len(found)}, summary)


def run_index(cfg, sys_, args):
    p = cfg.index
    start = _start(sys_, p.start)
    traj = integrate(sys_, start, p.duration, cfg.integrator.build())
    Z = sine_modes(p.duration, p.amplitudes)
    value = index_evaluate(sys_, traj, Z)
    gram = index_gram(sys_, traj, p.N)
    rows = []
    for L in p.sweep_lengths:
        tr = integrate(sys_, start, L, cfg.integrator.build())
        g = index_gram(sys_, tr, p.N)
        rows.append((L, g.smallest, g.verdict))
    payload = {"value": value, "smallest_eigenvalue": gram.smallest, "verdict": gram.verdict,
               "kernel_tolerance": gram.kernel_tolerance, "lowest": list(gram.lowest)}
    if p.lemma_trials:
        Zl = FieldOnGeodesic.from_function(
            p.duration, lambda t: t / p.duration, lambda t: np.full_like(t, 1.0 / p.duration),
            vanishes_at_start=True)
        try:
            rep = index_lemma_check(sys_, traj, Zl, trials=p.lemma_trials, seed=args.seed)
            payload["index_lemma"] = {"violations": rep.violations, "min_margin": rep.min_margin,
                                      "reversed_violations": rep.reversed_violations,
                                      "reversal_residual": rep.reversal_residual}
        except ContractError as exc:
            payload["index_lemma"] = {"skipped": str(exc)}
    return (["length", "smallest_eigenvalue", "verdict"], rows, payload,
            f"index: value={value:.10g} smallest={gram.smallest:.6g} ({gram.verdict})")


def run_convexity(cfg, sys_, args):
    dom = _require_domain(cfg, "convexity")
    n = cfg.convexity.n_samples
    rep = convexity_margin(sys_, dom, n)
    L = dom.length(sys_)
    rows = []
    for i in range(n):
        s = i * L / n
        tau = dom.tau_at(sys_, s)
        k = float(np.atleast_1d(dom.geodesic_curvature(sys_, np.array([tau])))[0])
        c = dom.curve(np.array([tau]))[0][0]
        b = float(sys_.b(float(c[0]), float(c[1])))
        rows.append((s, k, b, k - abs(b)))
    return (["arclen", "kappa", "b", "margin"], rows,
            {"margin": rep.margin, "position": list(rep.position), "direction": list(rep.direction),
             "strictly_convex": rep.strictly_convex},
            f"convexity: margin={rep.margin:.10g} ({'strictly convex' if rep.strictly_convex else 'not strictly convex'})")


def run_simplicity(cfg, sys_, args):
    dom = _require_domain(cfg, "simplicity")
    p = cfg.simplicity
    g = cfg.grid
    v = simplicity_verdict(sys_, dom, (g.n_boundary, g.n_angle), p.n_samples, p.tmax, p.h,
                           cfg.integrator.step, threads=args.threads)
    rows = [(v.kind.value, k, val if not isinstance(val, (list, tuple)) else " ".join(_fmt(x) for x in val))
            for k, val in sorted(v.witness.items())]
    return (["verdict", "key", "value"], rows, {"verdict": v.kind.value, "witness": v.witness},
            v.kind.value)


def run_closure(cfg, sys_, args):
    dom = _require_domain(cfg, "closure")
    p = cfg.closure
    g = cfg.grid
    baseline = None
    if p.baseline:
        chart = sys_.chart if sys_.chart.perturbation is None else replace(sys_.chart, perturbation=None)
        field = sys_.field if sys_.field.bump is None else replace(sys_.field, bump=None)
        baseline = replace(sys_, chart=chart, field=field)
    rep = closure_census(sys_, dom, (g.n_boundary, g.n_angle), p.tmax, baseline=baseline,
                         weight=p.weight, closure_tol=p.closure_tol, step=cfg.integrator.step,
                         threads=args.threads)
    entries = grid_entries(sys_, dom, g.n_boundary, g.n_angle)
    rows = [(e[0], e[1], r.period, r.gap, r.pass_count, r.status) for e, r in zip(entries, rep.records)]
    s = rep.summary()
    return (["arclen_in", "angle_in", "period", "gap", "m", "status"], rows, s,
            f"closure: {100 * rep.fraction_closed:.1f}% closed, worst gap={rep.worst_gap:.3g}, "
            f"m={s['pass_counts']}")


def run_compare(cfg, sys_, args):
    dom = _require_domain(cfg, "compare-scatter")
    p = cfg.compare
    g = (cfg.grid.n_boundary, cfg.grid.n_angle)
    other = sys_
    if p.chart is not None or p.field is not None:
        other = type(sys_)(p.chart.build() if p.chart else sys_.chart,
                           p.field.build() if p.field else sys_.field)
    A = scattering_table(sys_, dom, g, tmax=p.tmax, step=cfg.integrator.step, threads=args.threads)
    step_b = A.step / p.step_ratio if p.step_ratio else cfg.integrator.step
    B = scattering_table(other, dom, g, tmax=p.tmax, step=step_b, threads=args.threads)
    c = compare_scattering(A, B)
    rows = [("position", c.position), ("direction", c.direction), ("travel_time", c.travel_time),
            ("status_mismatches", c.status_mismatches)]
    return (["metric", "value"], rows,
            {"position": c.position, "direction": c.direction, "travel_time": c.travel_time,
             "status_mismatches": c.status_mismatches, "compared": c.compared},
            f"compare-scatter: position={c.position:.3g} direction={c.direction:.3g} "
            f"l={c.travel_time:.3g} mismatches={c.status_mismatches}")


RUNNERS = {
    "trace": run_trace, "exit": run_exit, "scatter": run_scatter, "jacobi": run_jacobi,
    "conjugates": run_conjugates, "index": run_index, "convexity": run_convexity,
    "simplicity": run_simplicity, "closure": run_closure, "compare-scatter": run_compare,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="maglab", description="Magnetic geodesic flow experiments.")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = cfg.seed
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1", [{"key": "--threads", "message": "must be >= 1"}])
        os.makedirs(args.out, exist_ok=True)
        sys_ = cfg.system()
        header, rows, payload, line = RUNNERS[args.experiment](cfg, sys_, args)
        stem = os.path.join(args.out, args.experiment)
        write_csv(stem + ".csv", header, rows)
        write_json(stem + ".json", {"experiment": args.experiment, "config_hash": cfg.hash(),
                                    "seed": args.seed, "version": __version__, "result": payload})
    except MaglabError as exc:
        print(json.dumps(_jsonable(exc.to_json()), sort_keys=True), file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "module": "cli", "message": str(exc)}), file=sys.stderr)
        return 1
    print(line)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
