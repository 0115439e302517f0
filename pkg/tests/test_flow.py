import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from maglab.errors import ContractError, FlowDomainError
from maglab.flow import (IntegratorSettings, PhasePoint, default_step, integrate, integrate_batch,
                         magnetic_exp)
from maglab.geometry import ChartMetric, christoffels, metric_jet
from maglab.magnetic import FieldStrength, MagneticSystem


def test_straight_line(flat0):
    tr = integrate(flat0, PhasePoint((0, 0), (1, 0)), 1.0)
    assert np.allclose(tr.end.position, (1, 0), atol=1e-12)
    assert np.allclose(tr.end.velocity, (1, 0), atol=1e-12)


def test_half_circle(flat1):
    tr = integrate(flat1, PhasePoint((0, 0), (1, 0)), math.pi)
    assert np.allclose(tr.end.position, (0, 2), atol=1e-10)
    assert np.allclose(tr.end.velocity, (-1, 0), atol=1e-10)


def test_full_circle_returns(flat1):
    tr = integrate(flat1, PhasePoint((0, 0), (1, 0)), 2 * math.pi)
    assert np.allclose(tr.end.as_list(), [0, 0, 1, 0], atol=1e-8)


def test_exp_at_zero_is_identity(flat1):
    assert np.array_equal(magnetic_exp(flat1, (0.25, 0.5), (1, 0), 0.0), [0.25, 0.5])
    assert np.allclose(magnetic_exp(flat1, (0, 0), (1, 0), math.pi), (0, 2), atol=1e-10)
    with pytest.raises(ContractError):
        magnetic_exp(flat1, (0, 0), (1, 0), -1.0)


def test_great_circle_period_off_origin(sphere0):
    # a great circle through (0.3, 0) stays in the chart and closes after 2 pi
    p = PhasePoint.unit(sphere0, (0.3, 0.0), (0.0, 1.0))
    x = magnetic_exp(sphere0, p.position, p.velocity, 2 * math.pi)
    assert np.allclose(x, (0.3, 0.0), atol=1e-7)


def test_great_circle_through_origin_hits_the_pole(sphere0):
    # from the origin every great circle passes the point at infinity at t = pi
    with pytest.raises(FlowDomainError) as info:
        magnetic_exp(sphere0, (0, 0), (0.5, 0), 2 * math.pi)
    assert info.value.exit_time == pytest.approx(math.pi, abs=0.01)
    assert info.value.last_time <= math.pi


def test_leaving_validity_region_reports_state():
    sys = MagneticSystem.constant(ChartMetric.from_expression("1", validity_radius=1.0), 0.0)
    with pytest.raises(FlowDomainError) as info:
        integrate(sys, PhasePoint((0, 0), (1, 0)), 3.0)
    err = info.value
    assert err.last_state is not None and math.hypot(*err.last_state[:2]) < 1
    assert err.exit_time == pytest.approx(1.0, abs=1e-9)
    assert err.to_json()["module"] == "flow"


def test_rejects_non_unit_start(flat1):
    with pytest.raises(ContractError):
        integrate(flat1, PhasePoint((0, 0), (2, 0)), 1.0)
    with pytest.raises(ContractError):
        integrate(flat1, PhasePoint((0, 0), (1, 0)), 0.0)


def test_matches_independent_ode_solver(sphere0):
    p = PhasePoint.unit(sphere0, (0.3, 0.0), (0.0, 1.0))

    def f(t, s):
        G = christoffels(metric_jet(sphere0.chart, s[:2]))
        v = s[2:]
        return [*v, *(-np.einsum("kij,i,j->k", G, v, v))]

    sol = solve_ivp(f, (0, 1.0), p.as_list(), rtol=1e-12, atol=1e-13)
    assert np.allclose(sol.y[:2, -1], magnetic_exp(sphere0, p.position, p.velocity, 1.0), atol=1e-10)


def test_fourth_order_convergence(flat1):
    errs = []
    for h in (0.1, 0.05, 0.025):
        x = magnetic_exp(flat1, (0, 0), (1, 0), math.pi, IntegratorSettings(step=h))
        errs.append(math.hypot(x[0], x[1] - 2))
    assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8


def test_unit_speed_drift():
    sys = MagneticSystem(ChartMetric.spherical(1.0), FieldStrength(expression="1 + 0.3*x"))
    tr = integrate(sys, PhasePoint.unit(sys, (0.2, 0.1), (1, 1)), 10.0)
    assert tr.metadata["speed_drift_per_unit_time"] <= 1e-9
    assert np.max(np.abs(tr.speeds() - 1)) <= 1e-12


def test_dense_output_reproduces_samples(flat1):
    tr = integrate(flat1, PhasePoint((0, 0), (1, 0)), 1.0, IntegratorSettings(step=0.01))
    assert np.array_equal(tr.state_at(tr.times[17]), tr.states[17])
    mid = tr.state_at(0.5 * (tr.times[3] + tr.times[4]))
    t = 0.5 * (tr.times[3] + tr.times[4])
    assert np.allclose(mid[:2], (math.sin(t), 1 - math.cos(t)), atol=1e-9)
    with pytest.raises(ContractError):
        tr.state_at(2.0)


def test_default_step():
    assert default_step(MagneticSystem.constant(ChartMetric.euclidean(), 0.0)) == 1e-3
    assert default_step(MagneticSystem.constant(ChartMetric.euclidean(), 4.0)) == pytest.approx(2.5e-4)
    assert default_step(MagneticSystem.constant(ChartMetric.spherical(4.0), 0.0)) == pytest.approx(5e-4)


def test_adaptive_agrees_with_fixed(flat1):
    tr = integrate(flat1, PhasePoint((0, 0), (1, 0)), math.pi, IntegratorSettings(adaptive=True))
    assert tr.metadata["policy"] != "fixed"
    assert np.allclose(tr.end.position, (0, 2), atol=1e-8)


def test_batch_equals_single():
    sys = MagneticSystem.constant(ChartMetric.spherical(1.0), 1.0)
    starts = [PhasePoint.at_angle(sys, (0.1 * k, 0.0), 0.3 * k) for k in range(4)]
    batch = integrate_batch(sys, starts, 2.0)
    for p0, tb in zip(starts, batch):
        ts = integrate(sys, p0, 2.0, IntegratorSettings(step=tb.step))
        assert np.allclose(ts.states, tb.states, atol=1e-13)
        assert tb.metadata["batch"]


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0.2, 3.0))
def test_flat_constant_field_orbits_are_circles(angle, b):
    sys = MagneticSystem.constant(ChartMetric.euclidean(), b)
    p = PhasePoint.at_angle(sys, (0, 0), angle)
    tr = integrate(sys, p, 2.0, IntegratorSettings(step=0.01))
    c = np.array([-math.sin(angle), math.cos(angle)]) / b
    r = np.hypot(tr.states[:, 0] - c[0], tr.states[:, 1] - c[1])
    assert np.max(np.abs(r - 1 / b)) < 1e-8
