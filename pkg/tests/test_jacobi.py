import math

import numpy as np
import pytest

from maglab.errors import ContractError
from maglab.flow import IntegratorSettings, PhasePoint, integrate
from maglab.geometry import ChartMetric
from maglab.jacobi import (first_conjugate, propagate_jacobi, symplectic_pairing, vanishing_jacobi,
                           variational_consistency)
from maglab.magnetic import FieldStrength, MagneticSystem, lorentz


def test_velocity_is_a_jacobi_field():
    sys = MagneticSystem(ChartMetric.spherical(1.0), FieldStrength(expression="1 + 0.5*x"))
    tr = integrate(sys, PhasePoint.unit(sys, (0.1, 0.2), (1, 0)), 3.0)
    v0 = tr.states[0, 2:4]
    J = propagate_jacobi(sys, tr, v0, lorentz(sys, tr.states[0, :2], v0))
    assert np.max(np.abs(J.J() - J.trajectory.states[:, 2:4])) <= 1e-8


def test_flat_unit_field_is_sine(flat1):
    tr = integrate(flat1, PhasePoint((0, 0), (1, 0)), 2 * math.pi)
    J = vanishing_jacobi(flat1, tr)
    assert np.max(np.abs(np.abs(J.perpendicular()) - np.abs(np.sin(J.times)))) <= 1e-6


def test_flat_straight_line_field(flat0):
    tr = integrate(flat0, PhasePoint((0, 0), (1, 0)), 3.0)
    J = vanishing_jacobi(flat0, tr)
    assert np.allclose(J.J(), np.outer(J.times, [0, 1]), atol=1e-12)


def test_initial_derivative_must_be_orthogonal(flat1):
    tr = integrate(flat1, PhasePoint((0, 0), (1, 0)), 1.0)
    with pytest.raises(ContractError):
        propagate_jacobi(flat1, tr, (0, 0), (1, 0))


def test_constraint_is_conserved():
    sys = MagneticSystem(ChartMetric.spherical(1.0), FieldStrength(expression="1 + 0.3*y"))
    tr = integrate(sys, PhasePoint.unit(sys, (0.2, 0.0), (0, 1)), 10.0)
    e2 = np.array([-tr.states[0, 3], tr.states[0, 2]])
    J = propagate_jacobi(sys, tr, (0.1, 0.3), tuple(0.7 * e2))
    assert np.max(np.abs(J.constraint())) <= 1e-8


def test_symplectic_pairing_vanishes(flat1):
    tr = integrate(flat1, PhasePoint((0, 0), (1, 0)), 2.0)
    e2 = (-tr.states[0, 3], tr.states[0, 2])
    Jv = propagate_jacobi(flat1, tr, (0, 0), e2)
    Jw = propagate_jacobi(flat1, tr, (0, 0), tuple(0.3 * np.array(e2)))
    for t in (0.5, 1.0, 1.5):
        assert abs(symplectic_pairing(Jv, Jw, flat1, tr, t)) <= 1e-8
        assert abs(symplectic_pairing(Jv, Jv, flat1, tr, t)) <= 1e-8


def test_pairing_with_velocity_is_constant():
    sys = MagneticSystem(ChartMetric.hyperbolic(-1.0), FieldStrength(expression="0.8 + x"))
    tr = integrate(sys, PhasePoint.unit(sys, (0.1, 0.0), (0, 1)), 2.0)
    v0 = tr.states[0, 2:4]
    Jg = propagate_jacobi(sys, tr, v0, lorentz(sys, tr.states[0, :2], v0))
    Jw = vanishing_jacobi(sys, tr)
    vals = [symplectic_pairing(Jg, Jw, sys, tr, t) for t in np.linspace(0, 2, 9)]
    assert np.ptp(vals) <= 1e-8


@pytest.mark.parametrize("sys", [
    MagneticSystem.constant(ChartMetric.euclidean(), 1.0),
    MagneticSystem.constant(ChartMetric.spherical(1.0), 0.5),
])
def test_variational_consistency(sys):
    x = (0.1, 0.0)
    xi = PhasePoint.unit(sys, x, (1, 0)).velocity
    v = PhasePoint.unit(sys, x, (0, 1)).velocity
    assert variational_consistency(sys, x, xi, v, 1.0, 1e-4) <= 1e-3
    assert variational_consistency(sys, x, xi, v, 0.0) == 0.0


def test_conjugate_flat_unit_field(flat1):
    cp = first_conjugate(flat1, (0, 0), (1, 0), 5.0)
    assert abs(cp.time - math.pi) <= 1e-6
    assert cp.multiplicity == 1
    assert np.allclose(cp.position, (0, 2), atol=1e-6)


def test_conjugate_sphere(sphere0):
    p = PhasePoint.unit(sphere0, (0.3, 0.0), (0, 1))
    cp = first_conjugate(sphere0, p.position, p.velocity, 4.0)
    assert abs(cp.time - math.pi) <= 1e-5


def test_no_conjugate_flat(flat0):
    assert first_conjugate(flat0, (0, 0), (1, 0), 100.0, IntegratorSettings(step=0.01)) is None


def test_conjugate_time_scales_with_field():
    # u'' + b^2 u = 0 refocuses at pi / b
    sys = MagneticSystem.constant(ChartMetric.euclidean(), 2.0)
    assert first_conjugate(sys, (0, 0), (1, 0), 3.0).time == pytest.approx(math.pi / 2, abs=1e-6)
