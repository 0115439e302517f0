import math

import numpy as np
import pytest
from scipy.integrate import quad

from maglab.errors import ContractError
from maglab.flow import PhasePoint, integrate
from maglab.geometry import ChartMetric
from maglab.index_form import (FieldOnGeodesic, corner_field, cut_corner, index_evaluate, index_family_sweep,
                               index_gram, index_lemma_check, sine_modes)
from maglab.jacobi import vanishing_jacobi
from maglab.magnetic import MagneticSystem


def orbit(sys, T):
    return integrate(sys, PhasePoint((0, 0), (1, 0)), T)


def sine(T):
    return FieldOnGeodesic.from_function(T, np.sin, np.cos)


def test_zero_field(flat1):
    tr = orbit(flat1, 2.0)
    assert index_evaluate(flat1, tr, FieldOnGeodesic.zero(2.0)) == 0.0


@pytest.mark.parametrize("T", [math.pi / 2, math.pi, 3 * math.pi / 2])
def test_sine_matches_quadrature(flat1, T):
    # integrand cos^2 - sin^2 = cos 2t; its integral vanishes at every multiple of pi/2
    ref = quad(lambda t: math.cos(t) ** 2 - math.sin(t) ** 2, 0, T)[0]
    val = index_evaluate(flat1, orbit(flat1, T), sine(T))
    assert abs(val - ref) <= 1e-7
    assert abs(val) <= 1e-7


def test_non_jacobi_field_matches_quadrature(flat1):
    T = 2.0
    u, du = (lambda t: t * (T - t)), (lambda t: T - 2 * t)
    ref = quad(lambda t: du(t) ** 2 - u(t) ** 2, 0, T)[0]
    val = index_evaluate(flat1, orbit(flat1, T), FieldOnGeodesic.from_function(T, u, du))
    assert val == pytest.approx(ref, abs=1e-10)


def test_parallel_component_costs_only_its_derivative(flat1):
    # for Z = w e1 the integrand reduces to w'^2
    T = 2.0
    k = math.pi / T
    Z = FieldOnGeodesic.from_function(T, lambda t: 0 * t, lambda t: 0 * t,
                                      lambda t: np.sin(k * t), lambda t: k * np.cos(k * t))
    assert index_evaluate(flat1, orbit(flat1, T), Z) == pytest.approx(k * k * T / 2, abs=1e-10)


def test_curved_system_uses_full_potential():
    # sphere K=1 with b=1: q = K + b^2 = 2
    sys = MagneticSystem.constant(ChartMetric.spherical(1.0), 1.0)
    T = 1.0
    tr = integrate(sys, PhasePoint.unit(sys, (0.1, 0.0), (0, 1)), T)
    Z = sine_modes(T, [1.0])
    k = math.pi / T
    ref = quad(lambda t: (k * math.cos(k * t)) ** 2 - 2 * math.sin(k * t) ** 2, 0, T)[0]
    assert index_evaluate(sys, tr, Z) == pytest.approx(ref, abs=1e-9)


def test_breakpoints_must_span_orbit(flat1):
    with pytest.raises(ContractError):
        index_evaluate(flat1, orbit(flat1, 2.0), sine(1.0))


@pytest.mark.parametrize("T,expected", [(math.pi / 2, 3.0), (3 * math.pi / 2, 4 / 9 - 1)])
def test_gram_eigenvalue_matches_dirichlet_spectrum(flat1, T, expected):
    # -u'' - u on [0, T] with zero ends has lowest eigenvalue (pi/T)^2 - 1
    g = index_gram(flat1, orbit(flat1, T), 64)
    assert g.smallest == pytest.approx(expected, abs=2e-3)
    assert g.verdict == ("positive" if expected > 0 else "indefinite")


def test_gram_kernel_at_conjugate_time(flat1):
    tr = orbit(flat1, math.pi)
    g64 = index_gram(flat1, tr, 64)
    g256 = index_gram(flat1, tr, 256)
    assert abs(g256.smallest) <= 1e-3
    assert abs(g256.smallest) < abs(g64.smallest)
    assert g256.kernel_detected and g256.verdict == "kernel"
    assert g256.smallest == pytest.approx(1.25e-5, rel=0.05)


def test_family_sweep_crosses_at_pi(flat1):
    lengths = [2.5, 3.0, 3.3, 3.6]
    res = index_family_sweep(flat1, (0, 0), [(1, 0)] * 4, lengths, N=64)
    assert res.first_crossing == 2
    assert [r[2] > 0 for r in res.rows] == [True, True, False, False]


def test_cut_corner_is_negative(flat1):
    tr = orbit(flat1, 4.0)
    Z = cut_corner(flat1, tr, math.pi, 0.2)
    assert index_evaluate(flat1, tr, Z) == pytest.approx(-0.101, abs=2e-3)
    assert index_evaluate(flat1, tr, Z) < 0


def test_pure_corner_has_zero_index(flat1):
    tr = orbit(flat1, 4.0)
    assert abs(index_evaluate(flat1, tr, corner_field(flat1, tr, math.pi))) <= 1e-6


def test_corner_preconditions(flat1):
    tr = orbit(flat1, 4.0)
    with pytest.raises(ContractError):
        cut_corner(flat1, tr, 4.0, 0.1)
    with pytest.raises(ContractError):
        cut_corner(flat1, tr, math.pi, 1.0)


def test_index_lemma(flat1):
    T = 2.0
    tr = orbit(flat1, T)
    Z = FieldOnGeodesic.from_function(T, lambda t: t / 2, lambda t: 0.5 + 0 * t, vanishes_at_start=True)
    rep = index_lemma_check(flat1, tr, Z, trials=100, seed=1)
    assert rep.ok
    assert rep.min_margin >= -1e-9 and rep.reversed_min_margin >= -1e-9
    assert rep.reversal_residual <= 1e-8


def test_index_lemma_equality_case(flat1):
    T = 2.0
    tr = orbit(flat1, T)
    Jp = FieldOnGeodesic.from_jacobi(vanishing_jacobi(flat1, tr))
    rep = index_lemma_check(flat1, tr, Jp, trials=5)
    assert abs(rep.equality_residual) <= 1e-8
    assert rep.equality_distance <= 1e-8


def test_index_lemma_refuses_conjugate_orbit(flat1):
    T = 4.0
    Z = FieldOnGeodesic.from_function(T, lambda t: t, lambda t: 1 + 0 * t, vanishes_at_start=True)
    with pytest.raises(ContractError):
        index_lemma_check(flat1, orbit(flat1, T), Z, trials=2)
