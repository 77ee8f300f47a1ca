import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from mepackets import me_classical as mc
from mepackets.qcore import NumericalConsistencyError, ValidationError

finite = st.floats(-3, 3)
width = st.floats(0.2, 3)


def packet(Q=0.0, P=0.0, dQ=1.0, dP=1.0, **kw):
    return mc.MEPacketParams(Q, P, dQ, dP, **kw)


# parameters and multipliers

def test_params_validation():
    with pytest.raises(ValidationError):
        packet(dQ=0.0)
    with pytest.raises(ValidationError):
        packet(dP=1e-13)
    with pytest.raises(ValidationError):
        packet(Q=math.nan)
    with pytest.raises(ValidationError):
        packet(v=-1.0)


def test_multipliers_examples():
    m = mc.multipliers_from_params(packet())
    assert (m.l1, m.l2, m.l3, m.l4) == (0.0, 0.0, 0.5, 0.5)
    m = mc.multipliers_from_params(packet(Q=1.0))
    assert (m.l1, m.l2, m.l3, m.l4) == (-1.0, 0.0, 0.5, 0.5)


@given(finite, finite, width, width, finite)
def test_shift_changes_only_l1(Q, P, dQ, dP, c):
    a = mc.multipliers_from_params(packet(Q, P, dQ, dP))
    b = mc.multipliers_from_params(packet(Q + c, P, dQ, dP))
    assert (a.l2, a.l3, a.l4) == (b.l2, b.l3, b.l4)
    assert b.l1 - a.l1 == pytest.approx(-c / dQ ** 2, rel=1e-9, abs=1e-12)


@given(finite, finite, width, width)
def test_partition_function_derivatives(Q, P, dQ, dP):
    p = packet(Q, P, dQ, dP)
    m = mc.multipliers_from_params(p)
    h = 1e-6

    def lnZ(**kw):
        d = dict(l1=m.l1, l2=m.l2, l3=m.l3, l4=m.l4)
        d.update(kw)
        return mc.log_classical_partition_function(mc.LagrangeMultipliers(**d), p.v)

    dl1 = (lnZ(l1=m.l1 + h) - lnZ(l1=m.l1 - h)) / (2 * h)
    assert -dl1 == pytest.approx(Q, abs=1e-5 * (1 + abs(Q)) / dQ ** 2 * dQ ** 2 + 1e-5)


# density and moments

def test_density_peak_and_symmetry():
    p = packet(0.3, -0.2, 0.7, 1.3)
    peak = p.v / (2 * math.pi * p.dQ * p.dP)
    assert mc.density_at(p, p.Q, p.P) == pytest.approx(peak, rel=1e-15)
    x = np.linspace(0, 3, 7)
    np.testing.assert_allclose(mc.density_at(p, p.Q + x, p.P), mc.density_at(p, p.Q - x, p.P), rtol=1e-14)


def test_density_normalization():
    p = packet(0.5, 0.2, 0.6, 0.9)
    val, _ = integrate.dblquad(lambda pm, q: mc.density_at(p, q, pm), -8, 9, -8, 8,
                               epsabs=1e-12, epsrel=1e-12)
    assert val / p.v == pytest.approx(1.0, abs=1e-8)


def test_gaussian_moment_examples():
    p = packet(0.5, 0.2, 0.4, 0.6)
    assert mc.gaussian_moment(p, 1, 0) == 0.5
    assert mc.gaussian_moment(p, 0, 2) == pytest.approx(0.2 ** 2 + 0.6 ** 2, rel=1e-15)
    assert mc.gaussian_moment(p, 1, 1) == pytest.approx(0.1, rel=1e-15)
    assert mc.gaussian_moment(p, 3, 0) == pytest.approx(0.5 ** 3 + 3 * 0.5 * 0.4 ** 2, rel=1e-15)
    with pytest.raises(ValidationError):
        mc.gaussian_moment(p, 5, 4)


@pytest.mark.parametrize("k,l", [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 2), (1, 3), (4, 0)])
def test_gaussian_moment_matches_quadrature(k, l):
    p = packet(0.4, -0.3, 0.8, 0.6)
    val, _ = integrate.dblquad(lambda pm, q: q ** k * pm ** l * mc.density_at(p, q, pm) / p.v,
                               -10, 10, -8, 8, epsabs=1e-12, epsrel=1e-12)
    assert mc.gaussian_moment(p, k, l) == pytest.approx(val, abs=1e-7)


@settings(max_examples=20, deadline=None)
@given(finite, finite, width, width, st.integers(0, 4), st.integers(0, 4))
def test_partition_function_route_agrees(Q, P, dQ, dP, k, l):
    p = packet(Q, P, dQ, dP)
    want = mc.gaussian_moment(p, k, l)
    assert mc.moment_from_partition_function(p, k, l) == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_monte_carlo_moments_cross_check():
    p = packet(0.5, 0.2, 0.4, 0.6)
    mcm, (q, pm) = mc.monte_carlo_oracle(p, mc.PolynomialPotential.free(), 0.0,
                                         n_samples=200_000, seed=1, return_samples=True)
    for k, l in ((1, 1), (3, 0)):
        x = q ** k * pm ** l
        assert abs(x.mean() - mc.gaussian_moment(p, k, l)) < 4 * x.std() / math.sqrt(len(x))


# entropy

def test_entropy_examples():
    v = 2 * math.pi
    assert mc.classical_entropy(packet(dQ=2.0, dP=0.5)) == pytest.approx(1.0, abs=1e-15)
    assert mc.classical_entropy(packet(dQ=1.0, dP=1 / math.e)) == pytest.approx(0.0, abs=1e-15)
    assert mc.classical_entropy(packet(dQ=1.0, dP=1.0, v=v / 3)) == pytest.approx(1 + math.log(3))


@given(width, width, st.floats(1.01, 5))
def test_entropy_monotone(dQ, dP, f):
    assert mc.classical_entropy(packet(dQ=dQ * f, dP=dP)) > mc.classical_entropy(packet(dQ=dQ, dP=dP))


# exact quadratic evolution

def test_free_particle_evolution():
    out = mc.evolve_quadratic(packet(0.0, 1.0, 1.0, 1.0), mc.PolynomialPotential.free(), 2.0)
    assert (out.Q, out.P, out.dP) == (2.0, 1.0, 1.0)
    assert out.dQ == pytest.approx(math.sqrt(5), rel=1e-15)


def test_harmonic_widths_constant():
    t = np.linspace(0, 20, 101)
    tr = mc.quadratic_trajectory(packet(0.3, -1.0), mc.PolynomialPotential.harmonic(), t)
    np.testing.assert_allclose(tr.dQ, 1.0, atol=1e-15)
    np.testing.assert_allclose(tr.dP, 1.0, atol=1e-15)


@given(finite, finite, width, width, st.sampled_from([-0.7, 0.0, 1.3]), finite)
def test_identity_at_time_zero(Q, P, dQ, dP, V2, V1):
    p = packet(Q, P, dQ, dP)
    out = mc.evolve_quadratic(p, mc.PolynomialPotential((0.0, V1, V2)), 0.0)
    assert (out.Q, out.P, out.dQ, out.dP) == pytest.approx((Q, P, dQ, dP), abs=1e-15)


@given(st.sampled_from([-2.0, -0.3, 0.0, 0.5, 4.0]), finite, st.floats(0.3, 3),
       st.lists(st.floats(-5, 5), min_size=1, max_size=10))
def test_symplectic_determinant(V2, V1, mu, ts):
    b = mc.quadratic_basis(mc.PolynomialPotential((0.0, V1, V2), mu), np.array(ts))
    # cancellation error grows with the size of the two products (cosh^2 - sinh^2)
    scale = np.abs(b.f1 * b.g2) + np.abs(b.f2 * b.g1)
    assert np.all(np.abs(b.determinant - 1.0) <= 1e-14 * scale + 1e-15)


def test_initial_conditions_of_basis():
    for V in (mc.PolynomialPotential((0, 0.4, 2.0)), mc.PolynomialPotential((0, 0.4, -2.0)),
              mc.PolynomialPotential((0, 0.4, 0.0))):
        b = mc.quadratic_basis(V, 0.0)
        assert (b.f1, b.g2) == (1.0, 1.0)
        assert (b.f0, b.f2, b.g0, b.g1) == (0.0, 0.0, 0.0, 0.0)


def test_oscillator_is_periodic():
    V = mc.PolynomialPotential.harmonic(V2=2.0, mu=0.5)
    period = 2 * math.pi / math.sqrt(2.0 / 0.5)
    t = np.linspace(0, 3, 31)
    p = packet(0.4, 0.1, 0.3, 1.7)
    a = mc.quadratic_trajectory(p, V, t)
    b = mc.quadratic_trajectory(p, V, t + period)
    assert a.max_abs_diff(b) < 1e-12


def test_anti_oscillator_flagged():
    tr = mc.quadratic_trajectory(packet(), mc.PolynomialPotential.harmonic(V2=-1.0), [0, 1, 2])
    assert tr.meta["unbounded"] and tr.meta["regime"] == "anti-oscillator"
    assert tr.dQ[-1] > math.cosh(2)
    assert not mc.quadratic_trajectory(packet(), mc.PolynomialPotential.harmonic(), [1])\
        .meta["unbounded"]


def test_evolution_needs_quadratic_potential():
    with pytest.raises(ValidationError):
        mc.evolve_quadratic(packet(), mc.PolynomialPotential((0, 0, 1, 0.1)), 1.0)


def test_potential_validation():
    with pytest.raises(ValidationError):
        mc.PolynomialPotential((0,) * 7)
    with pytest.raises(ValidationError):
        mc.PolynomialPotential((0, 1), mu=0)
    V = mc.PolynomialPotential((1.0, 2.0, 3.0, 4.0))
    assert V.degree == 3 and not V.is_quadratic
    assert V.value(1.0) == pytest.approx(1 + 2 + 1.5 + 4 / 6)
    assert V.force(1.0) == pytest.approx(-(2 + 3 + 2))


# Taylor derivatives of the averages

def test_quadratic_derivatives_match_closed_form():
    p = packet(0.7, -0.4, 0.5, 1.1)
    V = mc.PolynomialPotential((0.0, 0.3, 1.7), mu=0.8)
    d = mc.moment_taylor_derivatives(p, V)
    assert d.dP[0] == pytest.approx(-0.3 - 1.7 * 0.7, rel=1e-14)
    h = 1e-3
    tr = mc.quadratic_trajectory(p, V, [-h, 0.0, h])
    assert d.dP[0] == pytest.approx((tr.P[2] - tr.P[0]) / (2 * h), rel=1e-6)
    assert d.dP[1] == pytest.approx((tr.P[2] - 2 * tr.P[1] + tr.P[0]) / h ** 2, rel=1e-5)
    assert d.dQ[0] == pytest.approx(p.P / V.mu, rel=1e-14)


def test_cubic_force_average():
    p = packet(0.5, 0.2, 0.4, 0.6)
    V = mc.PolynomialPotential((0.0, 0.3, 1.0, 0.8))
    d = mc.moment_taylor_derivatives(p, V)
    assert d.dP[0] == pytest.approx(-0.3 - 1.0 * 0.5 - 0.4 * (0.25 + 0.16), rel=1e-14)


@given(finite, finite, width, width, st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 2))
def test_second_derivative_of_momentum(Q, P, dQ, dP, V3, V4, mu):
    # average of -(V2 + V3 q + V4 q^2/2) p / mu over independent Gaussians
    p = packet(Q, P, dQ, dP)
    V2 = 1.3
    d = mc.moment_taylor_derivatives(p, mc.PolynomialPotential((0.0, 0.2, V2, V3, V4), mu))
    want = -(V2 + V3 * Q + V4 * (Q * Q + dQ * dQ) / 2) * P / mu
    assert d.dP[1] == pytest.approx(want, rel=1e-10, abs=1e-12)
    assert d.dQ[2] == pytest.approx(d.dP[1] / mu, rel=1e-12, abs=1e-14)


def test_point_particle_limit():
    Q, P, mu = 0.6, -0.8, 1.4
    c = (0.0, 0.3, 1.1, -0.5, 0.7)
    V = mc.PolynomialPotential(c, mu)
    d = mc.moment_taylor_derivatives(packet(Q, P, 1e-9, 1e-9), V)
    Vp = c[1] + c[2] * Q + c[3] * Q ** 2 / 2 + c[4] * Q ** 3 / 6
    Vpp = c[2] + c[3] * Q + c[4] * Q ** 2 / 2
    Vppp = c[3] + c[4] * Q
    assert d.dP[0] == pytest.approx(-Vp, rel=1e-12)
    assert d.dP[1] == pytest.approx(-Vpp * P / mu, rel=1e-12)
    # d/dt of -V''(q) p / mu
    assert d.dP[2] == pytest.approx(-Vppp * P ** 2 / mu ** 2 + Vpp * Vp / mu, rel=1e-9)


def test_taylor_prediction_short_time():
    p = packet(0.7, -0.4, 0.5, 1.1)
    V = mc.PolynomialPotential.harmonic(V2=1.0)
    Qt, Pt = mc.moment_taylor_derivatives(p, V).predict(p, 0.1)
    tr = mc.quadratic_trajectory(p, V, 0.1)
    assert Qt == pytest.approx(float(tr.Q), abs=1e-6)
    assert Pt == pytest.approx(float(tr.P), abs=1e-6)


# Monte Carlo oracle

def test_monte_carlo_free_width():
    res = mc.monte_carlo_oracle(packet(0.0, 1.0, 1.0, 1.0), mc.PolynomialPotential.free(), 2.0,
                                n_samples=1_000_000, seed=11)
    assert abs(res.dQ - math.sqrt(5)) <= 3 * res.dQ_se
    assert abs(res.Q - 2.0) <= 3 * res.Q_se


def test_monte_carlo_matches_harmonic_closed_form():
    p = packet(0.5, -0.2, 0.6, 0.9)
    V = mc.PolynomialPotential((0.0, 0.2, 1.5), mu=0.7)
    want = mc.evolve_quadratic(p, V, 1.3)
    res = mc.monte_carlo_oracle(p, V, 1.3, n_samples=200_000, seed=4)
    for k in ("Q", "P", "dQ", "dP"):
        assert abs(getattr(res, k) - getattr(want, k)) <= 3 * getattr(res, k + "_se")


def test_monte_carlo_cubic_finite_difference():
    p = packet(0.5, 0.2, 0.4, 0.6)
    V = mc.PolynomialPotential((0.0, 0.3, 1.0, 0.8))
    got, se = mc.finite_difference_dPdt(p, V, n_samples=200_000, seed=3)
    assert abs(got - mc.moment_taylor_derivatives(p, V).dP[0]) <= 3 * se


def test_monte_carlo_rate():
    p = packet(0.0, 1.0, 1.0, 1.0)
    V = mc.PolynomialPotential.free()
    a = mc.monte_carlo_oracle(p, V, 1.0, n_samples=20_000, seed=1)
    b = mc.monte_carlo_oracle(p, V, 1.0, n_samples=320_000, seed=1)
    assert a.Q_se / b.Q_se == pytest.approx(4.0, rel=0.05)


def test_monte_carlo_seed_determinism():
    p = packet(0.1, 0.2, 0.3, 0.4)
    V = mc.PolynomialPotential.harmonic()
    assert mc.monte_carlo_oracle(p, V, 0.5, n_samples=5000, seed=9) == \
        mc.monte_carlo_oracle(p, V, 0.5, n_samples=5000, seed=9)


def test_monte_carlo_preconditions_and_diagnostics():
    p = packet()
    with pytest.raises(ValidationError):
        mc.monte_carlo_oracle(p, mc.PolynomialPotential.free(), 1.0, n_samples=100)
    # one huge step ruins energy conservation
    with pytest.raises(NumericalConsistencyError):
        mc.monte_carlo_oracle(p, mc.PolynomialPotential.harmonic(V2=100.0), 10.0,
                              n_samples=1000, n_steps=1)
