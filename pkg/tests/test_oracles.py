import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wgdelay.errors import AdmissibilityError, InvalidArgument, ThresholdProximity
from wgdelay.oracles import (SquareWell1D, analytic_phase_delay, free_gaussian_sojourn,
                             gaussian_probability_in_slab, square_well_1d, square_well_delay_matrix,
                             square_well_smatrix)


def test_no_well_is_transparent():
    r, t, de, do = square_well_1d(SquareWell1D(0.0, 1.0), np.linspace(0.1, 5, 20))
    assert np.max(np.abs(r)) < 1e-15 and np.allclose(t, 1.0, atol=1e-15)
    # phase shifts are defined modulo pi
    assert np.allclose(np.exp(2j * de), 1, atol=1e-14) and np.allclose(np.exp(2j * do), 1, atol=1e-14)


@given(st.floats(-20, 20), st.floats(0.1, 3.0))
def test_flux_conservation(depth, a):
    k = np.linspace(0.05, 8, 200)
    r, t, _, _ = square_well_1d(SquareWell1D(depth, a), k)
    assert np.max(np.abs(np.abs(r) ** 2 + np.abs(t) ** 2 - 1)) < 1e-13


def test_transmission_resonance():
    well = SquareWell1D(3.0, 1.0)
    q = 2 * np.pi / 2.0  # q * 2a = 2 pi
    k = np.sqrt(q ** 2 - 3.0)
    r, t, _, _ = square_well_1d(well, k)
    assert abs(abs(t) - 1) < 1e-14 and abs(r) < 1e-14


def test_parity_phases_diagonalise_smatrix():
    well = SquareWell1D(2.5, 0.8)
    k = np.linspace(0.2, 4, 30)
    r, t, de, do = square_well_1d(well, k)
    assert np.allclose(t + r, np.exp(2j * de), atol=1e-13)
    assert np.allclose(t - r, np.exp(2j * do), atol=1e-13)


def test_smatrix_layout():
    s = square_well_smatrix(SquareWell1D(1.0, 1.0), np.array([1.3]))
    r, t, _, _ = square_well_1d(SquareWell1D(1.0, 1.0), np.array([1.3]))
    assert s[0, 0] == t and s[0, 1] == r


def test_barrier_below_top_uses_evanescent_inner_momentum():
    r, t, _, _ = square_well_1d(SquareWell1D(-5.0, 1.0), np.array([1.0]))
    assert abs(abs(r) ** 2 + abs(t) ** 2 - 1) < 1e-14
    assert abs(t) < 0.2


def test_zero_momentum_rejected():
    with pytest.raises(ThresholdProximity):
        square_well_1d(SquareWell1D(1.0, 1.0), np.array([0.0, 1.0]))
    with pytest.raises(InvalidArgument):
        SquareWell1D(1.0, 0.0)


@pytest.mark.parametrize("depth", [-5.0, 2.0, 10.0])
def test_phase_delay_is_derivative_of_phase(depth):
    well = SquareWell1D(depth, 1.0)
    nu = 7.0
    lam = np.linspace(nu + 0.5, nu + 20, 15)
    te, to = analytic_phase_delay(well, lam, nu)
    h = 1e-5
    _, _, dp, op = square_well_1d(well, np.sqrt(lam + h - nu))
    _, _, dm, om = square_well_1d(well, np.sqrt(lam - h - nu))
    num_e = np.unwrap(np.array([dm, dp]), axis=0, period=np.pi)
    num_o = np.unwrap(np.array([om, op]), axis=0, period=np.pi)
    assert np.allclose(te, (num_e[1] - num_e[0]) / h, rtol=1e-6, atol=1e-8)
    assert np.allclose(to, (num_o[1] - num_o[0]) / h, rtol=1e-6, atol=1e-8)


def test_delay_vanishes_with_depth():
    lam = np.linspace(1.5, 30, 50)
    for d in [1e-2, 1e-4, 1e-6]:
        te, to = analytic_phase_delay(SquareWell1D(d, 1.0), lam, 1.0)
        assert np.max(np.abs(te)) + np.max(np.abs(to)) < 5 * d


def test_attractive_well_low_energy_retardation():
    # depth 2, a = 1 has a near-threshold odd-parity resonance; frozen value
    te, to = analytic_phase_delay(SquareWell1D(2.0, 1.0), np.array([1.0 + 0.01]), 1.0)
    tau = 0.5 * (te + to)[0]
    assert tau > 0
    assert tau == pytest.approx(9.1805, rel=1e-3)


def test_delay_matrix_parity_structure():
    m = square_well_delay_matrix(SquareWell1D(2.0, 1.0), np.array([5.0, 9.0]), 1.0)
    assert m.shape == (2, 2, 2)
    assert np.allclose(m, np.swapaxes(m, 1, 2))
    assert np.allclose(m[:, 0, 0], m[:, 1, 1])


def test_gaussian_slab_probability_limits():
    p = gaussian_probability_in_slab(3.0, 0.2, 0.0, 1e3, np.array([0.0]))
    assert p[0] == pytest.approx(1.0, abs=1e-14)
    assert gaussian_probability_in_slab(3.0, 0.2, 0.0, 0.0, np.array([1.0]))[0] == 0.0


def test_free_sojourn_zero_radius():
    assert free_gaussian_sojourn(3.0, 0.2, 0.0) == (0.0, 0.0)


def test_free_sojourn_ballistic_slope():
    r = np.array([200.0, 400.0])
    t = [free_gaussian_sojourn(3.0, 0.2, ri, tol=1e-12)[0] for ri in r]
    slope = (t[1] - t[0]) / (r[1] - r[0])
    # crossing [-r, r] at v0 = 2 xi0 takes 2r / v0
    assert slope == pytest.approx(2 / 6.0, rel=1e-2)


def test_free_sojourn_rejects_slow_packet():
    with pytest.raises(AdmissibilityError):
        free_gaussian_sojourn(1.0, 0.2, 1.0)


def test_free_sojourn_splits_at_origin():
    full, _ = free_gaussian_sojourn(3.0, 0.2, 4.0, tol=1e-12)
    a, _ = free_gaussian_sojourn(3.0, 0.2, 4.0, t_hi=0.0, tol=1e-12)
    b, _ = free_gaussian_sojourn(3.0, 0.2, 4.0, t_lo=0.0, tol=1e-12)
    assert a + b == pytest.approx(full, rel=1e-11)
