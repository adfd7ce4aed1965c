import numpy as np
import pytest

from wgdelay.errors import AdmissibilityError, DomainTooSmall, InvalidArgument
from wgdelay.oracles import free_gaussian_sojourn, gaussian_probability_in_slab
from wgdelay.spectral import gaussian_packet
from wgdelay.timedomain import (GridState, SojournRecord, TimeDomainConfig, choose_t0, default_radii,
                                energy_expectation, free_evolve, full_propagate, grid_to_packet,
                                plateau, prepare_scattering_state, sample_packet, slab_probability,
                                slab_weights, sojourn_free, sojourn_full, time_delay)
from wgdelay.waveguide import (Box, Constant, Gaussian, GaussianBump, Separable, build_transverse_basis,
                               compute_coupling, longitudinal_grid)


@pytest.fixture(scope="module")
def basis():
    return build_transverse_basis(1.0, 4)


@pytest.fixture(scope="module")
def phi(basis):
    return gaussian_packet(basis, [dict(channel=0, center_momentum=3.0, momentum_width=0.2)])


def test_slab_weights_integrate_trig_polynomials():
    n, h = 64, 0.25
    x0 = -n * h / 2
    x = x0 + h * np.arange(n)
    q = 2 * np.pi * 3 / (n * h)
    f = 1.0 + np.cos(q * x)
    r = np.array([0.0, 1.3, 5.0])
    exact = 2 * r + 2 * np.sin(q * r) / q
    assert np.allclose(slab_weights(n, h, x0, r) @ f, exact, atol=1e-13)


def test_free_slab_probability_matches_closed_form(phi):
    t = np.linspace(-3, 3, 13)
    r = np.array([0.5, 2.0, 7.0])
    got = slab_probability(phi, r, t)
    ref = np.stack([gaussian_probability_in_slab(3.0, 0.2, 0.0, ri, t) for ri in r], axis=1)
    assert np.max(np.abs(got - ref)) < 1e-10


@pytest.mark.parametrize("x0", [0.0, -4.0, 6.5])
def test_sojourn_free_matches_oracle(basis, x0):
    p = gaussian_packet(basis, [dict(channel=0, center_momentum=3.0, momentum_width=0.2)], x_center=x0)
    r = np.array([0.5, 2.0, 8.0, 20.0])
    got = sojourn_free(p, r).total
    ref = np.array([free_gaussian_sojourn(3.0, 0.2, ri, x0, tol=1e-12)[0] for ri in r])
    assert np.max(np.abs(got - ref) / ref) < 1e-6


def test_sojourn_free_half_lines(phi):
    r = np.array([3.0])
    res = sojourn_free(phi, r)
    a, _ = free_gaussian_sojourn(3.0, 0.2, 3.0, t_hi=0.0, tol=1e-12)
    assert res.negative[0] == pytest.approx(a, rel=1e-6)
    assert res.tail_bound[0] < 1e-8 * res.total[0]


def test_sojourn_free_zero_radius(phi):
    assert sojourn_free(phi, [0.0]).total[0] == 0.0


def test_sojourn_free_ballistic(phi):
    r = np.array([100.0, 200.0])
    t = sojourn_free(phi, r).total
    assert (t[1] - t[0]) / 100.0 == pytest.approx(2 / 6.0, rel=1e-2)


def test_sojourn_free_rejects_slow_packets(basis):
    p = gaussian_packet(basis, [dict(channel=0, center_momentum=1.0, momentum_width=0.2)])
    with pytest.raises(AdmissibilityError):
        sojourn_free(p, [1.0])


def test_free_evolve_is_unitary_phase(phi):
    p = free_evolve(phi, 2.5)
    assert p.norm2() == pytest.approx(phi.norm2(), abs=1e-15)
    assert np.allclose(free_evolve(p, -2.5).amplitudes, phi.amplitudes, atol=1e-15)


def test_split_step_without_potential_is_exact(basis, phi):
    x = longitudinal_grid(40.0, 0.1)
    cp = compute_coupling(Separable(Constant(0.0), Gaussian(0.0, 1.0)), basis, x)
    s0 = sample_packet(phi, x, -1.0, basis.mode_count)
    s1 = full_propagate(s0, 1.0, 0.01, cp)
    ref = sample_packet(phi, x, 1.0, basis.mode_count)
    assert np.max(np.abs(s1.amplitudes - ref.amplitudes)) < 1e-10


def test_diagonal_potential_keeps_channels_apart(basis):
    x = longitudinal_grid(40.0, 0.1)
    # smooth profile: a sharp box on the FFT grid sprays Gibbs content to the edges
    cp = compute_coupling(Separable(Constant(1.0), Gaussian(4.0, 0.5)), basis, x)
    p = gaussian_packet(basis, [dict(channel=1, center_momentum=3.0, momentum_width=0.2)], x_center=-8.0)
    s1 = full_propagate(sample_packet(p, x, 0.0, basis.mode_count), 2.0, 0.002, cp)
    others = np.delete(s1.amplitudes, 1, axis=0)
    assert np.max(np.abs(others)) < 1e-12
    assert s1.norm2() == pytest.approx(1.0, abs=1e-9)


def test_energy_and_norm_conserved(basis):
    x = longitudinal_grid(40.0, 0.1)
    cp = compute_coupling(Separable(GaussianBump(0.35, 0.2), Gaussian(20.0, 0.4)), basis, x)
    p = gaussian_packet(basis, [dict(channel=0, center_momentum=5.0, momentum_width=0.2)], x_center=-8.0)
    s0 = sample_packet(p, x, 0.0, basis.mode_count)
    e0 = energy_expectation(s0, cp)
    s1 = full_propagate(s0, 1.6, 0.002, cp)
    assert abs(s1.norm2() - s0.norm2()) < 1e-10
    # Strang conserves a modified energy; the residual drift is second order in dt
    d1 = energy_expectation(s1, cp) - e0
    d2 = energy_expectation(full_propagate(s0, 1.6, 0.001, cp), cp) - e0
    assert abs(d1) < 1e-6 * abs(e0)
    assert 3.5 < d1 / d2 < 4.5
    assert np.max(s1.channel_probabilities()[1:]) > 1e-4  # channel 2 got populated


def test_leakage_raises(basis, phi):
    x = longitudinal_grid(10.0, 0.1)
    cp = compute_coupling(Separable(Constant(0.0), Gaussian(0.0, 1.0)), basis, x)
    with pytest.raises(DomainTooSmall):
        full_propagate(sample_packet(phi, x, 0.0, basis.mode_count), 3.0, 0.01, cp)


def test_prepare_scattering_state(basis, phi):
    x = longitudinal_grid(40.0, 0.1)
    cp = compute_coupling(Separable(Constant(1.0), Box(-2.0, 1.0)), basis, x)
    t0 = choose_t0(phi, cp, 1e-8, 0.002)
    assert t0 < 0 and abs(t0 / 0.002 - round(t0 / 0.002)) < 1e-9
    state, diag = prepare_scattering_state(phi, t0, cp)
    assert diag["overlap"] <= 1e-8
    assert state.norm2() == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(InvalidArgument):
        prepare_scattering_state(phi, 1.0, cp)
    # a packet that starts on the far side moves away from the potential
    away = gaussian_packet(basis, [dict(channel=0, center_momentum=3.0, momentum_width=0.2)], x_center=30.0)
    with pytest.raises(DomainTooSmall):
        prepare_scattering_state(away, -1.0, cp)


def test_grid_to_packet_round_trip(basis, phi):
    x = longitudinal_grid(40.0, 0.1)
    st = sample_packet(phi, x, 1.5, basis.mode_count)
    back = grid_to_packet(st, (0,), phi.dxi)
    x_probe = np.linspace(-5, 5, 11)
    assert np.max(np.abs(back.evaluate(x_probe, 0.0) - phi.evaluate(x_probe, 0.0))) < 1e-9


@pytest.fixture(scope="module")
def free_full(free_scenario):
    s = free_scenario
    return sojourn_full(s.packet(), s.radii(), s.basis, s.potential, s.time_config())


def test_full_sojourn_reduces_to_free(free_scenario, free_full):
    ref = sojourn_free(free_scenario.packet(), free_scenario.radii()).total
    assert np.max(np.abs(free_full.values - ref) / ref) < 1e-6


def test_full_sojourn_monotone_and_positive(free_full):
    assert np.all(free_full.values > 0)
    assert np.all(np.diff(free_full.values) >= 0)
    assert free_full.diagnostics["norm_drift"] < 1e-10


def test_full_sojourn_checks_inputs(free_scenario):
    s = free_scenario
    cfg = s.time_config()
    with pytest.raises(InvalidArgument):
        sojourn_full(s.packet(), [cfg.half_extent], s.basis, s.potential, cfg)
    coarse = TimeDomainConfig(half_extent=40.0, dx=0.5, dt=0.002)
    with pytest.raises(InvalidArgument):
        sojourn_full(s.packet(), [5.0], s.basis, s.potential, coarse)


def test_time_delay_vanishes_without_potential(free_scenario):
    from wgdelay.scattering import sweep_smatrix
    s = free_scenario
    sweep = sweep_smatrix(s.coupling(), s.basis, s.sweep_energies(), s.solver_options)
    rec = time_delay(s.packet(), sweep, s.radii(), s.basis, s.potential, s.time_config())
    assert np.max(np.abs(rec.tau)) < 1e-8 and np.max(np.abs(rec.tau_free)) < 1e-8


def test_default_radii_and_plateau():
    r = default_radii(16.0, 5)
    assert r[0] == pytest.approx(1.0) and r[-1] == pytest.approx(16.0)
    mean, slope = plateau(np.arange(1.0, 9.0), np.r_[np.zeros(6), 1.0, 1.0])
    assert mean == pytest.approx(1.0) and abs(slope) < 1e-12


def test_sojourn_record_csv(tmp_path):
    rec = SojournRecord(np.array([1.0, 2.0]), np.ones(2), np.ones(2), np.ones(2), np.zeros(2), np.zeros(2),
                        np.zeros(2), 0.0, 0.0)
    rec.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "r,T_r,T0_r_phi,T0_r_Sphi,tau_r,tau_r_free" and len(lines) == 3


def test_grid_state_helpers():
    x = longitudinal_grid(10.0, 0.5)
    st = GridState(x, np.ones((2, len(x)), dtype=complex), 0.0, np.array([1.0, 4.0]))
    assert st.norm2() == pytest.approx(40.0)
    assert np.allclose(st.channel_probabilities(), 20.0)
    assert st.probability_within(2.0) == pytest.approx(8.0)
