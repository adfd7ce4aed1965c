import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from wgdelay.errors import InvalidArgument, OutOfDomain, ThresholdProximity
from wgdelay.waveguide import (Box, Constant, Gaussian, GaussianBump, GridSampled, Separable, Sech2,
                               SumOfSeparables, build_transverse_basis, compute_coupling,
                               longitudinal_grid, open_channels, potential_from_config,
                               threshold_intervals)


def test_thresholds_unit_width():
    b = build_transverse_basis(1.0, 3)
    assert np.allclose(b.thresholds, [np.pi ** 2, 4 * np.pi ** 2, 9 * np.pi ** 2], rtol=1e-15)


@given(st.floats(0.2, 5.0), st.integers(1, 12))
def test_thresholds_scale_with_width(width, modes):
    b = build_transverse_basis(width, modes)
    alpha = np.arange(1, modes + 1)
    assert np.allclose(b.thresholds * width ** 2, (alpha * np.pi) ** 2, rtol=1e-13)


def test_eigenfunctions_orthonormal_under_quadrature():
    b = build_transverse_basis(1.7, 8)
    xq, wq = b.quadrature(64)
    chi = b.eigenfunctions(xq)
    gram = (chi * wq[:, None]).T @ chi
    assert np.max(np.abs(gram - np.eye(8))) < 1e-13


@pytest.mark.parametrize("width,modes", [(0.0, 3), (-1.0, 3), (1.0, 0), (1.0, 2.5)])
def test_bad_basis(width, modes):
    with pytest.raises(InvalidArgument):
        build_transverse_basis(width, modes)


def test_open_channels_between_thresholds():
    b = build_transverse_basis(1.0, 4)
    oc = open_channels(50.0, b)
    assert oc.channels == (0, 1)
    assert np.allclose(oc.momenta, np.sqrt(50.0 - b.thresholds[:2]))
    assert oc.fiber_dim == 4


def test_open_channels_threshold_window():
    b = build_transverse_basis(1.0, 4)
    with pytest.raises(ThresholdProximity) as exc:
        open_channels(b.thresholds[1] + 1e-4, b)
    assert exc.value.diagnostics["channel"] == 1
    with pytest.raises(InvalidArgument):
        open_channels(5.0, b)


def test_threshold_intervals():
    b = build_transverse_basis(1.0, 3)
    iv = threshold_intervals(b)
    assert [n for _, _, n in iv] == [1, 2, 3]
    assert iv[0][1] == iv[1][0] and np.isinf(iv[-1][1])


def test_longitudinal_grid_is_cell_centred():
    x = longitudinal_grid(3.0, 0.25)
    assert len(x) == 24
    assert np.isclose(x[0], -3.0 + 0.125) and np.isclose(x[-1], 3.0 - 0.125)
    assert np.allclose(x, -x[::-1])


def test_zero_potential_gives_zero_coupling():
    b = build_transverse_basis(1.0, 4)
    cp = compute_coupling(potential_from_config({"kind": "zero"}), b, longitudinal_grid(2.0, 0.1))
    assert cp.is_zero and cp.support() is None and cp.matching_radius == 0.0


def test_constant_profile_couples_diagonally():
    b = build_transverse_basis(1.0, 5)
    pot = Separable(Constant(2.0), Box(3.0, 1.0))
    x = longitudinal_grid(2.0, 0.05)
    cp = compute_coupling(pot, b, x)
    v = np.where(np.abs(x) <= 1.0, 6.0, 0.0)
    for a in range(5):
        assert np.allclose(cp.values[:, a, a], v, atol=1e-13)
    off = cp.values - np.einsum("jaa->ja", cp.values)[:, :, None] * np.eye(5)
    assert np.max(np.abs(off)) < 1e-13


def test_gaussian_bump_coupling_matches_direct_quadrature():
    b = build_transverse_basis(1.0, 4)
    u = GaussianBump(0.35, 0.2, 1.0)
    cp = compute_coupling(Separable(u, Gaussian(1.0, 0.4)), b, longitudinal_grid(3.0, 0.01))
    j = np.argmin(np.abs(cp.x))
    vx = np.exp(-0.5 * (cp.x[j] / 0.4) ** 2)
    for a, c in [(0, 0), (0, 1), (1, 3), (2, 2)]:
        ref, _ = integrate.quad(lambda s: 2 * np.sin((a + 1) * np.pi * s) * np.sin((c + 1) * np.pi * s) * u(s),
                                0, 1, epsabs=1e-14, epsrel=1e-13)
        assert cp.values[j, a, c] == pytest.approx(ref * vx, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.5), st.floats(-5, 5))
def test_coupling_real_symmetric(center, width, amp):
    b = build_transverse_basis(1.0, 6)
    cp = compute_coupling(Separable(GaussianBump(center, width, amp), Sech2(1.0, 0.5)), b,
                          longitudinal_grid(2.0, 0.1))
    assert np.isrealobj(cp.values)
    assert np.max(np.abs(cp.values - np.swapaxes(cp.values, 1, 2))) == 0.0


def test_sum_of_separables_is_additive():
    b = build_transverse_basis(1.0, 3)
    x = longitudinal_grid(2.0, 0.1)
    p1 = Separable(GaussianBump(0.3, 0.1), Gaussian(1.0, 0.5))
    p2 = Separable(Constant(1.0), Sech2(-2.0, 0.3))
    c = compute_coupling(SumOfSeparables((p1, p2)), b, x)
    assert np.allclose(c.values, compute_coupling(p1, b, x).values + compute_coupling(p2, b, x).values,
                       atol=1e-14)


def test_grid_sampled_reproduces_separable():
    b = build_transverse_basis(1.0, 4)
    x = longitudinal_grid(2.0, 0.05)
    sep = Separable(GaussianBump(0.4, 0.15, 2.0), Gaussian(1.5, 0.6))
    xq, _ = b.quadrature(64)
    grid = GridSampled(sep.sample(xq, x), xq, x)
    assert np.allclose(compute_coupling(grid, b, x).values, compute_coupling(sep, b, x).values, atol=1e-12)
    with pytest.raises(OutOfDomain):
        grid.sample(xq, np.array([0.0, 5.0]))


def test_grid_sampled_rejects_non_finite():
    with pytest.raises(InvalidArgument):
        GridSampled(np.array([[np.nan, 0.0]]), np.array([0.5]), np.array([0.0, 1.0]))


def test_support_and_matching_radius():
    b = build_transverse_basis(1.0, 2)
    cp = compute_coupling(Separable(Constant(1.0), Box(1.0, 1.0)), b, longitudinal_grid(3.0, 0.1))
    assert cp.matching_radius == pytest.approx(1.0, abs=1e-12)
    d = cp.check_decay()
    assert d["ok"] and d["tail_max"] == 0.0


def test_coupling_that_reaches_grid_edge_is_flagged():
    b = build_transverse_basis(1.0, 2)
    cp = compute_coupling(Separable(Constant(1.0), Box(1.0, 5.0)), b, longitudinal_grid(3.0, 0.1))
    assert not cp.check_decay()["ok"]


def test_potential_from_config_catalog():
    pot = potential_from_config({"kind": "separable",
                                 "transverse": {"profile": "gaussian_bump", "center": 0.5, "width": 0.1},
                                 "longitudinal": {"profile": "sech2", "amplitude": 2.0, "width": 0.3}})
    assert isinstance(pot.u, GaussianBump) and isinstance(pot.v, Sech2)
    with pytest.raises(InvalidArgument):
        potential_from_config({"kind": "separable", "longitudinal": {"profile": "triangle"}})
    with pytest.raises(InvalidArgument):
        potential_from_config({"kind": "bent"})


def test_scaled_potential():
    pot = Separable(Constant(1.0), Gaussian(4.0, 0.5)).scaled(0.5)
    assert pot.v.amplitude == 2.0


def test_coupling_csv(tmp_path):
    b = build_transverse_basis(1.0, 2)
    cp = compute_coupling(Separable(GaussianBump(0.3, 0.2), Gaussian(1.0, 0.5)), b, longitudinal_grid(1.0, 0.5))
    path = tmp_path / "c.csv"
    cp.write_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "x,alpha,beta,value"
    assert len(rows) == 1 + 4 * 4
    x, a, c, v = rows[2].split(",")
    assert (int(a), int(c)) == (1, 2) and float(v) == cp.values[0, 0, 1]
