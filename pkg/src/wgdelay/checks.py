"""Named numerical checks shared by the ``verify`` command and the test suite.

Each check returns a :class:`Check` with the measured value, the tolerance
it is held to and whether it passed.  Nothing here raises on a failed
comparison; errors from the numerical modules do propagate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from .errors import ConfigError
from .oracles import (SquareWell1D, analytic_phase_delay, free_gaussian_sojourn,
                      square_well_smatrix)
from .scattering import SolverOptions, born_smatrix, ew_delay, solve_smatrix, sweep_smatrix
from .spectral import (ChannelWavepacket, commutator_expectation, ew_expectation,
                       ew_expectation_channel, forward_transform, inverse_transform)
from .timedomain import (GridState, SplitStepPropagator, choose_t0, prepare_scattering_state,
                         sojourn_free, time_delay)
from .waveguide import (Box, Constant, Separable, build_transverse_basis, compute_coupling,
                        longitudinal_grid)


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.name}: {self.value:.3e} (tolerance {self.tolerance:.1e})"

    def as_dict(self):
        return asdict(self)


def below(name, value, tol, **detail) -> Check:
    value = float(value)
    return Check(name, value, float(tol), bool(np.isfinite(value) and value <= tol), detail)


def within(name, value, lo, hi, **detail) -> Check:
    value = float(value)
    return Check(name, value, float(hi), bool(lo <= value <= hi), dict(detail, lower=lo, upper=hi))


def rel_gap(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------------------
# spectral transform


def parseval(packet: ChannelWavepacket, energies, basis) -> Check:
    fib = forward_transform(packet, energies, basis)
    n2 = packet.norm2()
    return below("parseval", abs(fib.norm2() - n2) / n2, 1e-8)


def round_trip(packet: ChannelWavepacket, energies, basis) -> Check:
    fib = forward_transform(packet, energies, basis)
    back = inverse_transform(fib, packet.xi, basis.thresholds)
    diff = 0.0
    for i, c in enumerate(packet.channels):
        j = back.channels.index(c)
        diff += np.sum(np.abs(back.amplitudes[j] - packet.amplitudes[i]) ** 2) * packet.dxi
    return below("round_trip", np.sqrt(diff / packet.norm2()), 1e-6)


# ---------------------------------------------------------------------------
# stationary scattering


def sweep_residuals(sweep, tolerances) -> list:
    res = sweep.max_residuals()
    return [below("unitarity", res["unitarity_max"], tolerances["unitarity"]),
            below("reciprocity", res["reciprocity_max"], tolerances["reciprocity"])]


def smatrix_is_identity(sweep) -> Check:
    dev = max(float(np.max(np.abs(seg.matrices - np.eye(seg.matrices.shape[1])))) for seg in sweep.segments)
    return Check("smatrix_identity", dev, 0.0, dev == 0.0)


def hermiticity_order(coupling, basis, energies, opts, order=2) -> Check:
    """Ratio of tau_EW Hermiticity residuals on a grid and on its halving."""
    fine = np.linspace(energies[0], energies[-1], 2 * len(energies) - 1)
    h1 = ew_delay(sweep_smatrix(coupling, basis, energies, opts), order, check=False).max_hermiticity
    h2 = ew_delay(sweep_smatrix(coupling, basis, fine, opts), order, check=False).max_hermiticity
    expect = 2.0 ** order
    return within("hermiticity_ratio", h1 / h2, 0.875 * expect, 1.125 * expect,
                  coarse=h1, fine=h2, expected=expect)


def box_well(potential):
    """SquareWell1D equivalent of a constant-profile box, or None."""
    if not (isinstance(potential, Separable) and isinstance(potential.u, Constant)
            and isinstance(potential.v, Box) and potential.v.center == 0.0):
        return None
    return SquareWell1D(-potential.u.value * potential.v.amplitude, potential.v.half_width)


def smatrix_vs_square_well(sweep, well: SquareWell1D, threshold, channel=0) -> Check:
    worst = 0.0
    for seg in sweep.segments:
        i = seg.channels.index(channel)
        k = np.sqrt(seg.energies - threshold)
        ref = np.moveaxis(square_well_smatrix(well, k), -1, 0)
        blk = seg.matrices[:, 2 * i:2 * i + 2, 2 * i:2 * i + 2]
        worst = max(worst, float(np.max(np.abs(blk - ref))))
    return below("smatrix_vs_oracle", worst, 1e-8)


def gaussian_delay_quadrature(well: SquareWell1D, threshold, center_momentum, momentum_width):
    """<phi, tau phi> for a right-moving Gaussian by direct quadrature over xi."""
    def f(xi):
        te, to = analytic_phase_delay(well, xi ** 2 + threshold, threshold)
        w = np.exp(-0.5 * ((xi - center_momentum) / momentum_width) ** 2) / np.sqrt(2 * np.pi) / momentum_width
        return w * 0.5 * (te + to)

    lo = max(center_momentum - 12 * momentum_width, 1e-9)
    val, _ = integrate.quad(f, lo, center_momentum + 12 * momentum_width, epsabs=1e-13, epsrel=1e-11,
                            limit=400)
    return val


# ---------------------------------------------------------------------------
# time domain


def free_sojourn_vs_oracle(packet_spec: dict, basis, packet: ChannelWavepacket, radii) -> Check:
    got = sojourn_free(packet, radii).total
    ref = np.array([free_gaussian_sojourn(packet_spec["center_momentum"], packet_spec["momentum_width"], r,
                                          packet_spec.get("x_center", 0.0), tol=1e-12)[0] for r in radii])
    return below("free_sojourn_vs_oracle", np.max(np.abs(got - ref) / ref), 1e-6)


def strang_order(coupling, state: GridState, duration, dt) -> Check:
    """error(dt) / error(dt/2) against a dt/8 reference; order 2 gives 4."""
    def run(h):
        prop = SplitStepPropagator(coupling, h)
        amps = state.amplitudes.copy()
        for _ in range(int(round(duration / h))):
            amps = prop.step(amps)
        return amps

    ref = run(dt / 8)
    e1 = np.sqrt(np.sum(np.abs(run(dt) - ref) ** 2) * state.dx)
    e2 = np.sqrt(np.sum(np.abs(run(dt / 2) - ref) ** 2) * state.dx)
    order = np.log2(e1 / e2)
    return within("strang_order", order, 1.8, 2.2, error_dt=e1, error_half=e2)


def born_scaling(potential, basis, energy, x_grid, opts=None, threshold_window=None) -> Check:
    """||S - S_Born|| shrinks by ~4 when the coupling is halved."""
    opts = opts or SolverOptions()

    def gap(pot):
        cp = compute_coupling(pot, basis, x_grid)
        s = solve_smatrix(cp, basis, energy, opts).matrix
        return np.linalg.norm(s - born_smatrix(cp, basis, energy, threshold_window).matrix)

    a, b = gap(potential), gap(potential.scaled(0.5))
    return within("born_scaling", a / b, 3.5, 4.5, full=a, half=b)


def time_domain_delay(packet, sweep, basis, potential, config, radii, reference, tol, name="tau_vs_ew"):
    rec = time_delay(packet, sweep, radii, basis, potential, config)
    checks = [below(name, rel_gap(rec.tau[-1], reference), tol, tau=rec.tau[-1], reference=reference),
              below("tau_vs_tau_free", rel_gap(rec.tau[-1], rec.tau_free[-1]), tol,
                    tau=rec.tau[-1], tau_free=rec.tau_free[-1])]
    return rec, checks


# ---------------------------------------------------------------------------
# suites over a scenario


def _sweep(scn, threads=1):
    return sweep_smatrix(scn.coupling(), scn.basis, scn.sweep_energies(), scn.solver_options, threads)


def suite_free(scn, threads=1) -> list:
    if not scn.coupling().is_zero:
        raise ConfigError("the free suite needs a vanishing potential", invariant="free-suite-zero-potential")
    basis, packet = scn.basis, scn.packet()
    sweep = _sweep(scn, threads)
    out = [smatrix_is_identity(sweep)]
    en = scn.packet_energies()
    out += [parseval(packet, en, basis), round_trip(packet, en, basis)]
    comps = scn.config["packet"]["components"]
    radii = scn.radii()
    if len(comps) == 1:
        spec = dict(comps[0])
        spec.setdefault("x_center", scn.config["packet"]["x_center"])
        out.append(free_sojourn_vs_oracle(spec, basis, packet, radii))
    rec = time_delay(packet, sweep, radii, basis, scn.potential, scn.time_config())
    out.append(below("tau_r_zero", np.max(np.abs(rec.tau)), 1e-8))
    out.append(below("tau_free_zero", np.max(np.abs(rec.tau_free)), 1e-8))
    return out


def suite_oracle(scn, threads=1, time_domain=True) -> list:
    well = box_well(scn.potential)
    comps = scn.config["packet"]["components"]
    if well is None or len(comps) != 1:
        raise ConfigError("the oracle suite needs a centred constant-profile box and a single-component packet",
                          invariant="oracle-applicable")
    basis, packet = scn.basis, scn.packet()
    c = comps[0]
    nu = basis.thresholds[c["channel"] - 1]
    sweep = _sweep(scn, threads)
    out = [smatrix_vs_square_well(sweep, well, nu, c["channel"] - 1)]
    ew = ew_expectation(packet, sweep, basis, scn.packet_energies(), scn.stencil_order)
    ref = gaussian_delay_quadrature(well, nu, c["center_momentum"], c["momentum_width"])
    out.append(below("ew_vs_analytic", rel_gap(ew, ref), 0.01, ew=ew, analytic=ref))
    if time_domain:
        _, td = time_domain_delay(packet, sweep, basis, scn.potential, scn.time_config(), scn.radii(), ew,
                                  scn.tolerances["delay_gap"])
        out += td
    return out


def suite_consistency(scn, threads=1, time_domain=True) -> list:
    basis, packet = scn.basis, scn.packet()
    sweep = _sweep(scn, threads)
    tol = scn.tolerances
    out = sweep_residuals(sweep, tol)
    en = scn.packet_energies()
    out += [parseval(packet, en, basis), round_trip(packet, en, basis)]
    order = scn.stencil_order
    ew = ew_expectation(packet, sweep, basis, en, order)
    comm = commutator_expectation(packet, sweep, basis, en)
    out.append(below("commutator_vs_ew", rel_gap(comm.real, ew), 1e-4, commutator=comm.real, ew=ew))
    if len(packet.channels) == 1:
        ch = ew_expectation_channel(packet, sweep, basis, packet.channels[0], en, order)
        out.append(below("channel_sum_vs_ew", rel_gap(ch, ew), 1e-6, channel_sum=ch, ew=ew))
    if time_domain:
        rec, td = time_domain_delay(packet, sweep, basis, scn.potential, scn.time_config(), scn.radii(), ew,
                                    tol["delay_gap"])
        out += td
        out.append(below("plateau_slope", abs(rec.plateau_slope), tol["plateau_slope"]))
        out.append(below("norm_drift", rec.diagnostics["norm_drift"], tol["norm"]))
    return out


def suite_hygiene(scn, duration=None) -> list:
    """Norm conservation and Strang order on the scenario's propagation grid."""
    cfg = scn.time_config()
    basis = scn.basis
    packet = scn.packet()
    n_open = int(np.sum(basis.thresholds <= packet.energy_support()[1]))
    nb = build_transverse_basis(basis.width, min(basis.mode_count, n_open + cfg.n_closed))
    x = longitudinal_grid(cfg.half_extent, cfg.dx)
    coupling = compute_coupling(scn.potential, nb, x)
    t0 = cfg.t0 if cfg.t0 is not None else choose_t0(packet, coupling, cfg.eps_prep, cfg.dt)
    state, _ = prepare_scattering_state(packet, t0, coupling, cfg.eps_prep, cfg.eps_leak)
    duration = duration if duration is not None else -t0
    duration = cfg.dt * 8 * round(duration / (8 * cfg.dt))
    prop = SplitStepPropagator(coupling, cfg.dt)
    amps = state.amplitudes.copy()
    for _ in range(int(round(duration / cfg.dt))):
        amps = prop.step(amps)
    drift = abs(np.sum(np.abs(amps) ** 2) * state.dx - state.norm2()) / state.norm2()
    return [below("norm_drift", drift, cfg.norm_tol), strang_order(coupling, state, duration, cfg.dt)]


SUITES = {"free": suite_free, "oracle": suite_oracle, "consistency": suite_consistency,
          "hygiene": suite_hygiene}
