"""Time-domain evolution and sojourn times.

Free evolution is exact in momentum space.  The full evolution uses Strang
splitting on a periodic x-grid: a channel-space matrix exponential of the
coupling at each x and an FFT kinetic multiplier per channel.

Slab probabilities ``int_{-r}^{r} sum_a |psi_a(x)|^2 dx`` are evaluated from
the Fourier coefficients of the density, which is exact for band-limited
states sampled on a grid with at least twice their bandwidth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .errors import (AdmissibilityError, DomainTooSmall, IntegratorFailure, InvalidArgument,
                     WindowTooShort)
from .spectral import ChannelWavepacket, scatter_packet
from .waveguide import (CouplingMatrix, TransverseBasis, build_transverse_basis, compute_coupling,
                        longitudinal_grid)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


# ---------------------------------------------------------------------------
# slab integrals


def slab_weights(n_points: int, spacing: float, x_first: float, radii) -> np.ndarray:
    """Matrix B with ``B @ density = int_{-r}^{r} density`` for periodic trig polynomials.

    The density is sampled at ``x_first + j * spacing`` (j < n_points) and is
    assumed band-limited below the grid's Nyquist frequency.
    """
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    m = np.fft.fftfreq(n_points) * n_points
    q = 2 * np.pi * m / (n_points * spacing)
    nz = q != 0
    w = np.empty((len(radii), n_points))
    w[:, ~nz] = 2 * radii[:, None]
    w[:, nz] = 2 * np.sin(np.outer(radii, q[nz])) / q[nz]
    if n_points % 2 == 0:
        w[:, n_points // 2] = 0.0
    coeff = w * np.exp(-1j * q * x_first)
    return np.real(sfft.fft(coeff, axis=1)) / n_points


class _FreeDensity:
    """Evaluates ``||F_r e^{-itH0} phi||^2`` for many t and r at once."""

    def __init__(self, packet: ChannelWavepacket, radii):
        self.radii = np.atleast_1d(np.asarray(radii, dtype=float))
        xi = packet.xi
        keep = np.any(np.abs(packet.amplitudes) > 0, axis=0)
        if not keep.any():
            raise InvalidArgument("packet is identically zero")
        i0, i1 = np.argmax(keep), len(keep) - np.argmax(keep[::-1])
        self.xi = xi[i0:i1]
        self.amps = packet.amplitudes[:, i0:i1]
        self.dxi = packet.dxi
        n = len(self.xi)
        self.m = sfft.next_fast_len(2 * n)
        self.period = 2 * np.pi / self.dxi
        self.dx = self.period / self.m
        self.x_first = -0.5 * self.m * self.dx
        self.sign = (-1.0) ** np.arange(n)
        self.scale = self.dxi * self.m / np.sqrt(2 * np.pi)
        self.weights = slab_weights(self.m, self.dx, self.x_first, self.radii)
        d0 = self.density(np.array([0.0]))[0]
        x = self.x_first + self.dx * np.arange(self.m)
        significant = d0 > 1e-12 * d0.max()
        self.extent0 = float(np.max(np.abs(x[significant])))
        self.vmax = 2 * float(np.max(np.abs(self.xi)))
        # classical exit time of everything above 1e-6 of the peak amplitude
        mag = np.max(np.abs(self.amps), axis=0)
        xi_eff = np.abs(self.xi[mag > 1e-6 * mag.max()])
        core = x[d0 > 1e-12 * d0.max()]
        self.exit_time = (self.radii.max() + np.max(np.abs(core))) / (2 * max(xi_eff.min(), 1e-12))
        if self.extent0 + self.radii.max() > 0.5 * self.period:
            raise DomainTooSmall("momentum grid too coarse for the packet extent",
                                 period=self.period, extent=self.extent0)

    def alias_time(self) -> float:
        """Largest |t| before periodic images of the packet reach the slab."""
        return (self.period - self.extent0 - self.radii.max()) / self.vmax

    def density(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        out = np.zeros((len(times), self.m))
        for amp in self.amps:
            a = (amp * self.sign)[None, :] * np.exp(-1j * np.outer(times, self.xi ** 2))
            psi = sfft.ifft(a, n=self.m, axis=1) * self.scale
            out += psi.real ** 2 + psi.imag ** 2
        return out

    def slab(self, times) -> np.ndarray:
        """(len(times), len(radii)) slab probabilities."""
        return self.density(times) @ self.weights.T


def _panel_sum(engine, t_start, direction, h, n_panels):
    edges = t_start + direction * h * np.arange(n_panels + 1)
    lo, hi = np.minimum(edges[:-1], edges[1:]), np.maximum(edges[:-1], edges[1:])
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    t = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    w = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    vals = engine.slab(t)
    per_panel = (w[:, None] * vals).reshape(n_panels, len(_GL_NODES), -1).sum(axis=1)
    return per_panel, vals.reshape(n_panels, len(_GL_NODES), -1)


def _half_line(engine, t_start, direction, t_stop, h, tol, scale, batch=32):
    """Integral from t_start towards t_stop (or infinity) in the given direction.

    ``scale`` (per radius) is the reference magnitude for the stopping test.
    """
    total = np.zeros(len(engine.radii))
    comp = np.zeros_like(total)
    limit = engine.alias_time()
    t = t_start
    quiet = 0
    tail = np.zeros_like(total)
    peak = 0.0
    while True:
        if t_stop is not None:
            remaining = direction * (t_stop - t)
            if remaining <= 0:
                break
            n = int(min(batch, np.ceil(remaining / h - 1e-9)))
            hh = min(h, remaining / n) if n * h > remaining else h
        else:
            n, hh = batch, h
        if abs(t) + n * hh > limit:
            raise IntegratorFailure("free sojourn integral did not converge before periodic images "
                                    "reached the slab; refine the momentum grid", time=t, limit=limit)
        panels, vals = _panel_sum(engine, t, direction, hh, n)
        for p in panels:  # compensated accumulation, fixed order
            y = p - comp
            s = total + y
            comp = (s - total) - y
            total = s
        peak = max(peak, float(vals.max()))
        t = t + direction * n * hh
        chunk = panels.sum(axis=0)
        if t_stop is None:
            small = np.all(chunk <= tol * np.maximum(total, scale)) and vals[-1].max() <= tol * peak
            quiet = quiet + 1 if small else 0
            if quiet >= 2 and direction * t >= engine.exit_time:
                tail = chunk
                break
    return total, tail


def _time_step(packet_engine: _FreeDensity, spread_e: float):
    # one GL-16 panel per fastest density oscillation, capped by the crossing time of a unit length
    return min(2 * np.pi / max(spread_e, 1e-12), 1.0 / packet_engine.vmax, 0.5)


def _energy_spread(packet: ChannelWavepacket):
    mask = packet.support_mask()
    spread = 0.0
    for i in range(len(packet.channels)):
        if mask[i].any():
            e = packet.xi[mask[i]] ** 2
            spread = max(spread, e.max() - e.min())
    return spread


@dataclass
class FreeSojourn:
    radii: np.ndarray
    negative: np.ndarray  # int over t < origin
    positive: np.ndarray  # int over t > origin
    tail_bound: np.ndarray
    step: float

    @property
    def total(self) -> np.ndarray:
        return self.negative + self.positive


def sojourn_free(packet: ChannelWavepacket, radii, t_lo=-np.inf, t_hi=np.inf, origin=0.0,
                 tol=1e-8, xi_min=None, check=True, atol=1e-13) -> FreeSojourn:
    """``int dt ||F_r e^{-itH0} phi||^2`` split at ``origin``, over [t_lo, t_hi].

    The time integral uses 16-point Gauss-Legendre panels and is repeated on
    halved panels; the difference must stay below ``tol`` relative to
    max(T, 2r/v_max) plus ``atol``.
    """
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    if np.any(radii < 0):
        raise InvalidArgument("radii must be nonnegative")
    if check:
        mask = packet.support_mask()
        if mask[:, 0].any() or mask[:, -1].any():
            raise AdmissibilityError("momentum profile does not vanish at the ends of its grid")
        if packet.min_momentum() < (xi_min if xi_min is not None else 4 * packet.dxi):
            raise AdmissibilityError("momentum support touches xi = 0; the free sojourn time diverges",
                                     min_momentum=packet.min_momentum())
    pos = radii > 0
    out = FreeSojourn(radii, np.zeros(len(radii)), np.zeros(len(radii)), np.zeros(len(radii)), 0.0)
    if not pos.any():
        return out
    engine = _FreeDensity(packet, radii[pos])
    h = _time_step(engine, _energy_spread(packet))
    # ballistic crossing time of each slab: the natural size of T_r
    ref = packet.norm2() * 2 * radii[pos] / engine.vmax
    quad_tol = 0.01 * tol
    results = {}
    for hh in (h, 0.5 * h):
        neg = np.zeros(pos.sum())
        plus = np.zeros(pos.sum())
        tail = np.zeros(pos.sum())
        if t_lo < origin:
            start = min(origin, t_hi)
            stop = None if np.isinf(t_lo) else t_lo
            neg, tl = _half_line(engine, start, -1, stop, hh, quad_tol, ref)
            tail += tl
        if t_hi > origin:
            start = max(origin, t_lo)
            stop = None if np.isinf(t_hi) else t_hi
            plus, tl = _half_line(engine, start, 1, stop, hh, quad_tol, ref)
            tail += tl
        results[hh] = (neg, plus, tail)
    (n1, p1, _), (n2, p2, tail) = results[h], results[0.5 * h]
    err = np.abs((n1 + p1) - (n2 + p2))
    if np.any(err > tol * np.maximum(np.abs(n2 + p2), ref) + atol):
        raise IntegratorFailure("time quadrature of the free sojourn did not converge",
                                error=err, value=n2 + p2)
    out.negative[pos], out.positive[pos] = n2, p2
    out.tail_bound[pos] = tail + err
    out.step = 0.5 * h
    return out


def free_evolve(packet: ChannelWavepacket, t: float) -> ChannelWavepacket:
    """e^{-itH0} phi: ghat_a -> exp(-it(xi^2 + nu_a)) ghat_a."""
    if t == 0:
        return packet.with_amplitudes(packet.amplitudes.copy())
    phase = np.stack([np.exp(-1j * t * (packet.xi ** 2 + packet.thresholds[c])) for c in packet.channels])
    return packet.with_amplitudes(packet.amplitudes * phase)


def slab_probability(packet: ChannelWavepacket, radii, times) -> np.ndarray:
    """||F_r e^{-itH0} phi||^2 on a time list, shape (len(times), len(radii))."""
    return _FreeDensity(packet, radii).slab(np.atleast_1d(times))


# ---------------------------------------------------------------------------
# grid states and split-step propagation


@dataclass
class GridState:
    x: np.ndarray
    amplitudes: np.ndarray  # (channels, len(x))
    t: float
    thresholds: np.ndarray

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def channels(self) -> tuple:
        return tuple(range(self.amplitudes.shape[0]))

    def density(self) -> np.ndarray:
        return np.sum(np.abs(self.amplitudes) ** 2, axis=0)

    def norm2(self) -> float:
        return float(np.sum(self.density()) * self.dx)

    def probability_within(self, r: float) -> float:
        return float(np.sum(self.density()[np.abs(self.x) <= r]) * self.dx)

    def edge_probability(self, fraction=0.05) -> float:
        xmax = np.max(np.abs(self.x)) + 0.5 * self.dx
        return float(np.sum(self.density()[np.abs(self.x) >= (1 - fraction) * xmax]) * self.dx)

    def channel_probabilities(self) -> np.ndarray:
        return np.sum(np.abs(self.amplitudes) ** 2, axis=1) * self.dx

    def copy(self) -> "GridState":
        return GridState(self.x, self.amplitudes.copy(), self.t, self.thresholds)


def sample_packet(packet: ChannelWavepacket, x, t: float, channel_count: int) -> GridState:
    """e^{-itH0} phi sampled on the grid x with all channel slots 0..channel_count-1."""
    amps = np.zeros((channel_count, len(x)), dtype=complex)
    vals = packet.evaluate(x, t)
    for i, c in enumerate(packet.channels):
        if c >= channel_count:
            raise InvalidArgument(f"packet channel {c} not represented on the grid")
        amps[c] = vals[i]
    return GridState(np.asarray(x, dtype=float), amps, float(t), packet.thresholds[:channel_count])


def grid_to_packet(state: GridState, channels, dxi: float, energy_window=None,
                   support_tol=1e-10) -> ChannelWavepacket:
    """Momentum profiles of a grid state on a fine uniform xi grid.

    The grid samples are zero-padded, so the profile is the transform of
    the state restricted to the box; the xi spacing is rounded to the next
    fast FFT length.  Amplitudes below ``support_tol`` of the peak (the
    broadband floor left by the box edges) are set to zero, as is
    everything outside ``energy_window`` when given.
    """
    x = state.x
    n = len(x)
    h = state.dx
    m = sfft.next_fast_len(max(int(np.ceil(2 * np.pi / (h * dxi))), 2 * n))
    dxi = 2 * np.pi / (m * h)
    k = np.fft.fftfreq(m) * m
    xi = k * dxi
    order = np.argsort(xi)
    xi = xi[order]
    amps = []
    for c in channels:
        g = sfft.fft(state.amplitudes[c], n=m) * h / np.sqrt(2 * np.pi)
        g = (g * np.exp(-1j * np.fft.fftfreq(m) * m * dxi * x[0]))[order]
        g *= np.exp(1j * state.t * (xi ** 2 + state.thresholds[c]))  # back to the interaction picture
        if energy_window is not None:
            e = xi ** 2 + state.thresholds[c]
            g[(e < energy_window[0]) | (e > energy_window[1])] = 0.0
        amps.append(g)
    amps = np.array(amps)
    mag = np.abs(amps)
    amps[mag <= support_tol * mag.max()] = 0.0
    keep = np.any(mag > support_tol * mag.max(), axis=0)
    i0, i1 = np.argmax(keep) - 2, len(keep) - np.argmax(keep[::-1]) + 2
    i0, i1 = max(i0, 0), min(i1, m)
    return ChannelWavepacket(tuple(channels), xi[i0:i1], amps[:, i0:i1], state.thresholds)


class SplitStepPropagator:
    """Strang step exp(-i dt V/2) exp(-i dt K) exp(-i dt V/2) on a periodic grid."""

    def __init__(self, coupling: CouplingMatrix, dt: float):
        if dt <= 0:
            raise InvalidArgument("time step must be positive")
        self.coupling = coupling
        self.dt = float(dt)
        x = coupling.x
        n = len(x)
        kappa = 2 * np.pi * np.fft.fftfreq(n, d=coupling.dx)
        nu = coupling.thresholds[:coupling.channel_count]
        self.kinetic = np.exp(-1j * dt * (kappa[None, :] ** 2 + nu[:, None]))
        support = coupling.support()
        self.lo, self.hi = (0, 0) if support is None else (support[0], support[1] + 1)
        if self.hi > self.lo:
            w, u = np.linalg.eigh(coupling.values[self.lo:self.hi])
            phase = np.exp(-0.5j * dt * w)
            self.half = np.einsum("jab,jb,jcb->jac", u, phase, u)
        else:
            self.half = None

    def potential_half(self, amps):
        if self.half is not None:
            seg = amps[:, self.lo:self.hi]
            amps[:, self.lo:self.hi] = np.einsum("jab,bj->aj", self.half, seg)
        return amps

    def step(self, amps):
        amps = self.potential_half(amps)
        amps = sfft.ifft(self.kinetic * sfft.fft(amps, axis=1), axis=1)
        return self.potential_half(amps)


def energy_expectation(state: GridState, coupling: CouplingMatrix) -> float:
    """<psi, H psi> with the kinetic part computed spectrally."""
    n = len(state.x)
    kappa = 2 * np.pi * np.fft.fftfreq(n, d=state.dx)
    nu = state.thresholds
    spec = sfft.fft(state.amplitudes, axis=1)
    kin = np.sum(np.abs(spec) ** 2 * (kappa[None, :] ** 2 + nu[:, None])) * state.dx / n
    pot = np.einsum("aj,jab,bj->", np.conj(state.amplitudes), coupling.values, state.amplitudes).real * state.dx
    return float(kin + pot)


def _check_grid(state: GridState, coupling: CouplingMatrix):
    if len(state.x) != len(coupling.x) or not np.allclose(state.x, coupling.x, rtol=0, atol=1e-12):
        raise InvalidArgument("state and coupling live on different grids")
    if state.amplitudes.shape[0] != coupling.channel_count:
        raise InvalidArgument("state and coupling have different channel counts")


def _step_count(t_start, t_final, dt):
    n = (t_final - t_start) / dt
    if n < -1e-9 or abs(n - round(n)) > 1e-6:
        raise InvalidArgument("t_final - t must be a nonnegative multiple of dt")
    return int(round(n))


def full_propagate(state: GridState, t_final: float, dt: float, coupling: CouplingMatrix,
                   eps_leak: float = 1e-8, norm_tol: float = 1e-10, observer=None,
                   check_every: int = 50) -> GridState:
    """Strang split-step propagation of a grid state to t_final."""
    _check_grid(state, coupling)
    steps = _step_count(state.t, t_final, dt)
    prop = SplitStepPropagator(coupling, dt)
    amps = state.amplitudes.copy()
    norm0 = state.norm2()
    dxg = state.dx
    for i in range(1, steps + 1):
        amps = prop.step(amps)
        if observer is not None:
            observer(i, amps)
        if i % check_every == 0 or i == steps:
            cur = GridState(state.x, amps, state.t + i * dt, state.thresholds)
            leak = cur.edge_probability()
            if leak > eps_leak * norm0:
                raise DomainTooSmall("probability reached the outer 5% of the grid", leakage=leak, time=cur.t)
            drift = abs(np.sum(np.abs(amps) ** 2) * dxg - norm0)
            if drift > norm_tol * norm0:
                raise IntegratorFailure("norm drift above tolerance", drift=drift, time=cur.t)
    return GridState(state.x, amps, state.t + steps * dt, state.thresholds)


# ---------------------------------------------------------------------------
# scattering states and sojourn times


@dataclass
class TimeDomainConfig:
    half_extent: float
    dx: float
    dt: float
    t0: float | None = None
    t1: float | None = None
    n_closed: int = 4
    eps_prep: float = 1e-8
    eps_leak: float = 1e-8
    eps_out: float = 1e-10
    norm_tol: float = 1e-10
    tail_tol: float = 1e-8
    nyquist_factor: float = 4.0
    record_every: int = 10
    record_radii: tuple = ()
    max_steps: int = 2_000_000


def interaction_radius(coupling: CouplingMatrix) -> float:
    sup = coupling.support()
    if sup is None:
        return 0.0
    return float(max(abs(coupling.x[sup[0]]), abs(coupling.x[sup[1]])) + coupling.dx)


def _incoming_check(packet: ChannelWavepacket, t0: float, radius: float):
    # each momentum-sign component must sit on the side it moves away from the potential
    for i, c in enumerate(packet.channels):
        for s in (-1, 1):
            sel = (packet.xi * s) > 0
            amp = packet.amplitudes[i, sel]
            w = np.abs(amp) ** 2
            if w.sum() <= 1e-20 * np.sum(np.abs(packet.amplitudes) ** 2):
                continue
            # <x> at t0 from the phase slope: x(t) = -d arg(ghat)/dxi + 2 xi t
            phase = np.unwrap(np.angle(amp))
            slope = np.gradient(phase, packet.xi[sel])
            xbar = np.sum(w * (-slope + 2 * packet.xi[sel] * t0)) / w.sum()
            if s * xbar > -radius:
                raise DomainTooSmall("packet component is not incoming at t0",
                                     channel=c, direction=s, mean_position=float(xbar))


def prepare_scattering_state(packet: ChannelWavepacket, t0: float, coupling: CouplingMatrix,
                             eps_prep: float = 1e-8, eps_leak: float = 1e-8) -> tuple:
    """e^{-i t0 H0} phi on the coupling grid; returns (state, diagnostics)."""
    if t0 >= 0:
        raise InvalidArgument("t0 must be negative")
    radius = interaction_radius(coupling)
    _incoming_check(packet, t0, radius)
    state = sample_packet(packet, coupling.x, t0, coupling.channel_count)
    total = packet.norm2()
    overlap = state.probability_within(radius) / total
    leak = state.edge_probability() / total
    lost = abs(state.norm2() - total) / total
    diag = {"t0": t0, "overlap": overlap, "edge_probability": leak, "sampling_loss": lost,
            "interaction_radius": radius}
    if overlap > eps_prep:
        raise DomainTooSmall("packet overlaps the potential at t0", **diag)
    if leak > eps_leak or lost > eps_leak:
        raise DomainTooSmall("packet at t0 does not fit in the grid", **diag)
    return state, diag


def choose_t0(packet: ChannelWavepacket, coupling: CouplingMatrix, eps_prep=1e-8, dt=None):
    """Smallest |t0| (on the dt lattice, doubling) with overlap below eps_prep."""
    radius = interaction_radius(coupling)
    vmin = 2 * packet.min_momentum()
    t = -max(radius, 1.0) / (2 * float(np.max(np.abs(packet.xi))))
    xmax = coupling.x[-1]
    while True:
        t0 = t if dt is None else -dt * np.ceil(-t / dt)
        state = sample_packet(packet, coupling.x, t0, coupling.channel_count)
        if state.probability_within(radius) <= eps_prep * packet.norm2():
            return float(t0)
        t *= 1.25
        if abs(t) * vmin > 4 * xmax:
            raise DomainTooSmall("no t0 separates the packet from the potential on this grid")


@dataclass
class FullSojourn:
    radii: np.ndarray
    values: np.ndarray
    window: np.ndarray
    tail_before: np.ndarray
    tail_after: np.ndarray
    tail_bound: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    trace_times: np.ndarray | None = None
    trace: np.ndarray | None = None


def _kahan_add(total, comp, value):
    y = value - comp
    s = total + y
    comp[:] = (s - total) - y
    total[:] = s


def sojourn_full(packet: ChannelWavepacket, radii, basis: TransverseBasis, potential,
                 config: TimeDomainConfig, open_channels_out=None) -> FullSojourn:
    """``int dt ||F_r e^{-itH} W^- phi||^2`` with exact free tails outside [t0, t1].

    ``open_channels_out`` lists the channels kept in the outgoing free tail;
    every other channel must be empty at t1.
    """
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    x = longitudinal_grid(config.half_extent, config.dx)
    n_open = int(np.sum(basis.thresholds <= packet.energy_support()[1]))
    n_ch = min(basis.mode_count, n_open + config.n_closed)
    if n_ch < basis.mode_count:
        basis = build_transverse_basis(basis.width, n_ch)
    kmax = float(np.max(np.abs(packet.xi[np.any(packet.support_mask(), axis=0)])))
    if np.pi / config.dx < config.nyquist_factor * kmax:
        raise InvalidArgument("grid spacing violates the Nyquist factor", dx=config.dx, kmax=kmax,
                              factor=config.nyquist_factor)
    if radii.max() > config.half_extent / 2 + 1e-12:
        raise InvalidArgument("r_max must not exceed X/2", r_max=float(radii.max()), X=config.half_extent)
    coupling = compute_coupling(potential, basis, x)
    dt = config.dt
    t0 = config.t0 if config.t0 is not None else choose_t0(packet, coupling, config.eps_prep, dt)
    state, prep = prepare_scattering_state(packet, t0, coupling, config.eps_prep, config.eps_leak)
    radius = interaction_radius(coupling)
    norm0 = state.norm2()
    energy0 = energy_expectation(state, coupling)
    prop = SplitStepPropagator(coupling, dt)

    n = len(x)
    npad = 2 * n
    pad_first = x[0]
    weights = slab_weights(npad, config.dx / 2, pad_first, radii)
    rec_radii = np.atleast_1d(np.asarray(config.record_radii or radii, dtype=float))
    rec_weights = slab_weights(npad, config.dx / 2, pad_first, rec_radii)

    def padded_density(amps):
        spec = sfft.fft(amps, axis=1)
        big = np.zeros((amps.shape[0], npad), dtype=complex)
        h = n // 2
        big[:, :h] = spec[:, :h]
        big[:, npad - (n - h):] = spec[:, h:]
        psi = sfft.ifft(big, axis=1) * 2
        return np.sum(psi.real ** 2 + psi.imag ** 2, axis=0)

    acc = np.zeros(npad)
    comp = np.zeros(npad)
    amps = state.amplitudes.copy()
    d = padded_density(amps)
    _kahan_add(acc, comp, d / 3 * dt)
    trace_t = [t0]
    trace = [rec_weights @ d]
    leak_max = state.edge_probability()
    drift_max = 0.0
    step = 0
    t1_fixed = None if config.t1 is None else _step_count(t0, config.t1, dt)
    if t1_fixed is not None and t1_fixed % 2:
        raise InvalidArgument("t1 - t0 must be an even number of time steps")
    last = d
    while True:
        amps = prop.step(amps)
        step += 1
        d = padded_density(amps)
        w = 4.0 if step % 2 else 2.0
        _kahan_add(acc, comp, w * d / 3 * dt)
        last = d
        if step % config.record_every == 0:
            trace_t.append(t0 + step * dt)
            trace.append(rec_weights @ d)
        if step % 50 == 0 or step == t1_fixed:
            cur = GridState(x, amps, t0 + step * dt, state.thresholds)
            leak = cur.edge_probability()
            leak_max = max(leak_max, leak)
            if leak > config.eps_leak * norm0:
                raise DomainTooSmall("probability reached the outer 5% of the grid", leakage=leak, time=cur.t)
            drift = abs(cur.norm2() - norm0) / norm0
            drift_max = max(drift_max, drift)
            if drift > config.norm_tol:
                raise IntegratorFailure("norm drift above tolerance", drift=drift, time=cur.t)
            if step % 2 == 0:
                if t1_fixed is not None:
                    if step >= t1_fixed:
                        break
                else:
                    inside = cur.probability_within(radius + 0.5 * config.dx) / norm0
                    closed = _closed_weight(cur, open_channels_out) / norm0
                    if cur.t > 0 and inside < config.eps_out and closed < config.eps_out:
                        break
        if step >= config.max_steps:
            raise WindowTooShort("packet did not leave the interaction region", steps=step)
    # Simpson end correction: the last node carries weight 1, not 2
    _kahan_add(acc, comp, -d / 3 * dt)
    window = weights @ acc
    final = GridState(x, amps, t0 + step * dt, state.thresholds)
    t1 = final.t
    if trace_t[-1] != t1:
        trace_t.append(t1)
        trace.append(rec_weights @ last)
    drift = abs(final.norm2() - norm0) / norm0
    energy1 = energy_expectation(final, coupling)

    before = sojourn_free(packet, radii, t_lo=-np.inf, t_hi=t0, origin=t0, tol=config.tail_tol)
    outs = tuple(open_channels_out) if open_channels_out is not None else packet.channels
    closed = _closed_weight(final, outs) / norm0
    if closed > max(config.eps_out, config.tail_tol):
        raise WindowTooShort("closed channels still populated at t1", closed=closed)
    out_packet = grid_to_packet(final, outs, packet.dxi, packet.energy_support())
    # S commutes with H0: weight outside the incoming energy window is splitting error
    spurious = abs(final.norm2() - closed * norm0 - out_packet.norm2()) / norm0
    after = sojourn_free(out_packet, radii, t_lo=t1, t_hi=np.inf, origin=t1, tol=config.tail_tol, check=False)
    values = before.total + window + after.total
    bound = before.tail_bound + after.tail_bound
    if np.any(bound > config.tail_tol * np.maximum(values, 1e-300)):
        raise WindowTooShort("tail estimate above tolerance", bound=bound, values=values)
    diag = dict(prep)
    diag.update(t1=t1, steps=step, dt=dt, norm_drift=max(drift_max, drift), edge_probability_max=leak_max,
                energy_t0=energy0, energy_t1=energy1, energy_drift=abs(energy1 - energy0) / abs(energy0),
                outgoing_overlap=final.probability_within(radius) / norm0, closed_weight_t1=closed,
                off_shell_weight=spurious,
                grid_points=n, channels=n_ch)
    return FullSojourn(radii, values, window, before.total, after.total, bound, diag,
                       np.array(trace_t), np.array(trace))


def _closed_weight(state: GridState, open_set) -> float:
    if open_set is None:
        return 0.0
    mask = np.ones(state.amplitudes.shape[0], dtype=bool)
    mask[list(open_set)] = False
    return float(np.sum(np.abs(state.amplitudes[mask]) ** 2) * state.dx)


# ---------------------------------------------------------------------------
# delays


def default_radii(r_max: float, count: int = 12, r_min: float = None):
    r_min = r_min if r_min is not None else r_max / 16
    return np.geomspace(r_min, r_max, count)


def plateau(radii, values, fraction=0.25):
    """Mean and fitted slope over the top ``fraction`` of the radii."""
    radii, values = np.asarray(radii), np.asarray(values)
    k = max(2, int(np.ceil(fraction * len(radii))))
    r, v = radii[-k:], values[-k:]
    slope = float(np.polyfit(r, v, 1)[0]) if len(r) > 1 else 0.0
    return float(np.mean(v)), slope


@dataclass
class SojournRecord:
    radii: np.ndarray
    full: np.ndarray
    free_in: np.ndarray
    free_out: np.ndarray
    tau: np.ndarray
    tau_free: np.ndarray
    tail_bounds: np.ndarray
    plateau: float
    plateau_slope: float
    diagnostics: dict = field(default_factory=dict)

    def rows(self):
        return np.column_stack([self.radii, self.full, self.free_in, self.free_out, self.tau, self.tau_free])

    def write_csv(self, path):
        header = "r,T_r,T0_r_phi,T0_r_Sphi,tau_r,tau_r_free"
        np.savetxt(path, self.rows(), delimiter=",", header=header, comments="", fmt="%.16e")


def tau_free(packet: ChannelWavepacket, scattered: ChannelWavepacket, radii, tol=1e-8):
    """Auxiliary delay from free evolutions of phi and S phi only.

    Returns ``(tau_free, free_phi, free_sphi)`` with the two FreeSojourn records.
    """
    a = sojourn_free(packet, radii, tol=tol)
    b = sojourn_free(scattered, radii, tol=tol)
    value = 0.5 * ((a.negative - b.negative) + (b.positive - a.positive))
    return value, a, b


def time_delay(packet: ChannelWavepacket, sweep, radii, basis: TransverseBasis, potential,
               config: TimeDomainConfig, scattered: ChannelWavepacket = None) -> SojournRecord:
    """tau_r = T_r - (T_r^0(phi) + T_r^0(S phi)) / 2 together with tau_r^free."""
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    if np.any(np.diff(radii) <= 0):
        raise InvalidArgument("radii must be strictly increasing")
    if scattered is None:
        scattered = scatter_packet(packet, sweep, basis)
    tf, a, b = tau_free(packet, scattered, radii, config.tail_tol)
    full = sojourn_full(packet, radii, basis, potential, config, open_channels_out=scattered.channels)
    tau = full.values - 0.5 * (a.total + b.total)
    mean, slope = plateau(radii, tau)
    diag = dict(full.diagnostics)
    diag.update(sphi_norm=scattered.norm2(), phi_norm=packet.norm2())
    bounds = full.tail_bound + a.tail_bound + b.tail_bound
    rec = SojournRecord(radii, full.values, a.total, b.total, tau, tf, bounds, mean, slope, diag)
    rec.trace_times, rec.trace = full.trace_times, full.trace
    return rec
