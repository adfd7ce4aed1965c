"""Spectral representation of the free waveguide Hamiltonian.

A state ``phi = sum_a chi_a (x) g_a`` is stored through the momentum-space
profiles ``ghat_a(xi)`` on a uniform xi grid (unitary Fourier transform,
``ghat(xi) = (2 pi)^{-1/2} int g(x) e^{-i xi x} dx``).  Its image in the fiber
at energy ``lambda`` is

    psi_a^{+-}(lambda) = 2^{-1/2} (lambda - nu_a)^{-1/4} ghat_a(+- sqrt(lambda - nu_a)),

and the inverse map reads ``ghat_a(xi) = sqrt(2|xi|) psi_a^{sign xi}(xi^2 + nu_a)``.
Fiber vectors use the basis ordering of :mod:`wgdelay.scattering`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

from .errors import AccuracyFailure, AdmissibilityError, CoverageError, InvalidArgument, StencilError
from .oracles import GAUSSIAN_SUPPORT_SIGMAS
from .scattering import SMatrixSweep, derivative, ew_delay, fiber_index, partial_smatrix
from .waveguide import TransverseBasis, open_channels

SUPPORT_TOL = 1e-12  # relative amplitude defining the support of a profile
DEFAULT_DXI = 0.004


@dataclass
class ChannelWavepacket:
    channels: tuple
    xi: np.ndarray
    amplitudes: np.ndarray  # (len(channels), len(xi))
    thresholds: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        self.amplitudes = np.atleast_2d(np.asarray(self.amplitudes, dtype=complex))
        self.channels = tuple(int(c) for c in self.channels)
        if self.amplitudes.shape != (len(self.channels), len(self.xi)):
            raise InvalidArgument("amplitudes must have shape (channels, xi)")
        d = np.diff(self.xi)
        if len(self.xi) < 4 or not np.allclose(d, d[0], rtol=1e-9, atol=0):
            raise InvalidArgument("momentum grid must be uniform with at least 4 points")

    @property
    def dxi(self) -> float:
        return float(self.xi[1] - self.xi[0])

    def profile(self, channel: int) -> np.ndarray:
        if channel not in self.channels:
            return np.zeros_like(self.xi, dtype=complex)
        return self.amplitudes[self.channels.index(channel)]

    def norm2(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.dxi)

    def inner(self, other: "ChannelWavepacket") -> complex:
        """<self, other> for packets on the same momentum grid."""
        if len(self.xi) != len(other.xi) or not np.allclose(self.xi, other.xi, rtol=0, atol=1e-12):
            raise InvalidArgument("packets live on different momentum grids")
        total = 0j
        for c in set(self.channels) | set(other.channels):
            total += np.vdot(self.profile(c), other.profile(c))
        return complex(total * self.dxi)

    def support_mask(self, tol=SUPPORT_TOL) -> np.ndarray:
        peak = np.max(np.abs(self.amplitudes))
        return np.abs(self.amplitudes) > tol * peak

    def energy_support(self, tol=SUPPORT_TOL):
        """(lo, hi) of xi^2 + nu_a over the support of every channel profile."""
        mask = self.support_mask(tol)
        lo, hi = np.inf, -np.inf
        for i, c in enumerate(self.channels):
            if not mask[i].any():
                continue
            e = self.xi[mask[i]] ** 2 + self.thresholds[c]
            lo, hi = min(lo, e.min()), max(hi, e.max())
        return lo, hi

    def min_momentum(self, tol=SUPPORT_TOL) -> float:
        mask = self.support_mask(tol)
        return float(np.min(np.abs(np.broadcast_to(self.xi, mask.shape)[mask])))

    def check_admissible(self, basis: TransverseBasis = None, threshold_window=None, xi_min=None):
        """Momentum support away from 0 and the energy support inside one open interval."""
        mask = self.support_mask()
        if mask[:, 0].any() or mask[:, -1].any():
            raise AdmissibilityError("momentum profile does not vanish at the ends of its grid")
        if xi_min is None:
            xi_min = 4 * self.dxi
        if self.min_momentum() < xi_min:
            raise AdmissibilityError("momentum support reaches xi = 0", min_momentum=self.min_momentum())
        if basis is not None:
            lo, hi = self.energy_support()
            a = open_channels(lo, basis, threshold_window).channels
            b = open_channels(hi, basis, threshold_window).channels
            nu = basis.thresholds
            window = basis.threshold_window(threshold_window)
            if a != b or np.any((nu > lo - window) & (nu < hi + window)):
                raise AdmissibilityError("energy support crosses a threshold", support=(lo, hi))
        return True

    def evaluate(self, x, t=0.0) -> np.ndarray:
        """Position-space profiles of e^{-itH0} phi at points x, shape (channels, len(x))."""
        x = np.asarray(x, dtype=float)
        out = np.empty((len(self.channels), len(x)), dtype=complex)
        for i, c in enumerate(self.channels):
            m = np.abs(self.amplitudes[i]) > 0
            xi = self.xi[m]
            amp = self.amplitudes[i, m] * np.exp(-1j * t * (xi ** 2 + self.thresholds[c]))
            out[i] = np.exp(1j * np.outer(x, xi)) @ amp
        return out * self.dxi / np.sqrt(2 * np.pi)

    def with_amplitudes(self, amplitudes, channels=None):
        return ChannelWavepacket(self.channels if channels is None else channels, self.xi,
                                 amplitudes, self.thresholds)


def gaussian_profile(xi, center_momentum, momentum_width, x_center=0.0):
    """Normalised Gaussian momentum profile, cut to zero below SUPPORT_TOL of its peak."""
    z = (xi - center_momentum) / momentum_width
    amp = (2 * np.pi * momentum_width ** 2) ** -0.25 * np.exp(-0.25 * z ** 2 - 1j * xi * x_center)
    amp[np.abs(z) > GAUSSIAN_SUPPORT_SIGMAS] = 0.0
    return amp


def momentum_grid(lo, hi, dxi=DEFAULT_DXI, anchor=0.0):
    """Uniform grid with spacing dxi covering [lo, hi], aligned on anchor + n dxi."""
    n0 = int(np.floor((lo - anchor) / dxi)) - 2
    n1 = int(np.ceil((hi - anchor) / dxi)) + 2
    return anchor + dxi * np.arange(n0, n1 + 1)


def gaussian_packet(basis: TransverseBasis, components, x_center=0.0, dxi=DEFAULT_DXI) -> ChannelWavepacket:
    """Superposition of Gaussian momentum profiles.

    ``components`` is a list of dicts ``{channel, center_momentum,
    momentum_width, weight}``; the result is normalised.
    """
    if not components:
        raise InvalidArgument("a packet needs at least one component")
    lo = min(c["center_momentum"] - 1.05 * GAUSSIAN_SUPPORT_SIGMAS * c["momentum_width"] for c in components)
    hi = max(c["center_momentum"] + 1.05 * GAUSSIAN_SUPPORT_SIGMAS * c["momentum_width"] for c in components)
    xi = momentum_grid(lo, hi, dxi)
    channels = sorted({int(c["channel"]) for c in components})
    for c in channels:
        if c < 0 or c >= basis.mode_count:
            raise InvalidArgument(f"packet channel {c} outside the basis")
    amps = np.zeros((len(channels), len(xi)), dtype=complex)
    for comp in components:
        i = channels.index(int(comp["channel"]))
        amps[i] += comp.get("weight", 1.0) * gaussian_profile(
            xi, comp["center_momentum"], comp["momentum_width"], comp.get("x_center", x_center))
    packet = ChannelWavepacket(tuple(channels), xi, amps, basis.thresholds)
    return packet.with_amplitudes(amps / np.sqrt(packet.norm2()))


# ---------------------------------------------------------------------------
# fiber vectors


@dataclass
class FiberVector:
    energies: np.ndarray
    channels: tuple  # open channels
    components: np.ndarray  # (n, 2 * len(channels))

    def component(self, channel, direction):
        return self.components[:, fiber_index(self.channels.index(channel), direction)]

    def quadrature_weights(self):
        return fiber_weights(self.energies)

    def norm2(self) -> float:
        return float(np.sum(self.quadrature_weights()[:, None] * np.abs(self.components) ** 2))

    def inner(self, other: "FiberVector") -> complex:
        _check_same_grid(self, other)
        return complex(np.sum(self.quadrature_weights()[:, None] * np.conj(self.components) * other.components))

    def write_csv(self, path):
        """Rows ``lambda, alpha, direction, re, im``; alpha is 1-based, direction is -1 or 1."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "alpha", "direction", "re", "im"])
            for n, e in enumerate(self.energies):
                for i, c in enumerate(self.channels):
                    for s in (-1, 1):
                        v = self.components[n, fiber_index(i, s)]
                        w.writerow([repr(float(e)), c + 1, s, repr(float(v.real)), repr(float(v.imag))])


def _check_same_grid(a, b):
    if a.channels != b.channels or len(a.energies) != len(b.energies) or not np.allclose(a.energies, b.energies, rtol=0, atol=1e-12):
        raise InvalidArgument("fiber vectors live on different grids")


def fiber_weights(energies):
    """Composite Simpson weights on a uniform grid (trapezoid fallback otherwise)."""
    e = np.asarray(energies, dtype=float)
    n = len(e)
    d = np.diff(e)
    if n >= 3 and np.allclose(d, d[0], rtol=1e-9, atol=0):
        w = simpson(np.eye(n), x=e, axis=1) if n % 2 == 0 else _simpson_weights(n, d[0])
        return w
    w = np.zeros(n)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def _simpson_weights(n, h):
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def fiber_channels(energies, basis, threshold_window=None) -> tuple:
    lo, hi = float(np.min(energies)), float(np.max(energies))
    a = open_channels(lo, basis, threshold_window).channels
    b = open_channels(hi, basis, threshold_window).channels
    if a != b:
        raise CoverageError("energy grid crosses a threshold", lo=lo, hi=hi)
    return a


def _profile_spline(packet, channel):
    return CubicSpline(packet.xi, packet.profile(channel), extrapolate=False)


def forward_transform(packet: ChannelWavepacket, energies, basis: TransverseBasis,
                      threshold_window=None, check_coverage=True) -> FiberVector:
    """(U phi)(lambda) on the given energies (one inter-threshold interval)."""
    energies = np.asarray(energies, dtype=float)
    channels = fiber_channels(energies, basis, threshold_window)
    if check_coverage:
        lo, hi = packet.energy_support()
        if lo < energies.min() or hi > energies.max():
            raise CoverageError("energy grid does not cover the packet support",
                                support=(lo, hi), grid=(float(energies.min()), float(energies.max())))
    comps = np.zeros((len(energies), 2 * len(channels)), dtype=complex)
    nu = basis.thresholds
    for i, c in enumerate(channels):
        if c not in packet.channels:
            continue
        spline = _profile_spline(packet, c)
        k = np.sqrt(energies - nu[c])
        pref = 2 ** -0.5 * k ** -0.5
        for s in (-1, 1):
            val = spline(s * k)
            comps[:, fiber_index(i, s)] = pref * np.nan_to_num(val, nan=0.0)
    return FiberVector(energies, channels, comps)


def inverse_transform(fiber: FiberVector, xi, thresholds) -> ChannelWavepacket:
    """U^* psi sampled on the momentum grid ``xi``."""
    xi = np.asarray(xi, dtype=float)
    amps = np.zeros((len(fiber.channels), len(xi)), dtype=complex)
    e = fiber.energies
    for i, c in enumerate(fiber.channels):
        lam = xi ** 2 + thresholds[c]
        inside = (lam >= e[0]) & (lam <= e[-1])
        for s in (-1, 1):
            sel = inside & ((xi < 0) if s < 0 else (xi >= 0))
            if not sel.any():
                continue
            spline = CubicSpline(e, fiber.components[:, fiber_index(i, s)])
            amps[i, sel] = np.sqrt(2 * np.abs(xi[sel])) * spline(lam[sel])
    return ChannelWavepacket(fiber.channels, xi, amps, thresholds)


def apply_smatrix(fiber: FiberVector, sweep: SMatrixSweep) -> FiberVector:
    seg, s = sweep.interpolate(fiber.energies)
    if seg.channels != fiber.channels:
        raise CoverageError("sweep segment and fiber vector have different open channels")
    return FiberVector(fiber.energies, fiber.channels, np.einsum("nij,nj->ni", s, fiber.components))


def apply_D0(fiber: FiberVector, order: int = 4, edge_tol: float = 1e-10) -> FiberVector:
    """2i d/dlambda componentwise by finite differences."""
    c = fiber.components
    peak = np.max(np.abs(c))
    edge = max(1, order // 2)
    if peak > 0 and (np.max(np.abs(c[:edge])) > edge_tol * peak or np.max(np.abs(c[-edge:])) > edge_tol * peak):
        raise StencilError("fiber vector does not vanish at the ends of its energy grid")
    h = np.diff(fiber.energies)
    if not np.allclose(h, h[0], rtol=1e-9, atol=0):
        raise StencilError("D0 needs a uniform energy grid")
    return FiberVector(fiber.energies, fiber.channels, 2j * derivative(c, h[0], order))


def scatter_packet(packet: ChannelWavepacket, sweep: SMatrixSweep, basis: TransverseBasis,
                   xi=None, threshold_window=None) -> ChannelWavepacket:
    """U^* S U phi evaluated pointwise on an output momentum grid.

    For each output channel b and momentum xi the fiber energy is
    ``xi^2 + nu_b``; phi is transformed and S applied at exactly that
    energy, which avoids interpolating in the fiber.
    """
    lo, hi = packet.energy_support()
    seg = sweep.segment_for(lo, hi)
    channels = seg.channels
    nu = basis.thresholds
    if xi is None:
        kmax = np.sqrt(hi - nu[channels[0]])
        xi = momentum_grid(-kmax, kmax, packet.dxi, anchor=packet.xi[0])
    xi = np.asarray(xi, dtype=float)
    amps = np.zeros((len(channels), len(xi)), dtype=complex)
    e_lo, e_hi = seg.energies[0], seg.energies[-1]
    spline = seg.spline()
    for ib, b in enumerate(channels):
        lam = xi ** 2 + nu[b]
        sel = (lam >= lo) & (lam <= hi) & (lam >= e_lo) & (lam <= e_hi)
        if not sel.any():
            continue
        fib = forward_transform(packet, lam[sel], basis, threshold_window, check_coverage=False)
        s = spline(lam[sel])
        rows = np.where(xi[sel] < 0, fiber_index(ib, -1), fiber_index(ib, 1))
        out = np.einsum("nj,nj->n", s[np.arange(len(rows)), rows], fib.components)
        amps[ib, sel] = np.sqrt(2 * np.abs(xi[sel])) * out
    return ChannelWavepacket(channels, xi, amps, nu)


# ---------------------------------------------------------------------------
# expectation values


def packet_energy_grid(packet: ChannelWavepacket, points=2001, margin=0.0):
    lo, hi = packet.energy_support()
    pad = margin * (hi - lo)
    n = int(points) | 1
    return np.linspace(lo - pad, hi + pad, n)


def _delay_on_grid(delay, energies):
    seg, tau = delay.interpolate(energies)
    return seg, tau


def ew_expectation(packet: ChannelWavepacket, sweep: SMatrixSweep, basis: TransverseBasis,
                   energies=None, order: int = 2, delay=None, imag_tol: float = 1e-8) -> float:
    """<phi, tau_EW phi> = int dlambda <phi(lambda), tau_EW(lambda) phi(lambda)>."""
    if energies is None:
        energies = packet_energy_grid(packet)
    fib = forward_transform(packet, energies, basis)
    delay = delay or ew_delay(sweep, order)
    seg, tau = _delay_on_grid(delay, fib.energies)
    if seg.channels != fib.channels:
        raise CoverageError("delay segment and packet have different open channels")
    integrand = np.einsum("ni,nij,nj->n", np.conj(fib.components), tau, fib.components)
    value = np.sum(fib.quadrature_weights() * integrand)
    if abs(value.imag) > imag_tol * max(abs(value.real), 1e-300) and abs(value.imag) > 1e-14:
        raise AccuracyFailure("imaginary part of the delay expectation too large",
                              real=float(value.real), imag=float(value.imag))
    return float(value.real)


def ew_expectation_channel(packet: ChannelWavepacket, sweep: SMatrixSweep, basis: TransverseBasis,
                           channel: int, energies=None, order: int = 2) -> float:
    """Channel-resolved form: -i int <phi_a, sum_b S_ba^* dS_ba/dlambda phi_a> for phi in channel a."""
    if packet.channels != (channel,):
        raise InvalidArgument("packet must be supported in the single incoming channel")
    if energies is None:
        energies = packet_energy_grid(packet)
    fib = forward_transform(packet, energies, basis)
    seg = sweep.segment_for(fib.energies.min(), fib.energies.max())
    sub = SMatrixSweep([seg])
    h = seg.spacing
    total = np.zeros((len(seg.energies), 2, 2), dtype=complex)
    for b in seg.channels:
        blk = partial_smatrix(sub, channel, b)
        dblk = derivative(blk, h, order)
        total += np.conj(np.swapaxes(blk, 1, 2)) @ dblk
    tau_aa = -1j * total
    tau_aa = 0.5 * (tau_aa + np.conj(np.swapaxes(tau_aa, 1, 2)))
    tau_fine = CubicSpline(seg.energies, tau_aa, axis=0)(fib.energies)
    ia = fib.channels.index(channel)
    comp = fib.components[:, 2 * ia:2 * ia + 2]
    integrand = np.einsum("ni,nij,nj->n", np.conj(comp), tau_fine, comp)
    return float(np.sum(fib.quadrature_weights() * integrand).real)


def commutator_expectation(packet: ChannelWavepacket, sweep: SMatrixSweep, basis: TransverseBasis,
                           energies=None, order: int = 4) -> complex:
    """-1/2 <phi, S^* [1 (x) D0, S] phi> from apply_smatrix and apply_D0."""
    if energies is None:
        energies = packet_energy_grid(packet)
    fib = forward_transform(packet, energies, basis)
    s_fib = apply_smatrix(fib, sweep)
    first = s_fib.inner(apply_D0(s_fib, order))
    second = s_fib.inner(apply_smatrix(apply_D0(fib, order), sweep))
    return -0.5 * (first - second)


def d0_expectation(packet: ChannelWavepacket, basis: TransverseBasis, energies=None, order: int = 4) -> complex:
    if energies is None:
        energies = packet_energy_grid(packet)
    fib = forward_transform(packet, energies, basis)
    return fib.inner(apply_D0(fib, order))
