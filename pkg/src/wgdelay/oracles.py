"""Closed-form and brute-force references.

Nothing here imports the solver, transform or propagation modules; the
functions are used to freeze expected values in tests and to anchor the
``verify`` command.

Conventions: ``-f'' + V f = k^2 f`` with ``V = -depth`` on ``|x| <= a``.
Amplitudes refer to plane waves ``e^{+-ikx}`` measured from the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import erf

from .errors import AdmissibilityError, InvalidArgument, ThresholdProximity

# |g(xi)| / peak = exp(-d^2 / (4 s^2)) drops below 1e-12 at d = 2 s sqrt(ln 1e12)
GAUSSIAN_SUPPORT_SIGMAS = 2.0 * np.sqrt(np.log(1e12))


@dataclass(frozen=True)
class SquareWell1D:
    depth: float
    half_width: float

    def __post_init__(self):
        if not self.half_width > 0:
            raise InvalidArgument("square well half-width must be positive")
        if not np.isreal(self.depth):
            raise InvalidArgument("square well depth must be real")


def _inner_momentum(well, k):
    return np.sqrt(np.asarray(k, dtype=complex) ** 2 + well.depth)


def square_well_1d(well: SquareWell1D, k):
    """Reflection/transmission amplitudes and parity phase shifts.

    Returns ``(r, t, delta_even, delta_odd)``; the S-matrix eigenvalues are
    ``t + r = exp(2i delta_even)`` and ``t - r = exp(2i delta_odd)``.
    """
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise ThresholdProximity("square-well amplitudes need k > 0")
    a = well.half_width
    q = _inner_momentum(well, k)
    s2, c2 = np.sin(2 * q * a), np.cos(2 * q * a)
    den = c2 - 1j * (q ** 2 + k ** 2) / (2 * q * k) * s2
    phase = np.exp(-2j * k * a)
    t = phase / den
    r = 1j * phase * (q ** 2 - k ** 2) / (2 * q * k) * s2 / den
    tq = np.tan(q * a)
    delta_even = np.real(np.arctan((q / k) * tq)) - k * a
    delta_odd = np.real(np.arctan((k / q) * tq)) - k * a
    return r, t, delta_even, delta_odd


def _phase_slopes(well, k):
    # d(delta)/dk for both parities, written without tan() poles
    a = well.half_width
    q = _inner_momentum(well, k)
    s, c = np.sin(q * a), np.cos(q * a)
    even = ((1 / q - q / k ** 2) * s * c + a) / (c ** 2 + (q / k) ** 2 * s ** 2) - a
    odd = ((1 / q - k ** 2 / q ** 3) * s * c + (k / q) ** 2 * a) / (c ** 2 + (k / q) ** 2 * s ** 2) - a
    return np.real(even), np.real(odd)


def analytic_phase_delay(well: SquareWell1D, energies, threshold: float):
    """``2 d(delta)/d(lambda)`` for the even and odd partial waves.

    ``energies`` are total energies; the longitudinal momentum is
    ``sqrt(lambda - threshold)``.
    """
    lam = np.asarray(energies, dtype=float)
    k = np.sqrt(lam - threshold)
    de, do = _phase_slopes(well, k)
    return de / k, do / k  # 2 * (d delta/dk) / (2k)


def square_well_delay_matrix(well: SquareWell1D, energies, threshold: float):
    """Eisenbud-Wigner matrix in the basis [(-), (+)]: 2d(delta)/d(lambda) on the parity projectors."""
    te, to = analytic_phase_delay(well, energies, threshold)
    even = 0.5 * np.array([[1.0, 1.0], [1.0, 1.0]])
    odd = 0.5 * np.array([[1.0, -1.0], [-1.0, 1.0]])
    return te[..., None, None] * even + to[..., None, None] * odd


def square_well_smatrix(well: SquareWell1D, k):
    """2x2 S-matrix in the basis [(-), (+)] for a symmetric well."""
    r, t, _, _ = square_well_1d(well, k)
    return np.array([[t, r], [r, t]])


def _check_gaussian(center_momentum, momentum_width):
    if momentum_width <= 0:
        raise InvalidArgument("momentum width must be positive")
    if abs(center_momentum) - GAUSSIAN_SUPPORT_SIGMAS * momentum_width <= 0:
        raise AdmissibilityError(
            "Gaussian momentum support touches xi = 0; the free sojourn time diverges",
            center=center_momentum, width=momentum_width)


def gaussian_probability_in_slab(center_momentum, momentum_width, x_center, r, t):
    """Probability in [-r, r] for a freely dispersing Gaussian (H0 = -d^2/dx^2)."""
    sigma_x = 0.5 / momentum_width
    t = np.asarray(t, dtype=float)
    sigma_t = sigma_x * np.sqrt(1.0 + (t / sigma_x ** 2) ** 2)
    c = x_center + 2.0 * center_momentum * t
    z = np.sqrt(2.0) * sigma_t
    return 0.5 * (erf((r - c) / z) + erf((r + c) / z))


def free_gaussian_sojourn(center_momentum, momentum_width, r, x_center=0.0,
                          t_lo=-np.inf, t_hi=np.inf, tol=1e-10):
    """Time spent in [-r, r] by a free Gaussian packet, by adaptive quadrature.

    Returns ``(value, error_estimate)``.
    """
    _check_gaussian(center_momentum, momentum_width)
    if r == 0:
        return 0.0, 0.0
    v = 2.0 * center_momentum
    sigma_x = 0.5 / momentum_width
    # window where the packet overlaps the slab; outside, the integrand is
    # below double precision and the tails are integrated separately
    t_in = (-r - x_center) / v
    t_out = (r - x_center) / v
    spread = (12 * sigma_x + 12 * momentum_width * 2 * (abs(t_in) + abs(t_out))) / abs(v)
    edges = sorted([t_in - spread, t_in, t_out, t_out + spread] if v > 0 else
                   [t_out - spread, t_out, t_in, t_in + spread])
    lo, hi = edges[0], edges[-1]

    def f(t):
        return gaussian_probability_in_slab(center_momentum, momentum_width, x_center, r, t)

    pieces = []
    pts = [p for p in edges if t_lo < p < t_hi]
    a, b = max(lo, t_lo), min(hi, t_hi)
    if a < b:
        inner = [p for p in pts if a < p < b]
        grid = [a] + inner + [b]
        for u, w in zip(grid[:-1], grid[1:]):
            pieces.append(integrate.quad(f, u, w, epsabs=tol * 1e-2, epsrel=tol, limit=400))
    if t_lo < lo:
        pieces.append(integrate.quad(f, t_lo, min(lo, t_hi), epsabs=tol * 1e-2, epsrel=tol, limit=400))
    if t_hi > hi:
        pieces.append(integrate.quad(f, max(hi, t_lo), t_hi, epsabs=tol * 1e-2, epsrel=tol, limit=400))
    value = sum(p[0] for p in pieces)
    err = sum(p[1] for p in pieces)
    return value, err
