"""Straight two-dimensional waveguide Omega = (0, L) x R.

Transverse Dirichlet modes, a small catalog of real potentials and the
reduction of a potential V(x', x) to the channel coupling matrix

    V_ab(x) = int_0^L chi_a(x') V(x', x) chi_b(x') dx'.

Channels are indexed from 0 in code; channel ``a`` has the physical label
``a + 1`` and threshold ``((a + 1) pi / L)**2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InvalidArgument, OutOfDomain, ThresholdProximity

DEFAULT_QUAD_ORDER = 64
DEFAULT_THRESHOLD_WINDOW = 1e-3  # relative to nu_1
DEFAULT_EPS_V = 1e-12  # relative to the peak coupling


@dataclass(frozen=True)
class TransverseBasis:
    """Dirichlet eigenmodes of the cross-section (0, L)."""

    width: float
    mode_count: int

    @property
    def thresholds(self) -> np.ndarray:
        alpha = np.arange(1, self.mode_count + 1)
        return (alpha * np.pi / self.width) ** 2

    def eigenfunctions(self, xp) -> np.ndarray:
        """chi_a(x') for every mode, shape ``(len(xp), mode_count)``."""
        xp = np.asarray(xp, dtype=float)
        alpha = np.arange(1, self.mode_count + 1)
        return np.sqrt(2.0 / self.width) * np.sin(np.outer(xp, alpha) * np.pi / self.width)

    def quadrature(self, order: int = DEFAULT_QUAD_ORDER):
        nodes, weights = np.polynomial.legendre.leggauss(order)
        half = 0.5 * self.width
        return half * (nodes + 1.0), half * weights

    def threshold_window(self, delta=None) -> float:
        if delta is None:
            delta = DEFAULT_THRESHOLD_WINDOW * self.thresholds[0]
        return float(delta)


def build_transverse_basis(width: float, mode_count: int) -> TransverseBasis:
    if not width > 0:
        raise InvalidArgument(f"waveguide width must be positive, got {width}")
    if int(mode_count) != mode_count or mode_count < 1:
        raise InvalidArgument(f"mode count must be a positive integer, got {mode_count}")
    return TransverseBasis(float(width), int(mode_count))


@dataclass(frozen=True)
class OpenChannels:
    energy: float
    channels: tuple
    momenta: np.ndarray

    @property
    def fiber_dim(self) -> int:
        return 2 * len(self.channels)


def open_channels(energy: float, basis: TransverseBasis, delta=None) -> OpenChannels:
    """Open channel set N(energy) and on-shell momenta sqrt(energy - nu_a)."""
    nu = basis.thresholds
    delta = basis.threshold_window(delta)
    if energy <= nu[0]:
        raise InvalidArgument(f"energy {energy} is below the first threshold {nu[0]}")
    gap = np.abs(energy - nu)
    if np.any(gap < delta):
        a = int(np.argmin(gap))
        raise ThresholdProximity(
            f"energy {energy} lies within {delta:g} of threshold nu_{a + 1} = {nu[a]}",
            channel=a, threshold=nu[a], window=delta)
    idx = tuple(int(a) for a in np.flatnonzero(nu <= energy))
    return OpenChannels(float(energy), idx, np.sqrt(energy - nu[list(idx)]))


def threshold_intervals(basis: TransverseBasis):
    """(lo, hi, n_open) for every interval between consecutive thresholds.

    The last interval is open-ended (``hi = inf``) and valid only while the
    basis still has closed channels above it.
    """
    nu = basis.thresholds
    out = [(nu[i], nu[i + 1], i + 1) for i in range(len(nu) - 1)]
    out.append((nu[-1], np.inf, len(nu)))
    return out


# ---------------------------------------------------------------------------
# potential catalog


@dataclass(frozen=True)
class Gaussian:
    amplitude: float
    width: float
    center: float = 0.0

    def __call__(self, x):
        return self.amplitude * np.exp(-0.5 * ((np.asarray(x, float) - self.center) / self.width) ** 2)

    @property
    def decay(self):
        return np.inf, self.width


@dataclass(frozen=True)
class Box:
    """amplitude on |x - center| <= half_width, zero elsewhere."""

    amplitude: float
    half_width: float
    center: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, float)
        return np.where(np.abs(x - self.center) <= self.half_width, self.amplitude, 0.0)

    @property
    def decay(self):
        return np.inf, self.half_width

    smooth = False


@dataclass(frozen=True)
class Sech2:
    amplitude: float
    width: float
    center: float = 0.0

    def __call__(self, x):
        return self.amplitude / np.cosh((np.asarray(x, float) - self.center) / self.width) ** 2

    @property
    def decay(self):
        return np.inf, self.width


@dataclass(frozen=True)
class Constant:
    value: float = 1.0

    def __call__(self, xp):
        return np.full(np.shape(xp), float(self.value))


@dataclass(frozen=True)
class GaussianBump:
    center: float
    width: float
    amplitude: float = 1.0

    def __call__(self, xp):
        return self.amplitude * np.exp(-0.5 * ((np.asarray(xp, float) - self.center) / self.width) ** 2)


LONGITUDINAL = {"gaussian": Gaussian, "box": Box, "sech2": Sech2}
TRANSVERSE = {"constant": Constant, "gaussian_bump": GaussianBump}


@dataclass(frozen=True)
class Separable:
    """V(x', x) = u(x') v(x)."""

    u: object
    v: object

    @property
    def smooth(self):
        return getattr(self.v, "smooth", True)

    def sample(self, xp, x):
        return np.outer(self.u(xp), self.v(x))

    @property
    def decay(self):
        return self.v.decay

    def scaled(self, g):
        return Separable(self.u, _scale_profile(self.v, g))


@dataclass(frozen=True)
class SumOfSeparables:
    terms: tuple

    @property
    def smooth(self):
        return all(t.smooth for t in self.terms)

    def sample(self, xp, x):
        return sum(t.sample(xp, x) for t in self.terms)

    @property
    def decay(self):
        kappas, scales = zip(*(t.decay for t in self.terms))
        return min(kappas), max(scales)

    def scaled(self, g):
        return SumOfSeparables(tuple(t.scaled(g) for t in self.terms))


@dataclass(frozen=True)
class GridSampled:
    """Potential tabulated on a tensor grid ``values[i, j] = V(xp[i], x[j])``.

    If ``xp`` coincides with the transverse quadrature nodes the samples are
    used directly, otherwise they are spline-interpolated in x'.  Along x the
    samples are used where grid points coincide and spline-interpolated
    elsewhere.
    """

    values: np.ndarray
    xp: np.ndarray
    x: np.ndarray
    kappa: float = np.inf
    scale: float = 1.0
    smooth: bool = True

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.xp), len(self.x)):
            raise InvalidArgument("grid-sampled values must have shape (len(xp), len(x))")
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("grid-sampled potential must be real and finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "xp", np.asarray(self.xp, float))
        object.__setattr__(self, "x", np.asarray(self.x, float))

    def sample(self, xp, x):
        xp = np.asarray(xp, float)
        x = np.asarray(x, float)
        tol = 1e-9 * max(1.0, np.max(np.abs(self.x)))
        if x.min() < self.x.min() - tol or x.max() > self.x.max() + tol:
            raise OutOfDomain(
                f"grid-sampled potential covers [{self.x.min()}, {self.x.max()}], "
                f"requested [{x.min()}, {x.max()}]")
        cols = _resample(self.values, self.x, x, axis=1)
        return _resample(cols, self.xp, xp, axis=0)

    @property
    def decay(self):
        return self.kappa, self.scale

    def scaled(self, g):
        return GridSampled(g * self.values, self.xp, self.x, self.kappa, self.scale, self.smooth)


def _resample(values, src, dst, axis):
    if len(src) == len(dst) and np.allclose(src, dst, rtol=0, atol=1e-12):
        return values
    pos = np.searchsorted(src, dst)
    pos = np.clip(pos, 0, len(src) - 1)
    left = np.clip(pos - 1, 0, len(src) - 1)
    near = np.where(np.abs(src[pos] - dst) < np.abs(src[left] - dst), pos, left)
    if np.all(np.abs(src[near] - dst) < 1e-12):
        return np.take(values, near, axis=axis)
    return CubicSpline(src, values, axis=axis)(dst)


def _scale_profile(v, g):
    kwargs = dict(v.__dict__)
    kwargs["amplitude"] = g * kwargs["amplitude"]
    return type(v)(**kwargs)


def potential_from_config(cfg) -> object:
    """Build a PotentialSpec from a plain mapping (scenario files)."""
    kind = cfg.get("kind", "separable")
    if kind == "zero":
        return Separable(Constant(0.0), Gaussian(0.0, 1.0))
    if kind == "separable":
        return _separable_from_config(cfg)
    if kind == "sum":
        return SumOfSeparables(tuple(_separable_from_config(t) for t in cfg["terms"]))
    raise InvalidArgument(f"unknown potential kind {kind!r}")


def _separable_from_config(cfg):
    tcfg = dict(cfg.get("transverse", {"profile": "constant"}))
    lcfg = dict(cfg["longitudinal"])
    tname = tcfg.pop("profile")
    lname = lcfg.pop("profile")
    try:
        return Separable(TRANSVERSE[tname](**tcfg), LONGITUDINAL[lname](**lcfg))
    except KeyError as exc:
        raise InvalidArgument(f"unknown profile {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# channel coupling


def longitudinal_grid(half_extent: float, spacing: float) -> np.ndarray:
    """Cell-centred symmetric grid on [-X, X].

    Points sit at half-integer multiples of ``spacing`` so cell boundaries
    fall on integer multiples; box edges at ``m * spacing`` are resolved
    exactly.
    """
    if not (half_extent > 0 and spacing > 0):
        raise InvalidArgument("grid extent and spacing must be positive")
    n = 2 * int(round(half_extent / spacing))
    return (np.arange(n) - 0.5 * (n - 1)) * spacing


@dataclass(frozen=True)
class CouplingMatrix:
    x: np.ndarray
    values: np.ndarray  # (n_x, A, A), real symmetric per x
    thresholds: np.ndarray
    eps_v: float = DEFAULT_EPS_V
    decay: tuple = (np.inf, 1.0)
    smooth: bool = True

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def channel_count(self) -> int:
        return self.values.shape[1]

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    @property
    def is_zero(self) -> bool:
        return self.peak == 0.0

    def support(self):
        """Index range ``(lo, hi)`` of cells whose coupling exceeds eps_v * peak.

        Returns None for an identically vanishing coupling.
        """
        if self.is_zero:
            return None
        big = np.max(np.abs(self.values), axis=(1, 2)) >= self.eps_v * self.peak
        idx = np.flatnonzero(big)
        return int(idx[0]), int(idx[-1])

    @property
    def matching_radius(self) -> float:
        s = self.support()
        if s is None:
            return 0.0
        h = 0.5 * self.dx
        return float(max(abs(self.x[s[0]] - h), abs(self.x[s[1]] + h)))

    def check_decay(self):
        """Tail diagnostics: the support must end strictly inside the grid."""
        s = self.support()
        if s is None:
            return {"matching_radius": 0.0, "tail_max": 0.0, "ok": True}
        tail = np.concatenate([self.values[: s[0]], self.values[s[1] + 1:]])
        tail_max = float(np.max(np.abs(tail))) if tail.size else 0.0
        ok = s[0] > 0 and s[1] < len(self.x) - 1
        return {"matching_radius": self.matching_radius, "tail_max": tail_max, "ok": bool(ok)}

    def restricted(self, mode_count: int) -> "CouplingMatrix":
        return CouplingMatrix(self.x, self.values[:, :mode_count, :mode_count],
                              self.thresholds[:mode_count], self.eps_v, self.decay, self.smooth)

    def write_csv(self, path):
        """Rows ``x, alpha, beta, value`` with 1-based channel labels."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "alpha", "beta", "value"])
            n = self.channel_count
            for j, xj in enumerate(self.x):
                for a in range(n):
                    for b in range(n):
                        w.writerow([repr(float(xj)), a + 1, b + 1, repr(float(self.values[j, a, b]))])


def compute_coupling(potential, basis: TransverseBasis, x_grid: Sequence[float],
                     quad_order: int = DEFAULT_QUAD_ORDER, eps_v: float = DEFAULT_EPS_V) -> CouplingMatrix:
    x = np.asarray(x_grid, dtype=float)
    if x.ndim != 1 or len(x) < 3:
        raise InvalidArgument("x grid must be one-dimensional with at least 3 points")
    steps = np.diff(x)
    if not np.allclose(steps, steps[0], rtol=1e-10, atol=0):
        raise InvalidArgument("x grid must be uniform")
    xq, wq = basis.quadrature(quad_order)
    chi = basis.eigenfunctions(xq)  # (q, A)
    n = basis.mode_count
    iu = np.triu_indices(n)

    terms = potential.terms if isinstance(potential, SumOfSeparables) else (potential,)
    values = np.zeros((len(x), n, n))
    for term in terms:
        if isinstance(term, Separable):
            u = term.u(xq)
            # one entry per unordered pair, mirrored below
            upper = np.einsum("q,qa,qb->ab", wq * u, chi, chi)[iu]
            values[:, iu[0], iu[1]] += np.outer(term.v(x), upper)
        else:
            table = term.sample(xq, x)  # (q, n_x)
            values[:, iu[0], iu[1]] += np.einsum("qj,qa,qb->jab", wq[:, None] * table, chi, chi)[:, iu[0], iu[1]]
    values[:, iu[1], iu[0]] = values[:, iu[0], iu[1]]
    return CouplingMatrix(x, values, basis.thresholds, eps_v, potential.decay, potential.smooth)
