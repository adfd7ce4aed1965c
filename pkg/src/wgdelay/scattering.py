"""Multichannel S-matrix of the waveguide by log-derivative propagation.

The coupling matrix is treated as piecewise constant on the cells of its
cell-centred grid.  Inside a cell the coupled equations

    -f'' + (V_j + diag(nu)) f = lambda f

are solved exactly in the eigenbasis of ``V_j + diag(nu)``, so the discrete
problem is Hermitian and the resulting S-matrix is unitary and reciprocal
to rounding error.  Closed channels are carried by the log-derivative
matrix Y = f' f^{-1}, which stays bounded where the fundamental solutions
themselves would blow up.

Fiber basis: ``[(a0, -), (a0, +), (a1, -), (a1, +), ...]`` over the open
channels, ``(a, +)`` being the right-moving component at momentum
``+sqrt(lambda - nu_a)``.  Column ``(a, s)`` holds the outgoing amplitudes
produced by a unit-flux wave incoming in channel ``a`` with direction
``s``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (AccuracyFailure, CoverageError, InvalidArgument, SolverFailure,
                     StencilError)
from .waveguide import CouplingMatrix, TransverseBasis, open_channels

log = logging.getLogger(__name__)

CHUNK = 32  # lambda points per batch; fixed so results do not depend on threading


@dataclass
class SolverOptions:
    n_closed: int = 4
    cond_max: float = 1e12
    unitarity_tol: float = 1e-6
    threshold_window: float | None = None
    retry_closed: bool = True
    extrapolate: bool = True


def fiber_index(position: int, direction: int) -> int:
    """Position of ``(channel, direction)`` in the fiber basis; direction is -1 or +1."""
    return 2 * position + (1 if direction > 0 else 0)


def direction_swap(n_open: int) -> np.ndarray:
    """Permutation matrix exchanging (a, -) and (a, +)."""
    perm = np.kron(np.eye(n_open), np.array([[0.0, 1.0], [1.0, 0.0]]))
    return perm


@dataclass
class SMatrix:
    energy: float
    channels: tuple
    matrix: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def basis(self):
        return [(a, s) for a in self.channels for s in (-1, 1)]

    @property
    def unitarity_residual(self) -> float:
        s = self.matrix
        return float(np.linalg.norm(s.conj().T @ s - np.eye(len(s))))

    @property
    def reciprocity_residual(self) -> float:
        p = direction_swap(len(self.channels))
        return float(np.linalg.norm(p @ self.matrix.T @ p - self.matrix))

    def block(self, out_channel: int, in_channel: int) -> np.ndarray:
        """2x2 direction block from ``in_channel`` to ``out_channel`` (zero if either is closed)."""
        if out_channel not in self.channels or in_channel not in self.channels:
            return np.zeros((2, 2), dtype=complex)
        b = self.channels.index(out_channel)
        a = self.channels.index(in_channel)
        return self.matrix[2 * b:2 * b + 2, 2 * a:2 * a + 2].copy()


# ---------------------------------------------------------------------------
# propagation kernels


def _cell_functions(w, h):
    """Diagonal 'impedance' entries y1, y2 of one cell for eigenvalues ``w`` of W = M - lambda."""
    y1 = np.empty_like(w)
    y2 = np.empty_like(w)
    pos = w > 0
    neg = w < 0
    zero = ~(pos | neg)
    kap = np.sqrt(w[pos])
    kh = kap * h
    big = kh > 300.0
    y1[pos] = np.where(big, kap, kap / np.tanh(np.where(big, 1.0, kh)))
    y2[pos] = np.where(big, 2 * kap * np.exp(-np.minimum(kh, 700.0)), kap / np.sinh(np.where(big, 1.0, kh)))
    k = np.sqrt(-w[neg])
    if np.any(k * h >= 0.5 * np.pi):
        raise SolverFailure("cell width too large for the local wavenumber; refine the x grid",
                            max_phase=float(np.max(k * h)))
    y1[neg] = k / np.tan(k * h)
    y2[neg] = k / np.sin(k * h)
    y1[zero] = 1.0 / h
    y2[zero] = 1.0 / h
    return y1, y2


def _eigensystems(values, thresholds):
    m = values + np.diag(thresholds)[None]
    return np.linalg.eigh(m)


def _incoming_from_left(eig_m, eig_u, h, x_left, x_right, thresholds, lam, n_open, cond_max):
    """Reflection and transmission blocks for waves incoming from the left.

    ``eig_m, eig_u`` describe the cells ordered left to right.  Returns
    ``(r, t, cond)`` with ``r, t`` of shape ``(n_lam, n_open, n_open)``.
    """
    n_lam = len(lam)
    n = len(thresholds)
    mom = np.sqrt((lam[:, None] - thresholds[None, :]).astype(complex))  # k or i*kappa
    eye = np.eye(n)
    # propagate Yt = -Y_x in s = -x, i.e. from the right edge leftwards, keeping
    # Yt in the eigenbasis of the current cell; turn[j] rotates basis j+1 -> j
    order = np.arange(len(eig_m) - 1, -1, -1)
    turn = np.swapaxes(eig_u[:-1], 1, 2) @ eig_u[1:]
    u0 = eig_u[order[0]]
    z = u0.T @ (-(1j * mom)[:, :, None] * eye) @ u0
    g = np.broadcast_to(u0, (n_lam, n, n)).astype(complex)
    for step, j in enumerate(order):
        if step:
            p = turn[j]  # cell j+1 basis -> cell j basis
            z = p @ z @ p.T
            g = g @ p.T
        w = eig_m[j][None, :] - lam[:, None]
        y1, y2 = _cell_functions(w, h)
        x = np.linalg.solve(z + y1[:, :, None] * eye, y2[:, :, None] * eye)
        z = y1[:, :, None] * eye - y2[:, :, None] * x
        g = g @ x
    u_last = eig_u[order[-1]]
    y = -(u_last @ z @ u_last.T)
    g = g @ u_last.T
    k = mom[:, :n_open].real
    d_out = -1j * mom
    lhs = y - d_out[:, :, None] * eye
    cond = np.linalg.cond(lhs)
    if np.any(~np.isfinite(cond)) or np.any(cond > cond_max):
        bad = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise SolverFailure("matching system is singular or ill-conditioned",
                            energy=float(lam[bad]), condition=float(cond[bad]), cond_max=cond_max)
    u_in = np.zeros((n_lam, n, n_open), dtype=complex)
    idx = np.arange(n_open)
    u_in[:, idx, idx] = np.exp(1j * k * x_left) / np.sqrt(k)
    d_in = np.zeros((n_lam, n), dtype=complex)
    d_in[:, :n_open] = 1j * k
    rhs = d_in[:, :, None] * u_in - y @ u_in
    u_out = np.linalg.solve(lhs, rhs)
    f_right = g @ (u_in + u_out)
    scale_l = (np.sqrt(k) * np.exp(1j * k * x_left))[:, :, None]
    scale_r = (np.sqrt(k) * np.exp(-1j * k * x_right))[:, :, None]
    r = scale_l * u_out[:, :n_open, :]
    t = scale_r * f_right[:, :n_open, :]
    return r, t, cond


def _assemble(r, t, r_m, t_m):
    n_lam, n_open, _ = r.shape
    s = np.zeros((n_lam, 2 * n_open, 2 * n_open), dtype=complex)
    s[:, 1::2, 1::2] = t  # (b,+) <- (a,+)
    s[:, 0::2, 1::2] = r  # (b,-) <- (a,+)
    s[:, 0::2, 0::2] = t_m  # (b,-) <- (a,-)
    s[:, 1::2, 0::2] = r_m  # (b,+) <- (a,-)
    return s


def _solve_cells(values, nu, h, x_left, x_right, lam, n_open, cond_max):
    eig_m, eig_u = _eigensystems(values, nu)
    r, t, c1 = _incoming_from_left(eig_m, eig_u, h, x_left, x_right, nu, lam, n_open, cond_max)
    r_m, t_m, c2 = _incoming_from_left(eig_m[::-1], eig_u[::-1], h, -x_right, -x_left, nu, lam, n_open, cond_max)
    return _assemble(r, t, r_m, t_m), np.maximum(c1, c2)


def _solve_batch(coupling, n_use, lam, n_open, cond_max, extrapolate):
    if coupling.is_zero:
        eye = np.eye(2 * n_open, dtype=complex)
        return np.broadcast_to(eye, (len(lam),) + eye.shape).copy(), np.ones(len(lam))
    lo, hi = coupling.support()
    h = coupling.dx
    nu = coupling.thresholds[:n_use]
    if extrapolate and coupling.smooth:
        # pad the support to a multiple of 3 cells so that coarse cells of
        # width 3h are centred on every third grid point
        n_cells = hi - lo + 1
        pad = (-n_cells) % 3
        lo = max(lo - pad // 2, 0)
        hi = lo + n_cells + pad - 1
        if hi >= len(coupling.x) or (hi - lo + 1) % 3:
            raise SolverFailure("coupling grid too short to pad the support for extrapolation")
    values = coupling.values[lo:hi + 1, :n_use, :n_use]
    x_left = float(coupling.x[lo] - 0.5 * h)
    x_right = float(coupling.x[hi] + 0.5 * h)
    fine, cond = _solve_cells(values, nu, h, x_left, x_right, lam, n_open, cond_max)
    if not (extrapolate and coupling.smooth):
        return fine, cond
    # the cell-midpoint scheme is symmetric, so its error is even in h:
    # S(h) = S + c h^2 + O(h^4); combine h and 3h
    coarse, _ = _solve_cells(values[1::3], nu, 3 * h, x_left, x_right, lam, n_open, cond_max)
    return (9.0 * fine - coarse) / 8.0, cond


def _channel_setup(coupling, basis, energies, opts):
    ch = [open_channels(e, basis, opts.threshold_window) for e in energies]
    n_open = {len(c.channels) for c in ch}
    if len(n_open) != 1:
        raise InvalidArgument("energies of one batch must share the open channel set")
    n_open = n_open.pop()
    return ch[0].channels, n_open


def _solve_checked(coupling, basis, lam, opts):
    channels, n_open = _channel_setup(coupling, basis, lam, opts)
    available = coupling.channel_count
    n_closed = opts.n_closed
    if available < n_open + n_closed:
        raise InvalidArgument(
            f"{n_open} open channels need {n_open + n_closed} modes with n_closed={n_closed}, "
            f"coupling has {available}")
    while True:
        n_use = n_open + n_closed
        s, cond = _solve_batch(coupling, n_use, lam, n_open, opts.cond_max, opts.extrapolate)
        eye = np.eye(2 * n_open)
        unit = np.linalg.norm(np.conj(np.swapaxes(s, 1, 2)) @ s - eye, axis=(1, 2))
        if np.all(unit <= 10 * opts.unitarity_tol):
            return channels, s, unit, cond, n_closed
        if opts.retry_closed and n_open + 2 * n_closed <= available:
            log.info("unitarity residual %.2e; doubling closed channels to %d", unit.max(), 2 * n_closed)
            n_closed *= 2
            continue
        raise AccuracyFailure("S-matrix unitarity residual above tolerance",
                              residual=float(unit.max()), tolerance=opts.unitarity_tol)


def solve_smatrix(coupling: CouplingMatrix, basis: TransverseBasis, energy: float,
                  opts: SolverOptions | None = None) -> SMatrix:
    """Flux-normalised S-matrix at one energy."""
    opts = opts or SolverOptions()
    channels, s, unit, cond, n_closed = _solve_checked(coupling, basis, np.array([float(energy)]), opts)
    return SMatrix(float(energy), channels, s[0],
                   {"unitarity": float(unit[0]), "condition": float(cond[0]),
                    "n_closed": n_closed, "matching_radius": coupling.matching_radius})


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSegment:
    energies: np.ndarray
    channels: tuple
    matrices: np.ndarray  # (n, d, d)
    unitarity: np.ndarray
    condition: np.ndarray

    @property
    def spacing(self):
        return float(self.energies[1] - self.energies[0]) if len(self.energies) > 1 else np.nan

    @property
    def reciprocity(self):
        p = direction_swap(len(self.channels))
        return np.linalg.norm(p @ np.swapaxes(self.matrices, 1, 2) @ p - self.matrices, axis=(1, 2))

    def spline(self):
        if not hasattr(self, "_spline"):
            self._spline = CubicSpline(self.energies, self.matrices, axis=0)
        return self._spline


@dataclass
class SMatrixSweep:
    segments: list

    @property
    def energies(self):
        return np.concatenate([s.energies for s in self.segments])

    def __len__(self):
        return sum(len(s.energies) for s in self.segments)

    def __iter__(self):
        for seg in self.segments:
            for i, e in enumerate(seg.energies):
                yield SMatrix(float(e), seg.channels, seg.matrices[i],
                              {"unitarity": float(seg.unitarity[i]), "condition": float(seg.condition[i])})

    def segment_for(self, energy_lo, energy_hi):
        for seg in self.segments:
            if seg.energies[0] <= energy_lo and energy_hi <= seg.energies[-1]:
                return seg
        raise CoverageError(f"no sweep segment covers [{energy_lo}, {energy_hi}]",
                            segments=[(float(s.energies[0]), float(s.energies[-1])) for s in self.segments])

    def interpolate(self, energies):
        """Entrywise cubic interpolation of S on energies inside one segment."""
        energies = np.asarray(energies, dtype=float)
        seg = self.segment_for(energies.min(), energies.max())
        return seg, seg.spline()(energies)

    def max_residuals(self):
        return {
            "unitarity_max": float(max(s.unitarity.max() for s in self.segments)),
            "reciprocity_max": float(max(s.reciprocity.max() for s in self.segments)),
            "condition_max": float(max(s.condition.max() for s in self.segments)),
        }


def sweep_smatrix(coupling, basis, energies, opts=None, threads=1) -> SMatrixSweep:
    """S-matrix on an energy grid, grouped into inter-threshold segments.

    Batches have a fixed size, so the numbers do not depend on ``threads``.
    """
    opts = opts or SolverOptions()
    energies = np.asarray(energies, dtype=float)
    if np.any(np.diff(energies) <= 0):
        raise InvalidArgument("sweep energies must be strictly increasing")
    n_open = np.array([len(open_channels(e, basis, opts.threshold_window).channels) for e in energies])
    cuts = np.flatnonzero(np.diff(n_open)) + 1
    groups = np.split(np.arange(len(energies)), cuts)

    jobs = [(g[i:i + CHUNK]) for g in groups for i in range(0, len(g), CHUNK)]

    def run(idx):
        return _solve_checked(coupling, basis, energies[idx], opts)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    segments = []
    pos = 0
    for g in groups:
        parts = []
        while pos < len(jobs) and jobs[pos][0] >= g[0] and jobs[pos][-1] <= g[-1]:
            parts.append(results[pos])
            pos += 1
        segments.append(SweepSegment(
            energies[g], parts[0][0],
            np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]),
            np.concatenate([p[3] for p in parts])))
    return SMatrixSweep(segments)


def uniform_sweep_energies(basis, lo, hi, points, threshold_window=None):
    """Uniform grid on [lo, hi]; raises if it crosses a threshold window."""
    grid = np.linspace(lo, hi, int(points))
    for e in grid:
        open_channels(e, basis, threshold_window)
    return grid


# ---------------------------------------------------------------------------
# first-order (Born) S-matrix


def fourier_coupling(coupling: CouplingMatrix, q, out_channel: int, in_channel: int):
    """(2 pi)^{-1/2} int V_ba(x) e^{-iqx} dx by the trapezoid rule on the coupling grid."""
    q = np.asarray(q, dtype=float)
    v = coupling.values[:, out_channel, in_channel]
    return coupling.dx / np.sqrt(2 * np.pi) * (np.exp(-1j * np.multiply.outer(q, coupling.x)) @ v)


def born_smatrix(coupling: CouplingMatrix, basis: TransverseBasis, energy: float,
                 threshold_window=None) -> SMatrix:
    """First-order S-matrix: the resolvent term of the stationary formula is dropped.

    ``S[(b,s'),(a,s)] = delta - i pi (k_b k_a)^{-1/2} (2 pi)^{-1/2} Vhat_ba(s' k_b - s k_a)``.
    """
    oc = open_channels(energy, basis, threshold_window)
    chans, k = oc.channels, oc.momenta
    d = 2 * len(chans)
    s = np.eye(d, dtype=complex)
    for ib, b in enumerate(chans):
        for ia, a in enumerate(chans):
            for sb in (-1, 1):
                for sa in (-1, 1):
                    q = sb * k[ib] - sa * k[ia]
                    vhat = fourier_coupling(coupling, q, b, a)
                    s[fiber_index(ib, sb), fiber_index(ia, sa)] -= (
                        1j * np.pi / np.sqrt(k[ib] * k[ia]) * vhat / np.sqrt(2 * np.pi))
    return SMatrix(float(energy), chans, s, {"order": 1})


# ---------------------------------------------------------------------------
# Eisenbud-Wigner delay


def fd_weights(offsets, derivative=1):
    """Finite-difference weights at 0 for the given integer offsets."""
    offsets = np.asarray(offsets, dtype=float)
    n = len(offsets)
    vander = np.vander(offsets, n, increasing=True).T
    rhs = np.zeros(n)
    fact = 1.0
    for i in range(1, derivative + 1):
        fact *= i
    rhs[derivative] = fact
    return np.linalg.solve(vander, rhs)


def derivative(values, spacing, order=2, axis=0):
    """First derivative on a uniform grid; central inside, one-sided at the ends."""
    values = np.moveaxis(np.asarray(values), axis, 0)
    n = values.shape[0]
    if n < order + 1:
        raise StencilError(f"need at least {order + 1} points for an order-{order} stencil, got {n}")
    half = order // 2
    out = np.empty_like(values, dtype=np.result_type(values, float))
    for i in range(n):
        start = min(max(i - half, 0), n - order - 1)
        offs = np.arange(start, start + order + 1) - i
        w = fd_weights(offs)
        out[i] = np.tensordot(w, values[start:start + order + 1], axes=(0, 0)) / spacing
    return np.moveaxis(out, 0, axis)


@dataclass
class DelaySegment:
    energies: np.ndarray
    channels: tuple
    tau: np.ndarray  # symmetrised, (n, d, d)
    hermiticity: np.ndarray  # residual before symmetrisation
    truncation: np.ndarray
    derivative: np.ndarray  # dS/dlambda


@dataclass
class EWDelayMatrix:
    segments: list
    order: int

    @property
    def energies(self):
        return np.concatenate([s.energies for s in self.segments])

    def segment_for(self, lo, hi):
        for seg in self.segments:
            if seg.energies[0] <= lo and hi <= seg.energies[-1]:
                return seg
        raise CoverageError(f"no delay segment covers [{lo}, {hi}]")

    def interpolate(self, energies):
        energies = np.asarray(energies, dtype=float)
        seg = self.segment_for(energies.min(), energies.max())
        if not hasattr(seg, "_spline"):
            seg._spline = CubicSpline(seg.energies, seg.tau, axis=0)
        return seg, seg._spline(energies)

    @property
    def max_hermiticity(self):
        return float(max(s.hermiticity.max() for s in self.segments))


def ew_delay(sweep: SMatrixSweep, order: int = 2, check: bool = True) -> EWDelayMatrix:
    """tau_EW = -i S^* dS/dlambda with finite differences per segment."""
    if order not in (2, 4):
        raise InvalidArgument("stencil order must be 2 or 4")
    segs = []
    for seg in sweep.segments:
        e = seg.energies
        if len(e) < 5:
            raise StencilError("each sweep segment needs at least 5 energies", points=len(e))
        h = np.diff(e)
        if not np.allclose(h, h[0], rtol=1e-9, atol=0):
            raise StencilError("sweep segment is not uniform")
        s = seg.matrices
        ds = derivative(s, h[0], order)
        ds_ref = derivative(s, h[0], order + 2) if len(e) >= order + 3 else ds
        sh = np.conj(np.swapaxes(s, 1, 2))
        tau = -1j * sh @ ds
        herm = np.linalg.norm(tau - np.conj(np.swapaxes(tau, 1, 2)), axis=(1, 2))
        trunc = np.linalg.norm(ds - ds_ref, axis=(1, 2))
        if check:
            floor = 1e-10 * (1 + np.linalg.norm(tau, axis=(1, 2)).max())
            if herm.max() > 10 * 2 * trunc.max() + floor:
                raise AccuracyFailure("Eisenbud-Wigner matrix far from Hermitian",
                                      residual=float(herm.max()), truncation=float(trunc.max()))
        tau = 0.5 * (tau + np.conj(np.swapaxes(tau, 1, 2)))
        segs.append(DelaySegment(e, seg.channels, tau, herm, trunc, ds))
    return EWDelayMatrix(segs, order)


def partial_smatrix(sweep: SMatrixSweep, in_channel: int, out_channel: int, mode_count=None) -> np.ndarray:
    """Blocks S_{out,in}(lambda) over the whole sweep, shape (n, 2, 2)."""
    if in_channel < 0 or out_channel < 0 or (mode_count is not None and max(in_channel, out_channel) >= mode_count):
        raise InvalidArgument("channel index out of range")
    blocks = []
    for smat in sweep:
        blocks.append(smat.block(out_channel, in_channel))
    return np.array(blocks)


def reassemble(blocks: dict, channels) -> np.ndarray:
    """Inverse of the block partition: ``blocks[(b, a)]`` of shape (..., 2, 2)."""
    n = len(channels)
    first = next(iter(blocks.values()))
    out = np.zeros(first.shape[:-2] + (2 * n, 2 * n), dtype=complex)
    for ib, b in enumerate(channels):
        for ia, a in enumerate(channels):
            out[..., 2 * ib:2 * ib + 2, 2 * ia:2 * ia + 2] = blocks[(b, a)]
    return out
