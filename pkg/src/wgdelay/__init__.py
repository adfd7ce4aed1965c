"""Time delays for multichannel scattering in a straight waveguide.

Modules: :mod:`waveguide` (modes, potentials, channel coupling),
:mod:`scattering` (S-matrix sweeps, Eisenbud-Wigner matrix),
:mod:`spectral` (packets and the spectral transform), :mod:`timedomain`
(free and full sojourn times), :mod:`oracles`, :mod:`scenario`,
:mod:`checks` and :mod:`cli`.
"""

__version__ = "0.1.0"

from .errors import WaveguideError  # noqa: E402,F401
