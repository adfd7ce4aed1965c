"""Scenario files: loading, defaults, validation and the derived objects.

A scenario is a YAML (or JSON) document described by
``schema/scenario.schema.json``.  Channel labels in the file are 1-based;
everything returned from here uses the 0-based indices of the numerical
modules.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ConfigError, WaveguideError
from .scattering import SolverOptions
from .spectral import ChannelWavepacket, gaussian_packet
from .timedomain import TimeDomainConfig, default_radii
from .waveguide import (TransverseBasis, build_transverse_basis, compute_coupling, longitudinal_grid,
                        potential_from_config)

DEFAULTS = {
    "name": "scenario",
    "grids": {"half_extent": 6.0, "spacing": 0.005, "quadrature_order": 64, "eps_v": 1e-12},
    "solver": {"n_closed": 4, "cond_max": 1e12, "extrapolate": True, "threshold_window": None},
    "sweep": {"stencil_order": 2},
    "packet": {"x_center": 0.0, "dxi": 0.004, "energy_points": 2001},
    "time_domain": {"half_extent": 40.0, "dx": 0.1, "dt": 0.002, "t0": None, "t1": None,
                    "n_closed": None, "r_max": None, "radii": 12, "record_every": 10,
                    "record_radii": [], "nyquist_factor": 4.0},
    "tolerances": {"unitarity": 1e-6, "reciprocity": 1e-6, "eps_prep": 1e-8, "eps_leak": 1e-8,
                   "eps_out": 1e-10, "norm": 1e-10, "tail": 1e-8, "delay_gap": 0.02,
                   "plateau_slope": 1e-3},
    "output": {"directory": "out"},
}


def load_schema() -> dict:
    text = resources.files("wgdelay").joinpath("schema/scenario.schema.json").read_text()
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Scenario:
    config: dict  # resolved, defaults applied
    digest: str
    source: str | None = None

    # -- plain accessors

    @property
    def name(self) -> str:
        return self.config["name"]

    @property
    def tolerances(self) -> dict:
        return self.config["tolerances"]

    @property
    def output_directory(self) -> Path:
        return Path(self.config["output"]["directory"])

    @property
    def basis(self) -> TransverseBasis:
        w = self.config["waveguide"]
        return build_transverse_basis(w["width"], w["modes"])

    @property
    def potential(self):
        return potential_from_config(self.config["potential"])

    @property
    def solver_options(self) -> SolverOptions:
        s = self.config["solver"]
        return SolverOptions(n_closed=s["n_closed"], cond_max=s["cond_max"],
                             unitarity_tol=self.tolerances["unitarity"],
                             threshold_window=s["threshold_window"], extrapolate=s["extrapolate"])

    @property
    def threshold_window(self) -> float:
        return self.basis.threshold_window(self.config["solver"]["threshold_window"])

    @property
    def stencil_order(self) -> int:
        return self.config["sweep"]["stencil_order"]

    # -- derived objects

    def coupling(self, potential=None):
        g = self.config["grids"]
        x = longitudinal_grid(g["half_extent"], g["spacing"])
        return compute_coupling(potential or self.potential, self.basis, x,
                                g["quadrature_order"], g["eps_v"])

    def sweep_energies(self, lambda_min=None, lambda_max=None, points=None) -> np.ndarray:
        s = self.config["sweep"]
        lo = s["lambda_min"] if lambda_min is None else lambda_min
        hi = s["lambda_max"] if lambda_max is None else lambda_max
        n = s["points"] if points is None else points
        return np.linspace(lo, hi, int(n))

    def packet(self) -> ChannelWavepacket:
        p = self.config["packet"]
        comps = []
        for c in p["components"]:
            d = {k: v for k, v in c.items() if k != "profile"}
            d["channel"] = c["channel"] - 1
            comps.append(d)
        return gaussian_packet(self.basis, comps, p["x_center"], p["dxi"])

    def packet_energies(self) -> np.ndarray:
        lo, hi = self.packet().energy_support()
        n = int(self.config["packet"]["energy_points"]) | 1
        return np.linspace(lo, hi, n)

    def time_config(self, t0=None, dt=None) -> TimeDomainConfig:
        td = self.config["time_domain"]
        tol = self.tolerances
        n_closed = td["n_closed"] if td["n_closed"] is not None else self.config["solver"]["n_closed"]
        return TimeDomainConfig(
            half_extent=td["half_extent"], dx=td["dx"], dt=td["dt"] if dt is None else dt,
            t0=td["t0"] if t0 is None else t0, t1=td["t1"], n_closed=n_closed,
            eps_prep=tol["eps_prep"], eps_leak=tol["eps_leak"], eps_out=tol["eps_out"],
            norm_tol=tol["norm"], tail_tol=tol["tail"], nyquist_factor=td["nyquist_factor"],
            record_every=td["record_every"], record_radii=tuple(td["record_radii"]))

    @property
    def r_max(self) -> float:
        td = self.config["time_domain"]
        return td["r_max"] if td["r_max"] is not None else 0.5 * td["half_extent"]

    def radii(self, r_max=None) -> np.ndarray:
        return default_radii(self.r_max if r_max is None else r_max, self.config["time_domain"]["radii"])


def _fail(invariant, message, **diag):
    raise ConfigError(message, invariant=invariant, **diag)


def validate(scn: Scenario):
    """Cross-field checks the schema cannot express; raises ConfigError naming the invariant."""
    cfg = scn.config
    s = cfg["sweep"]
    if not s["lambda_min"] < s["lambda_max"]:
        _fail("sweep-order", "sweep.lambda_min must be below sweep.lambda_max",
              lambda_min=s["lambda_min"], lambda_max=s["lambda_max"])
    basis = scn.basis
    nu = basis.thresholds
    delta = scn.threshold_window
    for key in ("lambda_min", "lambda_max"):
        e = s[key]
        if e <= nu[0] + delta:
            _fail("sweep-above-first-threshold", f"sweep.{key} = {e} is not above nu_1 + window",
                  nu_1=float(nu[0]), window=delta)
        if np.any(np.abs(e - nu) < delta):
            _fail("threshold-window", f"sweep.{key} = {e} lies inside a threshold window", window=delta)

    for c in cfg["packet"]["components"]:
        if c["channel"] > basis.mode_count:
            _fail("packet-channel-in-basis", f"packet channel {c['channel']} exceeds waveguide.modes",
                  modes=basis.mode_count)
    try:
        packet = scn.packet()
        packet.check_admissible(basis, delta)
    except WaveguideError as exc:
        _fail("packet-admissible", f"packet is not admissible: {exc}", **exc.diagnostics)
    lo, hi = packet.energy_support()
    if lo < s["lambda_min"] or hi > s["lambda_max"]:
        _fail("packet-window-in-sweep", "packet energy window is not contained in the sweep range",
              packet=(lo, hi), sweep=(s["lambda_min"], s["lambda_max"]))
    inside = nu[(nu > lo - delta) & (nu < hi + delta)]
    if inside.size:
        _fail("threshold-window", "packet energy window touches a threshold window",
              packet=(lo, hi), thresholds=inside, window=delta)

    td = cfg["time_domain"]
    if scn.r_max > 0.5 * td["half_extent"] + 1e-12:
        _fail("r_max<=X/2", "time_domain.r_max exceeds half of time_domain.half_extent",
              r_max=scn.r_max, X=td["half_extent"])
    kmax = float(np.max(np.abs(packet.xi[np.any(packet.support_mask(), axis=0)])))
    if np.pi / td["dx"] < td["nyquist_factor"] * kmax:
        _fail("nyquist", "time_domain.dx is too coarse for the packet momenta",
              dx=td["dx"], kmax=kmax, factor=td["nyquist_factor"])
    if td["t0"] is not None and td["t1"] is not None and td["t1"] <= td["t0"]:
        _fail("t0<t1", "time_domain.t1 must exceed time_domain.t0")
    n_closed = cfg["solver"]["n_closed"]
    n_open = int(np.sum(nu < s["lambda_max"]))
    if n_open + n_closed > basis.mode_count:
        _fail("closed-channels-in-basis",
              f"{n_open} open channels plus solver.n_closed = {n_closed} exceed waveguide.modes",
              modes=basis.mode_count)
    return scn


def scenario_from_dict(raw: dict, source=None) -> Scenario:
    if not isinstance(raw, dict):
        _fail("schema", "scenario must be a mapping")
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        _fail("schema", f"{where}: {e.message}", path=where, count=len(errors))
    cfg = _merge(DEFAULTS, raw)
    scn = Scenario(cfg, config_hash(cfg), None if source is None else str(source))
    return validate(scn)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc.strerror}", invariant="readable",
                          path=str(path)) from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"scenario file {path} is not valid YAML: {exc}", invariant="parseable",
                          path=str(path)) from None
    return scenario_from_dict(raw, path)
