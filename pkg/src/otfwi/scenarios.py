"""Velocity model builders and the experiment presets.

A :class:`Scenario` is four small dataclasses (model, acquisition, inversion,
output) that serialize to an INI-style ``key = value`` file with one section
each. ``Scenario.build()`` turns it into truth/initial models, an acquisition,
the update mask and the simulation config.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

import numpy as np
from scipy.ndimage import gaussian_filter

from .gridio import GridFormatError, read_grid
from .wave import (
    Acquisition,
    ConfigError,
    Grid2D,
    SimConfig,
    TimeAxis,
    Trace,
    VelocityModel,
    bandpass,
    check_cfl,
    ricker,
)


class ScenarioError(ConfigError):
    pass


# ------------------------------------------------------------------ builders


def snap_interface(depth: float, grid: Grid2D) -> float:
    """Nearest cell boundary (half-way between nodes) to ``depth``."""
    z0 = grid.origin[0]
    k = round((depth - z0) / grid.dz - 0.5)
    return z0 + (k + 0.5) * grid.dz


def build_layered(depths, velocities, grid: Grid2D) -> VelocityModel:
    """Laterally invariant layers; ``depths`` are the interface depths in metres."""
    depths = list(depths)
    velocities = list(velocities)
    if len(velocities) != len(depths) + 1:
        raise ScenarioError(f"{len(velocities)} velocities need {len(velocities) - 1} interface depths, got {len(depths)}")
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise ScenarioError("interface depths must be strictly increasing")
    z = grid.z
    for d in depths:
        if not z[0] < d < z[-1]:
            raise ScenarioError(f"interface at {d} m lies outside the grid depth range [{z[0]}, {z[-1]}]")
    layer = np.zeros(grid.nz, dtype=int)
    for d in depths:
        layer += z > snap_interface(d, grid)
    profile = np.asarray(velocities, dtype=float)[layer]
    return VelocityModel(grid, np.repeat(profile[:, None], grid.nx, axis=1))


def smooth_model(model: VelocityModel, sigma: float) -> VelocityModel:
    """Gaussian blur with reflective edges; ``sigma`` in metres."""
    if sigma < 0:
        raise ScenarioError("smoothing sigma must be nonnegative")
    if sigma == 0:
        return model.copy()
    g = model.grid
    return VelocityModel(g, gaussian_filter(model.c, (sigma / g.dz, sigma / g.dx), mode="reflect"))


def salt_inclusion(grid: Grid2D, background: np.ndarray, centre, radii, velocity: float) -> np.ndarray:
    """Background with an elliptical high-velocity body."""
    zz, xx = np.meshgrid(grid.z, grid.x, indexing="ij")
    inside = ((zz - centre[0]) / radii[0]) ** 2 + ((xx - centre[1]) / radii[1]) ** 2 <= 1.0
    return np.where(inside, velocity, background)


def load_model_file(path) -> VelocityModel:
    """Binary grid plus a ``<path>.txt`` sidecar with ``dz``, ``dx`` and ``units`` (km/s or m/s)."""
    path = Path(path)
    side = path.with_name(path.name + ".txt")
    expected = (f"expected {path} in OTF1 binary grid format plus a sidecar {side} containing lines "
                "'dz = <metres>', 'dx = <metres>', 'units = km/s|m/s'")
    if not path.exists() or not side.exists():
        raise ScenarioError(f"model file missing: {expected}")
    try:
        c = read_grid(path)
    except GridFormatError as exc:
        raise ScenarioError(f"{exc}; {expected}") from exc
    meta = {}
    for line in side.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    try:
        dz, dx = float(meta["dz"]), float(meta["dx"])
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"bad sidecar {side}: {expected}") from exc
    units = meta.get("units", "km/s")
    if units == "m/s":
        c = c / 1000.0
    elif units != "km/s":
        raise ScenarioError(f"unknown units {units!r} in {side}")
    return VelocityModel(Grid2D(c.shape[0], c.shape[1], dz, dx), c)


# ------------------------------------------------------------------ scenario


@dataclass
class ModelSpec:
    kind: str = "layered"  # layered, bp_like, file
    nz: int = 61
    nx: int = 301
    dz: float = 50.0
    dx: float = 50.0
    depths: list[float] = field(default_factory=lambda: [1000.0, 2000.0])
    velocities: list[float] = field(default_factory=lambda: [1.5, 2.0, 4.0])
    initial_depths: list[float] = field(default_factory=lambda: [1000.0])
    initial_velocities: list[float] = field(default_factory=lambda: [1.5, 2.0])
    smooth_sigma: float = 0.0  # metres, applied to the initial model
    model_file: str = ""
    error_below: float = 2000.0  # model error is measured below this depth (m)


@dataclass
class AcquisitionSpec:
    n_sources: int = 13
    source_depth: float = 50.0
    source_x0: float = 500.0
    source_x1: float = 14500.0
    n_receivers: int = 151
    receiver_depth: float = 50.0
    receiver_x0: float = 0.0
    receiver_x1: float = 15000.0
    peak_freq: float = 5.0
    delay: float = 0.25
    dt: float = 0.007
    record_length: float = 3.8
    band_lo: float = 0.0  # both zero: no filtering
    band_hi: float = 0.0


@dataclass
class InversionSpec:
    misfit: str = "j3"
    norm: str = "signsensitive"
    norm_factor: float = 10.0
    w2d_norm_factor: float = 2.0  # Monge-Ampere solves need milder density contrasts
    max_iters: int = 150
    lbfgs_memory: int = 10
    c_min: float = 1.4
    c_max: float = 4.5
    mask_depth: float = 1000.0  # cells shallower than this are not updated
    source_mask_radius: int = 2
    first_step_dc: float = 0.05


@dataclass
class OutputSpec:
    out_dir: str = "runs"
    snapshot_every: int = 0
    seed: int = 0
    threads: int = 1


@dataclass
class Scenario:
    name: str = "three_layer"
    model: ModelSpec = field(default_factory=ModelSpec)
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    inversion: InversionSpec = field(default_factory=InversionSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.model.nz, self.model.nx, self.model.dz, self.model.dx)

    @property
    def axis(self) -> TimeAxis:
        a = self.acquisition
        return TimeAxis(int(round(a.record_length / a.dt)) + 1, a.dt)

    def wavelet(self) -> Trace:
        a = self.acquisition
        w = ricker(a.peak_freq, a.delay, self.axis)
        if a.band_hi > 0:
            w = bandpass(w, a.band_lo, a.band_hi)
        return w

    def acquisition_geometry(self) -> Acquisition:
        a = self.acquisition
        sx = np.linspace(a.source_x0, a.source_x1, a.n_sources) if a.n_sources > 1 else [0.5 * (a.source_x0 + a.source_x1)]
        rx = np.linspace(a.receiver_x0, a.receiver_x1, a.n_receivers)
        return Acquisition([(a.source_depth, float(x)) for x in sx],
                           [(a.receiver_depth, float(x)) for x in rx], self.wavelet())

    def models(self) -> tuple[VelocityModel, VelocityModel]:
        m = self.model
        if m.kind == "file":
            truth = load_model_file(m.model_file)
            if truth.grid.shape != self.grid.shape:
                raise ScenarioError(f"model file grid {truth.grid.shape} differs from scenario grid {self.grid.shape}")
            return truth, smooth_model(truth, m.smooth_sigma)
        grid = self.grid
        if m.kind == "layered":
            truth = build_layered(m.depths, m.velocities, grid)
            initial = build_layered(m.initial_depths, m.initial_velocities, grid)
            return truth, smooth_model(initial, m.smooth_sigma)
        if m.kind == "bp_like":
            # water, then a velocity gradient, plus an elliptical salt body that the initial model lacks
            z = grid.z
            water = snap_interface(m.depths[0], grid)
            grad = m.velocities[1] + (m.velocities[2] - m.velocities[1]) * np.clip((z - water) / (z[-1] - water), 0, 1)
            prof = np.where(z > water, grad, m.velocities[0])
            background = np.repeat(prof[:, None], grid.nx, axis=1)
            centre = (0.5 * (water + z[-1]), 0.55 * grid.width)
            radii = (0.2 * grid.depth, 0.15 * grid.width)
            truth = VelocityModel(grid, salt_inclusion(grid, background, centre, radii, m.velocities[3]))
            initial = smooth_model(VelocityModel(grid, background), m.smooth_sigma)
            return truth, initial
        raise ScenarioError(f"unknown model kind {m.kind!r}")

    def update_mask(self) -> np.ndarray:
        g = self.grid
        mask = np.ones(g.shape)
        mask[g.z < self.inversion.mask_depth, :] = 0.0
        return mask

    def error_region(self) -> np.ndarray:
        g = self.grid
        region = np.zeros(g.shape, bool)
        region[g.z > snap_interface(self.model.error_below, g), :] = True
        return region

    def sim_config(self) -> SimConfig:
        return SimConfig(snapshot_every=1)

    def inversion_config(self, misfit: str | None = None, **overrides):
        from .normalize import NormConfig
        from .optimize import InversionConfig

        inv = self.inversion
        misfit = misfit or inv.misfit
        factor = inv.w2d_norm_factor if misfit == "w2d" else inv.norm_factor
        kw = dict(
            misfit=misfit,
            norm=NormConfig(inv.norm, factor=factor),
            max_iters=inv.max_iters,
            lbfgs_memory=inv.lbfgs_memory,
            c_min=inv.c_min,
            c_max=inv.c_max,
            first_step_dc=inv.first_step_dc,
            source_mask_radius=inv.source_mask_radius,
            update_mask=self.update_mask(),
            threads=self.output.threads,
            sim=self.sim_config(),
            snapshot_every=self.output.snapshot_every,
        )
        kw.update(overrides)
        return InversionConfig(**kw)

    def build(self):
        """Validated (truth, initial, acquisition)."""
        truth, initial = self.models()
        acq = self.acquisition_geometry()
        self.validate(truth, initial, acq)
        return truth, initial, acq

    def validate(self, truth=None, initial=None, acq=None) -> None:
        if truth is None:
            truth, initial = self.models()
            acq = self.acquisition_geometry()
        grid = self.grid
        a = self.acquisition
        if a.n_sources < 1 or a.n_receivers < 1:
            raise ScenarioError("need at least one source and one receiver")
        acq.check(grid)
        inv = self.inversion
        c_top = max(float(truth.c.max()), float(initial.c.max()), inv.c_max)
        try:
            check_cfl(grid, c_top, a.dt)
        except ConfigError as exc:
            raise ScenarioError(f"acquisition.dt: {exc}") from exc
        if a.band_hi > 0 and a.band_hi >= 0.5 / a.dt:
            raise ScenarioError("acquisition.band_hi must be below the Nyquist frequency")
        if not 0 < inv.c_min < inv.c_max:
            raise ScenarioError("inversion.c_min and c_max must satisfy 0 < c_min < c_max")
        for name, mod in (("truth", truth), ("initial", initial)):
            if mod.c.min() < inv.c_min or mod.c.max() > inv.c_max:
                raise ScenarioError(f"{name} model velocities fall outside [c_min, c_max]")
        if self.update_mask().shape != grid.shape:
            raise ScenarioError("update mask does not match the grid")
        if self.model.kind == "layered":
            need = two_way_time(self.model.depths, self.model.velocities, a.source_depth)
            if a.record_length < need:
                raise ScenarioError(f"acquisition.record_length {a.record_length} s is shorter than the "
                                    f"{need:.3f} s two-way time to the deepest interface")

    # -------------------------------------------------------------- files

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["scenario"] = {"name": self.name}
        for sec in ("model", "acquisition", "inversion", "output"):
            spec = getattr(self, sec)
            cp[sec] = {f.name: _format(getattr(spec, f.name)) for f in dataclasses.fields(spec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str) -> "Scenario":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ScenarioError(f"unreadable scenario file: {exc}") from exc
        allowed = {"scenario", "model", "acquisition", "inversion", "output"}
        for sec in cp.sections():
            if sec not in allowed:
                raise ScenarioError(f"unknown section [{sec}]")
        out = cls()
        if cp.has_section("scenario"):
            for key in cp["scenario"]:
                if key != "name":
                    raise ScenarioError(f"unknown key scenario.{key}")
            out.name = cp["scenario"].get("name", out.name)
        for sec in allowed - {"scenario"}:
            if not cp.has_section(sec):
                continue
            spec = getattr(out, sec)
            hints = get_type_hints(type(spec))
            names = {f.name for f in dataclasses.fields(spec)}
            for key, raw in cp[sec].items():
                if key not in names:
                    raise ScenarioError(f"unknown key {sec}.{key}")
                try:
                    setattr(spec, key, _parse(raw, hints[key]))
                except ValueError as exc:
                    raise ScenarioError(f"bad value for {sec}.{key}: {raw!r}") from exc
        return out

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        if not path.exists():
            raise ScenarioError(f"scenario file not found: {path}")
        return cls.from_text(path.read_text())


def _format(v) -> str:
    if isinstance(v, list):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ):
    raw = raw.strip()
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if typ == list[float]:
        return [float(x) for x in raw.split(",") if x.strip()]
    raise ValueError(f"unsupported field type {typ}")


def two_way_time(depths, velocities, start_depth: float = 0.0) -> float:
    """Vertical two-way time (s) from ``start_depth`` to the deepest interface."""
    t, top = 0.0, start_depth
    for d, v in zip(depths, velocities):
        if d > top:
            t += 2 * (d - top) / 1000.0 / v
            top = d
    return t


# ------------------------------------------------------------------ presets


def scenario_three_layer(full_scale: bool = False) -> Scenario:
    """Two reflectors; the initial model lacks the deepest (fast) layer.

    Desk scale keeps the 3 km x 15 km domain at half the full-scale resolution
    (a quarter of the grid points) with a quarter of the shots.
    """
    s = Scenario("three_layer")
    if full_scale:
        s.model.nz, s.model.nx, s.model.dz, s.model.dx = 121, 601, 25.0, 25.0
        s.acquisition.n_sources = 52
        s.acquisition.n_receivers = 301
        s.acquisition.dt = 0.0035
    return s


def scenario_bp_like(full_scale: bool = False) -> Scenario:
    """Salt-body synthetic with 3-9 Hz data; desk scale halves both extents."""
    s = Scenario("bp_like")
    m, a, inv = s.model, s.acquisition, s.inversion
    m.kind = "bp_like"
    m.dz = m.dx = 50.0
    m.depths = [500.0]
    m.velocities = [1.5, 2.0, 4.0, 4.5]
    m.initial_depths, m.initial_velocities = [], []
    m.smooth_sigma = 300.0
    m.error_below = 0.0
    scale = 1.0 if full_scale else 0.5
    m.nz = int(round(6000 * scale / m.dz)) + 1
    m.nx = int(round(16000 * scale / m.dx)) + 1
    width = (m.nx - 1) * m.dx
    a.n_sources = 11 if full_scale else 6
    a.source_depth = a.receiver_depth = 250.0
    a.n_receivers = m.nx
    a.source_x0, a.source_x1 = 0.0, width
    a.receiver_x0, a.receiver_x1 = 0.0, width
    a.peak_freq, a.delay = 5.0, 0.3
    a.dt = 0.005
    a.band_lo, a.band_hi = 3.0, 9.0
    a.record_length = 10.0 if full_scale else 5.0
    inv.misfit = "w1d"
    inv.mask_depth = 500.0
    inv.c_max = 4.8
    return s


def scenario_marmousi_like(model_file: str = "", full_scale: bool = False) -> Scenario:
    """External model on a 10 m grid, 15 Hz data with 0-2 Hz removed.

    The velocity model must be supplied as a binary grid file with a sidecar
    (see :func:`load_model_file`); desk scale expects a 20 m resampling.
    """
    s = Scenario("marmousi_like")
    m, a, inv = s.model, s.acquisition, s.inversion
    m.kind = "file"
    m.model_file = model_file
    m.smooth_sigma = 200.0
    m.error_below = 0.0
    if full_scale:
        m.nz, m.nx, m.dz, m.dx = 101, 307, 10.0, 10.0
        a.n_sources, a.n_receivers, a.dt = 11, 307, 0.001
    else:
        m.nz, m.nx, m.dz, m.dx = 51, 154, 20.0, 20.0
        a.n_sources, a.n_receivers, a.dt = 6, 154, 0.002
    width = (m.nx - 1) * m.dx
    a.source_depth = a.receiver_depth = 50.0
    a.source_x0, a.source_x1 = 0.0, width
    a.receiver_x0, a.receiver_x1 = 0.0, width
    a.peak_freq, a.delay = 15.0, 0.1
    a.band_lo, a.band_hi = 2.0, 0.45 / a.dt
    a.record_length = 2.0
    inv.misfit = "w2d"
    inv.mask_depth = 0.0
    inv.c_min, inv.c_max = 1.4, 5.6
    return s


PRESETS = {
    "three_layer": scenario_three_layer,
    "bp_like": scenario_bp_like,
    "marmousi_like": lambda full_scale=False: scenario_marmousi_like(full_scale=full_scale),
}


def nyquist_ok(dt: float, f: float) -> bool:
    return f < 0.5 / dt and math.isfinite(f)
