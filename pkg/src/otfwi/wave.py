"""2D acoustic finite-difference modelling: forward and adjoint propagation.

The semi-discrete system solved here is

    W M u_tt + C u_t + K u = f

with ``W`` the nodal control-volume weights (1/2 on edges, 1/4 on corners),
``M = diag(m)`` the squared slowness, ``K`` the symmetric 5-point stiffness with
Neumann edges, and ``C`` a diagonal first-order one-way-wave damping on the
absorbing sides. Leapfrog in time gives

    A u^{n+1} = B u^n - D u^{n-1} + f^n,   A, D = W M / dt^2 +- C / (2 dt).

Because ``A``, ``B``, ``D`` are symmetric the exact discrete adjoint is the same
recursion run backwards in time, which is what :func:`adjoint_solve` does.

Units: grid spacing in metres, velocity in km/s, time in seconds. Internally the
stencil works in km so that ``m = 1/c**2`` has units s^2/km^2.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit


class ConfigError(ValueError):
    """Invalid simulation or experiment configuration."""


@dataclass(frozen=True)
class Grid2D:
    nz: int
    nx: int
    dz: float
    dx: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nz < 3 or self.nx < 3:
            raise ConfigError(f"grid needs nz, nx >= 3, got {self.nz}x{self.nx}")
        if not (self.dz > 0 and self.dx > 0):
            raise ConfigError("grid spacing must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nz, self.nx)

    @property
    def z(self) -> np.ndarray:
        return self.origin[0] + self.dz * np.arange(self.nz)

    @property
    def x(self) -> np.ndarray:
        return self.origin[1] + self.dx * np.arange(self.nx)

    @property
    def depth(self) -> float:
        return self.dz * (self.nz - 1)

    @property
    def width(self) -> float:
        return self.dx * (self.nx - 1)

    def contains(self, z: float, x: float) -> bool:
        z0, x0 = self.origin
        eps = 1e-9 * max(self.depth, self.width)
        return (z0 - eps <= z <= z0 + self.depth + eps) and (x0 - eps <= x <= x0 + self.width + eps)

    def node(self, z: float, x: float) -> tuple[int, int]:
        """Nearest grid node to a position in metres."""
        if not self.contains(z, x):
            raise ConfigError(f"position (z={z}, x={x}) lies outside the grid")
        iz = int(round((z - self.origin[0]) / self.dz))
        ix = int(round((x - self.origin[1]) / self.dx))
        return min(max(iz, 0), self.nz - 1), min(max(ix, 0), self.nx - 1)


@dataclass(frozen=True)
class TimeAxis:
    nt: int
    dt: float

    def __post_init__(self):
        if self.nt < 2 or not self.dt > 0:
            raise ConfigError(f"invalid time axis nt={self.nt}, dt={self.dt}")

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.nt)

    @property
    def duration(self) -> float:
        return self.dt * (self.nt - 1)


@dataclass
class VelocityModel:
    grid: Grid2D
    c: np.ndarray  # km/s

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        if self.c.shape != self.grid.shape:
            raise ConfigError(f"velocity shape {self.c.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.c)) or np.any(self.c <= 0):
            raise ConfigError("velocity must be finite and positive")

    @property
    def m(self) -> np.ndarray:
        return 1.0 / self.c**2

    @classmethod
    def from_slowness(cls, grid: Grid2D, m: np.ndarray) -> "VelocityModel":
        return cls(grid, 1.0 / np.sqrt(np.asarray(m, dtype=float)))

    def copy(self) -> "VelocityModel":
        return VelocityModel(self.grid, self.c.copy())


@dataclass
class Trace:
    values: np.ndarray
    axis: TimeAxis

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.axis.nt,):
            raise ConfigError("trace length does not match its time axis")


@dataclass
class ShotRecord:
    """Receiver-by-time data matrix for one shot."""

    data: np.ndarray
    axis: TimeAxis
    shot_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2 or self.data.shape[1] != self.axis.nt:
            raise ConfigError(f"shot record shape {self.data.shape} inconsistent with nt={self.axis.nt}")

    @property
    def n_receivers(self) -> int:
        return self.data.shape[0]

    @property
    def traces(self) -> list[Trace]:
        return [Trace(row, self.axis) for row in self.data]

    def like(self, data: np.ndarray) -> "ShotRecord":
        return ShotRecord(data, self.axis, self.shot_id)


@dataclass
class Acquisition:
    sources: list[tuple[float, float]]
    receivers: list[tuple[float, float]]
    wavelet: Trace

    def __post_init__(self):
        if not self.sources or not self.receivers:
            raise ConfigError("acquisition needs at least one source and one receiver")

    @property
    def axis(self) -> TimeAxis:
        return self.wavelet.axis

    def check(self, grid: Grid2D) -> None:
        for kind, pts in (("source", self.sources), ("receiver", self.receivers)):
            for z, x in pts:
                if not grid.contains(z, x):
                    raise ConfigError(f"{kind} at (z={z}, x={x}) lies outside the {grid.depth}x{grid.width} m grid")


@dataclass
class Wavefield:
    """Snapshots ``u[k]`` at times ``k * stride * dt``."""

    u: np.ndarray
    axis: TimeAxis
    grid: Grid2D
    stride: int = 1

    def __post_init__(self):
        if self.u.shape[1:] != self.grid.shape:
            raise ConfigError("wavefield snapshot grid does not match model grid")

    def at(self, n: int) -> np.ndarray:
        """Field at time index ``n``, linearly interpolated between stored snapshots."""
        if n < 0 or n >= self.axis.nt:
            return np.zeros(self.grid.shape)
        k, r = divmod(n, self.stride)
        if r == 0 or k + 1 >= self.u.shape[0]:
            return self.u[min(k, self.u.shape[0] - 1)]
        a = r / self.stride
        return (1 - a) * self.u[k] + a * self.u[k + 1]

    def dense(self) -> np.ndarray:
        if self.stride == 1:
            return self.u
        return np.stack([self.at(n) for n in range(self.axis.nt)])


@dataclass(frozen=True)
class SimConfig:
    free_surface: bool = True
    boundary: str = "absorbing"  # or "reflecting"
    cfl_safety: float = 0.9
    snapshot_every: int = 1

    def __post_init__(self):
        if self.boundary not in ("absorbing", "reflecting"):
            raise ConfigError(f"unknown boundary type {self.boundary!r}")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be >= 1")


def max_stable_dt(grid: Grid2D, c_max: float, safety: float = 0.9) -> float:
    h = min(grid.dz, grid.dx) / 1000.0
    return safety * h / (c_max * np.sqrt(2.0))


def check_cfl(grid: Grid2D, c_max: float, dt: float, safety: float = 0.9) -> None:
    dt_max = max_stable_dt(grid, c_max, safety)
    if dt > dt_max * (1 + 1e-12):
        raise ConfigError(f"CFL violation: dt={dt:g} s exceeds the maximal stable dt={dt_max:.6g} s for c_max={c_max:g} km/s")


def ricker(peak_freq: float, delay: float, axis: TimeAxis) -> Trace:
    if not peak_freq > 0:
        raise ConfigError("peak frequency must be positive")
    arg = (np.pi * peak_freq * (axis.t - delay)) ** 2
    return Trace((1.0 - 2.0 * arg) * np.exp(-arg), axis)


def bandpass(trace: Trace, f_lo: float, f_hi: float, taper: float = 1.0) -> Trace:
    """Zero-phase band-pass with cosine tapers of width ``taper`` Hz outside the band."""
    nyq = 0.5 / trace.axis.dt
    if not (0 <= f_lo < f_hi):
        raise ConfigError(f"need 0 <= f_lo < f_hi, got [{f_lo}, {f_hi}]")
    if f_hi >= nyq:
        raise ConfigError(f"f_hi={f_hi} Hz is not below the Nyquist frequency {nyq:g} Hz")
    n = trace.axis.nt
    freqs = np.fft.rfftfreq(n, trace.axis.dt)
    mask = np.zeros_like(freqs)
    mask[(freqs >= f_lo) & (freqs <= f_hi)] = 1.0
    lo = (freqs < f_lo) & (freqs > f_lo - taper)
    mask[lo] = 0.5 * (1 - np.cos(np.pi * (freqs[lo] - (f_lo - taper)) / taper))
    hi = (freqs > f_hi) & (freqs < f_hi + taper)
    mask[hi] = 0.5 * (1 + np.cos(np.pi * (freqs[hi] - f_hi) / taper))
    if f_lo == 0:
        mask[freqs <= f_hi] = 1.0
    out = np.fft.irfft(np.fft.rfft(trace.values) * mask, n)
    return Trace(out, trace.axis)


@njit(cache=True, nogil=True)
def _propagate(a_inv, b0, dco, ah, av, idx2, idz2, i0, src_iz, src_ix, src_val, rec_iz, rec_ix, rec_out, store, stride):
    nz, nx = b0.shape
    nt = rec_out.shape[1]
    u_prev = np.zeros((nz, nx))
    u = np.zeros((nz, nx))
    u_next = np.zeros((nz, nx))
    nsrc = src_iz.shape[0]
    nrec = rec_iz.shape[0]
    for r in range(nrec):
        rec_out[r, 0] = 0.0
    for n in range(nt - 1):
        for i in range(i0, nz):
            for j in range(nx):
                uij = u[i, j]
                ku = 0.0
                if j > 0:
                    ku += ah[i] * idx2 * (uij - u[i, j - 1])
                if j < nx - 1:
                    ku += ah[i] * idx2 * (uij - u[i, j + 1])
                if i > 0:
                    ku += av[j] * idz2 * (uij - u[i - 1, j])
                if i < nz - 1:
                    ku += av[j] * idz2 * (uij - u[i + 1, j])
                u_next[i, j] = b0[i, j] * uij - ku - dco[i, j] * u_prev[i, j]
        for s in range(nsrc):
            iz = src_iz[s]
            if iz >= i0:
                u_next[iz, src_ix[s]] += src_val[s, n]
        for i in range(i0, nz):
            for j in range(nx):
                u_next[i, j] *= a_inv[i, j]
        tmp = u_prev
        u_prev = u
        u = u_next
        u_next = tmp
        for r in range(nrec):
            rec_out[r, n + 1] = u[rec_iz[r], rec_ix[r]]
        if store.shape[0] > 0 and (n + 1) % stride == 0:
            k = (n + 1) // stride
            if k < store.shape[0]:
                store[k, :, :] = u


@njit(cache=True, nogil=True)
def _stored_at(store, stride, n, nt, out):
    nz, nx = out.shape
    if n < 0 or n >= nt:
        for i in range(nz):
            for j in range(nx):
                out[i, j] = 0.0
        return
    k = n // stride
    r = n - k * stride
    if r == 0 or k + 1 >= store.shape[0]:
        kk = min(k, store.shape[0] - 1)
        for i in range(nz):
            for j in range(nx):
                out[i, j] = store[kk, i, j]
    else:
        a = r / stride
        for i in range(nz):
            for j in range(nx):
                out[i, j] = (1 - a) * store[k, i, j] + a * store[k + 1, i, j]


@njit(cache=True, nogil=True)
def _adjoint_image(a_inv, b0, dco, ah, av, idx2, idz2, i0, src_iz, src_ix, src_val, store, stride, wmass, cprime, dt, grad):
    """Reverse-time adjoint recursion fused with the imaging condition.

    ``src_val[:, n]`` is the forcing of step ``n`` of the reversed recursion, i.e.
    the adjoint source at time index ``nt - 1 - n``.
    """
    nz, nx = b0.shape
    nt = src_val.shape[1]
    u_prev = np.zeros((nz, nx))
    u = np.zeros((nz, nx))
    u_next = np.zeros((nz, nx))
    fm = np.zeros((nz, nx))
    f0 = np.zeros((nz, nx))
    fp = np.zeros((nz, nx))
    nsrc = src_iz.shape[0]
    inv_dt2 = 1.0 / (dt * dt)
    inv_2dt = 0.5 / dt
    for n in range(nt - 1):
        for i in range(i0, nz):
            for j in range(nx):
                uij = u[i, j]
                ku = 0.0
                if j > 0:
                    ku += ah[i] * idx2 * (uij - u[i, j - 1])
                if j < nx - 1:
                    ku += ah[i] * idx2 * (uij - u[i, j + 1])
                if i > 0:
                    ku += av[j] * idz2 * (uij - u[i - 1, j])
                if i < nz - 1:
                    ku += av[j] * idz2 * (uij - u[i + 1, j])
                u_next[i, j] = b0[i, j] * uij - ku - dco[i, j] * u_prev[i, j]
        for s in range(nsrc):
            iz = src_iz[s]
            if iz >= i0:
                u_next[iz, src_ix[s]] += src_val[s, n]
        for i in range(i0, nz):
            for j in range(nx):
                u_next[i, j] *= a_inv[i, j]
        tmp = u_prev
        u_prev = u
        u = u_next
        u_next = tmp
        # u now holds lambda^{k} with k = nt - 2 - n, the multiplier of forward step k
        k = nt - 2 - n
        _stored_at(store, stride, k - 1, nt, fm)
        _stored_at(store, stride, k, nt, f0)
        _stored_at(store, stride, k + 1, nt, fp)
        for i in range(i0, nz):
            for j in range(nx):
                d2 = (fp[i, j] - 2.0 * f0[i, j] + fm[i, j]) * inv_dt2
                d1 = (fp[i, j] - fm[i, j]) * inv_2dt
                grad[i, j] -= u[i, j] * (wmass[i, j] * d2 + cprime[i, j] * d1)


def _edge_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


class Simulator:
    """Precomputed leapfrog coefficients for one model, grid, time axis and boundary setup."""

    def __init__(self, model: VelocityModel, axis: TimeAxis, config: SimConfig = SimConfig()):
        grid = model.grid
        self.model, self.grid, self.axis, self.config = model, grid, axis, config
        check_cfl(grid, float(model.c.max()), axis.dt, config.cfl_safety)
        dz, dx = grid.dz / 1000.0, grid.dx / 1000.0
        self.cell_area = dz * dx
        self.weights = np.outer(_edge_weights(grid.nz), _edge_weights(grid.nx))
        m = model.m
        k = np.zeros(grid.shape)  # sum over absorbing sides of 2 / h_side
        if config.boundary == "absorbing":
            k[:, 0] += 2.0 / dx
            k[:, -1] += 2.0 / dx
            k[-1, :] += 2.0 / dz
            if not config.free_surface:
                k[0, :] += 2.0 / dz
        self.damping = self.weights * k * np.sqrt(m)  # w * k / c
        self.damping_dm = np.where(k > 0, self.damping / (2.0 * m), 0.0)
        self.wmass = self.weights * m
        dt = axis.dt
        a = self.wmass / dt**2 + self.damping / (2 * dt)
        self.a_inv = 1.0 / a
        self.b0 = 2.0 * self.wmass / dt**2
        self.dco = self.wmass / dt**2 - self.damping / (2 * dt)
        self.ah = _edge_weights(grid.nz)
        self.av = _edge_weights(grid.nx)
        self.idx2 = 1.0 / dx**2
        self.idz2 = 1.0 / dz**2
        self.i0 = 1 if config.free_surface else 0

    def _nodes(self, positions) -> tuple[np.ndarray, np.ndarray]:
        nodes = [self.grid.node(z, x) for z, x in positions]
        iz = np.array([p[0] for p in nodes], dtype=np.int64)
        ix = np.array([p[1] for p in nodes], dtype=np.int64)
        return iz, ix

    def run(self, src_pos, src_val: np.ndarray, rec_pos, store: bool = False):
        """Run the recursion with nodal forcing ``src_val`` (already divided by cell area)."""
        nt = self.axis.nt
        siz, six = self._nodes(src_pos)
        riz, rix = self._nodes(rec_pos)
        rec = np.zeros((len(riz), nt))
        stride = self.config.snapshot_every
        nstore = (nt - 1) // stride + 1 if store else 0
        buf = np.zeros((nstore, self.grid.nz, self.grid.nx))
        _propagate(self.a_inv, self.b0, self.dco, self.ah, self.av, self.idx2, self.idz2, self.i0,
                   siz, six, np.ascontiguousarray(src_val, dtype=float), riz, rix, rec, buf, stride)
        return rec, (buf if store else None)

    def forward(self, acq: Acquisition, shot: int, record_wavefield: bool = False):
        if not 0 <= shot < len(acq.sources):
            raise ConfigError(f"shot index {shot} out of range for {len(acq.sources)} sources")
        if acq.axis != self.axis:
            raise ConfigError("wavelet time axis does not match the simulation axis")
        src = acq.wavelet.values[None, :] / self.cell_area
        rec, buf = self.run([acq.sources[shot]], src, acq.receivers, store=record_wavefield)
        record = ShotRecord(rec, self.axis, shot)
        wf = Wavefield(buf, self.axis, self.grid, self.config.snapshot_every) if record_wavefield else None
        return record, wf

    def adjoint(self, receivers, adjoint_source: np.ndarray) -> Wavefield:
        """Adjoint field ``v[n] = lambda^n / dt`` for data-space forcing ``adjoint_source``."""
        nt = self.axis.nt
        q = np.asarray(adjoint_source, dtype=float)
        rev = np.zeros_like(q)
        rev[:, : nt - 1] = q[:, :0:-1]  # step n of the reversed run is forced by q^{nt-1-n}
        buf = np.zeros((nt, self.grid.nz, self.grid.nx))
        siz, six = self._nodes(receivers)
        rec = np.zeros((0, nt))
        _propagate(self.a_inv, self.b0, self.dco, self.ah, self.av, self.idx2, self.idz2, self.i0,
                   siz, six, rev, siz[:0], six[:0], rec, buf, 1)
        # buf[j] = reversed-run field at step j, which is lambda^{nt-1-j}
        v = buf[::-1] / self.axis.dt
        return Wavefield(np.ascontiguousarray(v), self.axis, self.grid)

    def gradient(self, receivers, adjoint_source: np.ndarray, u: Wavefield) -> np.ndarray:
        """Model-space gradient dJ/dm via the fused adjoint + imaging kernel."""
        nt = self.axis.nt
        q = np.asarray(adjoint_source, dtype=float)
        rev = np.zeros_like(q)
        rev[:, : nt - 1] = q[:, :0:-1]
        siz, six = self._nodes(receivers)
        grad = np.zeros(self.grid.shape)
        _adjoint_image(self.a_inv, self.b0, self.dco, self.ah, self.av, self.idx2, self.idz2, self.i0,
                       siz, six, rev, u.u, u.stride, self.wmass / self.model.m, self.damping_dm,
                       self.axis.dt, grad)
        return grad

    def stiffness(self, u: np.ndarray) -> np.ndarray:
        """Apply ``K`` (for energy diagnostics)."""
        ku = np.zeros_like(u)
        fx = self.ah[:, None] * self.idx2 * (u[:, 1:] - u[:, :-1])
        ku[:, :-1] -= fx
        ku[:, 1:] += fx
        fz = self.av[None, :] * self.idz2 * (u[1:, :] - u[:-1, :])
        ku[:-1, :] -= fz
        ku[1:, :] += fz
        if self.i0:
            ku[0, :] = 0.0
        return ku

    def energy(self, u_prev: np.ndarray, u: np.ndarray) -> float:
        """Conserved leapfrog energy at the half step between ``u_prev`` and ``u``."""
        vel = (u - u_prev) / self.axis.dt
        return 0.5 * float(np.sum(self.wmass * vel**2)) + 0.5 * float(np.sum(u * self.stiffness(u_prev)))


def forward(model: VelocityModel, acq: Acquisition, shot: int, record_wavefield: bool = False,
            config: SimConfig = SimConfig()):
    acq.check(model.grid)
    return Simulator(model, acq.axis, config).forward(acq, shot, record_wavefield)


def adjoint_solve(model: VelocityModel, adjoint_source: ShotRecord, acq: Acquisition,
                  config: SimConfig = SimConfig()) -> Wavefield:
    if adjoint_source.axis != acq.axis:
        raise ConfigError("adjoint source time axis does not match the simulation axis")
    if adjoint_source.n_receivers != len(acq.receivers):
        raise ConfigError("adjoint source has the wrong number of receivers")
    return Simulator(model, acq.axis, config).adjoint(acq.receivers, adjoint_source.data)


def imaging_condition(u: Wavefield, v: Wavefield, axis: TimeAxis, weights: np.ndarray | None = None,
                      damping_dm: np.ndarray | None = None) -> np.ndarray:
    """``-sum_t v * d2u/dt2 * dt`` per node.

    ``weights`` are nodal control-volume weights; ``damping_dm`` adds the
    derivative of the absorbing-boundary damping with respect to ``m``.
    """
    if u.grid != v.grid or u.axis != v.axis or axis != u.axis:
        raise ConfigError("imaging condition needs fields on the same grid and time axis")
    dt, nt = axis.dt, axis.nt
    w = np.ones(u.grid.shape) if weights is None else weights
    grad = np.zeros(u.grid.shape)
    for n in range(nt - 1):
        up, u0, um = u.at(n + 1), u.at(n), u.at(n - 1)
        term = w * (up - 2 * u0 + um) / dt**2
        if damping_dm is not None:
            term = term + damping_dm * (up - um) / (2 * dt)
        grad -= dt * v.at(n) * term
    return grad


def simulate_shots(model: VelocityModel, acq: Acquisition, config: SimConfig = SimConfig(),
                   threads: int = 1) -> list[ShotRecord]:
    """Forward-model every shot; output order is the shot order regardless of ``threads``."""
    acq.check(model.grid)
    sim = Simulator(model, acq.axis, config)
    shots = range(len(acq.sources))
    if threads <= 1:
        return [sim.forward(acq, s)[0] for s in shots]
    with ThreadPoolExecutor(threads) as pool:
        return [r for r, _ in pool.map(lambda s: sim.forward(acq, s), shots)]
