"""Split-operator reference solver and closed-form Gaussian results.

This module shares nothing with the meshless machinery; it is the
independent check on the trajectory engine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import AlignmentError, NumericalFailure, ResolutionError
from .model import (
    CaseSelector,
    PhysicalParams,
    SuperpositionParams,
    initial_wavefunction,
    potential,
)
from .snapshot import FieldSnapshot


@dataclass(frozen=True)
class OracleGrid:
    """Periodic rectangular grid; nodes at (i - n/2) * d about the box center."""

    nx: int = 256
    ny: int = 256
    xlim: tuple[float, float] = (-6.0, 6.0)
    ylim: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        for n in (self.nx, self.ny):
            if n < 8 or n & (n - 1):
                raise ValueError("grid point counts must be powers of two >= 8")
        if not (self.xlim[1] > self.xlim[0] and self.ylim[1] > self.ylim[0]):
            raise ValueError("empty grid extent")

    @property
    def dx(self) -> float:
        return (self.xlim[1] - self.xlim[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.ylim[1] - self.ylim[0]) / self.ny

    @property
    def x(self) -> np.ndarray:
        center = 0.5 * (self.xlim[0] + self.xlim[1])
        return center + (np.arange(self.nx) - self.nx // 2) * self.dx

    @property
    def y(self) -> np.ndarray:
        center = 0.5 * (self.ylim[0] + self.ylim[1])
        return center + (np.arange(self.ny) - self.ny // 2) * self.dy

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        # indexing "xy": arrays of shape (ny, nx), row-major in y then x
        return np.meshgrid(self.x, self.y, indexing="xy")

    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        kx = 2.0 * np.pi * np.fft.fftfreq(self.nx, d=self.dx)
        ky = 2.0 * np.pi * np.fft.fftfreq(self.ny, d=self.dy)
        return np.meshgrid(kx, ky, indexing="xy")


@dataclass(frozen=True, eq=False)
class OracleState:
    psi: np.ndarray
    time: float
    grid: OracleGrid

    def density(self) -> np.ndarray:
        return self.psi.real**2 + self.psi.imag**2

    def norm(self) -> float:
        return float(np.sum(self.density()) * self.grid.dx * self.grid.dy)


def oracle_init(
    phys: PhysicalParams,
    sup: SuperpositionParams,
    case: CaseSelector,
    grid: OracleGrid,
    tolerance: float = 1e-6,
) -> OracleState:
    """Sample the initial superposition and rescale it to unit grid norm.

    ``case`` is accepted for symmetry with the trajectory engine; the initial
    state does not depend on the coupling.
    """
    X, Y = grid.mesh()
    amp, phase = initial_wavefunction(phys, sup, X, Y)
    psi = amp * np.exp(1j * phase / phys.hbar)
    norm = float(np.sum(np.abs(psi) ** 2) * grid.dx * grid.dy)
    if abs(norm - 1.0) > tolerance:
        raise ResolutionError(
            f"grid {grid.nx}x{grid.ny} represents the initial state with norm "
            f"error {abs(norm - 1.0):.3e} > {tolerance:.1e}"
        )
    return OracleState(psi / math.sqrt(norm), 0.0, grid)


class SplitOperator:
    """Strang splitting exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2).

    Propagators are cached per time step; ``advance`` fuses the adjacent
    potential half steps of consecutive steps.
    """

    def __init__(self, phys: PhysicalParams, case: CaseSelector, grid: OracleGrid, dt: float):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.phys, self.case, self.grid, self.dt = phys, case, grid, dt
        X, Y = grid.mesh()
        V = potential(phys, case, X, Y)
        kx, ky = grid.wavenumbers()
        T = 0.5 * phys.hbar**2 * (kx**2 / phys.m0 + ky**2 / phys.m)
        self._half_v = np.exp(-0.5j * V * dt / phys.hbar)
        self._full_v = self._half_v * self._half_v
        self._kin = np.exp(-1j * T * dt / phys.hbar)

    def step(self, state: OracleState) -> OracleState:
        psi = self._half_v * state.psi
        psi = np.fft.ifft2(self._kin * np.fft.fft2(psi))
        return OracleState(self._half_v * psi, state.time + self.dt, state.grid)

    def advance(self, state: OracleState, nsteps: int) -> OracleState:
        if nsteps <= 0:
            return state
        psi = self._half_v * state.psi
        for n in range(nsteps):
            psi = np.fft.ifft2(self._kin * np.fft.fft2(psi))
            psi *= self._full_v if n < nsteps - 1 else self._half_v
        return OracleState(psi, state.time + nsteps * self.dt, state.grid)


def oracle_step(state: OracleState, phys: PhysicalParams, case: CaseSelector, dt: float) -> OracleState:
    return SplitOperator(phys, case, state.grid, dt).step(state)


def check_leakage(state: OracleState, cells: int = 5, ratio: float = 1e-8) -> float:
    """Return boundary-band density / peak, raising if periodic images matter."""
    rho = state.density()
    band = np.concatenate([
        rho[:cells].ravel(), rho[-cells:].ravel(),
        rho[:, :cells].ravel(), rho[:, -cells:].ravel(),
    ])
    leak = float(band.max() / rho.max())
    if leak >= ratio:
        raise NumericalFailure(
            f"oracle density reaches the grid boundary at t={state.time:g} "
            f"(band/peak = {leak:.2e}); enlarge the domain"
        )
    return leak


def oracle_fields(state: OracleState, masses, cutoff: float = 0.0, hbar: float = 1.0) -> FieldSnapshot:
    """Density and spectrally evaluated velocity on the full grid.

    Velocities are NaN where rho <= cutoff. The action is not reconstructed.
    """
    grid = state.grid
    psi = state.psi
    kx, ky = grid.wavenumbers()
    spec = np.fft.fft2(psi)
    dpsi_x = np.fft.ifft2(1j * kx * spec)
    dpsi_y = np.fft.ifft2(1j * ky * spec)
    rho = state.density()
    keep = rho > cutoff
    vx = np.full(rho.shape, np.nan)
    vy = np.full(rho.shape, np.nan)
    # Im(psi* dpsi) / |psi|^2 avoids dividing by a near-zero complex number
    vx[keep] = hbar / masses[0] * (np.conj(psi[keep]) * dpsi_x[keep]).imag / rho[keep]
    vy[keep] = hbar / masses[1] * (np.conj(psi[keep]) * dpsi_y[keep]).imag / rho[keep]
    X, Y = grid.mesh()
    origin = (float(grid.x[grid.nx // 2]), float(grid.y[grid.ny // 2]))
    return FieldSnapshot(
        time=state.time,
        x=X.ravel(), y=Y.ravel(), rho=rho.ravel(),
        vx=vx.ravel(), vy=vy.ravel(), S=np.full(rho.size, np.nan),
        spacing=(grid.dx, grid.dy), origin=origin, source="oracle",
        meta={"nx": grid.nx, "ny": grid.ny, "density_cutoff": float(cutoff)},
    )


def run_oracle(
    phys: PhysicalParams,
    sup: SuperpositionParams,
    case: CaseSelector,
    grid: OracleGrid,
    dt: float = 0.5,
    t_final: float = 450.0,
    interval: float = 2.0,
    stride: int = 1,
) -> Iterator[OracleState]:
    """Yield the state at t = 0 and every ``stride * interval`` up to ``t_final``."""
    per_interval = round(interval / dt)
    if per_interval < 1 or abs(per_interval * dt - interval) > 1e-9 * interval:
        raise ValueError("output interval must be an integer multiple of dt")
    n_out = round(t_final / interval)
    if abs(n_out * interval - t_final) > 1e-9 * max(interval, 1.0):
        raise ValueError("t_final must be a multiple of the output interval")
    prop = SplitOperator(phys, case, grid, dt)
    state = oracle_init(phys, sup, case, grid)
    check_leakage(state)
    yield state
    for n in range(1, n_out + 1):
        state = prop.advance(state, per_interval)
        # pin the clock to the nominal output time, avoiding accumulated rounding
        state = OracleState(state.psi, n * interval, grid)
        check_leakage(state)
        if n % stride == 0 or n == n_out:
            yield state


def oracle_state_at(phys, sup, case, grid, t: float, dt: float = 0.5) -> OracleState:
    nsteps = round(t / dt)
    prop = SplitOperator(phys, case, grid, dt)
    state = prop.advance(oracle_init(phys, sup, case, grid), nsteps)
    return OracleState(state.psi, t, grid)


def analytic_free_gaussian(beta: float, m: float, t: float, x, hbar: float = 1.0):
    """Exact density and velocity of a free 1-D Gaussian, |psi(x,0)|^2 ~ exp(-2 beta x^2)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    x = np.asarray(x, dtype=float)
    s0sq = 1.0 / (4.0 * beta)
    tau = hbar * t / (2.0 * m * s0sq)
    ssq = s0sq * (1.0 + tau**2)
    rho = np.exp(-0.5 * x * x / ssq) / math.sqrt(2.0 * math.pi * ssq)
    rate = 0.0 if t == 0 else tau**2 / (t * (1.0 + tau**2))
    return rho, rate * x


def free_gaussian_width(beta: float, m: float, t: float, hbar: float = 1.0) -> float:
    s0sq = 1.0 / (4.0 * beta)
    return math.sqrt(s0sq * (1.0 + (hbar * t / (2.0 * m * s0sq)) ** 2))


@dataclass(frozen=True)
class ErrorReport:
    time: float
    L2_rho: float
    Linf_rho: float
    masked_v_rms_diff: float
    n_points: int


def _grid_axes(snap: FieldSnapshot):
    if "nx" not in snap.meta:
        raise AlignmentError("reference snapshot is not on a full rectangular grid")
    nx, ny = snap.meta["nx"], snap.meta["ny"]
    xs = snap.x[:nx]
    ys = snap.y[::nx][:ny]
    return xs, ys, (ny, nx)


def interpolate_reference(ref: FieldSnapshot, x, y) -> dict[str, np.ndarray]:
    """Bilinear interpolation of a full-grid snapshot onto arbitrary points."""
    xs, ys, shape = _grid_axes(ref)
    pts = np.column_stack([y, x])
    out = {}
    for name in ("rho", "vx", "vy"):
        f = RegularGridInterpolator(
            (ys, xs), getattr(ref, name).reshape(shape),
            method="linear", bounds_error=False, fill_value=np.nan,
        )
        out[name] = f(pts)
    out["rho"] = np.nan_to_num(out["rho"], nan=0.0)
    return out


def compare_snapshots(qtm: FieldSnapshot, ref: FieldSnapshot, time_tolerance: float = 0.25) -> ErrorReport:
    """Density and velocity discrepancies of ``qtm`` against a gridded reference.

    ``time_tolerance`` is half the integrator step of the compared runs.
    """
    if abs(qtm.time - ref.time) > time_tolerance:
        raise AlignmentError(
            f"snapshot times differ: {qtm.time:g} vs {ref.time:g}"
        )
    if "nx" in ref.meta and "nx" in qtm.meta and ref.meta == qtm.meta and np.array_equal(ref.x, qtm.x):
        r = {"rho": ref.rho, "vx": ref.vx, "vy": ref.vy}
    else:
        r = interpolate_reference(ref, qtm.x, qtm.y)
    drho = qtm.rho - r["rho"]
    ref_norm = float(np.linalg.norm(r["rho"]))
    l2 = float(np.linalg.norm(drho)) / ref_norm if ref_norm > 0 else 0.0
    peak = float(np.max(r["rho"]))
    linf = float(np.max(np.abs(drho))) / peak if peak > 0 else 0.0
    dv = np.concatenate([qtm.vx - r["vx"], qtm.vy - r["vy"]])
    dv = dv[np.isfinite(dv)]
    rms = float(np.sqrt(np.mean(dv**2))) if dv.size else 0.0
    return ErrorReport(qtm.time, l2, linf, rms, qtm.size)
