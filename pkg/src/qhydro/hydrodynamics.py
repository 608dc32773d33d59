"""Lagrangian quantum trajectory engine.

Fluid elements carry position, velocity, ln(rho) and the action S. Spatial
derivatives come from cubic MWLS fits over the moving cloud; every
``regrid_interval`` the cloud is replaced by a fresh uniform mesh with all
fields interpolated across.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from . import mwls
from .errors import ConfigError, DomainExit, LineageError, NumericalFailure
from .model import (
    CaseSelector,
    PhysicalParams,
    SuperpositionParams,
    initial_log_density,
    potential,
    potential_gradient,
)
from .snapshot import FieldSnapshot

log = logging.getLogger(__name__)

NORM_TOLERANCE = 5e-3
MIN_ELEMENTS = 100


@dataclass(frozen=True)
class HydroConfig:
    """Integration and meshing controls.

    ``density_cutoff`` is relative to the initial peak density.
    ``mesh_aspect`` is the ratio of y to x mesh spacing. The bath coordinate
    has a much shorter length scale along x, and a mesh stretched in y
    spends the element budget where the interference structure lives.
    """

    n_elements_target: int = 1215
    dt: float = 0.5
    regrid_interval: float = 2.0
    density_cutoff: float = 1e-7
    domain: tuple[tuple[float, float], tuple[float, float]] = ((-6.0, 6.0), (-3.0, 3.0))
    t_final: float = 450.0
    mesh_aspect: float = 3.0
    n_trajectories: int = 200

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("hydro.dt must be positive")
        if not self.regrid_interval > 0:
            raise ConfigError("hydro.regrid_interval must be positive")
        if not _is_multiple(self.regrid_interval, self.dt):
            raise ConfigError("hydro.regrid_interval must be an integer multiple of hydro.dt")
        if self.t_final < 0 or not _is_multiple(self.t_final, self.regrid_interval):
            raise ConfigError("hydro.t_final must be a non-negative multiple of hydro.regrid_interval")
        if not 0 < self.density_cutoff < 1:
            raise ConfigError("hydro.density_cutoff must lie in (0, 1)")
        if self.n_elements_target < MIN_ELEMENTS:
            raise ConfigError(f"hydro.n_elements_target must be at least {MIN_ELEMENTS}")
        if not self.mesh_aspect > 0:
            raise ConfigError("hydro.mesh_aspect must be positive")
        (x0, x1), (y0, y1) = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("hydro.domain must be a non-empty rectangle")
        if self.n_trajectories < 0:
            raise ConfigError("hydro.n_trajectories must be non-negative")

    @property
    def substeps(self) -> int:
        return round(self.regrid_interval / self.dt)

    @property
    def n_intervals(self) -> int:
        return round(self.t_final / self.regrid_interval)


def _is_multiple(a, b):
    if a == 0:
        return True
    n = round(a / b)
    return n >= 1 and abs(n * b - a) <= 1e-9 * a


@dataclass(frozen=True)
class FluidElement:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    log_density: float
    action: float
    amp_integral: float
    phase_integral: float


@dataclass(eq=False)
class Ensemble:
    """Structure-of-arrays fluid element set at one time."""

    ids: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    log_rho: np.ndarray
    S: np.ndarray
    amp_integral: np.ndarray
    phase_integral: np.ndarray
    time: float
    mesh_spacing: tuple[float, float]
    density_cutoff: float
    # initial (post-regrid) complex amplitude of each element, for synthesis
    psi_start: np.ndarray | None = None
    lineage: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.log_rho)

    @property
    def elements(self) -> list[FluidElement]:
        return [
            FluidElement(int(i), tuple(p), tuple(v), float(l), float(s), float(a), float(f))
            for i, p, v, l, s, a, f in zip(
                self.ids, self.pos, self.vel, self.log_rho, self.S,
                self.amp_integral, self.phase_integral,
            )
        ]

    def discrete_norm(self) -> float:
        return float(np.sum(self.rho) * self.mesh_spacing[0] * self.mesh_spacing[1])

    def with_state(self, pos, vel, log_rho, S, amp, phase, time) -> "Ensemble":
        return replace(
            self, pos=pos, vel=vel, log_rho=log_rho, S=S,
            amp_integral=amp, phase_integral=phase, time=time,
        )


class Physics(NamedTuple):
    phys: PhysicalParams
    case: CaseSelector
    mwls: mwls.MwlsConfig


class HydroFields(NamedTuple):
    Q: np.ndarray
    grad_Q: np.ndarray
    div_v: np.ndarray
    L_q: np.ndarray
    f_c: np.ndarray
    V: np.ndarray


# ----------------------------------------------------------------- meshing

def _mesh_nodes(bounds, spacing):
    """Nodes (i*hx, j*hy) inside ``bounds``, row-major in y then x."""
    (x0, x1), (y0, y1) = bounds
    hx, hy = spacing
    ix = np.arange(math.ceil(x0 / hx - 1e-9), math.floor(x1 / hx + 1e-9) + 1)
    iy = np.arange(math.ceil(y0 / hy - 1e-9), math.floor(y1 / hy + 1e-9) + 1)
    X, Y = np.meshgrid(ix * hx, iy * hy, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


def _spacing_for(area, n_target, aspect):
    hx = math.sqrt(area / (n_target * aspect))
    return hx, hx * aspect


def _initial_mesh(phys, sup, cfg: HydroConfig):
    (x0, x1), (y0, y1) = cfg.domain
    # peak of the initial density by dense sampling of the x-axis
    xs = np.linspace(x0, x1, 4001)
    peak_log = float(np.max(initial_log_density(phys, sup, xs, np.zeros_like(xs))))
    log_cut = peak_log + math.log(cfg.density_cutoff)
    probe = _mesh_nodes(cfg.domain, ((x1 - x0) / 600, (y1 - y0) / 600))
    inside = initial_log_density(phys, sup, probe[:, 0], probe[:, 1]) > log_cut
    area = inside.sum() * ((x1 - x0) / 600) * ((y1 - y0) / 600)
    spacing = _spacing_for(area, cfg.n_elements_target, cfg.mesh_aspect)
    for _ in range(20):
        nodes = _mesh_nodes(cfg.domain, spacing)
        keep = initial_log_density(phys, sup, nodes[:, 0], nodes[:, 1]) > log_cut
        count = int(keep.sum())
        if abs(count - cfg.n_elements_target) <= 0.02 * cfg.n_elements_target:
            break
        f = math.sqrt(count / cfg.n_elements_target)
        spacing = (spacing[0] * f, spacing[1] * f)
    return nodes[keep], spacing, math.exp(peak_log), math.exp(log_cut)


def initialize_ensemble(
    phys: PhysicalParams,
    sup: SuperpositionParams,
    case: CaseSelector,
    cfg: HydroConfig,
) -> Ensemble:
    """Fluid elements on a uniform mesh covering rho(x, y, 0) > cutoff."""
    nodes, spacing, peak, cut = _initial_mesh(phys, sup, cfg)
    n = len(nodes)
    if n < MIN_ELEMENTS:
        raise ConfigError(f"density cutoff leaves only {n} elements (< {MIN_ELEMENTS})")
    log_rho = initial_log_density(phys, sup, nodes[:, 0], nodes[:, 1])
    _check_domain(nodes, np.arange(n), cfg.domain, 0.0)
    ens = Ensemble(
        ids=np.arange(n, dtype=np.int64),
        pos=nodes, vel=np.zeros((n, 2)), log_rho=log_rho, S=np.zeros(n),
        amp_integral=np.zeros(n), phase_integral=np.zeros(n),
        time=0.0, mesh_spacing=spacing, density_cutoff=cut,
    )
    ens.psi_start = synthesis_start(ens, phys.hbar)
    return ens


def synthesis_start(ens: Ensemble, hbar: float = 1.0) -> np.ndarray:
    return np.exp(0.5 * ens.log_rho + 1j * ens.S / hbar)


def _check_domain(pos, ids, domain, time):
    (x0, x1), (y0, y1) = domain
    out = (pos[:, 0] < x0) | (pos[:, 0] > x1) | (pos[:, 1] < y0) | (pos[:, 1] > y1)
    if out.any():
        k = int(np.flatnonzero(out)[0])
        raise DomainExit(
            f"element {int(ids[k])} left the domain at t={time:g} "
            f"(position {pos[k].tolist()}); enlarge hydro.domain",
            element_id=int(ids[k]), time=time,
        )


# ------------------------------------------------------------- derivatives

def _aspect(spacing):
    return spacing[1] / spacing[0]


def element_stencils(ens: Ensemble, cfg: mwls.MwlsConfig, targets=None) -> mwls.MetricStencils:
    pts = ens.pos if targets is None else targets
    labels = ens.ids if targets is None else None
    return mwls.MetricStencils(ens.pos, pts, cfg, _aspect(ens.mesh_spacing), labels)


def quantum_potential(C_x, C_y, C_xx, C_yy, masses, hbar=1.0):
    """Q = -hbar^2/2 * sum_i (C_ii + C_i^2) / m_i with C = ln R."""
    m0, m1 = masses
    return -0.5 * hbar**2 * ((C_xx + C_x**2) / m0 + (C_yy + C_y**2) / m1)


def hydrodynamic_derivatives(
    ens: Ensemble,
    phys: PhysicalParams,
    case: CaseSelector,
    mwls_cfg: mwls.MwlsConfig,
    stencils: mwls.Stencils | None = None,
) -> HydroFields:
    """Quantum potential and force, velocity divergence, quantum Lagrangian."""
    if stencils is None:
        stencils = element_stencils(ens, mwls_cfg)
    fields = np.column_stack([0.5 * ens.log_rho, ens.vel[:, 0], ens.vel[:, 1]])
    a = stencils.coefficients(fields)
    C_x, C_y = a[:, 1, 0], a[:, 2, 0]
    C_xx, C_yy = 2.0 * a[:, 3, 0], 2.0 * a[:, 4, 0]
    Q = quantum_potential(C_x, C_y, C_xx, C_yy, phys.masses, phys.hbar)
    q = stencils.coefficients(Q)
    grad_Q = q[:, 1:3]
    div_v = a[:, 1, 1] + a[:, 2, 2]
    x, y = ens.pos[:, 0], ens.pos[:, 1]
    V = potential(phys, case, x, y)
    fx, fy = potential_gradient(phys, case, x, y)
    kinetic = 0.5 * (phys.m0 * ens.vel[:, 0] ** 2 + phys.m * ens.vel[:, 1] ** 2)
    L_q = kinetic - (V + Q)
    return HydroFields(Q, grad_Q, div_v, L_q, np.column_stack([fx, fy]), V)


def _rates(ens, hf, masses):
    accel = (hf.f_c - hf.grad_Q) / np.asarray(masses)
    return ens.vel, accel, -hf.div_v, hf.L_q


def _check_finite(ens, hf, time):
    for name, arr in (("Q", hf.Q), ("grad Q", hf.grad_Q), ("div v", hf.div_v), ("L_q", hf.L_q)):
        bad = ~np.isfinite(arr)
        if bad.any():
            k = int(np.flatnonzero(bad.reshape(len(ens), -1).any(axis=1))[0])
            raise NumericalFailure(
                f"non-finite {name} at element {int(ens.ids[k])}, t={time:g}, "
                f"position {ens.pos[k].tolist()}"
            )


def step(
    ens: Ensemble,
    phys: PhysicalParams,
    case: CaseSelector,
    hydro: HydroConfig,
    mwls_cfg: mwls.MwlsConfig,
    fields: HydroFields | None = None,
):
    """One Heun (predictor-corrector) step of length ``hydro.dt``.

    Returns ``(new_ensemble, fields_at_start, fields_at_predictor)``.
    """
    dt = hydro.dt
    if fields is None:
        fields = hydrodynamic_derivatives(ens, phys, case, mwls_cfg)
    _check_finite(ens, fields, ens.time)
    dx0, dv0, dl0, dS0 = _rates(ens, fields, phys.masses)
    pred = ens.with_state(
        ens.pos + dt * dx0, ens.vel + dt * dv0, ens.log_rho + dt * dl0, ens.S + dt * dS0,
        ens.amp_integral, ens.phase_integral, ens.time + dt,
    )
    _check_domain(pred.pos, ens.ids, hydro.domain, pred.time)
    pf = hydrodynamic_derivatives(pred, phys, case, mwls_cfg)
    _check_finite(pred, pf, pred.time)
    dx1, dv1, dl1, dS1 = _rates(pred, pf, phys.masses)
    h = 0.5 * dt
    new = ens.with_state(
        ens.pos + h * (dx0 + dx1),
        ens.vel + h * (dv0 + dv1),
        ens.log_rho + h * (dl0 + dl1),
        ens.S + h * (dS0 + dS1),
        ens.amp_integral + h * (fields.div_v + pf.div_v),
        ens.phase_integral + h * (fields.L_q + pf.L_q),
        ens.time + dt,
    )
    _check_domain(new.pos, ens.ids, hydro.domain, new.time)
    return new, fields, pf


# ---------------------------------------------------------------- regrid

@dataclass(frozen=True)
class RegridInfo:
    time: float
    norm_before: float
    renorm_factor: float
    n_elements: int
    spacing: tuple[float, float]
    n_extrapolated: int


def regrid(
    ens: Ensemble,
    mwls_cfg: mwls.MwlsConfig,
    n_target: int | None = None,
    aspect: float | None = None,
    next_id: int | None = None,
):
    """Replace the cloud by a uniform mesh over the region rho > cutoff.

    The spacing is rescaled so the mesh holds about ``n_target`` nodes
    (``None`` keeps the current spacing). Returns ``(ensemble, info)``.
    """
    hx, hy = ens.mesh_spacing
    if aspect is not None:
        area = hx * hy
        hx = math.sqrt(area / aspect)
        hy = hx * aspect
    log_cut = math.log(ens.density_cutoff)
    tree = cKDTree(ens.pos)
    values = np.column_stack([ens.log_rho, ens.vel[:, 0], ens.vel[:, 1], ens.S])

    def trial(spacing):
        lo = ens.pos.min(axis=0) - spacing
        hi = ens.pos.max(axis=0) + spacing
        nodes = _mesh_nodes(((lo[0], hi[0]), (lo[1], hi[1])), spacing)
        # cubic extrapolation is only trusted within one cell of the cloud
        d, _ = tree.query(nodes)
        nodes = nodes[d <= math.hypot(*spacing) * 1.0001]
        st = element_stencils(ens, mwls_cfg, nodes)
        vals = st.values(values)
        # limiter: no new extrema beyond the stencil's own samples
        local = values[st.inner.neighbors]
        lo = local.min(axis=1)
        lo[:, 0] = -np.inf  # ln(rho) may fall below the cutoff at the edge
        vals = np.clip(vals, lo, local.max(axis=1))
        keep = vals[:, 0] > log_cut
        return nodes[keep], vals[keep]

    spacing = (hx, hy)
    nodes, vals = trial(spacing)
    if n_target is not None and len(nodes):
        for _ in range(4):
            ratio = len(nodes) / n_target
            if abs(ratio - 1.0) <= 0.05:
                break
            f = math.sqrt(ratio)
            spacing = (spacing[0] * f, spacing[1] * f)
            nodes, vals = trial(spacing)
    if len(nodes) == 0:
        raise ConfigError(f"regrid at t={ens.time:g} found no mesh node above the density cutoff")
    n_extrap = int(np.count_nonzero(mwls.outside_hull(mwls.PointCloud(ens.pos), nodes)))
    area = spacing[0] * spacing[1]
    norm_before = float(np.sum(np.exp(vals[:, 0])) * area)
    log_rho = vals[:, 0] - math.log(norm_before)
    n = len(nodes)
    start = int(ens.ids.max()) + 1 if next_id is None else next_id
    ids = np.arange(start, start + n, dtype=np.int64)
    _, parent = tree.query(nodes)
    new = Ensemble(
        ids=ids, pos=nodes, vel=vals[:, 1:3].copy(), log_rho=log_rho, S=vals[:, 3].copy(),
        amp_integral=np.zeros(n), phase_integral=np.zeros(n),
        time=ens.time, mesh_spacing=spacing, density_cutoff=ens.density_cutoff,
        lineage=dict(zip(ids.tolist(), ens.ids[parent].tolist())),
    )
    new.psi_start = synthesis_start(new)
    info = RegridInfo(ens.time, norm_before, 1.0 / norm_before, n, spacing, n_extrap)
    log.debug("regrid t=%g n=%d norm_before=%.6f", ens.time, n, norm_before)
    return new, info


# ------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SynthesisSegment:
    t_start: float
    t_end: float
    amp_integral: float
    phase_integral: float


def synthesize_wavefunction(segments, psi0: complex, hbar: float = 1.0, t0: float | None = None, t: float | None = None) -> complex:
    """Psi(r, t) = exp(-1/2 int div v) * exp(i/hbar int L_q) * Psi(r0, t0).

    ``segments`` must tile [t0, t] without gaps.
    """
    segs = list(segments)
    if not segs:
        if t0 is not None and t is not None and t != t0:
            raise LineageError("empty trajectory record for a non-zero time span")
        return complex(psi0)
    for a, b in zip(segs, segs[1:]):
        if abs(a.t_end - b.t_start) > 1e-9 * max(1.0, abs(b.t_start)):
            raise LineageError(f"gap in trajectory record between t={a.t_end:g} and t={b.t_start:g}")
    if t0 is not None and abs(segs[0].t_start - t0) > 1e-9 * max(1.0, abs(t0)):
        raise LineageError("trajectory record does not start at t0")
    if t is not None and abs(segs[-1].t_end - t) > 1e-9 * max(1.0, abs(t)):
        raise LineageError("trajectory record does not reach t")
    amp = sum(s.amp_integral for s in segs)
    phase = sum(s.phase_integral for s in segs)
    return complex(psi0) * math.exp(-0.5 * amp) * complex(math.cos(phase / hbar), math.sin(phase / hbar))


def synthesize_ensemble(ens: Ensemble, hbar: float = 1.0) -> np.ndarray:
    """Vectorized synthesis for every element over the current regrid interval."""
    if ens.psi_start is None:
        raise LineageError("ensemble carries no starting amplitudes")
    return ens.psi_start * np.exp(-0.5 * ens.amp_integral + 1j * ens.phase_integral / hbar)


# -------------------------------------------------------------- tracers

@dataclass(frozen=True)
class TrajectoryRecord:
    t: float
    id: int
    x: float
    y: float
    vx: float
    vy: float
    rho: float
    S: float
    Q: float
    L_q: float


def _select_tracers(ens: Ensemble, count: int):
    if count == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    order = np.argsort(ens.ids)
    eligible = order[ens.log_rho[order] > np.max(ens.log_rho) + math.log(1e-4)]
    if len(eligible) < count:
        eligible = order
    pick = eligible[np.unique(np.linspace(0, len(eligible) - 1, min(count, len(eligible))).round().astype(int))]
    return ens.ids[pick].copy(), ens.pos[pick].copy()


def _interp(ens: Ensemble, mwls_cfg, targets, values):
    return element_stencils(ens, mwls_cfg, targets).values(values)


def _alive(ens: Ensemble, pts):
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    d, _ = cKDTree(ens.pos).query(pts)
    return d <= math.hypot(*ens.mesh_spacing)


# ------------------------------------------------------------------- run

@dataclass(frozen=True)
class RunConfig:
    phys: PhysicalParams
    sup: SuperpositionParams
    case: CaseSelector
    hydro: HydroConfig
    mwls: mwls.MwlsConfig


class OutputFrame(NamedTuple):
    snapshot: FieldSnapshot
    records: list
    regrid: RegridInfo | None


def ensemble_snapshot(ens: Ensemble, info: RegridInfo | None = None, fields: HydroFields | None = None) -> FieldSnapshot:
    meta = {"n_elements": len(ens), "density_cutoff": ens.density_cutoff}
    if info is not None:
        # mass below the cutoff (or lost to interpolation) before renormalizing
        meta.update(norm_before=info.norm_before, renorm_factor=info.renorm_factor,
                    dropped_mass=1.0 - info.norm_before)
    order = np.lexsort((ens.pos[:, 0], ens.pos[:, 1]))
    return FieldSnapshot(
        time=ens.time,
        x=ens.pos[order, 0].copy(), y=ens.pos[order, 1].copy(),
        rho=ens.rho[order], vx=ens.vel[order, 0].copy(), vy=ens.vel[order, 1].copy(),
        S=ens.S[order].copy(), spacing=tuple(float(h) for h in ens.mesh_spacing),
        origin=(0.0, 0.0), source="qtm", meta=meta,
    )


def simulate(cfg: RunConfig, hooks=None) -> Iterator[OutputFrame]:
    """Run the engine, yielding one frame at t = 0 and after every regrid.

    ``hooks`` may provide ``on_step(ensemble_before, ensemble_after)``, used by
    diagnostics that need the pre-regrid state.
    """
    phys, case, hydro, mcfg = cfg.phys, cfg.case, cfg.hydro, cfg.mwls
    ens = initialize_ensemble(phys, cfg.sup, case, hydro)
    fields = hydrodynamic_derivatives(ens, phys, case, mcfg)
    tracer_ids, tracer_pos = _select_tracers(ens, hydro.n_trajectories)
    alive = np.ones(len(tracer_ids), dtype=bool)
    yield OutputFrame(ensemble_snapshot(ens), _tracer_records(ens, fields, mcfg, tracer_ids, tracer_pos, alive), None)
    for n in range(1, hydro.n_intervals + 1):
        for _ in range(hydro.substeps):
            new, f0, fp = step(ens, phys, case, hydro, mcfg, fields)
            if alive.any():
                tracer_pos[alive] = _advect(ens, new, mcfg, tracer_pos[alive], hydro.dt)
                alive[alive] = _alive(new, tracer_pos[alive])
            if hooks is not None and hasattr(hooks, "on_step"):
                hooks.on_step(ens, new)
            ens = new
            fields = None
            if not np.all(np.isfinite(ens.log_rho)) or not np.all(np.isfinite(ens.vel)):
                raise NumericalFailure(f"non-finite element state at t={ens.time:g}")
        # pin the clock to the nominal output time
        ens.time = n * hydro.regrid_interval
        if hooks is not None and hasattr(hooks, "before_regrid"):
            hooks.before_regrid(ens)
        ens, info = regrid(ens, mcfg, n_target=hydro.n_elements_target)
        fields = hydrodynamic_derivatives(ens, phys, case, mcfg)
        alive[alive] = _alive(ens, tracer_pos[alive])
        records = _tracer_records(ens, fields, mcfg, tracer_ids, tracer_pos, alive)
        yield OutputFrame(ensemble_snapshot(ens, info), records, info)


def _advect(ens0, ens1, mcfg, pts, dt):
    """Heun advection of passive trajectories through the element velocity field."""
    v0 = _interp(ens0, mcfg, pts, ens0.vel)
    pred = pts + dt * v0
    v1 = _interp(ens1, mcfg, pred, ens1.vel)
    return pts + 0.5 * dt * (v0 + v1)


def _tracer_records(ens, fields, mcfg, ids, pos, alive):
    if not alive.any():
        return []
    pts = pos[alive]
    vals = _interp(ens, mcfg, pts, np.column_stack([ens.vel, ens.log_rho, ens.S, fields.Q, fields.L_q]))
    out = []
    for k, i in enumerate(ids[alive]):
        vx, vy, lr, s, q, lq = vals[k]
        out.append(TrajectoryRecord(ens.time, int(i), float(pts[k, 0]), float(pts[k, 1]),
                                    float(vx), float(vy), float(math.exp(lr)), float(s), float(q), float(lq)))
    return out


def run(cfg: RunConfig, hooks=None):
    """Collect all frames of :func:`simulate` into ``(snapshots, records, regrids)``."""
    snaps, records, infos = [], [], []
    for frame in simulate(cfg, hooks):
        snaps.append(frame.snapshot)
        records.extend(frame.records)
        if frame.regrid is not None:
            infos.append(frame.regrid)
    return snaps, records, infos
