"""Diagnostic fields computed from field snapshots.

Everything here is a pure function of its input snapshots. Fields that need
spatial derivatives are evaluated only where rho exceeds ten times the
snapshot's density cutoff; elsewhere they carry NaN, the not-evaluated
marker, which is also what the file writers emit.

Index 0 denotes the system coordinate x and index 1 the bath coordinate y.
For unequal axis masses the stress tensor uses sqrt(m_i m_j) as its mass
weight, which reduces to the usual single-mass form when m0 = m.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mwls
from .errors import AlignmentError, SizingError
from .model import CaseSelector, PhysicalParams, potential_gradient
from .snapshot import FieldSnapshot

MASK_FACTOR = 10.0
# time stamps closer than this are treated as equal
TIME_EPS = 1e-9
DEFAULT_MWLS = mwls.MwlsConfig(n_b=30, weight_scale=0.3)


# ----------------------------------------------------------------- helpers

def evaluation_mask(snap: FieldSnapshot, cutoff: float | None = None) -> np.ndarray:
    """Points where derivative-based fields are evaluated."""
    if cutoff is None:
        cutoff = float(snap.meta.get("density_cutoff", 0.0))
    return snap.rho > MASK_FACTOR * cutoff


class _Fitter:
    """MWLS stencils over the evaluated points of one snapshot."""

    def __init__(self, snap: FieldSnapshot, cutoff, cfg):
        cfg = cfg or DEFAULT_MWLS
        self.mask = evaluation_mask(snap, cutoff)
        aspect = snap.spacing[1] / snap.spacing[0]
        # isolated islands can leave a stencil unable to support a cubic fit;
        # such points are dropped and the cloud rebuilt without them
        while True:
            self.idx = np.flatnonzero(self.mask)
            if len(self.idx) < cfg.n_b:
                raise SizingError(f"only {len(self.idx)} evaluated points, fewer than n_b={cfg.n_b}")
            pts = snap.positions[self.idx]
            self.st = mwls.MetricStencils(pts, pts, cfg, aspect, strict=False)
            ok = np.isfinite(self.st.inner.ops[:, 0, 0])
            if ok.all():
                break
            self.mask[self.idx[~ok]] = False
        self.n = snap.size

    def derivatives(self, values) -> mwls.Derivatives:
        return self.st.derivatives(values)

    def scatter(self, values, dtype=float):
        """Place per-evaluated-point values into a full-size NaN array."""
        values = np.asarray(values)
        out = np.full((self.n,) + values.shape[1:], np.nan, dtype=dtype)
        out[self.idx] = values
        return out


def _log_rho_derivatives(snap, fit: _Fitter):
    return fit.derivatives(np.log(snap.rho[fit.idx]))


# ----------------------------------------------------------- flux fields

def flux(snap: FieldSnapshot) -> np.ndarray:
    """Probability flux j = rho v, shape (n, 2)."""
    return snap.rho[:, None] * np.column_stack([snap.vx, snap.vy])


def osmotic_velocity(snap: FieldSnapshot, masses, hbar: float = 1.0, cutoff=None, mwls_cfg=None) -> np.ndarray:
    """u_i = -(hbar / 2 m_i) d(ln rho)/dx_i, shape (n, 2)."""
    fit = _Fitter(snap, cutoff, mwls_cfg)
    d = _log_rho_derivatives(snap, fit)
    return fit.scatter(_osmotic(d, masses, hbar))


def _osmotic(d, masses, hbar):
    return np.column_stack([-hbar / (2 * masses[0]) * d.f_x, -hbar / (2 * masses[1]) * d.f_y])


def _pressure_per_density(d, masses, hbar):
    # grad^2 rho / rho = (ln rho)'' + ((ln rho)')^2 along each axis
    return -0.25 * hbar**2 * ((d.f_xx + d.f_x**2) / masses[0] + (d.f_yy + d.f_y**2) / masses[1])


def quantum_pressure(snap: FieldSnapshot, masses, hbar: float = 1.0, cutoff=None, mwls_cfg=None) -> np.ndarray:
    """P = -(hbar^2/4) sum_i (1/m_i) d^2 rho/dx_i^2."""
    fit = _Fitter(snap, cutoff, mwls_cfg)
    d = _log_rho_derivatives(snap, fit)
    return fit.scatter(snap.rho[fit.idx] * _pressure_per_density(d, masses, hbar))


def flux_divergence(snap: FieldSnapshot, cutoff=None, mwls_cfg=None) -> np.ndarray:
    """div j, positive where flux diverges (repeller-like)."""
    fit = _Fitter(snap, cutoff, mwls_cfg)
    return fit.scatter(_flux_divergence(snap, fit))


def _flux_divergence(snap, fit):
    i = fit.idx
    dl = _log_rho_derivatives(snap, fit)
    dvx = fit.derivatives(snap.vx[i])
    dvy = fit.derivatives(snap.vy[i])
    # div(rho v) = rho (div v + v . grad ln rho)
    return snap.rho[i] * (dvx.f_x + dvy.f_y + snap.vx[i] * dl.f_x + snap.vy[i] * dl.f_y)


# ---------------------------------------------------------------- stress

@dataclass(frozen=True, eq=False)
class StressFields:
    """Quantum hydrodynamic stress on a snapshot; NaN at masked points.

    ``Pi_c_ij`` holds sqrt(m_i m_j) rho v_i v_j and ``Pi_q_ij`` holds
    sqrt(m_i m_j) rho u_i u_j. ``Pi_ij`` is the compact complex-velocity form.
    """

    time: float
    mask: np.ndarray
    P: np.ndarray
    u: np.ndarray
    w: np.ndarray
    Pi_00: np.ndarray
    Pi_01: np.ndarray
    Pi_11: np.ndarray
    Pi_c_00: np.ndarray
    Pi_c_01: np.ndarray
    Pi_c_11: np.ndarray
    Pi_q_00: np.ndarray
    Pi_q_01: np.ndarray
    Pi_q_11: np.ndarray

    def component(self, i: int, j: int) -> np.ndarray:
        return getattr(self, f"Pi_{min(i, j)}{max(i, j)}")

    def decomposition_error(self) -> float:
        """Largest relative gap between the compact and the decomposed forms."""
        worst = 0.0
        for ij in ("00", "01", "11"):
            compact = getattr(self, f"Pi_{ij}")[self.mask]
            c = getattr(self, f"Pi_c_{ij}")[self.mask]
            q = getattr(self, f"Pi_q_{ij}")[self.mask]
            p = self.P[self.mask] if ij[0] == ij[1] else np.zeros_like(c)
            summed = p + c + q
            # rounding is relative to the terms, not to their (possibly tiny) sum
            scale = np.abs(p) + np.abs(c) + np.abs(q)
            scale = np.where(scale > 0, scale, 1.0)
            if compact.size:
                worst = max(worst, float(np.max(np.abs(compact - summed) / scale)))
        return worst


def stress_tensor(snap: FieldSnapshot, masses, hbar: float = 1.0, cutoff=None, mwls_cfg=None) -> StressFields:
    fit = _Fitter(snap, cutoff, mwls_cfg)
    i = fit.idx
    d = _log_rho_derivatives(snap, fit)
    rho = snap.rho[i]
    u = _osmotic(d, masses, hbar)
    v = np.column_stack([snap.vx[i], snap.vy[i]])
    w = v + 1j * u
    P = rho * _pressure_per_density(d, masses, hbar)
    sq = np.sqrt(np.outer(masses, masses))
    parts = {}
    for a, b in ((0, 0), (0, 1), (1, 1)):
        wt = sq[a, b] * rho
        compact = wt * (w[:, a] * np.conj(w[:, b])).real
        if a == b:
            compact = compact + P
        parts[f"Pi_{a}{b}"] = fit.scatter(compact)
        parts[f"Pi_c_{a}{b}"] = fit.scatter(wt * v[:, a] * v[:, b])
        parts[f"Pi_q_{a}{b}"] = fit.scatter(wt * u[:, a] * u[:, b])
    return StressFields(
        time=snap.time, mask=fit.mask, P=fit.scatter(P), u=fit.scatter(u),
        w=fit.scatter(w, dtype=complex), **parts,
    )


# ------------------------------------------------------- Navier-Stokes check

def align(s0: FieldSnapshot, s1: FieldSnapshot):
    """Index arrays (k0, k1) of the mesh nodes shared by two snapshots.

    Both snapshots must lie on the same lattice (spacing and origin).
    """
    if not np.allclose(s0.spacing, s1.spacing, rtol=1e-12, atol=0.0):
        raise AlignmentError(f"mesh spacings differ: {s0.spacing} vs {s1.spacing}")
    if not np.allclose(s0.origin, s1.origin, rtol=0.0, atol=1e-12 * max(s0.spacing)):
        raise AlignmentError(f"mesh origins differ: {s0.origin} vs {s1.origin}")
    i0, j0 = s0.indices()
    i1, j1 = s1.indices()
    lookup = {(a, b): k for k, (a, b) in enumerate(zip(i1.tolist(), j1.tolist()))}
    k0, k1 = [], []
    for k, key in enumerate(zip(i0.tolist(), j0.tolist())):
        m = lookup.get(key)
        if m is not None:
            k0.append(k)
            k1.append(m)
    if not k0:
        raise AlignmentError("snapshots share no mesh nodes")
    return np.array(k0, dtype=np.int64), np.array(k1, dtype=np.int64)


def _momentum_terms(snap, fit, masses, phys, case, hbar):
    """Per-point (div Pi, rho grad V) for the evaluated points, each (m, 2)."""
    i = fit.idx
    rho = snap.rho[i]
    d = _log_rho_derivatives(snap, fit)
    glr = np.column_stack([d.f_x, d.f_y])
    u = _osmotic(d, masses, hbar)
    v = np.column_stack([snap.vx[i], snap.vy[i]])
    p = _pressure_per_density(d, masses, hbar)
    sq = np.sqrt(np.outer(masses, masses))
    # each flux term is rho * g; d(rho g)/dx_j = rho (dg/dx_j + g d(ln rho)/dx_j)
    g = {}
    for a in range(2):
        for b in range(2):
            g[a, b] = sq[a, b] * (v[:, a] * v[:, b] + u[:, a] * u[:, b])
    keys = [(0, 0), (0, 1), (1, 0), (1, 1)]
    stacked = np.column_stack([g[k] for k in keys] + [p])
    dg = fit.derivatives(stacked)
    grads = {k: (dg.f_x[:, n], dg.f_y[:, n]) for n, k in enumerate(keys)}
    dp = (dg.f_x[:, 4], dg.f_y[:, 4])
    div = np.zeros((len(i), 2))
    for comp in range(2):
        total = rho * (dp[comp] + p * glr[:, comp])
        for j in range(2):
            gj = grads[j, comp][j]
            total = total + rho * (gj + g[j, comp] * glr[:, j])
        div[:, comp] = total
    fx, fy = potential_gradient(phys, case, snap.x[i], snap.y[i])
    # potential_gradient returns the force -grad V
    force = -rho[:, None] * np.column_stack([fx, fy])
    return div, force


def _interior(snap, mask, depth=2):
    """Evaluated nodes whose lattice neighbors within ``depth`` are also evaluated."""
    i, j = snap.indices()
    present = set(zip(i[mask].tolist(), j[mask].tolist()))
    out = np.zeros(snap.size, dtype=bool)
    offsets = [(a, b) for a in range(-depth, depth + 1) for b in range(-depth, depth + 1)]
    for k in np.flatnonzero(mask):
        ik, jk = int(i[k]), int(j[k])
        out[k] = all((ik + a, jk + b) in present for a, b in offsets)
    return out


@dataclass(frozen=True, eq=False)
class NSResidual:
    """Momentum-balance residual on the nodes shared by two snapshots."""

    time: float
    x: np.ndarray
    y: np.ndarray
    residual: np.ndarray
    weight: np.ndarray
    interior: np.ndarray
    term_norms: dict
    norm: float
    relative: float


def _weighted_norm(field, weight):
    return float(np.sqrt(np.sum(weight[:, None] * field**2)))


def ns_residual(
    s0: FieldSnapshot,
    s1: FieldSnapshot,
    phys: PhysicalParams,
    case: CaseSelector,
    scheme: str = "centered",
    cutoff=None,
    mwls_cfg=None,
) -> NSResidual:
    """Residual of d(rho m v)/dt + div Pi + rho grad V = 0.

    The time derivative is the difference quotient between the snapshots.
    With ``scheme="centered"`` the spatial terms are the average over both
    snapshots (second order about the midpoint); ``"forward"`` uses ``s0``
    only. ``relative`` is the rho-weighted L2 norm of the residual over
    interior points divided by the largest such norm among the individual
    terms.
    """
    if scheme not in ("centered", "forward"):
        raise ValueError(f"unknown scheme {scheme!r}")
    dt = s1.time - s0.time
    if not dt > TIME_EPS:
        raise AlignmentError(f"snapshot times must increase (got {s0.time:g} then {s1.time:g})")
    k0, k1 = align(s0, s1)
    masses = np.asarray(phys.masses, dtype=float)
    fit0 = _Fitter(s0, cutoff, mwls_cfg)
    both = fit0.mask[k0]
    if scheme == "centered":
        fit1 = _Fitter(s1, cutoff, mwls_cfg)
        both &= fit1.mask[k1]
    k0, k1 = k0[both], k1[both]
    if not len(k0):
        raise AlignmentError("snapshots share no evaluated mesh nodes")

    def spatial(snap, fit, k):
        div, force = _momentum_terms(snap, fit, masses, phys, case, phys.hbar)
        pos = np.full(snap.size, -1, dtype=np.int64)
        pos[fit.idx] = np.arange(len(fit.idx))
        return div[pos[k]], force[pos[k]]

    div, force = spatial(s0, fit0, k0)
    if scheme == "centered":
        div1, force1 = spatial(s1, fit1, k1)
        div = 0.5 * (div + div1)
        force = 0.5 * (force + force1)
    mom0 = s0.rho[k0, None] * masses * np.column_stack([s0.vx[k0], s0.vy[k0]])
    mom1 = s1.rho[k1, None] * masses * np.column_stack([s1.vx[k1], s1.vy[k1]])
    dmom = (mom1 - mom0) / dt
    res = dmom + div + force
    weight = 0.5 * (s0.rho[k0] + s1.rho[k1]) if scheme == "centered" else s0.rho[k0]
    inner = _interior(s0, fit0.mask)[k0]
    if scheme == "centered":
        inner &= _interior(s1, fit1.mask)[k1]
    wi = np.where(inner, weight, 0.0)
    terms = {
        "time": _weighted_norm(dmom, wi),
        "stress": _weighted_norm(div, wi),
        "force": _weighted_norm(force, wi),
    }
    norm = _weighted_norm(res, wi)
    largest = max(terms.values())
    relative = norm / largest if largest > 0 else 0.0
    t = 0.5 * (s0.time + s1.time) if scheme == "centered" else s0.time
    return NSResidual(t, s0.x[k0], s0.y[k0], res, weight, inner, terms, norm, relative)


def continuity_mismatch(s0: FieldSnapshot, s1: FieldSnapshot, cutoff=None, mwls_cfg=None) -> float:
    """rho-weighted relative gap between div j and -d(rho)/dt.

    div j is averaged over the two snapshots, so the check is centered on
    their midpoint.
    """
    dt = s1.time - s0.time
    if not dt > TIME_EPS:
        raise AlignmentError(f"snapshot times must increase (got {s0.time:g} then {s1.time:g})")
    k0, k1 = align(s0, s1)
    d0 = flux_divergence(s0, cutoff, mwls_cfg)[k0]
    d1 = flux_divergence(s1, cutoff, mwls_cfg)[k1]
    ok = np.isfinite(d0) & np.isfinite(d1)
    m0 = evaluation_mask(s0, cutoff)
    inner = _interior(s0, m0)[k0] & ok
    div = 0.5 * (d0 + d1)
    drho = (s1.rho[k1] - s0.rho[k0]) / dt
    w = np.where(inner, 0.5 * (s0.rho[k0] + s1.rho[k1]), 0.0)
    diff = np.where(inner, div + drho, 0.0)
    ref = np.where(inner, drho, 0.0)
    scale = float(np.sqrt(np.sum(w * ref**2)))
    return float(np.sqrt(np.sum(w * diff**2))) / scale if scale > 0 else 0.0


# ------------------------------------------------------------ decoherence

@dataclass(frozen=True)
class DecoherenceMetrics:
    time: float
    central_density: float
    fringe_visibility: float
    lobe_separation: float


def _lattice_grid(snap):
    i, j = snap.indices()
    i0, j0 = i.min(), j.min()
    grid = np.full((j.max() - j0 + 1, i.max() - i0 + 1), np.nan)
    grid[j - j0, i - i0] = snap.rho
    return grid, i0, j0


def _local_maxima(snap):
    grid, i0, j0 = _lattice_grid(snap)
    padded = np.pad(grid, 1, constant_values=np.nan)
    core = padded[1:-1, 1:-1]
    is_max = np.isfinite(core) & (core > 0)
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = padded[1 + dj:padded.shape[0] - 1 + dj, 1 + di:padded.shape[1] - 1 + di]
            is_max &= ~(nb > core)
    jj, ii = np.nonzero(is_max)
    x = snap.origin[0] + (ii + i0) * snap.spacing[0]
    y = snap.origin[1] + (jj + j0) * snap.spacing[1]
    return x, y, core[jj, ii]


def decoherence_metrics(snap: FieldSnapshot, half_width: float = 0.5) -> DecoherenceMetrics:
    """Central density, y = 0 fringe visibility for |x| < half_width, lobe separation."""
    central = snap.value_at("rho", 0.0, 0.0)
    row = np.abs(snap.y) < 0.5 * snap.spacing[1]
    cut = snap.rho[row & (np.abs(snap.x) < half_width)]
    if cut.size and cut.max() + cut.min() > 0:
        vis = float((cut.max() - cut.min()) / (cut.max() + cut.min()))
    else:
        vis = float("nan")
    x, y, val = _local_maxima(snap)
    sep = 0.0
    if len(val) >= 2:
        order = np.lexsort((x, -val))
        a, b = order[0], order[1]
        sep = float(np.hypot(x[a] - x[b], y[a] - y[b]))
    return DecoherenceMetrics(snap.time, central, vis, sep)


def central_band_inflow(snap: FieldSnapshot, half_width: float = 0.3, cutoff=None) -> float:
    """Fraction of band points |x| < half_width (x != 0) whose j_x points toward x = 0."""
    m = evaluation_mask(snap, cutoff)
    band = m & (np.abs(snap.x) < half_width) & (np.abs(snap.x) > 0.5 * snap.spacing[0])
    j = flux(snap)[band, 0]
    x = snap.x[band]
    good = np.isfinite(j)
    if not good.any():
        return float("nan")
    return float(np.mean(np.sign(j[good]) == -np.sign(x[good])))
