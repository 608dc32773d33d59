"""Weighted moving least squares on scattered 2-D points.

Every fit uses the 10-term cubic monomial basis in displacement coordinates
(xi, eta) measured from the target point, Gaussian weights whose bandwidth is
``weight_scale`` times the farthest-neighbor distance, and a Cholesky solve of
the normal equations with an SVD fallback for ill-conditioned stencils.

The stencil operator is built once per (cloud, targets) pair; any number of
fields can then be fitted with one small matrix product each.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from ..errors import DegenerateGeometryError, SizingError
from . import _fallback

try:
    from . import _kernel
except ImportError:  # extension not built
    _kernel = None

__all__ = [
    "MwlsConfig", "PointCloud", "LocalFit", "Stencils", "Derivatives",
    "find_neighbors", "fit_local", "differentiate_field", "interpolate_to",
    "MetricStencils", "backend", "use_backend",
]

N_BASIS = 10
COND_LIMIT = 1e10
# relative singular-value floor of the weighted design matrix
RANK_TOL = 1e-12
MIN_SEPARATION = 1e-10

_backend = "compiled" if _kernel is not None else "python"
_threads = 1


def backend() -> str:
    return _backend


def use_backend(name: str) -> None:
    """Select ``"compiled"`` or ``"python"`` stencil kernels."""
    global _backend
    if name == "compiled" and _kernel is None:
        raise RuntimeError("compiled MWLS kernel is not available; rebuild the package")
    if name not in ("compiled", "python"):
        raise ValueError(f"unknown backend {name!r}")
    _backend = name


def set_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def _build(disp, weight_scale):
    disp = np.ascontiguousarray(disp, dtype=np.float64)
    if _backend == "compiled":
        return _kernel.build_operators(disp, float(weight_scale), _threads)
    return _fallback.build_operators(disp, weight_scale)


@dataclass(frozen=True)
class MwlsConfig:
    n_b: int = 35
    weight_scale: float = 0.8

    def __post_init__(self):
        if self.n_b < N_BASIS:
            raise ValueError(f"n_b must be at least {N_BASIS}")
        if not self.weight_scale > 0:
            raise ValueError("weight_scale must be positive")


class PointCloud:
    """Immutable set of distinct 2-D points with an exact k-NN index."""

    def __init__(self, positions):
        pos = np.array(positions, dtype=np.float64, copy=True)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError("positions must have shape (n, 2)")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        pos.setflags(write=False)
        self.positions = pos
        self.tree = cKDTree(pos)
        if len(pos) > 1:
            d, _ = self.tree.query(pos, k=2)
            if d[:, 1].min() <= MIN_SEPARATION:
                i = int(np.argmin(d[:, 1]))
                raise ValueError(f"duplicate point at index {i}: {pos[i].tolist()}")

    def __len__(self):
        return len(self.positions)


def find_neighbors(cloud: PointCloud, targets, n_b: int) -> np.ndarray:
    """Indices of the ``n_b`` nearest cloud points for each target.

    Rows are sorted by distance, ties broken by ascending index. A single
    target (shape (2,)) returns a 1-D array.
    """
    n = len(cloud)
    if n < n_b:
        raise SizingError(f"cloud has {n} points, fewer than n_b={n_b}")
    t = np.asarray(targets, dtype=np.float64)
    single = t.ndim == 1
    t = np.atleast_2d(t)
    k = min(n, n_b + 8)
    _, idx = cloud.tree.query(t, k=k)
    idx = idx.reshape(len(t), k)
    d2 = _sqdist(cloud.positions, t, idx)
    order = np.lexsort((idx, d2), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    out = idx[:, :n_b].copy()
    if k < n:
        # ties at the n_b-th distance may extend past the queried set
        edge = d2[:, n_b - 1]
        suspect = np.flatnonzero(d2[:, -1] <= edge * (1.0 + 1e-12) + 1e-300)
        for r in suspect:
            radius = np.sqrt(edge[r]) * (1.0 + 1e-9) + 1e-300
            cand = np.array(cloud.tree.query_ball_point(t[r], radius), dtype=np.int64)
            cd2 = _sqdist(cloud.positions, t[r:r + 1], cand[None, :])[0]
            o = np.lexsort((cand, cd2))
            out[r] = cand[o[:n_b]]
    return out[0] if single else out


def _sqdist(pos, targets, idx):
    dx = pos[idx, 0] - targets[:, None, 0]
    dy = pos[idx, 1] - targets[:, None, 1]
    return dx * dx + dy * dy


def _robust_operator(disp, weight_scale):
    """SVD-based operator for one stencil; None if rank deficient."""
    dist = np.hypot(disp[:, 0], disp[:, 1])
    scale = dist.max()
    if scale == 0:
        return None, np.inf
    P = _fallback.basis(disp[:, 0] / scale, disp[:, 1] / scale)
    sw = np.exp(-0.5 * ((dist / scale) / weight_scale) ** 2)
    U, s, Vt = np.linalg.svd(sw[:, None] * P, full_matrices=False)
    if s[-1] <= RANK_TOL * s[0]:
        return None, np.inf
    G = (Vt.T / s) @ U.T * sw[None, :]
    G *= (1.0 / scale) ** _fallback.DEGREES[:, None]
    return G, float((s[0] / s[-1]) ** 2)


def _operators(disp, weight_scale, labels=None, strict=True):
    """Operators for every stencil.

    A rank-deficient stencil raises when ``strict``; otherwise its operator
    is filled with NaN so every fitted quantity there is NaN.
    """
    ops, cond, status = _build(disp, weight_scale)
    bad = np.flatnonzero((status != 0) | (cond > COND_LIMIT))
    for r in bad:
        G, c = _robust_operator(disp[r], weight_scale)
        if G is None and not strict:
            ops[r] = np.nan
            cond[r] = np.inf
            continue
        if G is None:
            label = r if labels is None else labels[r]
            raise DegenerateGeometryError(
                f"degenerate neighbor geometry at point {label}: "
                "stencil cannot support a cubic fit", index=label,
            )
        ops[r] = G
        cond[r] = c
    return ops, cond


class Derivatives(NamedTuple):
    f: np.ndarray
    f_x: np.ndarray
    f_y: np.ndarray
    f_xx: np.ndarray
    f_yy: np.ndarray
    f_xy: np.ndarray


class Stencils:
    """Fitting operators for a fixed set of targets over a fixed cloud."""

    def __init__(self, cloud: PointCloud, targets, cfg: MwlsConfig, labels=None, strict=True):
        t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        self.cloud = cloud
        self.targets = t
        self.neighbors = find_neighbors(cloud, t, cfg.n_b)
        disp = cloud.positions[self.neighbors] - t[:, None, :]
        self.ops, self.cond = _operators(disp, cfg.weight_scale, labels, strict)

    @classmethod
    def at_points(cls, cloud: PointCloud, cfg: MwlsConfig) -> "Stencils":
        return cls(cloud, cloud.positions, cfg)

    def coefficients(self, values) -> np.ndarray:
        """Fit coefficients, shape (targets, 10) or (targets, 10, fields)."""
        v = np.asarray(values, dtype=np.float64)
        local = v[self.neighbors]
        if v.ndim == 1:
            return np.einsum("mkn,mn->mk", self.ops, local)
        return np.einsum("mkn,mnf->mkf", self.ops, local)

    def derivatives(self, values) -> Derivatives:
        a = self.coefficients(values)
        return Derivatives(a[:, 0], a[:, 1], a[:, 2], 2.0 * a[:, 3], 2.0 * a[:, 4], a[:, 5])

    def values(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        local = v[self.neighbors]
        if v.ndim == 1:
            return np.einsum("mn,mn->m", self.ops[:, 0, :], local)
        return np.einsum("mn,mnf->mf", self.ops[:, 0, :], local)


@dataclass(frozen=True)
class LocalFit:
    coefficients: np.ndarray
    center: np.ndarray
    condition_estimate: float

    @property
    def value(self):
        return self.coefficients[0]

    @property
    def gradient(self):
        return self.coefficients[1], self.coefficients[2]

    @property
    def hessian(self):
        a = self.coefficients
        return 2.0 * a[3], 2.0 * a[4], a[5]


def fit_local(values, displacements, cfg: MwlsConfig, center=(0.0, 0.0)) -> LocalFit:
    """Cubic fit of ``values`` sampled at ``displacements`` from ``center``."""
    disp = np.asarray(displacements, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if disp.ndim != 2 or disp.shape[1] != 2 or len(disp) != len(vals):
        raise ValueError("displacements must be (n, 2) and aligned with values")
    if len(disp) < N_BASIS:
        raise SizingError(f"need at least {N_BASIS} neighbors, got {len(disp)}")
    ops, cond = _operators(disp[None], cfg.weight_scale, labels=[tuple(np.asarray(center, float))])
    return LocalFit(ops[0] @ vals, np.asarray(center, dtype=np.float64), float(cond[0]))


def differentiate_field(cloud: PointCloud, values, cfg: MwlsConfig) -> Derivatives:
    """Value and derivatives up to second order at every cloud point."""
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) != len(cloud):
        raise ValueError("values are not aligned with the cloud")
    return Stencils.at_points(cloud, cfg).derivatives(vals)


class MetricStencils:
    """MWLS stencils built in coordinates where the mesh cells are square.

    With y stretched by 1/aspect, nearest-neighbor sets stay isotropic on an
    anisotropic mesh; coefficients are mapped back to physical derivatives.
    A linear change of variables keeps cubic fits exact.
    """

    def __init__(self, pos, targets, cfg, aspect, labels=None, strict=True):
        self.scale = np.array([1.0, 1.0 / aspect])
        cloud = PointCloud(pos * self.scale)
        self.inner = Stencils(cloud, np.atleast_2d(targets) * self.scale, cfg, labels=labels, strict=strict)
        # d/dy = (1/aspect) d/dy', d2/dy2 = (1/aspect)^2 d2/dy'2, ...
        s = 1.0 / aspect
        self.factors = np.array([1.0, 1.0, s, 1.0, s * s, s, 1.0, s**3, s, s * s])

    def coefficients(self, values):
        a = self.inner.coefficients(values)
        if a.ndim == 2:
            return a * self.factors
        return a * self.factors[:, None]

    def values(self, values):
        return self.inner.values(values)

    def derivatives(self, values) -> Derivatives:
        a = self.coefficients(values)
        return Derivatives(a[:, 0], a[:, 1], a[:, 2], 2.0 * a[:, 3], 2.0 * a[:, 4], a[:, 5])


class Interpolation(NamedTuple):
    values: np.ndarray
    extrapolated: np.ndarray


def outside_hull(cloud: PointCloud, targets) -> np.ndarray:
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    tri = Delaunay(cloud.positions)
    return tri.find_simplex(t) < 0


def interpolate_to(cloud: PointCloud, values, cfg: MwlsConfig, targets, flag_extrapolation: bool = True) -> Interpolation:
    """Fitted value at each target; targets outside the convex hull are flagged."""
    st = Stencils(cloud, targets, cfg)
    vals = st.values(values)
    if flag_extrapolation:
        flags = outside_hull(cloud, st.targets)
    else:
        flags = np.zeros(len(st.targets), dtype=bool)
    return Interpolation(vals, flags)
