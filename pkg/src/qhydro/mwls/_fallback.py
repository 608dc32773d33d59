"""Pure numpy stencil-operator builder; same contract as the compiled kernel."""
import numpy as np

DEGREES = np.array([0, 1, 1, 2, 2, 2, 3, 3, 3, 3])


def basis(xi, eta):
    """The 10 cubic monomials, stacked on a trailing axis."""
    return np.stack(
        [np.ones_like(xi), xi, eta, xi * xi, eta * eta, xi * eta,
         xi**3, eta**3, xi * xi * eta, xi * eta * eta],
        axis=-1,
    )


def build_operators(disp, weight_scale, threads=1):
    disp = np.asarray(disp, dtype=np.float64)
    M, nb, _ = disp.shape
    dist = np.hypot(disp[..., 0], disp[..., 1])
    scale = dist.max(axis=1)
    status = np.zeros(M, dtype=np.int8)
    cond = np.full(M, 1e300)
    ops = np.zeros((M, 10, nb))
    good = scale > 0
    status[~good] = 1
    if not good.any():
        return ops, cond, status
    inv = 1.0 / scale[good]
    P = basis(disp[good, :, 0] * inv[:, None], disp[good, :, 1] * inv[:, None])
    w = np.exp(-((dist[good] * inv[:, None]) / weight_scale) ** 2)
    WP = w[..., None] * P
    A = np.einsum("mki,mkj->mij", P, WP)
    try:
        L = np.linalg.cholesky(A)
        ok = np.ones(len(A), dtype=bool)
    except np.linalg.LinAlgError:
        L = np.zeros_like(A)
        ok = np.zeros(len(A), dtype=bool)
        for i in range(len(A)):
            try:
                L[i] = np.linalg.cholesky(A[i])
                ok[i] = True
            except np.linalg.LinAlgError:
                pass
    diag = np.diagonal(L, axis1=1, axis2=2)
    sub_cond = np.full(len(A), 1e300)
    with np.errstate(divide="ignore", invalid="ignore"):
        sub_cond[ok] = (diag[ok].max(axis=1) / diag[ok].min(axis=1)) ** 2
    # G = A^{-1} (W P)^T via two triangular solves
    rhs = np.swapaxes(WP, 1, 2)
    G = np.zeros_like(rhs)
    if ok.any():
        Y = np.linalg.solve(L[ok], rhs[ok])
        G[ok] = np.linalg.solve(np.swapaxes(L[ok], 1, 2), Y)
    G *= inv[:, None, None] ** DEGREES[None, :, None]
    idx = np.flatnonzero(good)
    ops[idx] = G
    cond[idx] = sub_cond
    status[idx[~ok]] = 1
    return ops, cond, status
