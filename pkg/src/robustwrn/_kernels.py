"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``ROBUSTWRN_NUMBA=0`` in the environment before import to force the
numpy path. Both paths compute the same values; the test suite runs them
against each other.
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("ROBUSTWRN_NUMBA", "1").strip().lower()

try:  # pragma: no cover - import guard
    if _FLAG in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by ROBUSTWRN_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _im2col_numpy(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, k, k), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, :, i, j] = xp[
                :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k)


def _col2im_numpy(
    dcols: np.ndarray, n: int, c: int, hp: int, wp: int, k: int, stride: int, ho: int, wo: int
) -> np.ndarray:
    d = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dx


def _jacobi_eigvalsh_numpy(a: np.ndarray, tol: float, max_sweeps: int) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        scale = np.sqrt(np.sum(a * a))
        if off <= tol * max(scale, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = cs * rp - sn * rq
                a[q, :] = sn * rp + cs * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = cs * cp - sn * cq
                a[:, q] = sn * cp + cs * cq
    return np.sort(np.diag(a))


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, k, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        out = np.empty((n * ho * wo, c * k * k), dtype=xp.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                out[row, col] = xp[b, ch, oy * stride + i, ox * stride + j]
                                col += 1
        return out

    @njit(cache=True)
    def _col2im_nb(dcols, n, c, hp, wp, k, stride, ho, wo):
        dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                dx[b, ch, oy * stride + i, ox * stride + j] += dcols[row, col]
                                col += 1
        return dx

    @njit(cache=True)
    def _jacobi_eigvalsh_nb(a_in, tol, max_sweeps):
        a = a_in.copy()
        n = a.shape[0]
        for _ in range(max_sweeps):
            off = 0.0
            tot = 0.0
            for i in range(n):
                for j in range(n):
                    tot += a[i, j] * a[i, j]
                    if j < i:
                        off += a[i, j] * a[i, j]
            if np.sqrt(off) <= tol * max(np.sqrt(tot), 1e-300):
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if theta != 0.0:
                        t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    else:
                        t = 1.0
                    cs = 1.0 / np.sqrt(t * t + 1.0)
                    sn = t * cs
                    for r in range(n):
                        rp = a[p, r]
                        rq = a[q, r]
                        a[p, r] = cs * rp - sn * rq
                        a[q, r] = sn * rp + cs * rq
                    for r in range(n):
                        cp = a[r, p]
                        cq = a[r, q]
                        a[r, p] = cs * cp - sn * cq
                        a[r, q] = sn * cp + cs * cq
        return np.sort(np.diag(a).copy())


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold a padded NCHW batch into rows of (channel, ky, kx) patches.

    Row order is (batch, out_y, out_x); column order is channel-major then
    kernel row-major, matching ``weight.reshape(out_ch, -1)``.
    """
    xp = np.ascontiguousarray(xp)
    if HAVE_NUMBA:
        return _im2col_nb(xp, k, stride, ho, wo)
    return _im2col_numpy(xp, k, stride, ho, wo)


def col2im(
    dcols: np.ndarray, n: int, c: int, hp: int, wp: int, k: int, stride: int, ho: int, wo: int
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the padded input."""
    dcols = np.ascontiguousarray(dcols)
    if HAVE_NUMBA:
        return _col2im_nb(dcols, n, c, hp, wp, k, stride, ho, wo)
    return _col2im_numpy(dcols, n, c, hp, wp, k, stride, ho, wo)


def jacobi_eigvalsh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"jacobi_eigvalsh needs a square matrix, got {a.shape}")
    if HAVE_NUMBA:
        return _jacobi_eigvalsh_nb(a, tol, max_sweeps)
    return _jacobi_eigvalsh_numpy(a, tol, max_sweeps)


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
