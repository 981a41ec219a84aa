"""B-spline basis evaluation kernels.

The basis matrix is the innermost hot loop of the whole package: every
curve update evaluates it thousands of times through quadrature and
refitting. Kernels are compiled with numba when available; setting
``DISTKM_DISABLE_NUMBA=1`` selects the pure-numpy fallback (same
algorithm, vectorized over evaluation points). ``benchmarks/bench_kernels.py``
compares the two paths.
"""

import os

import numpy as np

_DISABLE = os.environ.get("DISTKM_DISABLE_NUMBA", "").strip().lower() in (
    "1",
    "true",
    "yes",
)

if not _DISABLE:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        HAS_NUMBA = False
else:
    HAS_NUMBA = False


def _basis_matrix_np(x, knots_full, degree):
    """Cox-de Boor recursion vectorized over all evaluation points."""
    t = knots_full
    m = t.shape[0] - 1
    tmax = t[m]
    # degree-0 indicators; the last nonempty span also owns x == tmax
    cols = []
    for i in range(m):
        if t[i] < t[i + 1]:
            inside = (x >= t[i]) & ((x < t[i + 1]) | ((t[i + 1] == tmax) & (x == tmax)))
            cols.append(inside.astype(np.float64))
        else:
            cols.append(np.zeros_like(x))
    b = np.stack(cols, axis=1)
    for d in range(1, degree + 1):
        nxt = np.zeros((x.shape[0], m - d))
        for i in range(m - d):
            den1 = t[i + d] - t[i]
            den2 = t[i + d + 1] - t[i + 1]
            v = nxt[:, i]
            if den1 > 0.0:
                v += (x - t[i]) / den1 * b[:, i]
            if den2 > 0.0:
                v += (t[i + d + 1] - x) / den2 * b[:, i + 1]
            nxt[:, i] = v
        b = nxt
    return b


def _basis_deriv_matrix_np(x, knots_full, degree):
    """Basis matrix plus its first derivative (degree >= 1)."""
    t = knots_full
    lo = _basis_matrix_np(x, knots_full, degree - 1)
    nb = t.shape[0] - 1 - degree
    b = np.zeros((x.shape[0], nb))
    db = np.zeros((x.shape[0], nb))
    for i in range(nb):
        den1 = t[i + degree] - t[i]
        den2 = t[i + degree + 1] - t[i + 1]
        if den1 > 0.0:
            b[:, i] += (x - t[i]) / den1 * lo[:, i]
            db[:, i] += degree / den1 * lo[:, i]
        if den2 > 0.0:
            b[:, i] += (t[i + degree + 1] - x) / den2 * lo[:, i + 1]
            db[:, i] -= degree / den2 * lo[:, i + 1]
    return b, db


if HAS_NUMBA:

    @njit(cache=True)
    def _basis_matrix_nb(x, knots_full, degree):
        t = knots_full
        m = t.shape[0] - 1
        nb = m - degree
        tmax = t[m]
        out = np.zeros((x.shape[0], nb))
        work = np.zeros(m)
        nxt = np.zeros(m)
        for k in range(x.shape[0]):
            xv = x[k]
            for i in range(m):
                if t[i] < t[i + 1] and xv >= t[i] and (
                    xv < t[i + 1] or (t[i + 1] == tmax and xv == tmax)
                ):
                    work[i] = 1.0
                else:
                    work[i] = 0.0
            for d in range(1, degree + 1):
                for i in range(m - d):
                    v = 0.0
                    den1 = t[i + d] - t[i]
                    if den1 > 0.0 and work[i] != 0.0:
                        v += (xv - t[i]) / den1 * work[i]
                    den2 = t[i + d + 1] - t[i + 1]
                    if den2 > 0.0 and work[i + 1] != 0.0:
                        v += (t[i + d + 1] - xv) / den2 * work[i + 1]
                    nxt[i] = v
                for i in range(m - d):
                    work[i] = nxt[i]
            for i in range(nb):
                out[k, i] = work[i]
        return out

    @njit(cache=True)
    def _basis_deriv_matrix_nb(x, knots_full, degree):
        t = knots_full
        m = t.shape[0] - 1
        nb = m - degree
        tmax = t[m]
        b = np.zeros((x.shape[0], nb))
        db = np.zeros((x.shape[0], nb))
        work = np.zeros(m)
        nxt = np.zeros(m)
        for k in range(x.shape[0]):
            xv = x[k]
            for i in range(m):
                if t[i] < t[i + 1] and xv >= t[i] and (
                    xv < t[i + 1] or (t[i + 1] == tmax and xv == tmax)
                ):
                    work[i] = 1.0
                else:
                    work[i] = 0.0
            for d in range(1, degree):
                for i in range(m - d):
                    v = 0.0
                    den1 = t[i + d] - t[i]
                    if den1 > 0.0 and work[i] != 0.0:
                        v += (xv - t[i]) / den1 * work[i]
                    den2 = t[i + d + 1] - t[i + 1]
                    if den2 > 0.0 and work[i + 1] != 0.0:
                        v += (t[i + d + 1] - xv) / den2 * work[i + 1]
                    nxt[i] = v
                for i in range(m - d):
                    work[i] = nxt[i]
            # work now holds the degree-1 lower-order values
            for i in range(nb):
                bv = 0.0
                dv = 0.0
                den1 = t[i + degree] - t[i]
                if den1 > 0.0 and work[i] != 0.0:
                    bv += (xv - t[i]) / den1 * work[i]
                    dv += degree / den1 * work[i]
                den2 = t[i + degree + 1] - t[i + 1]
                if den2 > 0.0 and work[i + 1] != 0.0:
                    bv += (t[i + degree + 1] - xv) / den2 * work[i + 1]
                    dv -= degree / den2 * work[i + 1]
                b[k, i] = bv
                db[k, i] = dv
        return b, db


def basis_matrix(x, knots_full, degree):
    """Evaluate all B-spline basis functions at the points ``x``.

    Returns an (len(x), n_basis) matrix for the clamped knot vector
    ``knots_full``; rows sum to 1 inside the knot span.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    knots_full = np.ascontiguousarray(knots_full, dtype=np.float64)
    if HAS_NUMBA:
        return _basis_matrix_nb(x, knots_full, degree)
    return _basis_matrix_np(x, knots_full, degree)


def basis_deriv_matrix(x, knots_full, degree):
    """Basis matrix and its first-derivative matrix at the points ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    knots_full = np.ascontiguousarray(knots_full, dtype=np.float64)
    if HAS_NUMBA:
        return _basis_deriv_matrix_nb(x, knots_full, degree)
    return _basis_deriv_matrix_np(x, knots_full, degree)
