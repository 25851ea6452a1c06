# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures mirror ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, hypot

cnp.import_array()

BACKEND = "cython"


cdef Py_ssize_t _jacobi_one(double[:, ::1] at, double[:, ::1] vt, bint compute_v,
                            double tol, Py_ssize_t max_sweeps, double* off_out) nogil:
    # at holds the columns of A as rows (n x m); vt the columns of V as rows.
    cdef Py_ssize_t n = at.shape[0]
    cdef Py_ssize_t m = at.shape[1]
    cdef Py_ssize_t i, j, k, sweep
    cdef double alpha, beta, gamma, ratio, zeta, t, c, s, x, y, off
    cdef bint rotated
    off = 0.0
    if n < 2:
        off_out[0] = 0.0
        return 0
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    x = at[i, k]
                    y = at[j, k]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if alpha <= 0.0 or beta <= 0.0:
                    continue
                ratio = fabs(gamma) / sqrt(alpha * beta)
                if ratio <= tol:
                    continue
                if ratio > off:
                    off = ratio
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + hypot(1.0, zeta))
                else:
                    t = -1.0 / (-zeta + hypot(1.0, zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    x = at[i, k]
                    y = at[j, k]
                    at[i, k] = c * x - s * y
                    at[j, k] = s * x + c * y
                if compute_v:
                    for k in range(n):
                        x = vt[i, k]
                        y = vt[j, k]
                        vt[i, k] = c * x - s * y
                        vt[j, k] = s * x + c * y
        if not rotated:
            off_out[0] = 0.0
            return sweep
    off_out[0] = off
    return max_sweeps


def jacobi_svd_batch(a, double tol, Py_ssize_t max_sweeps, bint compute_v):
    a = np.asarray(a, dtype=np.float64)
    cdef Py_ssize_t nb = a.shape[0]
    cdef Py_ssize_t m = a.shape[1]
    cdef Py_ssize_t n = a.shape[2]
    cdef double[:, :, ::1] at = np.ascontiguousarray(a.transpose(0, 2, 1))
    vt_arr = np.zeros((nb, n, n)) if compute_v else np.zeros((nb, 1, 1))
    cdef double[:, :, ::1] vt = vt_arr
    cdef Py_ssize_t b, i, sweeps = 0, sw
    cdef double off = 0.0, off_b = 0.0
    if compute_v:
        for b in range(nb):
            for i in range(n):
                vt[b, i, i] = 1.0
    with nogil:
        for b in range(nb):
            sw = _jacobi_one(at[b], vt[b], compute_v, tol, max_sweeps, &off_b)
            if sw > sweeps:
                sweeps = sw
            if off_b > off:
                off = off_b
    out = np.asarray(at).transpose(0, 2, 1).copy()
    v = np.asarray(vt).transpose(0, 2, 1).copy() if compute_v else None
    return out, v, sweeps, off


cdef _im2col(double[:, :, :, ::1] xv, Py_ssize_t p, Py_ssize_t q):
    # (N, Cin, H, W) -> (N, Ho*Wo, Cin*p*q), rows ordered (i, j), columns (ci, a, c)
    cdef Py_ssize_t n = xv.shape[0], cin = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t ho = h - p + 1, wo = wd - q + 1
    cols_arr = np.empty((n, ho * wo, cin * p * q))
    cdef double[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t b, ci, i, j, a, c, r, k
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    r = i * wo + j
                    k = 0
                    for ci in range(cin):
                        for a in range(p):
                            for c in range(q):
                                cols[b, r, k] = xv[b, ci, i + a, j + c]
                                k = k + 1
    return cols_arr


def conv2d_valid_batch(x, w):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t cin = w.shape[0], cout = w.shape[1], p = w.shape[2], q = w.shape[3]
    cols = _im2col(xv, p, q)
    wmat = w.transpose(0, 2, 3, 1).reshape(cin * p * q, cout)
    out = cols @ wmat
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, cout, h - p + 1, wd - q + 1))


def conv2d_grad_weight(x, g, Py_ssize_t p, Py_ssize_t q):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[0], cout = g.shape[1], cin = xv.shape[1]
    cols = _im2col(xv, p, q).reshape(-1, cin * p * q)
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = cols.T @ gmat
    return np.ascontiguousarray(dw.reshape(cin, p, q, cout).transpose(0, 3, 1, 2))


def conv2d_grad_input(g, w, Py_ssize_t h, Py_ssize_t wd):
    g = np.ascontiguousarray(g, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[0], cout = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t cin = w.shape[0], p = w.shape[2], q = w.shape[3]
    wmat = w.transpose(1, 0, 2, 3).reshape(cout, cin * p * q)
    dcols_arr = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(n, ho * wo, cout) @ wmat)
    cdef double[:, :, ::1] dcols = dcols_arr
    dx_arr = np.zeros((n, cin, h, wd))
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ci, i, j, a, c, r, k
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    r = i * wo + j
                    k = 0
                    for ci in range(cin):
                        for a in range(p):
                            for c in range(q):
                                dx[b, ci, i + a, j + c] += dcols[b, r, k]
                                k = k + 1
    return dx_arr


def maxpool_forward(x, Py_ssize_t k):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = h // k, wo = w // k
    out_arr = np.empty((n, c, ho, wo))
    arg_arr = np.empty((n, c, ho, wo), dtype=np.intp)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, i, j, a, e, best
    cdef double val, top
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        top = xv[b, ch, i * k, j * k]
                        best = 0
                        for a in range(k):
                            for e in range(k):
                                val = xv[b, ch, i * k + a, j * k + e]
                                if val > top:
                                    top = val
                                    best = a * k + e
                        out[b, ch, i, j] = top
                        arg[b, ch, i, j] = best
    return out_arr, arg_arr


def maxpool_backward(g, arg, in_shape, Py_ssize_t k):
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t[:, :, :, ::1] av = np.ascontiguousarray(arg, dtype=np.intp)
    dx_arr = np.zeros(tuple(in_shape))
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n = gv.shape[0], c = gv.shape[1], ho = gv.shape[2], wo = gv.shape[3]
    cdef Py_ssize_t b, ch, i, j, idx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        idx = av[b, ch, i, j]
                        dx[b, ch, i * k + idx // k, j * k + idx % k] += gv[b, ch, i, j]
    return dx_arr


def dropblock_expand(seeds, Py_ssize_t b, Py_ssize_t u, Py_ssize_t v):
    cdef cnp.uint8_t[:, :, ::1] sv = np.ascontiguousarray(seeds, dtype=np.uint8)
    cdef Py_ssize_t nm = sv.shape[0], su = sv.shape[1], sw = sv.shape[2]
    mask_arr = np.ones((nm, u, v))
    cdef double[:, :, ::1] mask = mask_arr
    cdef Py_ssize_t r, i, j, a, e
    with nogil:
        for r in range(nm):
            for i in range(su):
                for j in range(sw):
                    if sv[r, i, j]:
                        for a in range(b):
                            for e in range(b):
                                mask[r, i + a, j + e] = 0.0
    return mask_arr
