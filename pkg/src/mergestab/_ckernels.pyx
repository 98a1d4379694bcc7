# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SGD inner loops. See ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, tanh, exp

cnp.import_array()

BACKEND = "cython"

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


def sq_dist(const f64[::1] a, const f64[::1] b):
    cdef Py_ssize_t k, n = a.shape[0]
    cdef double s = 0.0, t
    for k in range(n):
        t = a[k] - b[k]
        s += t * t
    return s


cdef inline double _norm_sq(f64[::1] x) noexcept nogil:
    cdef Py_ssize_t c
    cdef double s = 0.0
    for c in range(x.shape[0]):
        s += x[c] * x[c]
    return s


def sgd_least_squares(const f64[::1] x0, const f64[:, ::1] X, const f64[::1] y,
                      const i64[:, ::1] idx, const f64[::1] lrs, double prox,
                      f64[:, ::1] path=None, double max_norm=1e8):
    cdef Py_ssize_t K = idx.shape[0], b = idx.shape[1], d = x0.shape[0]
    cdef Py_ssize_t k, s, c, j
    cdef double r, lr, nrm
    cdef double inv_b = 1.0 / b
    x = np.array(x0, dtype=np.float64, copy=True)
    g = np.zeros(d, dtype=np.float64)
    cdef f64[::1] xv = x
    cdef f64[::1] gv = g
    cdef bint record = path is not None
    if record:
        path[0, :] = xv
    nrm = _norm_sq(xv)
    with nogil:
        for k in range(K):
            for c in range(d):
                gv[c] = 0.0
            for s in range(b):
                j = idx[k, s]
                r = -y[j]
                for c in range(d):
                    r = r + X[j, c] * xv[c]
                for c in range(d):
                    gv[c] = gv[c] + r * X[j, c]
            lr = lrs[k]
            for c in range(d):
                xv[c] = xv[c] - lr * (gv[c] * inv_b) - prox * (xv[c] - x0[c])
            if record:
                for c in range(d):
                    path[k + 1, c] = xv[c]
            nrm = _norm_sq(xv)
            if not nrm <= max_norm * max_norm:
                with gil:
                    return x, k, sqrt(nrm)
    return x, -1, sqrt(nrm)


def sgd_mlp(const f64[::1] x0, const f64[:, ::1] X, const i64[::1] y,
            const i64[:, ::1] idx, const f64[::1] lrs, double prox,
            Py_ssize_t p, Py_ssize_t H, Py_ssize_t C,
            f64[:, ::1] path=None, double max_norm=1e8):
    cdef Py_ssize_t K = idx.shape[0], b = idx.shape[1], d = x0.shape[0]
    cdef Py_ssize_t k, s, c, h, q, j, lab
    cdef Py_ssize_t oW1 = 0, ob1 = H * p, oW2 = H * p + H, ob2 = H * p + H + C * H
    cdef double a, mx, tot, lr, nrm, delta
    cdef double inv_b = 1.0 / b
    if d != ob2 + C:
        raise ValueError(f"parameter dim {d} does not match mlp({p}, {H}, {C})")
    x = np.array(x0, dtype=np.float64, copy=True)
    g = np.zeros(d, dtype=np.float64)
    hid = np.zeros(H, dtype=np.float64)
    dh = np.zeros(H, dtype=np.float64)
    out = np.zeros(C, dtype=np.float64)
    cdef f64[::1] xv = x
    cdef f64[::1] gv = g
    cdef f64[::1] hv = hid
    cdef f64[::1] dhv = dh
    cdef f64[::1] ov = out
    cdef bint record = path is not None
    if record:
        path[0, :] = xv
    nrm = _norm_sq(xv)
    with nogil:
        for k in range(K):
            for c in range(d):
                gv[c] = 0.0
            for s in range(b):
                j = idx[k, s]
                lab = y[j]
                for h in range(H):
                    a = xv[ob1 + h]
                    for c in range(p):
                        a = a + xv[oW1 + h * p + c] * X[j, c]
                    hv[h] = tanh(a)
                mx = -1e300
                for q in range(C):
                    a = xv[ob2 + q]
                    for h in range(H):
                        a = a + xv[oW2 + q * H + h] * hv[h]
                    ov[q] = a
                    if a > mx:
                        mx = a
                tot = 0.0
                for q in range(C):
                    ov[q] = exp(ov[q] - mx)
                    tot = tot + ov[q]
                for h in range(H):
                    dhv[h] = 0.0
                for q in range(C):
                    delta = ov[q] / tot
                    if q == lab:
                        delta = delta - 1.0
                    gv[ob2 + q] = gv[ob2 + q] + delta
                    for h in range(H):
                        gv[oW2 + q * H + h] = gv[oW2 + q * H + h] + delta * hv[h]
                        dhv[h] = dhv[h] + delta * xv[oW2 + q * H + h]
                for h in range(H):
                    a = dhv[h] * (1.0 - hv[h] * hv[h])
                    gv[ob1 + h] = gv[ob1 + h] + a
                    for c in range(p):
                        gv[oW1 + h * p + c] = gv[oW1 + h * p + c] + a * X[j, c]
            lr = lrs[k]
            for c in range(d):
                xv[c] = xv[c] - lr * (gv[c] * inv_b) - prox * (xv[c] - x0[c])
            if record:
                for c in range(d):
                    path[k + 1, c] = xv[c]
            nrm = _norm_sq(xv)
            if not nrm <= max_norm * max_norm:
                with gil:
                    return x, k, sqrt(nrm)
    return x, -1, sqrt(nrm)
