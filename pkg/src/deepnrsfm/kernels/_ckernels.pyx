# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; semantics match ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()


def bst_forward(const double[:, :, ::1] x, const double[::1] lam):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], m = x.shape[2]
    cdef Py_ssize_t i, j, c
    cdef double s, nrm, sc, big, y
    out_arr = np.empty((n, k, m))
    norms_arr = np.empty((n, k))
    scale_arr = np.empty((n, k))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] norms = norms_arr
    cdef double[:, ::1] scale = scale_arr
    with nogil:
        for i in range(n):
            for j in range(k):
                big = 0.0
                for c in range(m):
                    if fabs(x[i, j, c]) > big:
                        big = fabs(x[i, j, c])
                s = 0.0
                if big > 0.0:
                    for c in range(m):
                        y = x[i, j, c] / big
                        s = s + y * y
                nrm = big * sqrt(s)
                norms[i, j] = nrm
                if nrm > lam[j]:
                    sc = 1.0 - lam[j] / nrm
                else:
                    sc = 0.0
                scale[i, j] = sc
                for c in range(m):
                    out[i, j, c] = x[i, j, c] * sc
    return out_arr, norms_arr, scale_arr


def bst_backward(const double[:, :, ::1] x, const double[::1] lam,
                 const double[:, ::1] norms, const double[:, :, ::1] g):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], m = x.shape[2]
    cdef Py_ssize_t i, j, c
    cdef double nrm, ug, sc, coef
    gx_arr = np.zeros((n, k, m))
    glam_arr = np.zeros(k)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[::1] glam = glam_arr
    with nogil:
        for i in range(n):
            for j in range(k):
                nrm = norms[i, j]
                if nrm <= lam[j]:
                    continue
                ug = 0.0
                for c in range(m):
                    ug = ug + (x[i, j, c] / nrm) * g[i, j, c]
                sc = 1.0 - lam[j] / nrm
                coef = (lam[j] / nrm) * ug
                for c in range(m):
                    gx[i, j, c] = g[i, j, c] * sc + coef * (x[i, j, c] / nrm)
                glam[j] = glam[j] - ug
    return gx_arr, glam_arr


def persp_dtilde_forward(const double[:, ::1] dsharp, const double[:, ::1] u,
                         const double[:, ::1] v, const double[:, ::1] m):
    cdef Py_ssize_t n = u.shape[0], p = u.shape[1], k3 = dsharp.shape[1]
    cdef Py_ssize_t b, i, j, c
    cdef double nvis, w
    out_arr = np.zeros((n, 2 * p, 3 * k3))
    occ_arr = np.empty(k3)
    cu_arr = np.empty(k3)
    cv_arr = np.empty(k3)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] occ = occ_arr
    cdef double[::1] cu = cu_arr
    cdef double[::1] cv = cv_arr
    with nogil:
        for b in range(n):
            nvis = 0.0
            for j in range(p):
                nvis = nvis + m[b, j]
            for c in range(k3):
                occ[c] = 0.0
                cu[c] = 0.0
                cv[c] = 0.0
            for j in range(p):
                w = (1.0 - m[b, j]) / nvis
                for c in range(k3):
                    occ[c] = occ[c] + w * dsharp[j, c]
                w = m[b, j] * u[b, j] / nvis
                for c in range(k3):
                    cu[c] = cu[c] + w * dsharp[j, c]
                w = m[b, j] * v[b, j] / nvis
                for c in range(k3):
                    cv[c] = cv[c] + w * dsharp[j, c]
            for i in range(p):
                for c in range(k3):
                    out[b, 2 * i, c] = dsharp[i, c] + occ[c]
                    out[b, 2 * i + 1, k3 + c] = dsharp[i, c] + occ[c]
                    out[b, 2 * i, 2 * k3 + c] = -u[b, i] * dsharp[i, c] + cu[c]
                    out[b, 2 * i + 1, 2 * k3 + c] = -v[b, i] * dsharp[i, c] + cv[c]
    return out_arr


def persp_dtilde_backward(const double[:, :, ::1] g, const double[:, ::1] u,
                          const double[:, ::1] v, const double[:, ::1] m):
    cdef Py_ssize_t n = u.shape[0], p = u.shape[1], k3 = g.shape[2] // 3
    cdef Py_ssize_t b, i, c
    cdef double nvis, wa, wu, wv
    out_arr = np.zeros((p, k3))
    sa_arr = np.empty(k3)
    su_arr = np.empty(k3)
    sv_arr = np.empty(k3)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] sa = sa_arr
    cdef double[::1] su = su_arr
    cdef double[::1] sv = sv_arr
    with nogil:
        for b in range(n):
            nvis = 0.0
            for i in range(p):
                nvis = nvis + m[b, i]
            for c in range(k3):
                sa[c] = 0.0
                su[c] = 0.0
                sv[c] = 0.0
            for i in range(p):
                for c in range(k3):
                    sa[c] = sa[c] + g[b, 2 * i, c] + g[b, 2 * i + 1, k3 + c]
                    su[c] = su[c] + g[b, 2 * i, 2 * k3 + c]
                    sv[c] = sv[c] + g[b, 2 * i + 1, 2 * k3 + c]
            for i in range(p):
                wa = (1.0 - m[b, i]) / nvis
                wu = m[b, i] * u[b, i] / nvis
                wv = m[b, i] * v[b, i] / nvis
                for c in range(k3):
                    out[i, c] = (out[i, c] + g[b, 2 * i, c] + g[b, 2 * i + 1, k3 + c]
                                 + wa * sa[c] + wu * su[c] + wv * sv[c]
                                 - u[b, i] * g[b, 2 * i, 2 * k3 + c]
                                 - v[b, i] * g[b, 2 * i + 1, 2 * k3 + c])
    return out_arr
