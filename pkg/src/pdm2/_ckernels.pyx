# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (see _pykernels for the contracts)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, fabs, M_PI

cnp.import_array()


def xcorr(w, r, Py_ssize_t j_min, Py_ssize_t j_max):
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef Py_ssize_t n = rv.shape[0]
    cdef Py_ssize_t m = j_max - j_min + 1
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t j = 0, k
    cdef double acc, a0, a1, a2, a3, rk
    cdef const double* wp
    # four lags per pass: independent accumulators, each summed in k order
    while j + 4 <= m:
        a0 = a1 = a2 = a3 = 0.0
        wp = &wv[j_min + j]
        for k in range(n):
            rk = rv[k]
            a0 += rk * wp[k]
            a1 += rk * wp[k + 1]
            a2 += rk * wp[k + 2]
            a3 += rk * wp[k + 3]
        ov[j] = a0
        ov[j + 1] = a1
        ov[j + 2] = a2
        ov[j + 3] = a3
        j += 4
    while j < m:
        acc = 0.0
        for k in range(n):
            acc += rv[k] * wv[j_min + j + k]
        ov[j] = acc
        j += 1
    return out


def window_features(x, Py_ssize_t window_len, Py_ssize_t n_coefs,
                    Py_ssize_t first_coef, bint normalize):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t n_win = n - window_len + 1
    cdef Py_ssize_t c, t, s, m
    ctab = np.empty((n_coefs, window_len))
    stab = np.empty((n_coefs, window_len))
    cdef double[:, ::1] cv = ctab
    cdef double[:, ::1] sv = stab
    cdef double ang
    for c in range(n_coefs):
        m = first_coef + c
        for t in range(window_len):
            # reduce the index first so the argument stays small
            ang = 2.0 * M_PI * ((m * t) % window_len) / window_len
            cv[c, t] = cos(ang)
            sv[c, t] = -sin(ang)
    out = np.empty((n_win, 2 * n_coefs))
    cdef double[:, ::1] ov = out
    cdef double mu, var, sd, re, im, val
    cdef bint flat
    for s in range(n_win):
        mu = 0.0
        sd = 1.0
        flat = False
        if normalize:
            for t in range(window_len):
                mu += xv[s + t]
            mu /= window_len
            var = 0.0
            for t in range(window_len):
                val = xv[s + t] - mu
                var += val * val
            sd = sqrt(var / window_len)
            flat = sd <= 1e-12 * fabs(mu)  # relative, so scale invariant
        for c in range(n_coefs):
            re = 0.0
            im = 0.0
            if not flat:
                for t in range(window_len):
                    val = (xv[s + t] - mu) / sd
                    re += val * cv[c, t]
                    im += val * sv[c, t]
            ov[s, 2 * c] = re
            ov[s, 2 * c + 1] = im
    return out


def bag_distances(q_codes, q_counts, indptr, codes, counts):
    cdef const cnp.int64_t[::1] qc = np.ascontiguousarray(q_codes, dtype=np.int64)
    cdef const cnp.int64_t[::1] qn = np.ascontiguousarray(q_counts, dtype=np.int64)
    cdef const cnp.int64_t[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const cnp.int64_t[::1] bc = np.ascontiguousarray(codes, dtype=np.int64)
    cdef const cnp.int64_t[::1] bn = np.ascontiguousarray(counts, dtype=np.int64)
    cdef Py_ssize_t n_bags = ip.shape[0] - 1
    cdef Py_ssize_t nq = qc.shape[0]
    out = np.empty(n_bags, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    cdef Py_ssize_t b, i, p, end
    cdef cnp.int64_t acc, diff
    for b in range(n_bags):
        acc = 0
        p = ip[b]
        end = ip[b + 1]
        for i in range(nq):
            while p < end and bc[p] < qc[i]:
                p += 1
            if p < end and bc[p] == qc[i]:
                diff = qn[i] - bn[p]
            else:
                diff = qn[i]
            acc += diff * diff
        ov[b] = acc
    return out
