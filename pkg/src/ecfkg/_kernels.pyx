# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernel. Same contract as ``_pykernels.sgd_batches``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log1p, sqrt

NAME = "cython"

cdef double CLAMP = 30.0


cdef inline double _clamp(double x) noexcept nogil:
    if x > CLAMP:
        return CLAMP
    if x < -CLAMP:
        return -CLAMP
    return x


cdef inline Py_ssize_t _slot(cnp.int64_t row, cnp.int64_t[::1] slot, cnp.int64_t[::1] rows,
                             Py_ssize_t *count) noexcept nogil:
    cdef Py_ssize_t s = slot[row]
    if s < 0:
        s = count[0]
        slot[row] = s
        rows[s] = row
        count[0] += 1
    return s


def sgd_batches(floating[:, ::1] E, floating[:, ::1] R,
                const cnp.int64_t[::1] heads, const cnp.int64_t[::1] rels,
                const cnp.int64_t[::1] tails, const cnp.int64_t[:, ::1] negs,
                const cnp.int64_t[::1] order, Py_ssize_t batch_size,
                double lr0, double lr1, Py_ssize_t step0, Py_ssize_t total_steps,
                double clip, Py_ssize_t b_start, Py_ssize_t b_stop):
    """Run batches ``[b_start, b_stop)`` of one epoch in place; return summed loss."""
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t d = E.shape[1]
    cdef Py_ssize_t k = negs.shape[1]
    cdef Py_ssize_t max_rows = batch_size * (k + 2)
    cdef Py_ssize_t n_rel = R.shape[0]

    cdef cnp.int64_t[::1] slot = np.full(E.shape[0], -1, dtype=np.int64)
    cdef cnp.int64_t[::1] rows = np.empty(max_rows, dtype=np.int64)
    cdef double[:, ::1] G = np.zeros((max_rows, d))
    cdef cnp.int64_t[::1] rslot = np.full(n_rel, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] rrows = np.empty(n_rel, dtype=np.int64)
    cdef double[:, ::1] GR = np.zeros((n_rel, d))
    cdef double[::1] query = np.empty(d)
    cdef double[::1] hgrad = np.empty(d)

    cdef Py_ssize_t b, p, q, c, i, s, start, stop, n_rows, n_rrows
    cdef cnp.int64_t j, h, r, t, neg, row
    cdef double x, coef, norm2, scale, a, loss = 0.0

    with nogil:
        for b in range(b_start, b_stop):
            start = b * batch_size
            stop = start + batch_size
            if stop > n:
                stop = n
            n_rows = 0
            n_rrows = 0
            for p in range(start, stop):
                j = order[p]
                h = heads[j]
                r = rels[j]
                t = tails[j]
                for c in range(d):
                    query[c] = <double>E[h, c] + <double>R[r, c]
                    hgrad[c] = 0.0
                x = 0.0
                for c in range(d):
                    x = x + <double>E[t, c] * query[c]
                x = _clamp(x)
                loss += log1p(exp(-x))
                coef = 1.0 / (1.0 + exp(x))
                s = _slot(t, slot, rows, &n_rows)
                for c in range(d):
                    G[s, c] -= coef * query[c]
                    hgrad[c] -= coef * <double>E[t, c]
                for q in range(k):
                    neg = negs[j, q]
                    x = 0.0
                    for c in range(d):
                        x = x + <double>E[neg, c] * query[c]
                    x = _clamp(x)
                    loss += log1p(exp(x))
                    coef = 1.0 / (1.0 + exp(-x))
                    s = _slot(neg, slot, rows, &n_rows)
                    for c in range(d):
                        G[s, c] += coef * query[c]
                        hgrad[c] += coef * <double>E[neg, c]
                s = _slot(h, slot, rows, &n_rows)
                for c in range(d):
                    G[s, c] += hgrad[c]
                s = _slot(r, rslot, rrows, &n_rrows)
                for c in range(d):
                    GR[s, c] += hgrad[c]

            norm2 = 0.0
            for i in range(n_rows):
                for c in range(d):
                    norm2 = norm2 + G[i, c] * G[i, c]
            for i in range(n_rrows):
                for c in range(d):
                    norm2 = norm2 + GR[i, c] * GR[i, c]
            scale = 1.0
            if sqrt(norm2) > clip:
                scale = clip / sqrt(norm2)
            a = (lr0 + (lr1 - lr0) * (step0 + b) / <double>total_steps) * scale

            for i in range(n_rows):
                row = rows[i]
                for c in range(d):
                    E[row, c] = <floating>(E[row, c] - a * G[i, c])
                    G[i, c] = 0.0
                slot[row] = -1
            for i in range(n_rrows):
                row = rrows[i]
                for c in range(d):
                    R[row, c] = <floating>(R[row, c] - a * GR[i, c])
                    GR[i, c] = 0.0
                rslot[row] = -1
    return loss
