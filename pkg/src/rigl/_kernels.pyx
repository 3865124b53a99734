# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for fully-connected layers stored as row-major CSR.

The weight matrix has shape (n_in, n_out); row ``i`` lists the active
output columns of input unit ``i``.  All loops run in a fixed order so
results are reproducible run to run.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def spmm(const double[:, ::1] x, const cnp.int64_t[::1] indptr,
         const cnp.int64_t[::1] cols, const double[::1] data, Py_ssize_t n_out):
    """out = x @ W for a CSR weight matrix."""
    cdef Py_ssize_t batch = x.shape[0], n_in = x.shape[1]
    cdef Py_ssize_t b, i, p
    cdef double xi
    out = np.zeros((batch, n_out), dtype=np.float64)
    cdef double[:, ::1] o = out
    for b in range(batch):
        for i in range(n_in):
            xi = x[b, i]
            if xi == 0.0:
                continue
            for p in range(indptr[i], indptr[i + 1]):
                o[b, cols[p]] += xi * data[p]
    return out


def spmm_t(const double[:, ::1] dz, const cnp.int64_t[::1] indptr,
           const cnp.int64_t[::1] cols, const double[::1] data, Py_ssize_t n_in):
    """dx = dz @ W.T for a CSR weight matrix."""
    cdef Py_ssize_t batch = dz.shape[0]
    cdef Py_ssize_t b, i, p
    cdef double acc
    out = np.zeros((batch, n_in), dtype=np.float64)
    cdef double[:, ::1] o = out
    for b in range(batch):
        for i in range(n_in):
            acc = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                acc += data[p] * dz[b, cols[p]]
            o[b, i] = acc
    return out


def sddmm(const double[:, ::1] xt, const double[:, ::1] dzt,
          const cnp.int64_t[::1] rows, const cnp.int64_t[::1] cols):
    """g[p] = sum_b x[b, rows[p]] * dz[b, cols[p]], with x and dz transposed."""
    cdef Py_ssize_t nnz = rows.shape[0], batch = xt.shape[1]
    cdef Py_ssize_t p, b, r, c
    cdef double acc
    out = np.empty(nnz, dtype=np.float64)
    cdef double[::1] g = out
    for p in range(nnz):
        r = rows[p]
        c = cols[p]
        acc = 0.0
        for b in range(batch):
            acc += xt[r, b] * dzt[c, b]
        g[p] = acc
    return out
