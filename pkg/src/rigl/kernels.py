"""Sparse fully-connected kernels with a compiled core and a numpy fallback.

``BACKEND`` is ``"compiled"`` when the Cython extension imported, otherwise
``"numpy"``.  Setting ``RIGL_KERNELS=numpy`` forces the fallback.  Both
implementations take the same CSR description of a ``(n_in, n_out)``
weight matrix and agree to floating-point rounding.
"""
import os
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SparseIndex:
    """Row-major positions of the active entries of a 2-D mask."""

    shape: tuple
    flat: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    indptr: np.ndarray

    @classmethod
    def from_mask(cls, mask):
        n_in, n_out = mask.shape
        flat = np.flatnonzero(mask.reshape(-1)).astype(np.int64)
        rows = flat // n_out
        cols = flat % n_out
        indptr = np.zeros(n_in + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_in), out=indptr[1:])
        return cls((n_in, n_out), flat, rows, cols, indptr)

    @property
    def nnz(self):
        return self.flat.size


def _dense(index, data):
    w = np.zeros(index.shape[0] * index.shape[1])
    w[index.flat] = data
    return w.reshape(index.shape)


class _NumpyKernels:
    name = "numpy"

    @staticmethod
    def spmm(x, index, data):
        return x @ _dense(index, data)

    @staticmethod
    def spmm_t(dz, index, data):
        return dz @ _dense(index, data).T

    @staticmethod
    def sddmm(x, dz, index):
        return (x.T @ dz).reshape(-1)[index.flat]


class _CompiledKernels:
    name = "compiled"

    def __init__(self, module):
        self._m = module

    def spmm(self, x, index, data):
        return self._m.spmm(np.ascontiguousarray(x), index.indptr, index.cols,
                            np.ascontiguousarray(data), index.shape[1])

    def spmm_t(self, dz, index, data):
        return self._m.spmm_t(np.ascontiguousarray(dz), index.indptr, index.cols,
                              np.ascontiguousarray(data), index.shape[0])

    def sddmm(self, x, dz, index):
        return self._m.sddmm(np.ascontiguousarray(x.T), np.ascontiguousarray(dz.T),
                             index.rows, index.cols)


numpy_kernels = _NumpyKernels()
compiled_kernels = None
try:
    from rigl import _kernels as _ext

    compiled_kernels = _CompiledKernels(_ext)
except ImportError:  # extension not built
    _ext = None

if compiled_kernels is not None and os.environ.get("RIGL_KERNELS", "") != "numpy":
    active = compiled_kernels
else:
    active = numpy_kernels

BACKEND = active.name
