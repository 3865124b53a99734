"""Dense value buffer paired with a same-shape connectivity mask."""
import numpy as np

from rigl.kernels import SparseIndex


def nonzero_budget(sparsity, n):
    """Active connections for a layer of ``n`` weights at ``sparsity``.

    Floor rounding; the small slack absorbs binary representation error
    such as ``(1 - 0.9) * 1000 = 99.99999999999997``.
    """
    return int(np.floor((1.0 - sparsity) * n + 1e-9))


class MaskedParameter:
    """Weights of one layer.

    ``values`` is always zero where ``mask`` is False.  Mutate the mask only
    through :meth:`set_mask` or :meth:`apply_update` so the cached sparse
    index stays valid.
    """

    def __init__(self, values, mask=None):
        self.values = np.array(values, dtype=np.float64, order="C")
        if mask is None:
            mask = np.ones(self.values.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.values.shape:
            raise ValueError(f"mask shape {mask.shape} != values shape {self.values.shape}")
        self.mask = mask.copy()
        self.values[~self.mask] = 0.0
        self._index = None
        self._flat = None
        self._nnz = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def nnz(self):
        if self._nnz is None:
            self._nnz = int(np.count_nonzero(self.mask))
        return self._nnz

    @property
    def sparsity(self):
        return 1.0 - self.nnz / self.size

    @property
    def is_dense(self):
        return self.nnz == self.size

    def active_flat(self):
        """Sorted flat indices of active positions (cached)."""
        if self._flat is None:
            self._flat = np.flatnonzero(self.mask.reshape(-1)).astype(np.int64)
        return self._flat

    def sparse_index(self):
        """CSR index of a 2-D mask, cached until the mask changes."""
        if self._index is None:
            self._index = SparseIndex.from_mask(self.mask.reshape(self.shape[0], -1))
        return self._index

    def set_mask(self, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.shape:
            raise ValueError(f"mask shape {mask.shape} != {self.shape}")
        self.mask = mask.copy()
        self.values[~self.mask] = 0.0
        self._index = None
        self._flat = None
        self._nnz = None

    def apply_update(self, drop, grow):
        """Deactivate flat indices ``drop``, then activate ``grow`` at value 0."""
        m = self.mask.reshape(-1)
        v = self.values.reshape(-1)
        m[drop] = False
        v[drop] = 0.0
        m[grow] = True
        v[grow] = 0.0
        self._index = None
        self._flat = None
        self._nnz = None

    def copy(self):
        return MaskedParameter(self.values, self.mask)

    def __repr__(self):
        return f"MaskedParameter(shape={self.shape}, nnz={self.nnz}, sparsity={self.sparsity:.4f})"
