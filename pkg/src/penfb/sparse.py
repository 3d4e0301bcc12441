"""Compressed sparse row matrices for projection operators.

The CSR triplet is the stored representation; products go through
:mod:`scipy.sparse`, which reads the same arrays without copying.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InputError


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple
    _csr: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=float)
        rows, cols = (int(s) for s in self.shape)
        if indptr.shape != (rows + 1,) or indptr[0] != 0 or indptr[-1] != data.size:
            raise InputError("row offsets inconsistent with shape/nnz")
        if np.any(np.diff(indptr) < 0):
            raise InputError("row offsets must be nondecreasing")
        if indices.size != data.size:
            raise InputError("indices and values differ in length")
        if indices.size and (indices.min() < 0 or indices.max() >= cols):
            raise InputError("column index out of range")
        if not np.all(np.isfinite(data)):
            raise InputError("non-finite matrix value")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "shape", (rows, cols))
        object.__setattr__(
            self, "_csr", sp.csr_matrix((data, indices, indptr), shape=(rows, cols))
        )

    @classmethod
    def from_rows(cls, rows, n_cols):
        """Build from a list of ``(col_indices, values)`` pairs, one per row."""
        indptr = [0]
        cols, vals = [], []
        for idx, val in rows:
            idx = np.asarray(idx, dtype=np.int64)
            order = np.argsort(idx, kind="stable")
            cols.append(idx[order])
            vals.append(np.asarray(val, dtype=float)[order])
            indptr.append(indptr[-1] + idx.size)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        vals = np.concatenate(vals) if vals else np.zeros(0)
        return cls(np.asarray(indptr), cols, vals, (len(rows), n_cols))

    @classmethod
    def from_dense(cls, a):
        m = sp.csr_matrix(np.asarray(a, dtype=float))
        return cls(m.indptr, m.indices, m.data, m.shape)

    @property
    def nnz(self):
        return int(self.data.size)

    @property
    def T(self):
        t = self._csr.T.tocsr()
        t.sort_indices()
        return SparseMatrix(t.indptr, t.indices, t.data, t.shape)

    def matvec(self, x):
        """``A @ x`` for ``x`` of shape ``(cols,)`` or ``(..., cols)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self._csr @ x
        flat = x.reshape(-1, x.shape[-1])
        return (self._csr @ flat.T).T.reshape(x.shape[:-1] + (self.shape[0],))

    def rmatvec(self, u):
        """``A.T @ u`` with the same batching convention as :meth:`matvec`."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return self._csr.T @ u
        flat = u.reshape(-1, u.shape[-1])
        return (self._csr.T @ flat.T).T.reshape(u.shape[:-1] + (self.shape[1],))

    def rows(self, idx):
        """Sub-matrix made of the given rows, as a scipy CSR matrix."""
        return self._csr[np.asarray(idx)]

    def to_dense(self):
        return self._csr.toarray()

    def to_scipy(self):
        return self._csr

    def frobenius(self):
        return float(np.sqrt(np.sum(self.data ** 2)))

    def coordinate_lines(self):
        """Yield ``"row col value"`` text lines in row-major order."""
        for r in range(self.shape[0]):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            for c, v in zip(self.indices[lo:hi], self.data[lo:hi]):
                yield f"{r} {int(c)} {float(v)!r}"
