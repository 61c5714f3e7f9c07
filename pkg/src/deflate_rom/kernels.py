"""Backend selection for the per-node hot kernels.

The compiled extension ``_kernels`` is used when it imports; otherwise, or
when ``DEFLATE_ROM_KERNELS=python`` is set, the numpy fallback is used.
``use_backend`` switches at runtime (tests and the benchmark compare both).
"""

import os

import numpy as np
import scipy.sparse as sp

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

__all__ = ["NodeStack", "BACKEND", "available_backends", "use_backend", "backend"]

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

if os.environ.get("DEFLATE_ROM_KERNELS", "").lower() == "python" or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "cython"
_impl = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return BACKEND


def use_backend(name):
    """Select ``"cython"`` or ``"python"`` for all subsequent kernel calls."""
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}")
    BACKEND = name
    _impl = _BACKENDS[name]


class NodeStack:
    """Node matrices ``A_q`` packed for the kernels.

    All-dense families are stored as one contiguous ``(n_nodes, n, n)``
    array; anything sparse is stored as a row-stacked CSR triple.
    """

    def __init__(self, matrices):
        matrices = list(matrices)
        self.n_nodes = len(matrices)
        self.dense = not any(sp.issparse(m) for m in matrices)
        if self.dense:
            self.array = np.ascontiguousarray(np.stack([np.asarray(m, dtype=float) for m in matrices]))
            self.n = self.array.shape[2]
            return
        stacked = sp.vstack([sp.csr_matrix(m) for m in matrices], format="csr")
        stacked.sort_indices()
        self.n = stacked.shape[1]
        self.indptr = np.ascontiguousarray(stacked.indptr, dtype=np.intp)
        self.indices = np.ascontiguousarray(stacked.indices, dtype=np.intp)
        self.data = np.ascontiguousarray(stacked.data, dtype=float)

    def _csr(self):
        return self.indptr, self.indices, self.data

    def matvec(self, z):
        """Rows ``A_q @ z`` for every node, shape ``(n_nodes, n)``."""
        z = np.ascontiguousarray(z, dtype=float)
        if self.dense:
            # one BLAS gemv beats the compiled loop here
            return _kernels_py.dense_stack_matvec(self.array, z)
        return _impl.stack_matvec(*self._csr(), z, self.n_nodes)

    def field_matvec(self, V):
        """Rows ``A_q @ V[q]``, shape ``(n_nodes, n)``."""
        V = np.ascontiguousarray(V, dtype=float)
        if self.dense:
            return _impl.dense_field_matvec(self.array, V)
        return _impl.field_matvec(*self._csr(), V)

    def rank1_value(self, F, weights, z):
        z = np.ascontiguousarray(z, dtype=float)
        if self.dense:
            return float(_impl.dense_rank1_value(self.array, F, weights, z))
        return float(_impl.rank1_value(*self._csr(), F, weights, z))

    def rank1_value_grad(self, F, weights, z):
        z = np.ascontiguousarray(z, dtype=float)
        if self.dense:
            value, grad = _impl.dense_rank1_value_grad(self.array, F, weights, z)
        else:
            value, grad = _impl.rank1_value_grad(*self._csr(), F, weights, z)
        return float(value), np.asarray(grad)
