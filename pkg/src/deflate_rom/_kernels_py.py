"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures; the row-stacked CSR arrays are re-wrapped as a scipy matrix
(cached per ``data`` buffer) so each call is a single sparse product.
"""

import numpy as np
import scipy.sparse as sp

_cache = {}


def _stacked(indptr, indices, data, n):
    key = (id(data), id(indices), id(indptr), n)
    hit = _cache.get(key)
    if hit is not None and hit[0] is data:
        return hit[1]
    mat = sp.csr_matrix((data, indices, indptr), shape=(indptr.shape[0] - 1, n))
    if len(_cache) > 64:
        _cache.clear()
    _cache[key] = (data, mat)
    return mat


def stack_matvec(indptr, indices, data, z, n_nodes):
    n = z.shape[0]
    return (_stacked(indptr, indices, data, n) @ z).reshape(n_nodes, n)


def _block_diagonal(indptr, indices, data, n):
    key = ("bd", id(data), id(indices), id(indptr), n)
    hit = _cache.get(key)
    if hit is not None and hit[0] is data:
        return hit[1]
    rows = indptr.shape[0] - 1
    per_node = np.add.reduceat(np.diff(indptr), np.arange(0, rows, n))
    shift = np.repeat(np.arange(rows // n) * n, per_node)
    mat = sp.csr_matrix((data, indices + shift, indptr), shape=(rows, rows))
    _cache[key] = (data, mat)
    return mat


def field_matvec(indptr, indices, data, V):
    n_nodes, n = V.shape
    mat = _block_diagonal(indptr, indices, data, n)
    return (mat @ V.ravel()).reshape(n_nodes, n)


def rank1_value(indptr, indices, data, F, weights, z):
    n_nodes, n = F.shape
    Az = (_stacked(indptr, indices, data, n) @ z).reshape(n_nodes, n)
    num = F @ z
    den = Az @ z
    return float(np.sum(weights * num * num / den))


def rank1_value_grad(indptr, indices, data, F, weights, z):
    n_nodes, n = F.shape
    Az = (_stacked(indptr, indices, data, n) @ z).reshape(n_nodes, n)
    num = F @ z
    den = Az @ z
    ratio = num / den
    value = float(np.sum(weights * num * ratio))
    c1 = 2.0 * weights * ratio
    grad = c1 @ F - (c1 * ratio) @ Az
    return value, grad


def dense_stack_matvec(A, z):
    n_nodes, n, _ = A.shape
    return (A.reshape(n_nodes * n, n) @ z).reshape(n_nodes, n)


def dense_field_matvec(A, V):
    return np.einsum("qij,qj->qi", A, V)


def dense_rank1_value(A, F, weights, z):
    Az = dense_stack_matvec(A, z)
    num = F @ z
    den = Az @ z
    return float(np.sum(weights * num * num / den))


def dense_rank1_value_grad(A, F, weights, z):
    Az = dense_stack_matvec(A, z)
    num = F @ z
    den = Az @ z
    ratio = num / den
    value = float(np.sum(weights * num * ratio))
    c1 = 2.0 * weights * ratio
    grad = c1 @ F - (c1 * ratio) @ Az
    return value, grad
