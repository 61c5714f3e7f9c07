# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-node kernels over a packed operator family.

Sparse families are stored as one CSR matrix of shape ``(n_nodes * n, n)``
whose row block ``q`` is the node matrix ``A_q``.  All reductions over nodes
run in node order so results are reproducible.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.intp_t idx_t


cdef inline double _row_dot(const idx_t[::1] indptr, const idx_t[::1] indices,
                            const double[::1] data, Py_ssize_t row,
                            const double[::1] z) noexcept nogil:
    cdef double acc = 0.0
    cdef idx_t p
    for p in range(indptr[row], indptr[row + 1]):
        acc += data[p] * z[indices[p]]
    return acc


def stack_matvec(const idx_t[::1] indptr, const idx_t[::1] indices,
                 const double[::1] data, const double[::1] z, Py_ssize_t n_nodes):
    """Return ``(n_nodes, n)`` array whose row q is ``A_q @ z``."""
    cdef Py_ssize_t n = z.shape[0]
    out = np.empty((n_nodes, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t q, i
    with nogil:
        for q in range(n_nodes):
            for i in range(n):
                o[q, i] = _row_dot(indptr, indices, data, q * n + i, z)
    return out


def field_matvec(const idx_t[::1] indptr, const idx_t[::1] indices,
                 const double[::1] data, const double[:, ::1] V):
    """Return ``(n_nodes, n)`` array whose row q is ``A_q @ V[q]``."""
    cdef Py_ssize_t n_nodes = V.shape[0]
    cdef Py_ssize_t n = V.shape[1]
    out = np.empty((n_nodes, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t q, i
    with nogil:
        for q in range(n_nodes):
            for i in range(n):
                o[q, i] = _row_dot(indptr, indices, data, q * n + i, V[q])
    return out


def rank1_value(const idx_t[::1] indptr, const idx_t[::1] indices,
                const double[::1] data, const double[:, ::1] F,
                const double[::1] weights, const double[::1] z):
    """Return ``sum_q w_q <f_q, z>^2 / (z^T A_q z)``."""
    cdef Py_ssize_t n_nodes = F.shape[0]
    cdef Py_ssize_t n = F.shape[1]
    cdef Py_ssize_t q, i
    cdef double num, den, total = 0.0
    with nogil:
        for q in range(n_nodes):
            num = 0.0
            den = 0.0
            for i in range(n):
                num += F[q, i] * z[i]
                den += z[i] * _row_dot(indptr, indices, data, q * n + i, z)
            total += weights[q] * num * num / den
    return total


def rank1_value_grad(const idx_t[::1] indptr, const idx_t[::1] indices,
                     const double[::1] data, const double[:, ::1] F,
                     const double[::1] weights, const double[::1] z):
    """Return ``(J, grad)`` for the rank-one objective in one fused pass."""
    cdef Py_ssize_t n_nodes = F.shape[0]
    cdef Py_ssize_t n = F.shape[1]
    grad_arr = np.zeros(n)
    az_arr = np.empty(n)
    cdef double[::1] grad = grad_arr
    cdef double[::1] az = az_arr
    cdef Py_ssize_t q, i
    cdef double num, den, ratio, c1, c2, total = 0.0
    with nogil:
        for q in range(n_nodes):
            num = 0.0
            den = 0.0
            for i in range(n):
                az[i] = _row_dot(indptr, indices, data, q * n + i, z)
                num += F[q, i] * z[i]
                den += z[i] * az[i]
            ratio = num / den
            total += weights[q] * num * ratio
            c1 = 2.0 * weights[q] * ratio
            c2 = c1 * ratio
            for i in range(n):
                grad[i] += c1 * F[q, i] - c2 * az[i]
    return total, grad_arr


# Dense variants: the stack is a C-contiguous (n_nodes, n, n) array.

cdef inline double _dot(const double* a, const double* z, Py_ssize_t n) noexcept nogil:
    # four independent accumulators let the compiler pipeline the loop
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t j = 0
    while j + 4 <= n:
        s0 += a[j] * z[j]
        s1 += a[j + 1] * z[j + 1]
        s2 += a[j + 2] * z[j + 2]
        s3 += a[j + 3] * z[j + 3]
        j += 4
    while j < n:
        s0 += a[j] * z[j]
        j += 1
    return (s0 + s1) + (s2 + s3)


cdef inline double _dense_row_dot(const double[:, :, ::1] A, Py_ssize_t q, Py_ssize_t i,
                                  const double[::1] z) noexcept nogil:
    return _dot(&A[q, i, 0], &z[0], z.shape[0])


def dense_stack_matvec(const double[:, :, ::1] A, const double[::1] z):
    cdef Py_ssize_t n_nodes = A.shape[0]
    cdef Py_ssize_t n = A.shape[1]
    out = np.empty((n_nodes, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t q, i
    with nogil:
        for q in range(n_nodes):
            for i in range(n):
                o[q, i] = _dense_row_dot(A, q, i, z)
    return out


def dense_field_matvec(const double[:, :, ::1] A, const double[:, ::1] V):
    cdef Py_ssize_t n_nodes = A.shape[0]
    cdef Py_ssize_t n = A.shape[1]
    out = np.empty((n_nodes, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t q, i
    with nogil:
        for q in range(n_nodes):
            for i in range(n):
                o[q, i] = _dense_row_dot(A, q, i, V[q])
    return out


def dense_rank1_value(const double[:, :, ::1] A, const double[:, ::1] F,
                      const double[::1] weights, const double[::1] z):
    cdef Py_ssize_t n_nodes = F.shape[0]
    cdef Py_ssize_t n = F.shape[1]
    cdef Py_ssize_t q, i
    cdef double num, den, total = 0.0
    with nogil:
        for q in range(n_nodes):
            num = 0.0
            den = 0.0
            for i in range(n):
                num += F[q, i] * z[i]
                den += z[i] * _dense_row_dot(A, q, i, z)
            total += weights[q] * num * num / den
    return total


def dense_rank1_value_grad(const double[:, :, ::1] A, const double[:, ::1] F,
                           const double[::1] weights, const double[::1] z):
    cdef Py_ssize_t n_nodes = F.shape[0]
    cdef Py_ssize_t n = F.shape[1]
    grad_arr = np.zeros(n)
    az_arr = np.empty(n)
    cdef double[::1] grad = grad_arr
    cdef double[::1] az = az_arr
    cdef Py_ssize_t q, i
    cdef double num, den, ratio, c1, c2, total = 0.0
    with nogil:
        for q in range(n_nodes):
            num = 0.0
            den = 0.0
            for i in range(n):
                az[i] = _dense_row_dot(A, q, i, z)
                num += F[q, i] * z[i]
                den += z[i] * az[i]
            ratio = num / den
            total += weights[q] * num * ratio
            c1 = 2.0 * weights[q] * ratio
            c2 = c1 * ratio
            for i in range(n):
                grad[i] += c1 * F[q, i] - c2 * az[i]
    return total, grad_arr
