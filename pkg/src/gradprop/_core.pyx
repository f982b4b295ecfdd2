# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched forward/backward for layered rectifier/linear networks.

Same layout and contract as ``gradprop._fallback``. Layer products go through
the BLAS ``dgemm`` that SciPy links against; gating, bias and the layer walk are
fused here so no temporaries are allocated per layer.

Row-major ``(r, c)`` blocks are handed to the column-major BLAS as their
``(c, r)`` transposes.
"""
import numpy as np
from scipy.linalg.cython_blas cimport dgemm

BACKEND = "cython"


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double alpha,
                       const double* a, int lda, const double* b, int ldb, double beta,
                       double* c, int ldc) noexcept nogil:
    dgemm(&ta, &tb, &m, &n, &k, &alpha, <double*>a, &lda, <double*>b, &ldb, &beta, c, &ldc)


cdef void _forward(const double[::1] params, const long[::1] sizes,
                   const unsigned char[::1] relu, const double[:, ::1] X,
                   double[:, ::1] pre, double[:, ::1] act) noexcept nogil:
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t L = sizes.shape[0] - 1
    cdef int ld = <int>pre.shape[1]
    cdef Py_ssize_t b, k, j, fi, fo, p = 0, u = 0, u_prev = 0
    cdef const double* a_in
    cdef int lda_in
    cdef double z
    for k in range(L):
        fi = sizes[k]
        fo = sizes[k + 1]
        for b in range(B):
            for j in range(fo):
                pre[b, u + j] = params[p + j * (fi + 1) + fi]
        if k == 0:
            a_in = &X[0, 0]
            lda_in = <int>fi
        else:
            a_in = &act[0, u_prev]
            lda_in = ld
        # pre[:, u:u+fo] += a_in @ W[:, :fi].T
        _gemm(b'T', b'N', <int>fo, <int>B, <int>fi, 1.0, &params[p], <int>(fi + 1),
              a_in, lda_in, 1.0, &pre[0, u], ld)
        for b in range(B):
            for j in range(fo):
                z = pre[b, u + j]
                act[b, u + j] = z if (z > 0.0 or not relu[k]) else 0.0
        p += fo * (fi + 1)
        u_prev = u
        u += fo


def _total_units(const long[::1] sizes):
    cdef Py_ssize_t total = 0, k
    for k in range(1, sizes.shape[0]):
        total += sizes[k]
    return total


def forward_batch(const double[::1] params, const long[::1] sizes,
                  const unsigned char[::1] relu, const double[:, ::1] X):
    total = _total_units(sizes)
    out = np.empty((X.shape[0], total))
    scratch = np.empty((X.shape[0], total))
    cdef double[:, ::1] pre = out
    cdef double[:, ::1] act = scratch
    if X.shape[0] == 0:
        return out
    with nogil:
        _forward(params, sizes, relu, X, pre, act)
    return out


cdef void _backward(const double[::1] params, const long[::1] sizes,
                    const unsigned char[::1] relu, const double[:, ::1] X,
                    const double[:, ::1] pre, const double[:, ::1] G,
                    double[::1] grad, double[:, ::1] act, double[:, ::1] d_cur,
                    double[:, ::1] d_prev, const long[::1] p_off,
                    const long[::1] u_off) noexcept nogil:
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t L = sizes.shape[0] - 1
    cdef int ld = <int>pre.shape[1]
    cdef int ldd = <int>d_cur.shape[1]
    cdef Py_ssize_t b, k, i, j, fi, fo, row
    cdef double z, s, inv_b = 1.0 / B
    cdef const double* a_in
    cdef int lda_in
    cdef double[:, ::1] tmp
    for b in range(B):
        for i in range(ld):
            z = pre[b, i]
            act[b, i] = z
    for k in range(L - 1):
        if relu[k]:
            for b in range(B):
                for i in range(sizes[k + 1]):
                    if not (act[b, u_off[k] + i] > 0.0):
                        act[b, u_off[k] + i] = 0.0
    fo = sizes[L]
    for b in range(B):
        for j in range(fo):
            d_cur[b, j] = G[b, j]
    for k in range(L - 1, -1, -1):
        fi = sizes[k]
        fo = sizes[k + 1]
        if relu[k]:
            for b in range(B):
                for j in range(fo):
                    if not (pre[b, u_off[k] + j] > 0.0):
                        d_cur[b, j] = 0.0
        if k == 0:
            a_in = &X[0, 0]
            lda_in = <int>fi
        else:
            a_in = &act[0, u_off[k - 1]]
            lda_in = ld
        row = p_off[k]
        # grad W[:, :fi] = delta.T @ a_in / B
        _gemm(b'N', b'T', <int>fi, <int>fo, <int>B, inv_b, a_in, lda_in, &d_cur[0, 0], ldd,
              0.0, &grad[row], <int>(fi + 1))
        for j in range(fo):
            s = 0.0
            for b in range(B):
                s = s + d_cur[b, j]
            grad[row + j * (fi + 1) + fi] = s * inv_b
        if k > 0:
            # delta_prev = delta @ W[:, :fi]
            _gemm(b'N', b'N', <int>fi, <int>B, <int>fo, 1.0, &params[row], <int>(fi + 1),
                  &d_cur[0, 0], ldd, 0.0, &d_prev[0, 0], ldd)
            tmp = d_cur
            d_cur = d_prev
            d_prev = tmp


def backward_batch(const double[::1] params, const long[::1] sizes,
                   const unsigned char[::1] relu, const double[:, ::1] X,
                   const double[:, ::1] pre, const double[:, ::1] G):
    cdef Py_ssize_t L = sizes.shape[0] - 1
    cdef Py_ssize_t B = X.shape[0]
    widest = int(np.max(sizes))
    p_off = np.zeros(L, dtype=np.int64)
    u_off = np.zeros(L, dtype=np.int64)
    cdef Py_ssize_t k
    for k in range(1, L):
        p_off[k] = p_off[k - 1] + sizes[k] * (sizes[k - 1] + 1)
        u_off[k] = u_off[k - 1] + sizes[k]
    out = np.empty(params.shape[0])
    scratch = np.empty((B, pre.shape[1]))
    d_a = np.empty((B, widest))
    d_b = np.empty((B, widest))
    cdef long[::1] po = p_off
    cdef long[::1] uo = u_off
    cdef double[::1] g = out
    cdef double[:, ::1] act = scratch
    cdef double[:, ::1] dc = d_a
    cdef double[:, ::1] dp = d_b
    with nogil:
        _backward(params, sizes, relu, X, pre, G, g, act, dc, dp, po, uo)
    return out
