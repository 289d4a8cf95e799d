# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan forward and reverse-time adjoint.

Time is processed in chunks. For each chunk the transition factors
``exp(delta * a)`` are written to a small reusable buffer (exponentiated by
numpy) and consumed by the recurrence, so only the hidden states are kept for
the backward pass, which rebuilds the factors chunk by chunk in reverse. This
keeps the working set near one ``(G, L, Dm, N)`` array, and the cost per step
stays flat as L grows. Loop order is fixed, so results do not depend on
scheduling.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

NAME = "cython"
CHUNK_BYTES = 1 << 16

ctypedef fused real:
    float
    double


cdef void _rates(real* delta, real* A, real* out, Py_ssize_t G, Py_ssize_t L, Py_ssize_t Dm,
                 Py_ssize_t N, Py_ssize_t k0, Py_ssize_t kn) noexcept nogil:
    # out[g, j, d, n] = delta[g, k0 + j, d] * A[g, d, n]; exponentiated afterwards by numpy.
    cdef Py_ssize_t g, j, d, n, t, row = Dm * N
    cdef real *A_g
    cdef real *o
    cdef real dt
    for g in range(G):
        A_g = A + g * row
        for j in range(kn):
            t = g * L + k0 + j
            o = out + (g * kn + j) * row
            for d in range(Dm):
                dt = delta[t * Dm + d]
                for n in range(N):
                    o[d * N + n] = dt * A_g[d * N + n]


cdef void _fwd(real* u, real* delta, real* A, real* B, real* C, real* D, real* abar,
               real* y, real* hs, Py_ssize_t G, Py_ssize_t L, Py_ssize_t Dm, Py_ssize_t N,
               Py_ssize_t k0, Py_ssize_t kn, bint exact) noexcept nogil:
    cdef Py_ssize_t g, j, k, d, n, i, t, row = Dm * N
    cdef real *ab_k
    cdef real *h_k
    cdef real *B_k
    cdef real *C_k
    cdef real *A_g
    cdef real x, dt, coef, acc, h
    for g in range(G):
        A_g = A + g * row
        for j in range(kn):
            k = k0 + j
            t = g * L + k
            ab_k = abar + (g * kn + j) * row
            h_k = hs + t * row
            B_k = B + t * N
            C_k = C + t * N
            for d in range(Dm):
                x = u[t * Dm + d]
                dt = delta[t * Dm + d]
                acc = D[g * Dm + d] * x
                for n in range(N):
                    i = d * N + n
                    if exact:
                        coef = (ab_k[i] - 1) / A_g[i]
                    else:
                        coef = dt
                    h = coef * B_k[n] * x
                    if k > 0:
                        h = h + ab_k[i] * h_k[i - row]
                    h_k[i] = h
                    acc = acc + C_k[n] * h
                y[t * Dm + d] = acc


cdef void _bwd(real* dy, real* u, real* delta, real* A, real* B, real* C, real* D,
               real* abar, real* hs, real* du, real* ddelta, real* dA, real* dB, real* dC,
               real* dD, real* gstate, Py_ssize_t G, Py_ssize_t L, Py_ssize_t Dm, Py_ssize_t N,
               Py_ssize_t k0, Py_ssize_t kn, bint exact) noexcept nogil:
    # Steps k0 + kn - 1 down to k0; gstate (G, Dm, N) carries the adjoint between chunks.
    cdef Py_ssize_t g, j, k, d, n, i, t, row = Dm * N
    cdef real *ab_k
    cdef real *h_k
    cdef real *B_k
    cdef real *C_k
    cdef real *dB_k
    cdef real *dC_k
    cdef real *A_g
    cdef real *dA_g
    cdef real *gs
    cdef real x, dt, gy, gh, hprev, d_ab, d_coef, coef, a, ab, acc_du, acc_dt
    for g in range(G):
        A_g = A + g * row
        dA_g = dA + g * row
        gs = gstate + g * row
        for j in range(kn - 1, -1, -1):
            k = k0 + j
            t = g * L + k
            ab_k = abar + (g * kn + j) * row
            h_k = hs + t * row
            B_k = B + t * N
            C_k = C + t * N
            dB_k = dB + t * N
            dC_k = dC + t * N
            for d in range(Dm):
                x = u[t * Dm + d]
                dt = delta[t * Dm + d]
                gy = dy[t * Dm + d]
                acc_du = D[g * Dm + d] * gy
                acc_dt = 0
                dD[g * Dm + d] += gy * x
                for n in range(N):
                    i = d * N + n
                    a = A_g[i]
                    ab = ab_k[i]
                    gh = gs[i] + C_k[n] * gy
                    dC_k[n] += gy * h_k[i]
                    if k > 0:
                        hprev = h_k[i - row]
                    else:
                        hprev = 0
                    d_ab = gh * hprev
                    acc_dt = acc_dt + d_ab * ab * a
                    dA_g[i] += d_ab * ab * dt
                    d_coef = gh * B_k[n] * x
                    if exact:
                        coef = (ab - 1) / a
                        acc_dt = acc_dt + d_coef * ab
                        dA_g[i] += d_coef * (dt * ab * a - (ab - 1)) / (a * a)
                    else:
                        coef = dt
                        acc_dt = acc_dt + d_coef
                    dB_k[n] += gh * coef * x
                    acc_du = acc_du + gh * coef * B_k[n]
                    gs[i] = gh * ab
                du[t * Dm + d] = acc_du
                ddelta[t * Dm + d] = acc_dt


cdef inline float* _fp(cnp.ndarray a):
    return <float*> cnp.PyArray_DATA(a)


cdef inline double* _dp(cnp.ndarray a):
    return <double*> cnp.PyArray_DATA(a)


def _prep(arrays, dtype):
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def _chunk_len(G, L, row, itemsize):
    return max(1, min(L, CHUNK_BYTES // max(1, G * row * itemsize)))


def scan_forward(u, delta, A, B, C, D, exact=False):
    dtype = u.dtype
    if dtype != np.float32 and dtype != np.float64:
        raise TypeError(f"unsupported dtype {dtype}")
    u, delta, A, B, C, D = _prep((u, delta, A, B, C, D), dtype)
    cdef Py_ssize_t G = u.shape[0], L = u.shape[1], Dm = u.shape[2], N = A.shape[2]
    cdef Py_ssize_t k0, kn, ck = _chunk_len(G, L, Dm * N, u.itemsize)
    cdef bint ex = exact, is32 = dtype == np.float32
    y = np.empty((G, L, Dm), dtype=dtype)
    hs = np.empty((G, L, Dm, N), dtype=dtype)
    buf = np.empty(G * ck * Dm * N, dtype=dtype)
    cdef float *f[9]
    cdef double *q[9]
    cdef int j
    arrs = (u, delta, A, B, C, D, buf, y, hs)
    for j in range(9):
        if is32:
            f[j] = _fp(arrs[j])
        else:
            q[j] = _dp(arrs[j])
    for k0 in range(0, L, ck):
        kn = min(ck, L - k0)
        part = buf[: G * kn * Dm * N]
        if is32:
            with nogil:
                _rates(f[1], f[2], f[6], G, L, Dm, N, k0, kn)
            np.exp(part, out=part)
            with nogil:
                _fwd(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8], G, L, Dm, N, k0, kn, ex)
        else:
            with nogil:
                _rates(q[1], q[2], q[6], G, L, Dm, N, k0, kn)
            np.exp(part, out=part)
            with nogil:
                _fwd(q[0], q[1], q[2], q[3], q[4], q[5], q[6], q[7], q[8], G, L, Dm, N, k0, kn, ex)
    return y, (hs,)


def scan_backward(dy, u, delta, A, B, C, D, cache, exact=False):
    dtype = u.dtype
    if dtype != np.float32 and dtype != np.float64:
        raise TypeError(f"unsupported dtype {dtype}")
    dy, u, delta, A, B, C, D, hs = _prep((dy, u, delta, A, B, C, D, cache[0]), dtype)
    cdef Py_ssize_t G = u.shape[0], L = u.shape[1], Dm = u.shape[2], N = A.shape[2]
    cdef Py_ssize_t k0, kn, ck = _chunk_len(G, L, Dm * N, u.itemsize)
    cdef bint ex = exact, is32 = dtype == np.float32
    du = np.empty_like(u)
    ddelta = np.empty_like(delta)
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    dC = np.zeros_like(C)
    dD = np.zeros_like(D)
    gstate = np.zeros(G * Dm * N, dtype=dtype)
    buf = np.empty(G * ck * Dm * N, dtype=dtype)
    cdef float *f[16]
    cdef double *q[16]
    cdef int j
    arrs = (dy, u, delta, A, B, C, D, buf, hs, du, ddelta, dA, dB, dC, dD, gstate)
    for j in range(16):
        if is32:
            f[j] = _fp(arrs[j])
        else:
            q[j] = _dp(arrs[j])
    # Chunks in reverse time order; within a chunk _bwd also runs backwards.
    for k0 in reversed(range(0, L, ck)):
        kn = min(ck, L - k0)
        part = buf[: G * kn * Dm * N]
        if is32:
            with nogil:
                _rates(f[2], f[3], f[7], G, L, Dm, N, k0, kn)
            np.exp(part, out=part)
            with nogil:
                _bwd(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8], f[9], f[10], f[11],
                     f[12], f[13], f[14], f[15], G, L, Dm, N, k0, kn, ex)
        else:
            with nogil:
                _rates(q[2], q[3], q[7], G, L, Dm, N, k0, kn)
            np.exp(part, out=part)
            with nogil:
                _bwd(q[0], q[1], q[2], q[3], q[4], q[5], q[6], q[7], q[8], q[9], q[10], q[11],
                     q[12], q[13], q[14], q[15], G, L, Dm, N, k0, kn, ex)
    return du, ddelta, dA, dB, dC, dD
