# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM recurrence kernels.

Same contract as ``hybridocc._lstm_py``.  The recurrent matrix products go
through BLAS dgemm on strided row blocks, the gate arithmetic is fused into
plain C loops.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, fabs
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double x) noexcept nogil:
    cdef double e = exp(-fabs(x))
    if x >= 0:
        return 1.0 / (1.0 + e)
    return e / (1.0 + e)


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double alpha,
                       double* a, int lda, double* b, int ldb, double beta,
                       double* c, int ldc) noexcept nogil:
    # column-major dgemm; callers pass row-major buffers transposed
    dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def lstm_scan_forward(xw_in, U_in, bint reverse=False):
    cdef cnp.ndarray[double, ndim=3, mode="c"] z = np.array(xw_in, dtype=np.float64, order="C")
    cdef cnp.ndarray[double, ndim=2, mode="c"] U = np.ascontiguousarray(U_in, dtype=np.float64)
    cdef int B = z.shape[0], T = z.shape[1], G = z.shape[2]
    cdef int H = G // 4
    cdef cnp.ndarray[double, ndim=3, mode="c"] hs = np.empty((B, T, H))
    cdef cnp.ndarray[double, ndim=3, mode="c"] cs = np.empty((B, T, H))
    cdef double* zp = &z[0, 0, 0]
    cdef double* hp = &hs[0, 0, 0]
    cdef double* cp = &cs[0, 0, 0]
    cdef double* Up = &U[0, 0]
    cdef int n, t, tp, b, j
    cdef double ig, fg, gg, og, c, cprev
    cdef double* zr
    with nogil:
        for n in range(T):
            t = T - 1 - n if reverse else n
            if n:
                tp = t + 1 if reverse else t - 1
                # z[:, t] += hs[:, tp] @ U
                _gemm(b'N', b'N', G, B, H, 1.0, Up, G, hp + tp * H, T * H, 1.0, zp + t * G, T * G)
            for b in range(B):
                zr = zp + (b * T + t) * G
                for j in range(H):
                    ig = _sig(zr[j])
                    fg = _sig(zr[H + j])
                    gg = tanh(zr[2 * H + j])
                    og = _sig(zr[3 * H + j])
                    if n:
                        cprev = cp[(b * T + tp) * H + j]
                    else:
                        cprev = 0.0
                    c = fg * cprev + ig * gg
                    cp[(b * T + t) * H + j] = c
                    hp[(b * T + t) * H + j] = og * tanh(c)
                    zr[j] = ig
                    zr[H + j] = fg
                    zr[2 * H + j] = gg
                    zr[3 * H + j] = og
    return hs, cs, z


def lstm_scan_backward(dhs_in, U_in, hs_in, cs_in, gates_in, bint reverse=False):
    cdef cnp.ndarray[double, ndim=3, mode="c"] dhs = np.ascontiguousarray(dhs_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] U = np.ascontiguousarray(U_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3, mode="c"] hs = np.ascontiguousarray(hs_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3, mode="c"] cs = np.ascontiguousarray(cs_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3, mode="c"] gates = np.ascontiguousarray(gates_in, dtype=np.float64)
    cdef int B = dhs.shape[0], T = dhs.shape[1], H = dhs.shape[2]
    cdef int G = 4 * H
    cdef cnp.ndarray[double, ndim=3, mode="c"] dxw = np.empty((B, T, G))
    cdef cnp.ndarray[double, ndim=2, mode="c"] dU = np.zeros((H, G))
    cdef cnp.ndarray[double, ndim=2, mode="c"] dh_next = np.zeros((B, H))
    cdef cnp.ndarray[double, ndim=2, mode="c"] dc_next = np.zeros((B, H))
    cdef double* dhp = &dhs[0, 0, 0]
    cdef double* Up = &U[0, 0]
    cdef double* hp = &hs[0, 0, 0]
    cdef double* cp = &cs[0, 0, 0]
    cdef double* gp = &gates[0, 0, 0]
    cdef double* dzp = &dxw[0, 0, 0]
    cdef double* dUp = &dU[0, 0]
    cdef double* dhn = &dh_next[0, 0]
    cdef double* dcn = &dc_next[0, 0]
    cdef int n, t, tp, b, j, row
    cdef double ig, fg, gg, og, tc, cprev, dh, dc
    with nogil:
        for n in range(T - 1, -1, -1):
            t = T - 1 - n if reverse else n
            tp = (t + 1 if reverse else t - 1) if n else -1
            for b in range(B):
                row = (b * T + t)
                for j in range(H):
                    ig = gp[row * G + j]
                    fg = gp[row * G + H + j]
                    gg = gp[row * G + 2 * H + j]
                    og = gp[row * G + 3 * H + j]
                    tc = tanh(cp[row * H + j])
                    cprev = cp[(b * T + tp) * H + j] if n else 0.0
                    dh = dhp[row * H + j] + dhn[b * H + j]
                    dc = dcn[b * H + j] + dh * og * (1.0 - tc * tc)
                    dzp[row * G + j] = dc * gg * ig * (1.0 - ig)
                    dzp[row * G + H + j] = dc * cprev * fg * (1.0 - fg)
                    dzp[row * G + 2 * H + j] = dc * ig * (1.0 - gg * gg)
                    dzp[row * G + 3 * H + j] = dh * tc * og * (1.0 - og)
                    dcn[b * H + j] = dc * fg
            if n:
                # dU += hs[:, tp].T @ dz
                _gemm(b'N', b'T', G, H, B, 1.0, dzp + t * G, T * G, hp + tp * H, T * H, 1.0, dUp, G)
            # dh_next = dz @ U.T
            _gemm(b'T', b'N', H, B, G, 1.0, Up, G, dzp + t * G, T * G, 0.0, dhn, H)
    return dxw, dU
