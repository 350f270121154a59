# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused batched SMoE block forward.

One call runs causal attention plus the routed expert mixture for a whole
(B, N, d) batch, overwriting the hidden states with the block output. The
matrix products go through BLAS (dgemm/dgemv); everything between them --
causal softmax, router softmax, top-k selection, per-token expert gather --
stays in C loops, so a block needs one Python call instead of dozens of
numpy ops. At toy dimensions that dispatch overhead is most of the runtime
of an evolutionary fitness evaluation.

Semantics mirror backend._forward_numpy exactly: scores divided by sqrt(d),
row-max-subtracted softmax, router softmax optionally left-multiplied by a
router map, top-k with ties to the lower index, selected weights
renormalized to sum to 1, SwiGLU experts, residual wiring.
"""

import numpy as np

from libc.math cimport exp, sqrt, INFINITY
from scipy.linalg.cython_blas cimport dgemm, dgemv


cdef inline double _silu(double u) nogil:
    return u / (1.0 + exp(-u))


cdef inline void _mm(int m, int n, int kk, double alpha, double *a, double *b_,
                     double beta, double *c_) nogil:
    """Row-major C (m,n) = alpha * A (m,kk) @ B (kk,n) + beta * C."""
    cdef char tn = b'N'
    dgemm(&tn, &tn, &n, &m, &kk, &alpha, b_, &n, a, &kk, &beta, c_, &n)


cdef inline void _mm_bt(int m, int n, int kk, double alpha, double *a, double *b_,
                        double beta, double *c_) nogil:
    """Row-major C (m,n) = alpha * A (m,kk) @ B^T + beta * C, B stored (n,kk)."""
    cdef char tt = b'T'
    cdef char tn = b'N'
    dgemm(&tt, &tn, &n, &m, &kk, &alpha, b_, &kk, a, &kk, &beta, c_, &n)


cdef inline void _vm(int din, int dout, double alpha, double *w, double *xv,
                     double beta, double *out) nogil:
    """Row-major out (dout) = alpha * xv (din) @ W (din,dout) + beta * out."""
    cdef char tn = b'N'
    cdef int one = 1
    dgemv(&tn, &dout, &din, &alpha, w, &dout, xv, &one, &beta, out, &one)


def block_forward_inplace(double[:, :, ::1] x,
                          double[:, ::1] wq, double[:, ::1] wk,
                          double[:, ::1] wv, double[:, ::1] wo,
                          double[:, ::1] w_router, rm,
                          double[:, :, ::1] w1s, double[:, :, ::1] w2s,
                          double[:, :, ::1] w3s, int k):
    """Overwrite ``x`` (B, N, d) with the block output.

    ``rm`` is the optional router-map matrix (E_eff, E_orig) of a compressed
    block, or None for an uncompressed block. Expert weights arrive stacked:
    w1s/w3s (E_eff, d, f), w2s (E_eff, f, d).
    """
    cdef Py_ssize_t B = x.shape[0]
    cdef int N = <int> x.shape[1], D = <int> x.shape[2]
    cdef int Eorig = <int> w_router.shape[1]
    cdef int Eeff = <int> w1s.shape[0]
    cdef int F = <int> w1s.shape[2]
    cdef bint has_rm = rm is not None
    cdef double[:, ::1] rmv
    if has_rm:
        rmv = rm
        if rmv.shape[0] != Eeff or rmv.shape[1] != Eorig:
            raise ValueError("router map shape mismatch")
    else:
        rmv = np.empty((1, 1))  # placeholder, never read
        if Eeff != Eorig:
            raise ValueError("expert count != router columns on an unmapped block")
    if wq.shape[0] != D or wq.shape[1] != D or wk.shape[0] != D or wk.shape[1] != D \
            or wv.shape[0] != D or wv.shape[1] != D or wo.shape[0] != D or wo.shape[1] != D:
        raise ValueError("attention weight shape mismatch")
    if w_router.shape[0] != D or w1s.shape[1] != D or w3s.shape[1] != D \
            or w3s.shape[0] != Eeff or w3s.shape[2] != F \
            or w2s.shape[0] != Eeff or w2s.shape[1] != F or w2s.shape[2] != D:
        raise ValueError("expert/router weight shape mismatch")
    if not 1 <= k <= Eeff:
        raise ValueError(f"k={k} out of range for {Eeff} experts")
    if N == 0 or B == 0:
        return

    qm_a = np.empty((N, D)); km_a = np.empty((N, D)); vm_a = np.empty((N, D))
    sc_a = np.empty((N, N)); att_a = np.empty((N, D)); ym_a = np.empty((N, D))
    probs_a = np.empty((N, Eorig)); gmat_a = np.empty((N, Eeff))
    used_a = np.zeros(Eeff, dtype=np.intp)
    selidx_a = np.zeros(k, dtype=np.intp); selw_a = np.empty(k)
    u_a = np.empty(F); u3_a = np.empty(F)
    cdef double[:, ::1] qm = qm_a, km = km_a, vm = vm_a, sc = sc_a, att = att_a, ym = ym_a
    cdef double[:, ::1] probs = probs_a, gmat = gmat_a
    cdef double[::1] selw = selw_a, u = u_a, u3 = u3_a
    cdef Py_ssize_t[::1] used = used_a, selidx = selidx_a

    cdef Py_ssize_t b
    cdef int i, j, a, e, r, s, f, best
    cdef double acc, mx, ssum, wsum, bestv, wgt
    cdef double sd = sqrt(<double> D)
    cdef double *grow

    with nogil:
        for b in range(B):
            # ---- attention projections ----
            _mm(N, D, D, 1.0, &x[b, 0, 0], &wq[0, 0], 0.0, &qm[0, 0])
            _mm(N, D, D, 1.0, &x[b, 0, 0], &wk[0, 0], 0.0, &km[0, 0])
            _mm(N, D, D, 1.0, &x[b, 0, 0], &wv[0, 0], 0.0, &vm[0, 0])
            # ---- causal softmax(QK^T/sqrt d), zeros above the diagonal ----
            _mm_bt(N, N, D, 1.0, &qm[0, 0], &km[0, 0], 0.0, &sc[0, 0])
            for i in range(N):
                mx = -INFINITY
                for j in range(i + 1):
                    sc[i, j] = sc[i, j] / sd
                    if sc[i, j] > mx:
                        mx = sc[i, j]
                ssum = 0.0
                for j in range(i + 1):
                    sc[i, j] = exp(sc[i, j] - mx)
                    ssum += sc[i, j]
                for j in range(i + 1):
                    sc[i, j] = sc[i, j] / ssum
                for j in range(i + 1, N):
                    sc[i, j] = 0.0
            _mm(N, D, N, 1.0, &sc[0, 0], &vm[0, 0], 0.0, &att[0, 0])
            # ---- y = x + att @ Wo (residual) ----
            for i in range(N):
                for a in range(D):
                    ym[i, a] = x[b, i, a]
            _mm(N, D, D, 1.0, &att[0, 0], &wo[0, 0], 1.0, &ym[0, 0])
            # ---- router softmax, optionally mapped ----
            _mm(N, Eorig, D, 1.0, &ym[0, 0], &w_router[0, 0], 0.0, &probs[0, 0])
            for i in range(N):
                mx = -INFINITY
                for e in range(Eorig):
                    if probs[i, e] > mx:
                        mx = probs[i, e]
                ssum = 0.0
                for e in range(Eorig):
                    probs[i, e] = exp(probs[i, e] - mx)
                    ssum += probs[i, e]
                for e in range(Eorig):
                    probs[i, e] = probs[i, e] / ssum
            if has_rm:
                _mm_bt(N, Eeff, Eorig, 1.0, &probs[0, 0], &rmv[0, 0], 0.0, &gmat[0, 0])
            # ---- top-k mixture of SwiGLU experts per token ----
            for i in range(N):
                grow = &gmat[i, 0] if has_rm else &probs[i, 0]
                for r in range(Eeff):
                    used[r] = 0
                wsum = 0.0
                for s in range(k):
                    # ties to the lower index via strict >
                    best = -1
                    bestv = -INFINITY
                    for r in range(Eeff):
                        if used[r] == 0 and grow[r] > bestv:
                            bestv = grow[r]
                            best = r
                    if best < 0:  # NaN gates: stay defined, poison propagates
                        for r in range(Eeff):
                            if used[r] == 0:
                                best = r
                                break
                        bestv = grow[best]
                    selidx[s] = best
                    selw[s] = bestv
                    used[best] = 1
                    wsum += bestv
                for a in range(D):
                    x[b, i, a] = ym[i, a]
                for s in range(k):
                    e = <int> selidx[s]
                    wgt = selw[s] / wsum
                    _vm(D, F, 1.0, &w1s[e, 0, 0], &ym[i, 0], 0.0, &u[0])
                    _vm(D, F, 1.0, &w3s[e, 0, 0], &ym[i, 0], 0.0, &u3[0])
                    for f in range(F):
                        u[f] = _silu(u[f]) * u3[f]
                    _vm(F, D, wgt, &w2s[e, 0, 0], &u[0], 1.0, &x[b, i, 0])
