# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LANO rollout with forward-mode tangents (inference only).

Mirrors ``core.lano_rollout`` without teacher forcing. Every matrix product
goes through BLAS dgemm on preallocated row-major buffers; the per-sample
loop runs without the GIL.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, exp, expm1, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double LN_EPS = 1e-5


cdef inline void mm(bint ta, int m, int n, int k, double alpha, const double* A,
                    const double* B, double beta, double* C) noexcept nogil:
    """Row-major C[m,n] = alpha op(A) B + beta C; A is (m,k), or (k,m) when ``ta``."""
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef int lda = m if ta else k
    dgemm(&tn, &tt if ta else &tn, &n, &m, &k, &alpha, <double*>B, &n, <double*>A, &lda, &beta, C, &n)


cdef inline double elu(double x) noexcept nogil:
    return x if x > 0 else expm1(x)


cdef inline double elu_d(double x) noexcept nogil:
    return 1.0 if x > 0 else exp(x)


def rollout(dict P, double[:, ::1] beta_m, double[::1] beta_f0, bint tangents=True):
    cdef int B = beta_m.shape[0]
    cdef int R = beta_m.shape[1]
    cdef double[:, :, ::1] Ws = P["Ws"]
    cdef int K = Ws.shape[0]
    cdef int d_h = Ws.shape[1]
    cdef int r_f = Ws.shape[2]
    cdef double[:, ::1] WQ = P["WQ"]
    cdef int d_a = WQ.shape[1]
    cdef double[:, ::1] Wp = P["Wp"]
    cdef double[::1] bp = P["bp"]
    cdef double[:, ::1] bs = P["bs"]
    cdef double[:, :, ::1] Wz = P["Wz"]
    cdef double[:, ::1] bz = P["bz"]
    cdef double[:, ::1] WK = P["WK"]
    cdef double[:, ::1] WV = P["WV"]
    cdef double[:, ::1] Pe = P["P"]
    cdef double[:, ::1] W1 = P["W1"]
    cdef double[::1] b1 = P["b1"]
    cdef double[:, ::1] W2 = P["W2"]
    cdef double[::1] b2 = P["b2"]
    cdef double[::1] ln_g = P["ln_g"]
    cdef double[::1] ln_b = P["ln_b"]
    cdef double[:, :, ::1] W1F = P["W1F"]
    cdef double[:, ::1] b1F = P["b1F"]
    cdef double[:, :, ::1] W2F = P["W2F"]
    cdef double[:, ::1] b2F = P["b2F"]
    cdef double[:, :, ::1] W1J = P["W1J"]
    cdef double[:, ::1] b1J = P["b1J"]
    cdef double[:, :, ::1] W2J = P["W2J"]
    cdef double[:, ::1] b2J = P["b2J"]
    if Wp.shape[1] != R or beta_f0.shape[0] != r_f:
        raise ValueError("input dimensions do not match the parameters")

    bF_np = np.empty((B, K + 1, r_f))
    bJ_np = np.empty((B, K + 1, r_f))
    dF_np = np.zeros((B, K, r_f, R))
    dJ_np = np.zeros((B, K, r_f, R))
    cdef double[:, :, ::1] bF = bF_np
    cdef double[:, :, ::1] bJ = bJ_np
    cdef double[:, :, :, ::1] dF = dF_np
    cdef double[:, :, :, ::1] dJ = dJ_np

    # work buffers
    cdef double[::1] x = np.empty(2 * d_h)
    cdef double[:, ::1] tx = np.empty((2 * d_h, R))
    cdef double[::1] pre = np.empty(d_h)
    cdef double[::1] z = np.empty(d_h)
    cdef double[:, ::1] tz = np.empty((d_h, R))
    cdef double[::1] q = np.empty(d_a)
    cdef double[:, ::1] tq = np.empty((d_a, R))
    cdef double[:, ::1] Kb = np.empty((K, d_a))
    cdef double[:, ::1] Vb = np.empty((K, d_a))
    cdef double[:, :, ::1] tKb = np.empty((K, d_a, R))
    cdef double[:, :, ::1] tVb = np.empty((K, d_a, R))
    cdef double[::1] sc = np.empty(K)
    cdef double[:, ::1] tsc = np.empty((K, R))
    cdef double[::1] tbar = np.empty(R)
    cdef double[::1] av = np.empty(d_a)
    cdef double[:, ::1] ta = np.empty((d_a, R))
    cdef double[::1] h1 = np.empty(d_h)
    cdef double[::1] e1 = np.empty(d_h)
    cdef double[:, ::1] th1 = np.empty((d_h, R))
    cdef double[::1] h2 = np.empty(d_h)
    cdef double[:, ::1] th2 = np.empty((d_h, R))
    cdef double[::1] nrm = np.empty(d_h)
    cdef double[::1] f = np.empty(d_h)
    cdef double[:, ::1] tf = np.empty((d_h, R))
    cdef double[::1] g = np.empty(r_f)
    cdef double[::1] eg = np.empty(r_f)
    cdef double[:, ::1] tg = np.empty((r_f, R))
    cdef double[::1] colmean = np.empty(R)
    cdef double[::1] nt = np.empty(R)

    cdef int b, k, j, h, a, r, i, head
    cdef double scale = 1.0 / sqrt(<double>d_a)
    cdef double mx, tot, mu, var, inv, acc, w
    cdef double[:, :, ::1] W1X
    cdef double[:, ::1] b1X
    cdef double[:, :, ::1] W2X
    cdef double[:, ::1] b2X
    cdef double[:, :, ::1] bX
    cdef double[:, :, :, ::1] dX

    with nogil:
        for b in range(B):
            for r in range(r_f):
                bF[b, 0, r] = beta_f0[r]
                bJ[b, 0, r] = beta_f0[r]
            # p = Wp beta_m + bp, stored in the second half of x
            for h in range(d_h):
                x[d_h + h] = bp[h]
            mm(False, d_h, 1, R, 1.0, &Wp[0, 0], &beta_m[b, 0], 1.0, &x[d_h])
            if tangents:
                for h in range(d_h):
                    for r in range(R):
                        tx[d_h + h, r] = Wp[h, r]
            for k in range(K):
                # s = Ws_k beta_F + bs_k
                for h in range(d_h):
                    x[h] = bs[k, h]
                mm(False, d_h, 1, r_f, 1.0, &Ws[k, 0, 0], &bF[b, k, 0], 1.0, &x[0])
                for h in range(d_h):
                    pre[h] = bz[k, h]
                mm(False, d_h, 1, 2 * d_h, 1.0, &Wz[k, 0, 0], &x[0], 1.0, &pre[0])
                for h in range(d_h):
                    pre[h] = tanh(pre[h])
                    z[h] = pre[h] + Pe[h, k]
                mm(True, d_a, 1, d_h, 1.0, &WQ[0, 0], &z[0], 0.0, &q[0])
                mm(True, d_a, 1, d_h, 1.0, &WK[0, 0], &z[0], 0.0, &Kb[k, 0])
                mm(True, d_a, 1, d_h, 1.0, &WV[0, 0], &z[0], 0.0, &Vb[k, 0])
                mx = -1e300
                for j in range(k + 1):
                    acc = 0.0
                    for a in range(d_a):
                        acc = acc + q[a] * Kb[j, a]
                    sc[j] = acc * scale
                    if sc[j] > mx:
                        mx = sc[j]
                tot = 0.0
                for j in range(k + 1):
                    sc[j] = exp(sc[j] - mx)
                    tot = tot + sc[j]
                for j in range(k + 1):
                    sc[j] = sc[j] / tot
                for a in range(d_a):
                    acc = 0.0
                    for j in range(k + 1):
                        acc = acc + sc[j] * Vb[j, a]
                    av[a] = acc
                for h in range(d_h):
                    h1[h] = b1[h]
                    h2[h] = b2[h]
                mm(True, d_h, 1, d_a, 1.0, &W1[0, 0], &av[0], 1.0, &h1[0])
                for h in range(d_h):
                    e1[h] = elu(h1[h])
                mm(True, d_h, 1, d_h, 1.0, &W2[0, 0], &e1[0], 1.0, &h2[0])
                mu = 0.0
                for h in range(d_h):
                    mu = mu + h2[h]
                mu = mu / d_h
                var = 0.0
                for h in range(d_h):
                    var = var + (h2[h] - mu) * (h2[h] - mu)
                inv = 1.0 / sqrt(var / d_h + LN_EPS)
                for h in range(d_h):
                    nrm[h] = (h2[h] - mu) * inv
                    f[h] = ln_g[h] * nrm[h] + ln_b[h]

                if tangents:
                    # ts into the first half of tx: Ws_k dbeta_F
                    mm(False, d_h, R, r_f, 1.0, &Ws[k, 0, 0], &dF[b, k - 1, 0, 0] if k > 0 else &dF[b, 0, 0, 0], 0.0, &tx[0, 0])
                    if k == 0:
                        for h in range(d_h):
                            for r in range(R):
                                tx[h, r] = 0.0
                    mm(False, d_h, R, 2 * d_h, 1.0, &Wz[k, 0, 0], &tx[0, 0], 0.0, &tz[0, 0])
                    for h in range(d_h):
                        w = 1.0 - pre[h] * pre[h]
                        for r in range(R):
                            tz[h, r] = w * tz[h, r]
                    mm(True, d_a, R, d_h, 1.0, &WQ[0, 0], &tz[0, 0], 0.0, &tq[0, 0])
                    mm(True, d_a, R, d_h, 1.0, &WK[0, 0], &tz[0, 0], 0.0, &tKb[k, 0, 0])
                    mm(True, d_a, R, d_h, 1.0, &WV[0, 0], &tz[0, 0], 0.0, &tVb[k, 0, 0])
                    for j in range(k + 1):
                        for r in range(R):
                            acc = 0.0
                            for a in range(d_a):
                                acc = acc + tq[a, r] * Kb[j, a] + q[a] * tKb[j, a, r]
                            tsc[j, r] = acc * scale
                    for r in range(R):
                        acc = 0.0
                        for j in range(k + 1):
                            acc = acc + sc[j] * tsc[j, r]
                        tbar[r] = acc
                    for a in range(d_a):
                        for r in range(R):
                            acc = 0.0
                            for j in range(k + 1):
                                acc = acc + sc[j] * ((tsc[j, r] - tbar[r]) * Vb[j, a] + tVb[j, a, r])
                            ta[a, r] = acc
                    mm(True, d_h, R, d_a, 1.0, &W1[0, 0], &ta[0, 0], 0.0, &th1[0, 0])
                    for h in range(d_h):
                        w = elu_d(h1[h])
                        for r in range(R):
                            th1[h, r] = w * th1[h, r]
                    mm(True, d_h, R, d_h, 1.0, &W2[0, 0], &th1[0, 0], 0.0, &th2[0, 0])
                    for r in range(R):
                        colmean[r] = 0.0
                    for h in range(d_h):
                        for r in range(R):
                            colmean[r] = colmean[r] + th2[h, r]
                    for r in range(R):
                        colmean[r] = colmean[r] / d_h
                        nt[r] = 0.0
                    for h in range(d_h):
                        for r in range(R):
                            th2[h, r] = th2[h, r] - colmean[r]
                            nt[r] = nt[r] + nrm[h] * th2[h, r]
                    for r in range(R):
                        nt[r] = nt[r] / d_h
                    for h in range(d_h):
                        for r in range(R):
                            tf[h, r] = ln_g[h] * inv * (th2[h, r] - nrm[h] * nt[r])

                for head in range(2):
                    if head == 0:
                        W1X = W1F
                        b1X = b1F
                        W2X = W2F
                        b2X = b2F
                        bX = bF
                        dX = dF
                    else:
                        W1X = W1J
                        b1X = b1J
                        W2X = W2J
                        b2X = b2J
                        bX = bJ
                        dX = dJ
                    for i in range(r_f):
                        g[i] = b1X[k, i]
                    mm(False, r_f, 1, d_h, 1.0, &W1X[k, 0, 0], &f[0], 1.0, &g[0])
                    for i in range(r_f):
                        eg[i] = elu(g[i])
                        bX[b, k + 1, i] = bX[b, k, i] + b2X[k, i]
                    mm(False, r_f, 1, r_f, 1.0, &W2X[k, 0, 0], &eg[0], 1.0, &bX[b, k + 1, 0])
                    if tangents:
                        mm(False, r_f, R, d_h, 1.0, &W1X[k, 0, 0], &tf[0, 0], 0.0, &tg[0, 0])
                        for i in range(r_f):
                            w = elu_d(g[i])
                            for r in range(R):
                                tg[i, r] = w * tg[i, r]
                                dX[b, k, i, r] = dX[b, k - 1, i, r] if k > 0 else 0.0
                        mm(False, r_f, R, r_f, 1.0, &W2X[k, 0, 0], &tg[0, 0], 1.0, &dX[b, k, 0, 0])
    out = {"bF": bF_np, "bJ": bJ_np}
    if tangents:
        out["dF"] = dF_np
        out["dJ"] = dJ_np
    return out
