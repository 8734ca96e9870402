# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels. Same signatures and semantics as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()

BACKEND = "cython"


def attention_forward(double[:, :, :, ::1] q, double[:, :, :, ::1] k,
                      double[:, :, :, ::1] v, bint causal):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], TQ = q.shape[2], D = q.shape[3]
    cdef Py_ssize_t TK = k.shape[2], DV = v.shape[3]
    cdef Py_ssize_t b, h, i, j, c, jmax
    cdef double scale = 1.0 / sqrt(<double>D)
    cdef double acc, mx, tot, p
    out_arr = np.zeros((B, H, TQ, DV))
    probs_arr = np.zeros((B, H, TQ, TK))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] probs = probs_arr
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(TQ):
                    jmax = TK
                    if causal:
                        jmax = i + 1 + TK - TQ
                    mx = -INFINITY
                    for j in range(jmax):
                        acc = 0.0
                        for c in range(D):
                            acc = acc + q[b, h, i, c] * k[b, h, j, c]
                        acc = acc * scale
                        probs[b, h, i, j] = acc
                        if acc > mx:
                            mx = acc
                    tot = 0.0
                    for j in range(jmax):
                        p = exp(probs[b, h, i, j] - mx)
                        probs[b, h, i, j] = p
                        tot = tot + p
                    for j in range(jmax):
                        p = probs[b, h, i, j] / tot
                        probs[b, h, i, j] = p
                        for c in range(DV):
                            out[b, h, i, c] += p * v[b, h, j, c]
    return out_arr, probs_arr


def attention_backward(double[:, :, :, ::1] dout, double[:, :, :, ::1] q,
                       double[:, :, :, ::1] k, double[:, :, :, ::1] v,
                       double[:, :, :, ::1] probs):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], TQ = q.shape[2], D = q.shape[3]
    cdef Py_ssize_t TK = k.shape[2], DV = v.shape[3]
    cdef Py_ssize_t b, h, i, j, c
    cdef double scale = 1.0 / sqrt(<double>D)
    cdef double acc, dot, ds, p
    dq_arr = np.zeros((B, H, TQ, D))
    dk_arr = np.zeros((B, H, TK, D))
    dv_arr = np.zeros((B, H, TK, DV))
    dp_arr = np.empty(TK)
    cdef double[:, :, :, ::1] dq = dq_arr
    cdef double[:, :, :, ::1] dk = dk_arr
    cdef double[:, :, :, ::1] dv = dv_arr
    cdef double[::1] dp = dp_arr
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(TQ):
                    dot = 0.0
                    for j in range(TK):
                        p = probs[b, h, i, j]
                        if p == 0.0:  # masked; contributes nothing below
                            continue
                        acc = 0.0
                        for c in range(DV):
                            acc = acc + dout[b, h, i, c] * v[b, h, j, c]
                            dv[b, h, j, c] += p * dout[b, h, i, c]
                        dp[j] = acc
                        dot = dot + acc * p
                    for j in range(TK):
                        p = probs[b, h, i, j]
                        if p == 0.0:
                            continue
                        ds = p * (dp[j] - dot) * scale
                        for c in range(D):
                            dq[b, h, i, c] += ds * k[b, h, j, c]
                            dk[b, h, j, c] += ds * q[b, h, i, c]
    return dq_arr, dk_arr, dv_arr


def layernorm_forward(x, double[::1] gain, double[::1] bias, double eps):
    # negative indices are unsafe under wraparound=False, even on tuples
    shape = x.shape
    width = shape[len(shape) - 1]
    cdef double[:, ::1] x2 = np.ascontiguousarray(x).reshape(-1, width)
    cdef Py_ssize_t N = x2.shape[0], C = x2.shape[1], n, c
    cdef double mu, var, r
    y_arr = np.empty((N, C))
    xhat_arr = np.empty((N, C))
    rstd_arr = np.empty((N, 1))
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[:, ::1] rstd = rstd_arr
    with nogil:
        for n in range(N):
            mu = 0.0
            for c in range(C):
                mu = mu + x2[n, c]
            mu = mu / C
            var = 0.0
            for c in range(C):
                var = var + (x2[n, c] - mu) * (x2[n, c] - mu)
            r = 1.0 / sqrt(var / C + eps)
            rstd[n, 0] = r
            for c in range(C):
                xhat[n, c] = (x2[n, c] - mu) * r
                y[n, c] = xhat[n, c] * gain[c] + bias[c]
    lead = tuple(shape[:len(shape) - 1])
    return (y_arr.reshape(shape), xhat_arr.reshape(shape), rstd_arr.reshape(lead + (1,)))


def layernorm_backward(dy, xhat, rstd, double[::1] gain):
    shape = dy.shape
    width = shape[len(shape) - 1]
    cdef double[:, ::1] dy2 = np.ascontiguousarray(dy).reshape(-1, width)
    cdef double[:, ::1] xh = np.ascontiguousarray(xhat).reshape(-1, width)
    cdef double[:, ::1] rs = np.ascontiguousarray(rstd).reshape(-1, 1)
    cdef Py_ssize_t N = dy2.shape[0], C = dy2.shape[1], n, c
    cdef double m1, m2, g
    dx_arr = np.empty((N, C))
    dgain_arr = np.zeros(C)
    dbias_arr = np.zeros(C)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    with nogil:
        for n in range(N):
            m1 = 0.0
            m2 = 0.0
            for c in range(C):
                g = dy2[n, c] * gain[c]
                m1 = m1 + g
                m2 = m2 + g * xh[n, c]
                dgain[c] += dy2[n, c] * xh[n, c]
                dbias[c] += dy2[n, c]
            m1 = m1 / C
            m2 = m2 / C
            for c in range(C):
                dx[n, c] = rs[n, 0] * (dy2[n, c] * gain[c] - m1 - xh[n, c] * m2)
    return dx_arr.reshape(shape), dgain_arr, dbias_arr


def token_logprob_forward(double[:, ::1] logits, cnp.int64_t[::1] targets):
    cdef Py_ssize_t N = logits.shape[0], V = logits.shape[1], n, c
    cdef double mx, tot, lse
    logp_arr = np.empty(N)
    probs_arr = np.empty((N, V))
    cdef double[::1] logp = logp_arr
    cdef double[:, ::1] probs = probs_arr
    with nogil:
        for n in range(N):
            mx = logits[n, 0]
            for c in range(1, V):
                if logits[n, c] > mx:
                    mx = logits[n, c]
            tot = 0.0
            for c in range(V):
                tot = tot + exp(logits[n, c] - mx)
            lse = log(tot)
            for c in range(V):
                probs[n, c] = exp(logits[n, c] - mx - lse)
            logp[n] = logits[n, targets[n]] - mx - lse
    return logp_arr, probs_arr


def token_logprob_backward(double[::1] g, double[:, ::1] probs, cnp.int64_t[::1] targets):
    cdef Py_ssize_t N = probs.shape[0], V = probs.shape[1], n, c
    out_arr = np.empty((N, V))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for n in range(N):
            for c in range(V):
                out[n, c] = -g[n] * probs[n, c]
            out[n, targets[n]] += g[n]
    return out_arr


def levenshtein(a, b):
    cdef cnp.int64_t[::1] x = np.ascontiguousarray(a, dtype=np.int64)
    cdef cnp.int64_t[::1] y = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    cdef cnp.int64_t[::1] prev = np.arange(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] cur = np.empty(m + 1, dtype=np.int64)
    cdef cnp.int64_t best, cand
    with nogil:
        for i in range(1, n + 1):
            cur[0] = i
            for j in range(1, m + 1):
                best = prev[j] + 1
                cand = cur[j - 1] + 1
                if cand < best:
                    best = cand
                cand = prev[j - 1] + (0 if x[i - 1] == y[j - 1] else 1)
                if cand < best:
                    best = cand
                cur[j] = best
            for j in range(m + 1):
                prev[j] = cur[j]
    return int(prev[m])


def mean_pairwise_hamming(tokens):
    cdef cnp.int64_t[:, ::1] t = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef Py_ssize_t n = t.shape[0], L = t.shape[1], i, j, c
    cdef long long total = 0
    if n < 2:
        return 0.0
    with nogil:
        for i in range(n - 1):
            for j in range(i + 1, n):
                for c in range(L):
                    if t[i, c] != t[j, c]:
                        total += 1
    return total / (n * (n - 1) / 2.0)
