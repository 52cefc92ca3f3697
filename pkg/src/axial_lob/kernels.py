"""Fused axial-attention kernels (numba, CPU).

One kernel call handles all heads and all 1D slices of one axis at once:
inputs are [rows, heads, span, head_dim] with the attended axis mapped to
`span` and everything else folded into `rows`.  Relative-position tables
are [heads, 2*span-1, head_dim], indexed by clipped offset
(i - j) + span - 1.  Scalar gates scale only the positional contributions
to the logits (g_q, g_k) and to the pooled values (g_v).

The backward kernel is hand-derived; tests check it against central finite
differences and the forward against an independent per-position oracle.
Kernels are sequential and deterministic for a given dtype.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True, error_model="numpy")
def axial_attention_forward(q, k, v, tq, tk, tv, gq, gk, gv):
    """Returns (attn, out): softmax weights [B,h,L,L] and output [B,h,L,d]."""
    B, H, L, D = q.shape
    A = np.empty((B, H, L, L), dtype=q.dtype)
    Y = np.empty((B, H, L, D), dtype=q.dtype)
    for b in range(B):
        for hh in range(H):
            qb = q[b, hh]
            kb = k[b, hh]
            vb = v[b, hh]
            tqh = tq[hh]
            tkh = tk[hh]
            tvh = tv[hh]
            Ab = A[b, hh]
            Yb = Y[b, hh]
            for i in range(L):
                qi = qb[i]
                Ai = Ab[i]
                smax = -np.inf
                for j in range(L):
                    o = i - j + L - 1
                    sc = qi[0] * 0
                    sq = sc
                    sk = sc
                    for dd in range(D):
                        sc += qi[dd] * kb[j, dd]
                        sq += qi[dd] * tqh[o, dd]
                        sk += kb[j, dd] * tkh[o, dd]
                    s = sc + gq * sq + gk * sk
                    Ai[j] = s
                    if s > smax:
                        smax = s
                ssum = qi[0] * 0
                for j in range(L):
                    e = math.exp(Ai[j] - smax)
                    Ai[j] = e
                    ssum += e
                inv = 1.0 / ssum
                for dd in range(D):
                    Yb[i, dd] = qi[0] * 0
                for j in range(L):
                    a = Ai[j] * inv
                    Ai[j] = a
                    o = i - j + L - 1
                    for dd in range(D):
                        Yb[i, dd] += a * (vb[j, dd] + gv * tvh[o, dd])
    return A, Y


@njit(cache=True, fastmath=True, error_model="numpy")
def axial_attention_backward(q, k, v, tq, tk, tv, gq, gk, gv, A, dY):
    """Gradients for all nine inputs of axial_attention_forward."""
    B, H, L, D = q.shape
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dtq = np.zeros_like(tq)
    dtk = np.zeros_like(tk)
    dtv = np.zeros_like(tv)
    zero = q[0, 0, 0, 0] * 0
    dgq = zero
    dgk = zero
    dgv = zero
    dA = np.empty(L, dtype=q.dtype)
    for b in range(B):
        for hh in range(H):
            qb = q[b, hh]
            kb = k[b, hh]
            vb = v[b, hh]
            tqh = tq[hh]
            tkh = tk[hh]
            tvh = tv[hh]
            dqb = dq[b, hh]
            dkb = dk[b, hh]
            dvb = dv[b, hh]
            dtqh = dtq[hh]
            dtkh = dtk[hh]
            dtvh = dtv[hh]
            Ab = A[b, hh]
            dYb = dY[b, hh]
            for i in range(L):
                Ai = Ab[i]
                dYi = dYb[i]
                qi = qb[i]
                dqi = dqb[i]
                # first pass: dL/dA, softmax row dot, and the value-side grads
                sdot = zero
                for j in range(L):
                    o = i - j + L - 1
                    a = Ai[j]
                    accv = zero
                    accp = zero
                    for dd in range(D):
                        dyd = dYi[dd]
                        accv += dyd * vb[j, dd]
                        accp += dyd * tvh[o, dd]
                        dvb[j, dd] += a * dyd
                        dtvh[o, dd] += gv * a * dyd
                    da = accv + gv * accp
                    dgv += a * accp
                    dA[j] = da
                    sdot += da * a
                # second pass: softmax backward, then the logit-side grads
                for j in range(L):
                    o = i - j + L - 1
                    ds = Ai[j] * (dA[j] - sdot)
                    sq = zero
                    sk = zero
                    for dd in range(D):
                        qd = qi[dd]
                        kd = kb[j, dd]
                        tqd = tqh[o, dd]
                        tkd = tkh[o, dd]
                        dqi[dd] += ds * (kd + gq * tqd)
                        dkb[j, dd] += ds * (qd + gk * tkd)
                        dtqh[o, dd] += gq * ds * qd
                        dtkh[o, dd] += gk * ds * kd
                        sq += qd * tqd
                        sk += kd * tkd
                    dgq += ds * sq
                    dgk += ds * sk
    return dq, dk, dv, dtq, dtk, dtv, dgq, dgk, dgv
