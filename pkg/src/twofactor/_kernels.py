"""Compiled likelihood loop used inside optimisation.

Mirrors ``kalman.kf_step`` (Joseph-form update, Cholesky of the innovation
covariance) for a two-dimensional state. Once the predicted covariance of a
time-invariant system stops changing, the factor and gain are reused.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_STEADY_RTOL = 1e-14


@njit(cache=True, nogil=True)
def _cholesky_inplace(A, m):
    # Lower factor written into A[:m, :m]; False when A is not PD.
    for j in range(m):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not s > 0.0:
            return False
        ljj = math.sqrt(s)
        A[j, j] = ljj
        for i in range(j + 1, m):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / ljj
    return True


@njit(cache=True, nogil=True)
def _forward(Lc, b, m, out):
    for i in range(m):
        s = b[i]
        for k in range(i):
            s -= Lc[i, k] * out[k]
        out[i] = s / Lc[i, i]


@njit(cache=True, nogil=True)
def _backward(Lc, b, m, out):
    for i in range(m - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, m):
            s -= Lc[k, i] * out[k]
        out[i] = s / Lc[i, i]


@njit(cache=True, nogil=True)
def filter_loglik(a0, P0, c, g, W, d, fk, fg, vdiag, y, const_rows):
    """Return ``(sum_t [log det L_t + e_t' L_t^-1 e_t], n_observed)``.

    ``d``, ``fk``, ``fg`` hold per-date intercepts and loadings, or a single
    row when ``const_rows`` is true. NaN entries of ``y`` are skipped. The
    first return value is ``inf`` when an innovation covariance is not
    positive definite.
    """
    T, n = y.shape
    a0_ = a0[0]
    a1_ = a0[1]
    p00 = P0[0, 0]
    p01 = P0[0, 1]
    p11 = P0[1, 1]

    Lc = np.empty((n, n))
    M = np.empty((n, 2))  # F' P_pred restricted to observed rows
    X0 = np.empty(n)
    X1 = np.empty(n)
    e = np.empty(n)
    z = np.empty(n)
    u = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    fk_o = np.empty(n)
    fg_o = np.empty(n)
    v_o = np.empty(n)
    K0 = np.empty(n)
    K1 = np.empty(n)

    total = 0.0
    n_obs = 0
    steady = False
    have_prev = False
    q00 = 0.0
    q01 = 0.0
    q11 = 0.0
    logdet = 0.0
    # Filtered covariance cached once steady.
    s00 = 0.0
    s01 = 0.0
    s11 = 0.0

    for t in range(T):
        r = 0 if const_rows else t
        # predict
        pa0 = g[0] * a0_ + c[0]
        pa1 = g[1] * a1_ + c[1]
        pp00 = g[0] * g[0] * p00 + W[0, 0]
        pp01 = g[0] * g[1] * p01 + W[0, 1]
        pp11 = g[1] * g[1] * p11 + W[1, 1]

        m = 0
        for i in range(n):
            if not math.isnan(y[t, i]):
                idx[m] = i
                m += 1
        if m == 0:
            a0_ = pa0
            a1_ = pa1
            p00 = pp00
            p01 = pp01
            p11 = pp11
            steady = False
            have_prev = False
            continue

        for j in range(m):
            i = idx[j]
            fk_o[j] = fk[r, i]
            fg_o[j] = fg[r, i]
            v_o[j] = vdiag[i]
            e[j] = y[t, i] - (d[r, i] + fk_o[j] * pa0 + fg_o[j] * pa1)

        if steady and m != n:
            steady = False
            have_prev = False
        if steady:
            pp00 = q00
            pp01 = q01
            pp11 = q11
        else:
            if const_rows and m == n and have_prev:
                scale = max(abs(pp00), abs(pp11))
                if (
                    abs(pp00 - q00) <= _STEADY_RTOL * scale
                    and abs(pp01 - q01) <= _STEADY_RTOL * scale
                    and abs(pp11 - q11) <= _STEADY_RTOL * scale
                ):
                    steady = True
            q00 = pp00
            q01 = pp01
            q11 = pp11
            have_prev = const_rows and m == n

        if not steady:
            for j in range(m):
                M[j, 0] = fk_o[j] * pp00 + fg_o[j] * pp01
                M[j, 1] = fk_o[j] * pp01 + fg_o[j] * pp11
            for j in range(m):
                for k in range(j + 1):
                    Lc[j, k] = M[j, 0] * fk_o[k] + M[j, 1] * fg_o[k]
                Lc[j, j] += v_o[j]
            if not _cholesky_inplace(Lc, m):
                return np.inf, n_obs
            logdet = 0.0
            for j in range(m):
                logdet += 2.0 * math.log(Lc[j, j])
            # K' = L^{-1} M
            for j in range(m):
                z[j] = M[j, 0]
            _forward(Lc, z, m, u)
            _backward(Lc, u, m, X0)
            for j in range(m):
                z[j] = M[j, 1]
            _forward(Lc, z, m, u)
            _backward(Lc, u, m, X1)
            for j in range(m):
                K0[j] = X0[j]
                K1[j] = X1[j]
            # Joseph form: (I - K F') P (I - K F')' + K V K'
            b00 = 1.0
            b01 = 0.0
            b10 = 0.0
            b11 = 1.0
            kv00 = 0.0
            kv01 = 0.0
            kv11 = 0.0
            for j in range(m):
                b00 -= K0[j] * fk_o[j]
                b01 -= K0[j] * fg_o[j]
                b10 -= K1[j] * fk_o[j]
                b11 -= K1[j] * fg_o[j]
                kv00 += K0[j] * K0[j] * v_o[j]
                kv01 += K0[j] * K1[j] * v_o[j]
                kv11 += K1[j] * K1[j] * v_o[j]
            h00 = b00 * pp00 + b01 * pp01
            h01 = b00 * pp01 + b01 * pp11
            h10 = b10 * pp00 + b11 * pp01
            h11 = b10 * pp01 + b11 * pp11
            s00 = h00 * b00 + h01 * b01 + kv00
            s01 = 0.5 * ((h00 * b10 + h01 * b11) + (h10 * b00 + h11 * b01)) + kv01
            s11 = h10 * b10 + h11 * b11 + kv11

        _forward(Lc, e, m, z)
        quad = 0.0
        for j in range(m):
            quad += z[j] * z[j]
        total += logdet + quad
        n_obs += m

        ga0 = 0.0
        ga1 = 0.0
        for j in range(m):
            ga0 += K0[j] * e[j]
            ga1 += K1[j] * e[j]
        a0_ = pa0 + ga0
        a1_ = pa1 + ga1
        p00 = s00
        p01 = s01
        p11 = s11

    return total, n_obs
