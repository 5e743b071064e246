"""Compiled spring kernels.

Same arithmetic as the numpy reference in :mod:`physics`; each body is
handled independently and its masses are accumulated in spring order, so
results do not depend on the thread count.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def spring_forces(x, act, smask, end_a, end_b, rest0, k, beta, min_len):
    B, N, _ = x.shape
    S = end_a.shape[0]
    F = np.zeros_like(x)
    u = np.zeros((B, S, 3), dtype=x.dtype)
    L = np.ones((B, S), dtype=x.dtype)
    f = np.zeros((B, S), dtype=x.dtype)
    ok = np.zeros((B, S), dtype=np.bool_)
    for b in range(B):
        for s in range(S):
            if not smask[b, s]:
                continue
            i = end_a[s]
            j = end_b[s]
            d0 = x[b, i, 0] - x[b, j, 0]
            d1 = x[b, i, 1] - x[b, j, 1]
            d2 = x[b, i, 2] - x[b, j, 2]
            length = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if length <= min_len:
                continue
            ok[b, s] = True
            L[b, s] = length
            u0 = d0 / length
            u1 = d1 / length
            u2 = d2 / length
            u[b, s, 0] = u0
            u[b, s, 1] = u1
            u[b, s, 2] = u2
            rest = rest0[s] * (1 + beta * act[b, s])
            fs = k * (length - rest)
            f[b, s] = fs
            F[b, i, 0] -= fs * u0
            F[b, i, 1] -= fs * u1
            F[b, i, 2] -= fs * u2
            F[b, j, 0] += fs * u0
            F[b, j, 1] += fs * u1
            F[b, j, 2] += fs * u2
    return F, u, L, f, ok


@numba.njit(cache=True)
def spring_forces_vjp(u, L, f, ok, gF, end_a, end_b, rest0, k, beta):
    B, S, _ = u.shape
    N = gF.shape[1]
    gx = np.zeros((B, N, 3), dtype=gF.dtype)
    ga = np.zeros((B, S), dtype=gF.dtype)
    for b in range(B):
        for s in range(S):
            if not ok[b, s]:
                continue
            i = end_a[s]
            j = end_b[s]
            g0 = gF[b, j, 0] - gF[b, i, 0]
            g1 = gF[b, j, 1] - gF[b, i, 1]
            g2 = gF[b, j, 2] - gF[b, i, 2]
            u0 = u[b, s, 0]
            u1 = u[b, s, 1]
            u2 = u[b, s, 2]
            gf = g0 * u0 + g1 * u1 + g2 * u2
            fs = f[b, s]
            ug = fs * gf  # u . (f g)
            gL = k * gf
            ga[b, s] = -gL * rest0[s] * beta
            inv = 1.0 / L[b, s]
            d0 = (fs * g0 - u0 * ug) * inv + gL * u0
            d1 = (fs * g1 - u1 * ug) * inv + gL * u1
            d2 = (fs * g2 - u2 * ug) * inv + gL * u2
            gx[b, i, 0] += d0
            gx[b, i, 1] += d1
            gx[b, i, 2] += d2
            gx[b, j, 0] -= d0
            gx[b, j, 1] -= d1
            gx[b, j, 2] -= d2
    return gx, ga
