"""Compiled inner loops for the 3x3 stride-1 convolution hot path.

These kernels implement direct convolution in NCHW layout. The backward pass
w.r.t. the input is expressed as a correlation with flipped weights so every
loop writes contiguous rows and vectorizes. fastmath only reorders the
compiled reduction; the generated code is fixed, so results stay bitwise
reproducible from run to run on the same build.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv3x3_forward(xp, w, b, out):
    # xp: (N, C, H+2, W+2) input padded by one; w: (O, C, 3, 3); out: (N, O, H, W)
    N, C, Hp, Wp = xp.shape
    O = w.shape[0]
    H = Hp - 2
    W = Wp - 2
    for n in range(N):
        for i in range(H):
            for o in range(O):
                row = out[n, o, i]
                for j in range(W):
                    row[j] = b[o]
            for c in range(C):
                for ki in range(3):
                    src = xp[n, c, i + ki]
                    for o in range(O):
                        w0 = w[o, c, ki, 0]
                        w1 = w[o, c, ki, 1]
                        w2 = w[o, c, ki, 2]
                        row = out[n, o, i]
                        for j in range(W):
                            row[j] += w0 * src[j] + w1 * src[j + 1] + w2 * src[j + 2]


@njit(cache=True, fastmath=True)
def conv3x3_grad_w(g, xp, gw, gb):
    # g: (N, O, H, W) output grad; xp as in forward; gw/gb accumulated in place.
    N, C, Hp, Wp = xp.shape
    O = g.shape[1]
    H = Hp - 2
    W = Wp - 2
    for n in range(N):
        for o in range(O):
            for i in range(H):
                grow = g[n, o, i]
                s = grow.dtype.type(0.0)
                for j in range(W):
                    s += grow[j]
                gb[o] += s
                for c in range(C):
                    for ki in range(3):
                        src = xp[n, c, i + ki]
                        a0 = grow.dtype.type(0.0)
                        a1 = grow.dtype.type(0.0)
                        a2 = grow.dtype.type(0.0)
                        for j in range(W):
                            gv = grow[j]
                            a0 += gv * src[j]
                            a1 += gv * src[j + 1]
                            a2 += gv * src[j + 2]
                        gw[o, c, ki, 0] += a0
                        gw[o, c, ki, 1] += a1
                        gw[o, c, ki, 2] += a2


@njit(cache=True)
def maxpool2x2_forward(x, out, arg):
    # out: (N, C, H/2, W/2); arg stores the winning corner 0..3 (row-major,
    # first index wins ties)
    N, C, H, W = x.shape
    OH = H // 2
    OW = W // 2
    for n in range(N):
        for c in range(C):
            for i in range(OH):
                r0 = x[n, c, 2 * i]
                r1 = x[n, c, 2 * i + 1]
                orow = out[n, c, i]
                arow = arg[n, c, i]
                for j in range(OW):
                    v0 = r0[2 * j]
                    v1 = r0[2 * j + 1]
                    v2 = r1[2 * j]
                    v3 = r1[2 * j + 1]
                    best = v0
                    k = 0
                    if v1 > best:
                        best = v1
                        k = 1
                    if v2 > best:
                        best = v2
                        k = 2
                    if v3 > best:
                        best = v3
                        k = 3
                    orow[j] = best
                    arow[j] = k


@njit(cache=True)
def maxpool2x2_backward(g, arg, gx):
    N, C, OH, OW = g.shape
    for n in range(N):
        for c in range(C):
            for i in range(OH):
                grow = g[n, c, i]
                arow = arg[n, c, i]
                for j in range(OW):
                    k = arow[j]
                    gx[n, c, 2 * i + (k >> 1), 2 * j + (k & 1)] = grow[j]


@njit(cache=True, fastmath=True)
def conv3x3_grad_x(gp, w, gx):
    # gp: (N, O, H+2, W+2) output grad padded by one; gx: (N, C, H, W).
    # gx[n,c,i,j] = sum_{o,ki,kj} gp[n,o,i+ki,j+kj] * w[o,c,2-ki,2-kj]
    N, O, Hp, Wp = gp.shape
    C = w.shape[1]
    H = Hp - 2
    W = Wp - 2
    for n in range(N):
        for i in range(H):
            for c in range(C):
                row = gx[n, c, i]
                for j in range(W):
                    row[j] = 0.0
            for o in range(O):
                for ki in range(3):
                    src = gp[n, o, i + ki]
                    for c in range(C):
                        w0 = w[o, c, 2 - ki, 2]
                        w1 = w[o, c, 2 - ki, 1]
                        w2 = w[o, c, 2 - ki, 0]
                        row = gx[n, c, i]
                        for j in range(W):
                            row[j] += w0 * src[j] + w1 * src[j + 1] + w2 * src[j + 2]
