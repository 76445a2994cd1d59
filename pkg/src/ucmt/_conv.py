"""Numba kernels for same-padding 2D convolution, forward and backward.

All kernels are strict IEEE float64 (no fastmath, no threading) and run the
batch loop inside the jitted function in ascending index order, so results
are bit-identical across runs.  The 3x3 case is tap-unrolled; other odd
kernel sizes share a generic path.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _fwd3(xp, w, b, out):
    # xp (B, Cin, H+2, W+2) padded input; w (Cout, Cin, 3, 3); out (B, Cout, H, W)
    B, Cout, H, W = out.shape[0], out.shape[1], out.shape[2], out.shape[3]
    Cin = w.shape[1]
    for bi in range(B):
        for co in range(Cout):
            for i in range(H):
                row = out[bi, co, i]
                row[:] = b[co]
                for ci in range(Cin):
                    x0 = xp[bi, ci, i]
                    x1 = xp[bi, ci, i + 1]
                    x2 = xp[bi, ci, i + 2]
                    w00 = w[co, ci, 0, 0]; w01 = w[co, ci, 0, 1]; w02 = w[co, ci, 0, 2]
                    w10 = w[co, ci, 1, 0]; w11 = w[co, ci, 1, 1]; w12 = w[co, ci, 1, 2]
                    w20 = w[co, ci, 2, 0]; w21 = w[co, ci, 2, 1]; w22 = w[co, ci, 2, 2]
                    for j in range(W):
                        row[j] += (w00 * x0[j] + w01 * x0[j + 1] + w02 * x0[j + 2]
                                   + w10 * x1[j] + w11 * x1[j + 1] + w12 * x1[j + 2]
                                   + w20 * x2[j] + w21 * x2[j + 1] + w22 * x2[j + 2])


@njit(cache=True)
def _bwd3_dx(gp, w, dx):
    # Input gradient as a gather: correlate the padded upstream gradient gp
    # (B, Cout, H+2, W+2) with the tap-flipped, co/ci-swapped kernel.
    B, Cin, H, W = dx.shape[0], dx.shape[1], dx.shape[2], dx.shape[3]
    Cout = w.shape[0]
    for bi in range(B):
        for ci in range(Cin):
            for i in range(H):
                row = dx[bi, ci, i]
                row[:] = 0.0
                for co in range(Cout):
                    g0 = gp[bi, co, i]
                    g1 = gp[bi, co, i + 1]
                    g2 = gp[bi, co, i + 2]
                    w00 = w[co, ci, 0, 0]; w01 = w[co, ci, 0, 1]; w02 = w[co, ci, 0, 2]
                    w10 = w[co, ci, 1, 0]; w11 = w[co, ci, 1, 1]; w12 = w[co, ci, 1, 2]
                    w20 = w[co, ci, 2, 0]; w21 = w[co, ci, 2, 1]; w22 = w[co, ci, 2, 2]
                    for j in range(W):
                        row[j] += (w22 * g0[j] + w21 * g0[j + 1] + w20 * g0[j + 2]
                                   + w12 * g1[j] + w11 * g1[j + 1] + w10 * g1[j + 2]
                                   + w02 * g2[j] + w01 * g2[j + 1] + w00 * g2[j + 2])


@njit(cache=True)
def _bwd3_dw(xp, dout, dw):
    # dw (Cout, Cin, 3, 3) preallocated zeros; summed over the batch in
    # ascending index order.  Per-tap column buffers keep the inner loops
    # free of reduction dependencies; each tap collapses its buffer at the end.
    B, Cout, H, W = dout.shape[0], dout.shape[1], dout.shape[2], dout.shape[3]
    Cin = xp.shape[1]
    acc = np.empty((9, W))
    for bi in range(B):
        for co in range(Cout):
            for ci in range(Cin):
                acc[:, :] = 0.0
                a0 = acc[0]; a1 = acc[1]; a2 = acc[2]
                a3 = acc[3]; a4 = acc[4]; a5 = acc[5]
                a6 = acc[6]; a7 = acc[7]; a8 = acc[8]
                for i in range(H):
                    g = dout[bi, co, i]
                    x0 = xp[bi, ci, i]
                    x1 = xp[bi, ci, i + 1]
                    x2 = xp[bi, ci, i + 2]
                    for j in range(W):
                        gv = g[j]
                        a0[j] += gv * x0[j]
                        a1[j] += gv * x0[j + 1]
                        a2[j] += gv * x0[j + 2]
                        a3[j] += gv * x1[j]
                        a4[j] += gv * x1[j + 1]
                        a5[j] += gv * x1[j + 2]
                        a6[j] += gv * x2[j]
                        a7[j] += gv * x2[j + 1]
                        a8[j] += gv * x2[j + 2]
                for tap in range(9):
                    s = 0.0
                    for j in range(W):
                        s += acc[tap, j]
                    dw[co, ci, tap // 3, tap % 3] += s


@njit(cache=True)
def _fwdk(xp, w, b, out):
    # Generic odd-kernel path (rarely hit; 3x3 uses the unrolled kernel).
    B, Cout, H, W = out.shape[0], out.shape[1], out.shape[2], out.shape[3]
    Cin, k = w.shape[1], w.shape[2]
    for bi in range(B):
        for co in range(Cout):
            for i in range(H):
                row = out[bi, co, i]
                row[:] = b[co]
                for ci in range(Cin):
                    for di in range(k):
                        xr = xp[bi, ci, i + di]
                        for dj in range(k):
                            wv = w[co, ci, di, dj]
                            for j in range(W):
                                row[j] += wv * xr[j + dj]


@njit(cache=True)
def _bwdk_dx(w, dout, dxp):
    B, Cout, H, W = dout.shape[0], dout.shape[1], dout.shape[2], dout.shape[3]
    Cin, k = w.shape[1], w.shape[2]
    for bi in range(B):
        for ci in range(Cin):
            for co in range(Cout):
                for di in range(k):
                    for dj in range(k):
                        wv = w[co, ci, di, dj]
                        for i in range(H):
                            g = dout[bi, co, i]
                            d = dxp[bi, ci, i + di]
                            for j in range(W):
                                d[j + dj] += wv * g[j]


@njit(cache=True)
def _bwdk_dw(xp, dout, dw):
    B, Cout, H, W = dout.shape[0], dout.shape[1], dout.shape[2], dout.shape[3]
    Cin, k = xp.shape[1], dw.shape[2]
    for bi in range(B):
        for co in range(Cout):
            for ci in range(Cin):
                for di in range(k):
                    for dj in range(k):
                        s = 0.0
                        for i in range(H):
                            g = dout[bi, co, i]
                            xr = xp[bi, ci, i + di]
                            for j in range(W):
                                s += g[j] * xr[j + dj]
                        dw[co, ci, di, dj] += s


def conv_forward(x, w, b):
    """Same-padding conv of x (B,Cin,H,W) with w (Cout,Cin,k,k); returns (B,Cout,H,W)."""
    k = w.shape[2]
    p = k // 2
    B, _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty((B, w.shape[0], H, W))
    if k == 3:
        _fwd3(xp, w, b, out)
    else:
        _fwdk(xp, w, b, out)
    return out, xp


def conv_backward(xp, w, dout):
    """Gradients of a same-padding conv given the padded input saved by conv_forward.

    Returns (dw, db, dx) with dx in the unpadded geometry.
    """
    k = w.shape[2]
    p = k // 2
    B, Cout, H, W = dout.shape
    Cin = w.shape[1]
    dw = np.zeros_like(w)
    db = dout.sum(axis=(0, 2, 3))
    if k == 3:
        _bwd3_dw(xp, dout, dw)
        gp = np.pad(dout, ((0, 0), (0, 0), (p, p), (p, p)))
        dx = np.empty((B, Cin, H, W))
        _bwd3_dx(gp, w, dx)
    else:
        _bwdk_dw(xp, dout, dw)
        dxp = np.zeros((B, Cin, H + 2 * p, W + 2 * p))
        _bwdk_dx(w, dout, dxp)
        dx = np.ascontiguousarray(dxp[:, :, p:p + H, p:p + W])
    return dw, db, dx
