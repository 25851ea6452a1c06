"""Pure-numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
The compiled module is preferred at import time; this file is the fallback and
the reference the benchmark compares against.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def jacobi_svd_batch(a, tol, max_sweeps, compute_v):
    """One-sided Jacobi on a stack of tall matrices.

    ``a`` has shape (batch, m, n) with m >= n. Returns the rotated matrices
    (columns are sigma_j * u_j), the accumulated right rotations (or None),
    the sweep count and the largest remaining off-diagonal cosine.

    Columns are paired by a round-robin tournament so each round rotates n/2
    disjoint pairs at once; columns are stored as rows and kept in tournament
    order so every round works on two contiguous halves.
    """
    a = np.asarray(a, dtype=np.float64)
    nb, m, n = a.shape
    if n < 2:
        v = np.ones((nb, 1, 1)) if compute_v else None
        return a.copy(), v, 0, 0.0
    n2 = n + (n % 2)
    half = n2 // 2
    at = np.zeros((nb, n2, m))
    at[:, :n, :] = a.transpose(0, 2, 1)
    vt = None
    if compute_v:
        vt = np.zeros((nb, n2, n))
        vt[:, np.arange(n), np.arange(n)] = 1.0
    order = np.arange(n2)
    # position i pairs with position n2-1-i; rotate all but position 0 each round
    perm = np.concatenate(([0, n2 - 1], np.arange(1, n2 - 1)))
    lo = slice(0, half)
    hi = slice(n2 - 1, half - 1 if half > 0 else None, -1)
    off = 0.0
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        off = 0.0
        rotated = False
        for _ in range(n2 - 1):
            ap = at[:, lo, :]
            aq = at[:, hi, :]
            alpha = np.einsum("bkm,bkm->bk", ap, ap)
            beta = np.einsum("bkm,bkm->bk", aq, aq)
            gamma = np.einsum("bkm,bkm->bk", ap, aq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(scale > 0.0, np.abs(gamma) / scale, 0.0)
            need = ratio > tol
            if need.any():
                off = max(off, float(ratio.max()))
                rotated = True
                g = np.where(need, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(need, c, 1.0)[:, :, None]
                s = np.where(need, s, 0.0)[:, :, None]
                new_p = c * ap - s * aq
                at[:, hi, :] = s * ap + c * aq
                at[:, lo, :] = new_p
                if vt is not None:
                    vp = vt[:, lo, :]
                    vq = vt[:, hi, :]
                    new_vp = c * vp - s * vq
                    vt[:, hi, :] = s * vp + c * vq
                    vt[:, lo, :] = new_vp
            at = at[:, perm, :]
            if vt is not None:
                vt = vt[:, perm, :]
            order = order[perm]
        if not rotated:
            break
    inv = np.argsort(order)
    at = at[:, inv, :][:, :n, :]
    out = np.ascontiguousarray(at.transpose(0, 2, 1))
    v = None
    if vt is not None:
        v = np.ascontiguousarray(vt[:, inv, :][:, :n, :].transpose(0, 2, 1))
    return out, v, sweeps, (0.0 if not rotated else off)


def conv2d_valid_batch(x, w):
    """x: (N, Cin, H, W); w: (Cin, Cout, p, q) -> (N, Cout, H-p+1, W-q+1)."""
    p, q = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (p, q), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_weight(x, g, p, q):
    win = sliding_window_view(x, (p, q), axis=(2, 3))
    dw = np.tensordot(win, g, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(dw.transpose(0, 3, 1, 2))


def conv2d_grad_input(g, w, h, wd):
    p, q = w.shape[2], w.shape[3]
    gpad = np.pad(g, ((0, 0), (0, 0), (p - 1, p - 1), (q - 1, q - 1)))
    win = sliding_window_view(gpad, (p, q), axis=(2, 3))
    dx = np.tensordot(win, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def maxpool_forward(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.intp)


def maxpool_backward(g, arg, in_shape, k):
    n, c, h, w = in_shape
    ho, wo = g.shape[2], g.shape[3]
    routed = np.zeros((n, c, ho, wo, k * k))
    np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
    routed = routed.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape)
    dx[:, :, : ho * k, : wo * k] = routed.reshape(n, c, ho * k, wo * k)
    return dx


def dropblock_expand(seeds, b, u, v):
    """seeds: (M, u-b+1, v-b+1) booleans -> float mask (M, u, v), 0 = dropped."""
    su, sv = u - b + 1, v - b + 1
    dropped = np.zeros((seeds.shape[0], u, v), dtype=bool)
    for di in range(b):
        for dj in range(b):
            dropped[:, di : di + su, dj : dj + sv] |= seeds
    return (~dropped).astype(np.float64)
