"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable, or when forced with
``AMTML_KERNELS=python``. Signatures match ``amtml._ext`` exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k


def conv2d_forward(x, w, b):
    k = w.shape[2]
    win = _windows(x, k)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,O
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, gout):
    k = w.shape[2]
    win = _windows(x, k)
    gw = np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))
    gb = gout.sum(axis=(0, 2, 3))
    gwin = _windows(gout, k)
    gx = np.tensordot(gwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb


def max_pool_argmax(x):
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    idx = np.argmax(flat, axis=2)
    vals = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    return np.ascontiguousarray(vals), idx.astype(np.int64)


def max_pool_backward(gout, idx, h, w):
    n, c = gout.shape
    gx = np.zeros((n, c, h * w))
    np.put_along_axis(gx, idx[..., None], gout[..., None], axis=2)
    return gx.reshape(n, c, h, w)


def _cosines(x, trip, eps):
    u = x[trip[:, 0]] - x[trip[:, 1]]
    v = x[trip[:, 2]] - x[trip[:, 1]]
    nu = np.sqrt((u * u).sum(axis=1))
    nv = np.sqrt((v * v).sum(axis=1))
    ok = (nu > eps) & (nv > eps)
    nu_s = np.where(ok, nu, 1.0)
    nv_s = np.where(ok, nv, 1.0)
    cos = (u * v).sum(axis=1) / (nu_s * nv_s)
    return u, v, nu_s, nv_s, cos, ok


def _scatter_cos_grad(g, trip, u, v, nu, nv, cos, coef):
    inv = 1.0 / (nu * nv)
    du = v * inv[:, None] - (cos / (nu * nu))[:, None] * u
    dv = u * inv[:, None] - (cos / (nv * nv))[:, None] * v
    du *= coef[:, None]
    dv *= coef[:, None]
    np.add.at(g, trip[:, 0], du)
    np.add.at(g, trip[:, 2], dv)
    np.add.at(g, trip[:, 1], -(du + dv))


def angle_huber(target, student, trip, eps):
    """Sum of Huber(cos_target, cos_student) over non-degenerate triplets.

    Returns ``(total, count, grad_target, grad_student)``; gradients are of
    the sum, not the mean.
    """
    g_t = np.zeros_like(target)
    g_s = np.zeros_like(student)
    if len(trip) == 0:
        return 0.0, 0, g_t, g_s
    trip = np.asarray(trip, dtype=np.int64)
    ut, vt, nut, nvt, ct, okt = _cosines(target, trip, eps)
    us, vs, nus, nvs, cs, oks = _cosines(student, trip, eps)
    ok = okt & oks
    d = np.where(ok, ct - cs, 0.0)
    ad = np.abs(d)
    loss = np.where(ad <= 1.0, 0.5 * d * d, ad - 0.5)
    slope = np.where(ad <= 1.0, d, np.sign(d))
    slope = np.where(ok, slope, 0.0)
    total = 0.0
    for value in loss[ok]:
        total += value  # sequential order, matches the compiled kernel
    _scatter_cos_grad(g_t, trip, ut, vt, nut, nvt, ct, slope)
    _scatter_cos_grad(g_s, trip, us, vs, nus, nvs, cs, -slope)
    return float(total), int(ok.sum()), g_t, g_s
