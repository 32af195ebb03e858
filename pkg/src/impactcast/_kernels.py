"""Hot inner loops, each with a numba and a pure-numpy implementation.

Public functions dispatch on :func:`impactcast._accel.use_numba` at call
time. Both paths compute the same quantity; results agree to rounding.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import JIT_OPTIONS, njit, use_numba

EARTH_RADIUS_KM = 6371.0088


# --------------------------------------------------------------------------
# convolution (valid cross-correlation, stride 1)
# --------------------------------------------------------------------------

def _conv2d_forward_np(x, w, b):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,K
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def _conv2d_backward_np(x, w, gout):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    db = gout.sum(axis=(0, 2, 3))
    dw = np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))  # K,C,kh,kw
    gp = np.pad(gout, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))  # B,K,H,W,kh,kw
    dx = np.tensordot(gwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw, db


@njit(**JIT_OPTIONS)
def _im2col_t_nb(x, kh, kw):
    # transposed patch matrix (C*kh*kw, B*Ho*Wo): inner loop runs along a row of x
    B, C, H, W = x.shape
    Ho = H - kh + 1
    Wo = W - kw + 1
    cols = np.empty((C * kh * kw, B * Ho * Wo), dtype=x.dtype)
    q = 0
    for c in range(C):
        for p in range(kh):
            for s in range(kw):
                r = 0
                for b in range(B):
                    for i in range(Ho):
                        for j in range(Wo):
                            cols[q, r] = x[b, c, i + p, j + s]
                            r += 1
                q += 1
    return cols


@njit(**JIT_OPTIONS)
def _conv2d_forward_nb(x, w, b):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    Ho = H - kh + 1
    Wo = W - kw + 1
    cols = _im2col_t_nb(x, kh, kw)
    out = np.dot(np.ascontiguousarray(w.reshape(K, C * kh * kw)), cols)  # (K, B*Ho*Wo)
    res = np.empty((B, K, Ho, Wo), dtype=x.dtype)
    n = Ho * Wo
    for bb in range(B):
        for k in range(K):
            src = out[k, bb * n:(bb + 1) * n]
            dst = res[bb, k].reshape(n)
            for t in range(n):
                dst[t] = src[t] + b[k]
    return res


@njit(**JIT_OPTIONS)
def _conv2d_backward_nb(x, w, gout):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    Ho = H - kh + 1
    Wo = W - kw + 1
    n = Ho * Wo
    g = np.empty((K, B * n), dtype=x.dtype)
    db = np.zeros(K, dtype=x.dtype)
    for bb in range(B):
        for k in range(K):
            src = gout[bb, k].reshape(n)
            acc = 0.0
            for t in range(n):
                g[k, bb * n + t] = src[t]
                acc += src[t]
            db[k] += acc
    cols = _im2col_t_nb(x, kh, kw)
    dw = np.dot(g, cols.T).reshape(K, C, kh, kw)
    dcols = np.dot(np.ascontiguousarray(w.reshape(K, C * kh * kw)).T, g)  # (C*kh*kw, B*Ho*Wo)
    dx = np.zeros((B, C, H, W), dtype=x.dtype)
    q = 0
    for c in range(C):
        for p in range(kh):
            for s in range(kw):
                r = 0
                for bb in range(B):
                    for i in range(Ho):
                        for j in range(Wo):
                            dx[bb, c, i + p, j + s] += dcols[q, r]
                            r += 1
                q += 1
    return dx, dw, db


def conv2d_forward(x, w, b):
    if use_numba():
        return _conv2d_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), b)
    return _conv2d_forward_np(x, w, b)


def conv2d_backward(x, w, gout):
    if use_numba():
        return _conv2d_backward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gout)
        )
    return _conv2d_backward_np(x, w, gout)


# --------------------------------------------------------------------------
# non-overlapping max pooling; ties go to the lowest flat index
# --------------------------------------------------------------------------

def _maxpool_forward_np(x, ph, pw):
    B, C, H, W = x.shape
    Ho, Wo = H // ph, W // pw
    v = x[:, :, : Ho * ph, : Wo * pw].reshape(B, C, Ho, ph, Wo, pw)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, ph * pw)
    arg = v.argmax(axis=-1)  # argmax returns the first occurrence
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward_np(gout, arg, in_shape, ph, pw):
    B, C, H, W = in_shape
    Ho, Wo = gout.shape[2], gout.shape[3]
    g = np.zeros((B, C, Ho, Wo, ph * pw), dtype=gout.dtype)
    np.put_along_axis(g, arg[..., None], gout[..., None], axis=-1)
    g = g.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape, dtype=gout.dtype)
    dx[:, :, : Ho * ph, : Wo * pw] = g.reshape(B, C, Ho * ph, Wo * pw)
    return dx


@njit(**JIT_OPTIONS)
def _maxpool_forward_nb(x, ph, pw):
    B, C, H, W = x.shape
    Ho = H // ph
    Wo = W // pw
    out = np.empty((B, C, Ho, Wo), dtype=x.dtype)
    arg = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[b, c, i * ph, j * pw]
                    besti = 0
                    for p in range(ph):
                        for q in range(pw):
                            v = x[b, c, i * ph + p, j * pw + q]
                            if v > best:
                                best = v
                                besti = p * pw + q
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = besti
    return out, arg


@njit(**JIT_OPTIONS)
def _maxpool_backward_nb(gout, arg, B, C, H, W, ph, pw):
    Ho = gout.shape[2]
    Wo = gout.shape[3]
    dx = np.zeros((B, C, H, W), dtype=gout.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    a = arg[b, c, i, j]
                    dx[b, c, i * ph + a // pw, j * pw + a % pw] += gout[b, c, i, j]
    return dx


def maxpool_forward(x, ph, pw):
    if use_numba():
        return _maxpool_forward_nb(np.ascontiguousarray(x), ph, pw)
    return _maxpool_forward_np(x, ph, pw)


def maxpool_backward(gout, arg, in_shape, ph, pw):
    if use_numba():
        B, C, H, W = in_shape
        return _maxpool_backward_nb(
            np.ascontiguousarray(gout), np.ascontiguousarray(arg), B, C, H, W, ph, pw
        )
    return _maxpool_backward_np(gout, arg, tuple(in_shape), ph, pw)


# --------------------------------------------------------------------------
# great-circle distance, neighbour search, duplicate scan
# --------------------------------------------------------------------------

def haversine_km(lat1, lon1, lat2, lon2):
    """Vectorised great-circle distance in km."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


@njit(**JIT_OPTIONS)
def _haversine_scalar(lat1, lon1, lat2, lon2):
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2 - lon1)
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    if a > 1.0:
        a = 1.0
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))


def _knn_distances_np(qt, qlat, qlon, t, lat, lon, km_scale):
    return np.abs(t - qt) + haversine_km(qlat, qlon, lat, lon) / km_scale


@njit(**JIT_OPTIONS)
def _knn_distances_nb(qt, qlat, qlon, t, lat, lon, km_scale):
    n = t.shape[0]
    d = np.empty(n)
    for i in range(n):
        d[i] = abs(t[i] - qt) + _haversine_scalar(qlat, qlon, lat[i], lon[i]) / km_scale
    return d


def nearest_k(qt, qlat, qlon, t, lat, lon, k, km_scale=10.0):
    """Indices of the ``k`` candidates closest to the query.

    Distance is ``|dt hours| + great-circle km / km_scale``; equal distances
    resolve to the lower candidate index.
    """
    if use_numba():
        d = _knn_distances_nb(float(qt), float(qlat), float(qlon), t, lat, lon, float(km_scale))
    else:
        d = _knn_distances_np(qt, qlat, qlon, t, lat, lon, km_scale)
    return np.argsort(d, kind="stable")[:k]


def _duplicate_scan_np(t, lat, lon, street, max_dt, max_km):
    n = t.shape[0]
    dup = np.zeros(n, dtype=bool)
    hi = np.searchsorted(t, t + max_dt, side="right")
    for i in range(n):
        if dup[i] or hi[i] <= i + 1:
            continue
        j = np.arange(i + 1, hi[i])
        j = j[~dup[j] & (street[j] == street[i])]
        if j.size:
            close = haversine_km(lat[i], lon[i], lat[j], lon[j]) <= max_km
            dup[j[close]] = True
    return dup


@njit(**JIT_OPTIONS)
def _duplicate_scan_nb(t, lat, lon, street, max_dt, max_km):
    n = t.shape[0]
    dup = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if dup[i]:
            continue
        j = i + 1
        while j < n and t[j] - t[i] <= max_dt:
            if not dup[j] and street[j] == street[i]:
                if _haversine_scalar(lat[i], lon[i], lat[j], lon[j]) <= max_km:
                    dup[j] = True
            j += 1
    return dup


def duplicate_scan(t, lat, lon, street, max_dt, max_km):
    """Flag later reports that repeat an earlier surviving one.

    Inputs must be sorted by ``t`` (then by a stable tiebreak key).
    """
    t = np.ascontiguousarray(t, dtype=np.int64)
    lat = np.ascontiguousarray(lat, dtype=np.float64)
    lon = np.ascontiguousarray(lon, dtype=np.float64)
    street = np.ascontiguousarray(street, dtype=np.int64)
    if use_numba():
        return _duplicate_scan_nb(t, lat, lon, street, np.int64(max_dt), float(max_km))
    return _duplicate_scan_np(t, lat, lon, street, max_dt, max_km)
