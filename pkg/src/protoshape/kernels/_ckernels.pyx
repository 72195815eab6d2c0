# cython: language_level=3
"""Compiled versions of the geometric kernels in ``_fallback``.

Signatures, tie-breaking and the squared-distance formula match the numpy
versions bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


def nn_brute(query, ref):
    cdef double[:, ::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef double[:, ::1] r = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = r.shape[0], i, j, bj
    d2_arr = np.empty(n)
    idx_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] d2 = d2_arr
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double best, dx, dy, dz, d
    for i in range(n):
        best = INFINITY
        bj = 0
        for j in range(m):
            dx = q[i, 0] - r[j, 0]
            dy = q[i, 1] - r[j, 1]
            dz = q[i, 2] - r[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                bj = j
        d2[i] = best
        idx[i] = bj
    return d2_arr, idx_arr


cdef inline Py_ssize_t _cell(double v, double lo, double cell, Py_ssize_t dim):
    cdef Py_ssize_t c = <Py_ssize_t>floor((v - lo) / cell)
    if c < 0:
        return 0
    if c > dim - 1:
        return dim - 1
    return c


def nn_grid(query, ref, double cell):
    from ._fallback import grid_layout

    cdef double[:, ::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef double[:, ::1] r = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = r.shape[0]
    lo_arr, dims_arr = grid_layout(np.asarray(q), np.asarray(r), cell)
    cdef double lx = lo_arr[0], ly = lo_arr[1], lz = lo_arr[2]
    cdef Py_ssize_t gx = dims_arr[0], gy = dims_arr[1], gz = dims_arr[2]
    cdef Py_ssize_t ncell = gx * gy * gz

    cnt_arr = np.zeros(ncell + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] start = cnt_arr
    key_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] key = key_arr
    cdef Py_ssize_t i, j, k, cx, cy, cz
    for j in range(m):
        cx = _cell(r[j, 0], lx, cell, gx)
        cy = _cell(r[j, 1], ly, cell, gy)
        cz = _cell(r[j, 2], lz, cell, gz)
        k = (cx * gy + cy) * gz + cz
        key[j] = k
        start[k + 1] += 1
    for k in range(ncell):
        start[k + 1] += start[k]
    fill_arr = np.array(cnt_arr[:ncell], copy=True)
    cdef cnp.int64_t[::1] fill = fill_arr
    slot_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] slot = slot_arr
    # ascending j inside each cell, same as the stable argsort
    for j in range(m):
        k = key[j]
        slot[fill[k]] = j
        fill[k] += 1

    d2_arr = np.empty(n)
    idx_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] d2 = d2_arr
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef Py_ssize_t maxr = gx
    if gy > maxr:
        maxr = gy
    if gz > maxr:
        maxr = gz
    cdef Py_ssize_t qx, qy, qz, rr, ox, oy, oz, ax, ay, az, s, e, p, bj
    cdef double best, dx, dy, dz, d, bound
    for i in range(n):
        qx = _cell(q[i, 0], lx, cell, gx)
        qy = _cell(q[i, 1], ly, cell, gy)
        qz = _cell(q[i, 2], lz, cell, gz)
        best = INFINITY
        bj = -1
        rr = 0
        while rr <= maxr:
            for ox in range(-rr, rr + 1):
                ax = qx + ox
                if ax < 0 or ax >= gx:
                    continue
                for oy in range(-rr, rr + 1):
                    ay = qy + oy
                    if ay < 0 or ay >= gy:
                        continue
                    for oz in range(-rr, rr + 1):
                        if ox != rr and ox != -rr and oy != rr and oy != -rr and oz != rr and oz != -rr:
                            continue
                        az = qz + oz
                        if az < 0 or az >= gz:
                            continue
                        k = (ax * gy + ay) * gz + az
                        s = start[k]
                        e = start[k + 1]
                        for p in range(s, e):
                            j = slot[p]
                            dx = q[i, 0] - r[j, 0]
                            dy = q[i, 1] - r[j, 1]
                            dz = q[i, 2] - r[j, 2]
                            d = dx * dx + dy * dy + dz * dz
                            if d < best or (d == best and j < bj):
                                best = d
                                bj = j
            bound = rr * cell * (1.0 - 1e-9)
            if best < bound * bound:
                break
            rr += 1
        d2[i] = best
        idx[i] = bj
    return d2_arr, idx_arr


def fps(points, Py_ssize_t m, Py_ssize_t start):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], i, j, bj
    out_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    mind_arr = np.empty(n)
    cdef double[::1] mind = mind_arr
    cdef double dx, dy, dz, d, bv
    out[0] = start
    for j in range(n):
        dx = p[j, 0] - p[start, 0]
        dy = p[j, 1] - p[start, 1]
        dz = p[j, 2] - p[start, 2]
        mind[j] = dx * dx + dy * dy + dz * dz
    mind[start] = -1.0  # never pick a point twice, even among duplicates
    for i in range(1, m):
        bj = 0
        bv = mind[0]
        for j in range(1, n):
            if mind[j] > bv:
                bv = mind[j]
                bj = j
        out[i] = bj
        for j in range(n):
            dx = p[j, 0] - p[bj, 0]
            dy = p[j, 1] - p[bj, 1]
            dz = p[j, 2] - p[bj, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
        mind[bj] = -1.0
    return out_arr


def zbuffer(pixel, depth):
    cdef cnp.int64_t[::1] px = np.ascontiguousarray(pixel, dtype=np.int64)
    cdef double[::1] dp = np.ascontiguousarray(depth, dtype=np.float64)
    cdef Py_ssize_t n = px.shape[0], i, k
    if n == 0:
        return np.empty(0, dtype=np.int64)
    cdef Py_ssize_t npix = 0
    for i in range(n):
        if px[i] + 1 > npix:
            npix = px[i] + 1
    win_arr = np.full(npix, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] win = win_arr
    for i in range(n):
        k = px[i]
        if win[k] < 0 or dp[i] > dp[win[k]]:
            win[k] = i
    keep = win_arr[win_arr >= 0]
    keep.sort()
    return keep


def im2col(x, Py_ssize_t stride):
    cdef double[:, :, :, ::1] v = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t c = v.shape[0], res = v.shape[1], rp = res // stride
    cdef Py_ssize_t n3 = rp * rp * rp
    out_arr = np.empty((c * 27, n3))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t ch, a, b, d, row, i, j, k, xi, yj, zk, col
    with nogil:
        for ch in range(c):
            for a in range(3):
                for b in range(3):
                    for d in range(3):
                        row = ch * 27 + a * 9 + b * 3 + d
                        col = 0
                        for i in range(rp):
                            xi = stride * i + a - 1
                            for j in range(rp):
                                yj = stride * j + b - 1
                                if xi < 0 or xi >= res or yj < 0 or yj >= res:
                                    for k in range(rp):
                                        out[row, col + k] = 0.0
                                else:
                                    for k in range(rp):
                                        zk = stride * k + d - 1
                                        if zk < 0 or zk >= res:
                                            out[row, col + k] = 0.0
                                        else:
                                            out[row, col + k] = v[ch, xi, yj, zk]
                                col += rp
    return out_arr


def splat(cx, cy, px, py, Py_ssize_t height, Py_ssize_t width):
    cdef const cnp.int64_t[:, :, ::1] ix = np.ascontiguousarray(cx, dtype=np.int64)
    cdef const cnp.int64_t[:, :, ::1] iy = np.ascontiguousarray(cy, dtype=np.int64)
    cdef const double[:, :, ::1] wx = np.ascontiguousarray(px, dtype=np.float64)
    cdef const double[:, :, ::1] wy = np.ascontiguousarray(py, dtype=np.float64)
    cdef Py_ssize_t nv = ix.shape[0], m = ix.shape[1], kk = ix.shape[2]
    out_arr = np.zeros(nv * height * width)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t v, p, a, b, base
    cdef double w
    with nogil:
        for v in range(nv):
            for p in range(m):
                for a in range(kk):
                    base = v * height * width + ix[v, p, a] * width
                    w = wx[v, p, a]
                    for b in range(kk):
                        out[base + iy[v, p, b]] += w * wy[v, p, b]
    return out_arr


def splat_grad(gs, cx, cy, px, py, Py_ssize_t height, Py_ssize_t width):
    cdef const double[::1] g = np.ascontiguousarray(gs, dtype=np.float64).ravel()
    cdef const cnp.int64_t[:, :, ::1] ix = np.ascontiguousarray(cx, dtype=np.int64)
    cdef const cnp.int64_t[:, :, ::1] iy = np.ascontiguousarray(cy, dtype=np.int64)
    cdef const double[:, :, ::1] wx = np.ascontiguousarray(px, dtype=np.float64)
    cdef const double[:, :, ::1] wy = np.ascontiguousarray(py, dtype=np.float64)
    cdef Py_ssize_t nv = ix.shape[0], m = ix.shape[1], kk = ix.shape[2]
    gpx_arr = np.zeros((nv, m, kk))
    gpy_arr = np.zeros((nv, m, kk))
    cdef double[:, :, ::1] gpx = gpx_arr
    cdef double[:, :, ::1] gpy = gpy_arr
    cdef Py_ssize_t v, p, a, b, base
    cdef double gv, acc
    with nogil:
        for v in range(nv):
            for p in range(m):
                for a in range(kk):
                    base = v * height * width + ix[v, p, a] * width
                    acc = 0.0
                    for b in range(kk):
                        gv = g[base + iy[v, p, b]]
                        acc = acc + gv * wy[v, p, b]
                        gpy[v, p, b] = gpy[v, p, b] + gv * wx[v, p, a]
                    gpx[v, p, a] = acc
    return gpx_arr, gpy_arr
