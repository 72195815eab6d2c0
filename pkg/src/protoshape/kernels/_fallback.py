"""Pure numpy implementations of the hot geometric kernels.

Every function here has a twin with the same name and signature in the
compiled ``_ckernels`` extension. Results must agree exactly (same squared
distance formula, same tie-breaking: lowest index wins).
"""

import numpy as np


def _sqdist(q, r):
    d = q[:, None, :] - r[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nn_brute(query, ref):
    """Nearest neighbour of every query row in ``ref`` by exhaustive search.

    Returns ``(d2, idx)``: squared distances and indices into ``ref``.
    Ties resolve to the lowest index.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    n = query.shape[0]
    d2 = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    # chunk to bound the n*m temporary
    step = max(1, 2_000_000 // max(1, ref.shape[0]))
    for s in range(0, n, step):
        block = _sqdist(query[s:s + step], ref)
        j = np.argmin(block, axis=1)
        idx[s:s + step] = j
        d2[s:s + step] = block[np.arange(block.shape[0]), j]
    return d2, idx


def grid_layout(query, ref, cell):
    """Shared spatial-hash layout used by both backends of ``nn_grid``."""
    lo = np.minimum(query.min(axis=0), ref.min(axis=0))
    hi = np.maximum(query.max(axis=0), ref.max(axis=0))
    dims = np.maximum(np.floor((hi - lo) / cell).astype(np.int64) + 1, 1)
    return lo, dims


def _cells(points, lo, cell, dims):
    c = np.floor((points - lo) / cell).astype(np.int64)
    return np.minimum(np.maximum(c, 0), dims - 1)


def _shell(r):
    rng = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    return off[np.abs(off).max(axis=1) == r]


def nn_grid(query, ref, cell):
    """Exact nearest neighbour via a uniform spatial grid and ring search.

    Same contract as :func:`nn_brute`. ``cell`` is the grid spacing.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    n = query.shape[0]
    lo, dims = grid_layout(query, ref, cell)
    rc = _cells(ref, lo, cell, dims)
    rkey = (rc[:, 0] * dims[1] + rc[:, 1]) * dims[2] + rc[:, 2]
    order = np.argsort(rkey, kind="stable")
    ncell = int(dims.prod())
    counts = np.bincount(rkey, minlength=ncell)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    qc = _cells(query, lo, cell, dims)

    best = np.full(n, np.inf)
    bidx = np.full(n, -1, dtype=np.int64)
    active = np.arange(n)
    max_r = int(dims.max())
    r = 0
    while active.size and r <= max_r:
        off = _shell(r)
        cc = qc[active][:, None, :] + off[None, :, :]
        inside = np.all((cc >= 0) & (cc < dims), axis=2)
        qi, oi = np.nonzero(inside)
        cc = cc[qi, oi]
        key = (cc[:, 0] * dims[1] + cc[:, 1]) * dims[2] + cc[:, 2]
        cnt = counts[key]
        tot = int(cnt.sum())
        if tot:
            owner = np.repeat(qi, cnt)
            base = np.repeat(starts[key] - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
            j = order[base + np.arange(tot)]
            qa = active[owner]
            diff = query[qa] - ref[j]
            d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
            srt = np.lexsort((j, d2, qa))
            qa, j, d2 = qa[srt], j[srt], d2[srt]
            first = np.ones(qa.size, dtype=bool)
            first[1:] = qa[1:] != qa[:-1]
            qa, j, d2 = qa[first], j[first], d2[first]
            better = (d2 < best[qa]) | ((d2 == best[qa]) & (j < bidx[qa]))
            best[qa[better]] = d2[better]
            bidx[qa[better]] = j[better]
        # points outside shells 0..r are at least r*cell away (slack for rounding
        # in the cell assignment)
        bound = (r * cell * (1.0 - 1e-9)) ** 2
        active = active[~(best[active] < bound)]
        r += 1
    return best, bidx


def fps(points, m, start):
    """Greedy farthest point sampling; returns ``m`` indices into ``points``."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    out = np.empty(m, dtype=np.int64)
    out[0] = start
    diff = points - points[start]
    mind = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
    mind[start] = -1.0  # never pick a point twice, even among duplicates
    for i in range(1, m):
        j = int(np.argmax(mind))
        out[i] = j
        diff = points - points[j]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(mind, d, out=mind)
        mind[j] = -1.0
    return out


def zbuffer(pixel, depth):
    """Indices of the point with the largest depth in every occupied pixel.

    Returned in ascending index order; ties keep the lowest index.
    """
    pixel = np.asarray(pixel, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    idx = np.arange(pixel.size)
    srt = np.lexsort((idx, -depth, pixel))
    p = pixel[srt]
    first = np.ones(p.size, dtype=bool)
    first[1:] = p[1:] != p[:-1]
    return np.sort(srt[first])


def im2col(x, stride):
    """``[C*27, R'^3]`` patches of a ``[C, R, R, R]`` volume, zero-padded by one.

    Row ``c*27 + (a*9 + b*3 + d)`` holds input voxel ``stride*o + (a,b,d) - 1``
    for every output position ``o``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    c, res = x.shape[0], x.shape[1]
    rp = res // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((c, 27, rp, rp, rp))
    span = stride * (rp - 1) + 1
    i = 0
    for a in range(3):
        for b in range(3):
            for d in range(3):
                cols[:, i] = xp[:, a:a + span:stride, b:b + span:stride, d:d + span:stride]
                i += 1
    return cols.reshape(c * 27, rp ** 3)


def _splat_index(cx, cy, height, width):
    nv = cx.shape[0]
    return (np.arange(nv)[:, None, None, None] * (height * width)
            + cx[..., :, None] * width + cy[..., None, :])


def splat(cx, cy, px, py, height, width):
    """Flat ``[V*H*W]`` sums of separable kernels ``px[a] * py[b]``.

    ``cx``/``cy`` (int64) and ``px``/``py`` are ``[V, M, K]`` window columns
    and weights per view and point.
    """
    nv = cx.shape[0]
    flat = _splat_index(cx, cy, height, width)
    contrib = px[..., :, None] * py[..., None, :]
    return np.bincount(flat.ravel(), contrib.ravel(), minlength=nv * height * width)


def splat_grad(gs, cx, cy, px, py, height, width):
    """Adjoint of :func:`splat` w.r.t. the weights: ``(d/dpx, d/dpy)``."""
    gw = np.asarray(gs, dtype=np.float64).ravel()[_splat_index(cx, cy, height, width)]
    gpx = (gw * py[..., None, :]).sum(-1)
    gpy = (gw * px[..., :, None]).sum(-2)
    return gpx, gpy
