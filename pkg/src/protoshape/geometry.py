"""Point cloud and voxel geometry.

Clouds are ``[N, 3]`` float64 arrays normalised to the cube [-0.5, 0.5]^3.
Voxel grids are ``[C, R, R, R]`` with cell ``(i, j, k)`` centred at
``-0.5 + (index + 0.5) / R`` along x, y, z.
"""

from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import kernels
from .tensor import ContractError, DimensionError, Tensor, _make


class EmptyOutputError(RuntimeError):
    """An operation produced no points (e.g. a collapsed occupancy grid)."""


class PartialViewError(RuntimeError):
    """No usable partial view could be produced."""


class Normalized(NamedTuple):
    points: np.ndarray
    center: np.ndarray
    scale: float
    degenerate: bool


SCALE_FLOOR = 1e-9


def normalize(points) -> Normalized:
    """Centre the bounding box at the origin and scale its longest side to 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ContractError(f"expected a non-empty [N,3] cloud, got {pts.shape}")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float((hi - lo).max())
    degenerate = scale < SCALE_FLOOR
    if degenerate:
        scale = SCALE_FLOOR
    out = (pts - center) / scale
    # the longest axis can round a hair past +-0.5
    np.clip(out, -0.5, 0.5, out=out)
    return Normalized(out, center, scale, degenerate)


def denormalize(points, center, scale) -> np.ndarray:
    return np.asarray(points) * scale + center


def farthest_point_sampling(cloud, m: int, seed_index: int = 0, return_index: bool = False):
    """Greedy max-min subset of ``m`` points starting from ``seed_index``."""
    pts = np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"cannot sample {m} points from {n}")
    if not 0 <= seed_index < n:
        raise ContractError(f"seed index {seed_index} out of range")
    idx = kernels.fps(pts, m, seed_index)
    return (pts[idx], idx) if return_index else pts[idx]


# voxel helpers ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _centers(res: int) -> np.ndarray:
    c = -0.5 + (np.arange(res) + 0.5) / res
    g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    g.flags.writeable = False
    return g


def cell_centers(res: int) -> np.ndarray:
    """``[R^3, 3]`` cell centres in linear (C-order) index order (read-only)."""
    return _centers(int(res))


def _lattice_coords(points: np.ndarray, res: int):
    g = (points + 0.5) * res - 0.5
    g = np.clip(g, 0.0, res - 1)
    if res == 1:
        return np.zeros_like(g, dtype=np.int64), np.zeros_like(g)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    return i0, g - i0


def trilinear_matrix(points, res: int) -> sp.csr_matrix:
    """Sparse ``[N, R^3]`` matrix of trilinear weights on cell centres.

    Queries beyond the outermost centres use clamped neighbours.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    i0, t = _lattice_coords(pts, res)
    rows, cols, vals = [], [], []
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        ix = np.minimum(i0[:, 0] + dx, res - 1)
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            iy = np.minimum(i0[:, 1] + dy, res - 1)
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                iz = np.minimum(i0[:, 2] + dz, res - 1)
                rows.append(np.arange(n))
                cols.append((ix * res + iy) * res + iz)
                vals.append(wx * wy * wz)
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, res ** 3))
    return m.tocsr()


class GridResult(NamedTuple):
    grid: np.ndarray
    n_clamped: int


def gridding(cloud, res: int, clamp: bool = True) -> GridResult:
    """Trilinear scatter of points into a ``[1, R, R, R]`` occupancy grid.

    Each point spreads unit mass over its 8 surrounding cell centres; with
    ``clamp`` the cell values are then capped at 1. Coordinates outside
    [-0.5, 0.5] are moved to the boundary and counted.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    outside = np.any((pts < -0.5) | (pts > 0.5), axis=1)
    n_clamped = int(outside.sum())
    if n_clamped:
        pts = np.clip(pts, -0.5, 0.5)
    w = trilinear_matrix(pts, res)
    vals = np.asarray(w.sum(axis=0)).ravel()
    if clamp:
        vals = np.minimum(vals, 1.0)
    return GridResult(vals.reshape(1, res, res, res), n_clamped)


def gridding_reverse(grid, threshold: float = 0.3, return_index: bool = False):
    """One point per cell whose value exceeds ``threshold``, at the cell centre.

    Points come out in linear cell order.
    """
    g = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    if g.ndim == 4:
        if g.shape[0] != 1:
            raise DimensionError(f"gridding_reverse expects one channel, got {g.shape}")
        g = g[0]
    res = g.shape[0]
    if np.any(g < 0):
        raise ContractError("grid values must be non-negative")
    idx = np.flatnonzero(g.ravel() > threshold)
    if idx.size == 0:
        raise EmptyOutputError(f"no cell exceeds threshold {threshold}")
    pts = cell_centers(res)[idx]
    return (pts, idx) if return_index else pts


def point_feature_sampling(features: Tensor, queries) -> Tensor:
    """Trilinearly interpolate a ``[C, R, R, R]`` feature grid at query points.

    Returns ``[N, C]``; differentiable with respect to ``features``.
    """
    fd = features.data
    if fd.ndim != 4 or not fd.shape[1] == fd.shape[2] == fd.shape[3]:
        raise DimensionError(f"expected [C,R,R,R] features, got {fd.shape}")
    c, res = fd.shape[0], fd.shape[1]
    q = np.clip(np.asarray(queries, dtype=np.float64), -0.5, 0.5)
    w = trilinear_matrix(q, res)
    flat = fd.reshape(c, -1)
    out = np.asarray(w @ flat.T)
    shape = fd.shape

    def grad_fn(g):
        return (np.asarray(w.T @ g).T.reshape(shape),)

    return _make(out, (features,), grad_fn, "point_feature_sampling")


# partial views ---------------------------------------------------------------------------

PARTIAL_EXTENT = 0.5 * np.sqrt(3.0)


def rotation_to_z(view) -> np.ndarray:
    """Rotation matrix taking the unit vector ``view`` onto +z."""
    v = np.asarray(view, dtype=np.float64)
    nrm = np.linalg.norm(v)
    if not nrm > 0:
        raise ContractError("view direction must be non-zero")
    v = v / nrm
    z = np.array([0.0, 0.0, 1.0])
    c = float(v @ z)
    axis = np.cross(v, z)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    k = axis / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * kx + (1 - c) * (kx @ kx)


def make_partial(cloud, view, image_res: int = 32, return_index: bool = False,
                 min_points: int = 1):
    """Visible subset of ``cloud`` seen from direction ``view`` through a z-buffer.

    The cloud is rotated so the camera sits on +z, projected orthographically
    onto an ``image_res`` x ``image_res`` raster spanning the cube's bounding
    sphere, and only the point nearest the camera survives in each pixel.
    Output points are the original input rows, in input order.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.shape[0] < 1:
        raise ContractError("cannot take a partial view of an empty cloud")
    rot = rotation_to_z(view)
    p = pts @ rot.T
    pix = np.floor((p[:, :2] + PARTIAL_EXTENT) / (2 * PARTIAL_EXTENT) * image_res).astype(np.int64)
    pix = np.clip(pix, 0, image_res - 1)
    keep = kernels.zbuffer(pix[:, 0] * image_res + pix[:, 1], p[:, 2])
    if keep.size < min_points:
        raise PartialViewError(f"view kept {keep.size} points, need {min_points}")
    return (pts[keep], keep) if return_index else pts[keep]


def random_view(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    while np.linalg.norm(v) < 1e-8:
        v = rng.normal(size=3)
    return v / np.linalg.norm(v)


# PCF1 on-disk format ---------------------------------------------------------------------

PCF_MAGIC = b"PCF1"


def write_pcf(path, points) -> None:
    """Little-endian: magic ``PCF1``, u32 count, then count x 3 float32."""
    pts = np.asarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractError(f"expected [N,3] points, got {pts.shape}")
    Path(path).write_bytes(PCF_MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes())


def read_pcf(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != PCF_MAGIC:
        raise OSError(f"{path}: not a PCF1 file")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 12 * n:
        raise OSError(f"{path}: expected {8 + 12 * n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, 3).astype(np.float64)
