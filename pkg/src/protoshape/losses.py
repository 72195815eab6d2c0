"""Chamfer distance, silhouette rendering, projection loss and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels
from .tensor import ContractError, Tensor, _make, as_tensor

EPS = 1e-8
# tanh saturates to exactly 1.0 in float64; keep masks strictly below 1 so
# log(1 - M - eps) stays finite
MASK_CEIL = 1.0 - 2 * EPS


def _points(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"expected an [N,3] cloud, got {arr.shape}")
    if arr.shape[0] == 0:
        raise ContractError("empty point cloud")
    return arr


def nearest(a, b, method: str = "grid"):
    """Squared distance and index of the nearest point of ``b`` for every point of ``a``."""
    a, b = _points(a), _points(b)
    if method == "brute":
        return kernels.nn_brute(a, b)
    if method == "grid":
        return kernels.nn_grid(a, b, kernels.default_cell(b.shape[0]))
    raise ValueError(f"unknown nearest-neighbour method {method!r}")


def chamfer(a, b, method: str = "grid"):
    """Symmetric mean squared nearest-neighbour distance.

    Returns a scalar :class:`Tensor` differentiable with respect to ``a`` when
    ``a`` is a tensor; ``b`` is treated as a constant.
    """
    at = as_tensor(a)
    ad, bd = _points(at), _points(b)
    d_ab, i_ab = nearest(ad, bd, method)
    d_ba, i_ba = nearest(bd, ad, method)
    na, nb = ad.shape[0], bd.shape[0]
    value = d_ab.mean() + d_ba.mean()

    def grad_fn(g):
        ga = 2.0 * (ad - bd[i_ab]) / na
        gb = 2.0 * (ad[i_ba] - bd) / nb
        np.add.at(ga, i_ba, gb)
        return (g * ga,)

    return _make(np.asarray(value), (at,), grad_fn, "chamfer")


def _cell_of(points: np.ndarray, res: int) -> np.ndarray:
    ijk = np.clip(np.floor((points + 0.5) * res).astype(np.int64), 0, res - 1)
    return (ijk[:, 0] * res + ijk[:, 1]) * res + ijk[:, 2]


def sparse_chamfer(points, gt, occupancy: Optional[Tensor] = None, cells=None,
                   existence_grad: float = 1.0, method: str = "grid") -> Tensor:
    """Chamfer distance of a sparse cloud with an extra existence gradient.

    The value is exactly the chamfer distance. Given the occupancy grid
    ``[1,R,R,R]`` and the cell of each sparse point, the gradient also reaches
    the occupancy through two surrogate slopes. Selected cells follow the
    derivative of the occupancy-weighted precision ``sum o_i d_i / sum o_i``,
    so cells far from the ground truth lose occupancy. The cell holding each
    ground-truth point gains occupancy by how much that point's recall error
    would shrink were the cell centre in the cloud.
    """
    cd = chamfer(points, gt, method)
    if occupancy is None:
        return cd
    pts, gt = _points(points), _points(gt)
    cells = np.asarray(cells, dtype=np.int64)
    res = occupancy.shape[-1]
    d_i, _ = nearest(pts, gt, method)
    e_j, _ = nearest(gt, pts, method)
    o = occupancy.data.reshape(-1)[cells]
    so = o.sum()
    slope = np.zeros(occupancy.data.size)
    np.add.at(slope, cells, (d_i - (o @ d_i) / so) / so)
    own = _cell_of(gt, res)
    ijk = np.stack(np.unravel_index(own, (res, res, res)), axis=1)
    to_centre = (((ijk + 0.5) / res - 0.5 - gt) ** 2).sum(axis=1)
    np.add.at(slope, own, -np.maximum(e_j - to_centre, 0.0) / len(gt))
    slope = (existence_grad * slope).reshape(occupancy.shape)

    gate = _make(np.asarray(0.0), (occupancy,), lambda g: (g * slope,), "existence")
    return cd + gate


def chamfer_value(a, b, method: str = "grid") -> float:
    a, b = _points(a), _points(b)
    return float(nearest(a, b, method)[0].mean() + nearest(b, a, method)[0].mean())


def f_score(pred, gt, threshold: float = 0.01, method: str = "grid") -> float:
    """Harmonic mean of point-wise precision and recall at ``threshold``.

    Distances are plain (unsquared) Euclidean.
    """
    p, g = _points(pred), _points(gt)
    d_pg = np.sqrt(nearest(p, g, method)[0])
    d_gp = np.sqrt(nearest(g, p, method)[0])
    precision = float(np.mean(d_pg < threshold))
    recall = float(np.mean(d_gp < threshold))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def consistency(tracks: Sequence[Sequence], method: str = "grid") -> float:
    """Mean over tracks of the mean chamfer distance between consecutive frames."""
    if not tracks:
        raise ContractError("no tracks given")
    per_track = []
    for t, frames in enumerate(tracks):
        if len(frames) < 2:
            raise ContractError(f"track {t} has {len(frames)} frame(s), need at least 2")
        cds = [chamfer_value(frames[f], frames[f + 1], method) for f in range(len(frames) - 1)]
        per_track.append(sum(cds) / len(cds))
    return sum(per_track) / len(per_track)


# silhouettes -------------------------------------------------------------------------

KERNEL_SIGMA = 1.0
KERNEL_CUTOFF = 3.0


def view_rotations(n_views: int, seed: int) -> np.ndarray:
    """``[V, 3, 3]`` uniformly random rotations, reproducible from ``seed``."""
    return Rotation.random(n_views, random_state=seed).as_matrix()


_WINDOW = int(np.floor(KERNEL_CUTOFF * KERNEL_SIGMA))


def _kernel_window(coord: np.ndarray, size: int):
    """Truncated Gaussian weights on the pixels around each coordinate.

    Returns ``(cols, phi, d)`` each shaped ``coord.shape + (2*cutoff + 1,)``;
    slots that fall outside the image or the cutoff carry zero weight.
    """
    base = np.floor(coord).astype(np.int64)
    cols = base[..., None] + np.arange(-_WINDOW, _WINDOW + 1)
    d = coord[..., None] - cols
    phi = np.exp(-d * d / (2 * KERNEL_SIGMA ** 2))
    phi[(cols < 0) | (cols >= size) | (np.abs(d) > KERNEL_CUTOFF * KERNEL_SIGMA)] = 0.0
    return np.clip(cols, 0, size - 1), phi, d


def sample_indices(n: int, m: int, rng: Optional[np.random.Generator]):
    """Indices of the ``m`` points fed to the renderer.

    All points when ``n == m``; without replacement when ``n > m``; with
    replacement when ``n < m`` (second value flags that case).
    """
    if n == m:
        return np.arange(n), False
    if rng is None:
        rng = np.random.default_rng(0)
    if n > m:
        return np.sort(rng.choice(n, size=m, replace=False)), False
    return np.sort(rng.integers(0, n, size=m)), True


def render_masks(cloud, rotations, m: int = 512, height: int = 64, width: int = 64,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Soft orthographic silhouettes ``[V, H, W]`` of a cloud.

    Each view rotates the cloud, drops z, maps x and y from [-0.5, 0.5] onto
    pixel centres ``0..H-1`` / ``0..W-1`` (outside points are clamped to the
    border) and sets ``pixel(h, w) = tanh(sum_m phi(x_m - h) phi(y_m - w))``
    with a unit-pixel Gaussian ``phi`` truncated at three pixels.
    """
    ct = as_tensor(cloud)
    pts = _points(ct)
    rots = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    idx, _ = sample_indices(pts.shape[0], m, rng)
    # duplicates from resampling add identical kernels: weight unique points
    uniq, counts = np.unique(idx, return_counts=True)
    sub = pts[uniq]
    mult = counts.astype(np.float64)[None, :, None]
    proj = np.einsum("vij,mj->vmi", rots[:, :2], sub)  # [V, M, 2]
    xr = (proj[..., 0] + 0.5) * (height - 1)
    yr = (proj[..., 1] + 0.5) * (width - 1)
    cx, px, dx = _kernel_window(np.clip(xr, 0, height - 1), height)  # [V, M, K]
    cy, py, dy = _kernel_window(np.clip(yr, 0, width - 1), width)
    px = px * mult
    nv = rots.shape[0]
    s = kernels.splat(cx, cy, px, py, height, width)
    t = np.tanh(s.reshape(nv, height, width))
    sat = t > MASK_CEIL
    out = np.where(sat, MASK_CEIL, t)
    n = pts.shape[0]

    def grad_fn(g):
        gs = g * (1.0 - t * t)
        gs[sat] = 0.0
        gpx, gpy = kernels.splat_grad(gs, cx, cy, px, py, height, width)
        gx = (gpx * px * -dx).sum(-1) / KERNEL_SIGMA ** 2
        gy = (gpy * py * -dy).sum(-1) / KERNEL_SIGMA ** 2
        gx[(xr < 0) | (xr > height - 1)] = 0.0
        gy[(yr < 0) | (yr > width - 1)] = 0.0
        gsub = (gx * (height - 1)).T @ rots[:, 0] + (gy * (width - 1)).T @ rots[:, 1]
        gp = np.zeros((n, 3))
        gp[uniq] = gsub
        return (gp,)

    return _make(out, (ct,), grad_fn, "render_masks")


def render_mask(cloud, rotation, m: int = 512, height: int = 64, width: int = 64,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Single-view ``[H, W]`` silhouette; see :func:`render_masks`."""
    from .tensor import reshape

    return reshape(render_masks(cloud, np.asarray(rotation)[None], m, height, width, rng),
                   (height, width))


def projection_from_masks(pred_masks: Tensor, gt_masks, orientation: str = "as_printed",
                          eps: float = EPS) -> Tensor:
    """Binary cross-entropy between rendered masks, averaged over ``V*H*W``.

    ``as_printed``: ``-mean(Mp*log(Mg+eps) + (1-Mp)*log(1-Mg-eps))`` with the
    prediction ``Mp`` as the coefficient and the ground truth ``Mg`` inside
    the logarithms. ``standard`` swaps the roles.
    """
    pm = as_tensor(pred_masks)
    gm = gt_masks.data if isinstance(gt_masks, Tensor) else np.asarray(gt_masks, dtype=np.float64)
    if pm.shape != gm.shape:
        raise ContractError(f"mask shapes differ: {pm.shape} vs {gm.shape}")
    n = gm.size
    if orientation == "as_printed":
        lp = np.log(gm + eps)
        lq = np.log(1.0 - gm - eps)
        value = -(pm.data * lp + (1.0 - pm.data) * lq).sum() / n
        slope = -(lp - lq) / n
        return _make(np.asarray(value), (pm,), lambda g: (g * slope,), "projection")
    if orientation == "standard":
        p = pm.data
        lp = np.log(p + eps)
        lq = np.log(1.0 - p - eps)
        value = -(gm * lp + (1.0 - gm) * lq).sum() / n

        def grad_fn(g):
            return (g * -(gm / (p + eps) - (1.0 - gm) / (1.0 - p - eps)) / n,)

        return _make(np.asarray(value), (pm,), grad_fn, "projection")
    raise ValueError(f"unknown BCE orientation {orientation!r}")


def projection_loss(pred, gt, rotations, m: int = 512, height: int = 64, width: int = 64,
                    orientation: str = "as_printed", eps: float = EPS,
                    rng: Optional[np.random.Generator] = None, gt_masks=None) -> Tensor:
    """Multi-view silhouette BCE between ``pred`` and ``gt`` under shared views.

    ``gt_masks`` may carry pre-rendered ground-truth masks for the same views.
    """
    pred_masks = render_masks(pred, rotations, m, height, width, rng)
    if gt_masks is None:
        gt_masks = render_masks(_points(gt), rotations, m, height, width, rng).data
    return projection_from_masks(pred_masks, gt_masks, orientation, eps)


# total loss ----------------------------------------------------------------------------

@dataclass
class LossReport:
    cd_sparse: float
    cd_dense: float
    proj_sparse: float
    proj_dense: float
    weight: float
    total: float

    def as_dict(self) -> dict:
        return dict(cd_sparse=self.cd_sparse, cd_dense=self.cd_dense,
                    proj_sparse=self.proj_sparse, proj_dense=self.proj_dense,
                    weight=self.weight, total=self.total)


def total_loss(pred_sparse, pred_dense, gt, weight: float = 1.0, lambda_proj: float = 0.1,
               rotations=None, use_proj: bool = True, m: int = 512, height: int = 64,
               width: int = 64, orientation: str = "as_printed",
               rng: Optional[np.random.Generator] = None, gt_masks=None,
               occupancy: Optional[Tensor] = None, cells=None, existence_grad: float = 1.0):
    """Per-sample weighted loss ``w * (CD_sp + CD_d + lambda * (proj_sp + proj_d))``.

    With ``occupancy`` and the sparse points' ``cells`` the sparse chamfer
    term also trains the occupancy grid; see :func:`sparse_chamfer`.
    Returns ``(loss_tensor, LossReport)``.
    """
    gt_pts = _points(gt)
    cd_sp = sparse_chamfer(pred_sparse, gt_pts, occupancy, cells, existence_grad)
    cd_d = chamfer(pred_dense, gt_pts)
    inner = cd_sp + cd_d
    pj_sp = pj_d = 0.0
    if use_proj and lambda_proj != 0:
        if rotations is None:
            raise ContractError("projection loss needs view rotations")
        if gt_masks is None:
            gt_masks = render_masks(gt_pts, rotations, m, height, width, rng).data
        ps = projection_loss(pred_sparse, None, rotations, m, height, width, orientation,
                             rng=rng, gt_masks=gt_masks)
        pd = projection_loss(pred_dense, None, rotations, m, height, width, orientation,
                             rng=rng, gt_masks=gt_masks)
        inner = inner + (ps + pd) * float(lambda_proj)
        pj_sp, pj_d = ps.item(), pd.item()
    loss = inner * float(weight)
    report = LossReport(cd_sp.item(), cd_d.item(), pj_sp, pj_d, float(weight), loss.item())
    return loss, report
