"""Voxel encoder-decoder completion network with selective perceptual fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from . import geometry, kernels
from .geometry import EmptyOutputError
from .losses import sparse_chamfer  # noqa: F401  (re-exported)
from .tensor import (ContractError, DimensionError, Tensor, _make, as_tensor, concat, conv3d,
                     conv3d_transposed, linear, mul, mul_scalar, parameter, relu, reshape,
                     sigmoid, take_rows, tanh, zeros_parameter)


@dataclass
class NetConfig:
    grid_resolution: int = 16
    levels: int = 3
    channels: List[int] = field(default_factory=lambda: [8, 16, 32])
    bottleneck_channels: int = 32
    n_sparse: int = 128
    rho: int = 4
    theta: float = 0.3
    hidden: int = 32
    spf_levels: int = 3          # SPF replaces the skip at levels 0..spf_levels-1
    offset_cells: float = 2.0    # dense offsets are bounded by this many cell widths
    sparse_mode: str = "center"  # "center" | "centroid" (occupancy-weighted 3x3x3 mean)
    occupancy_prior: float = 0.1  # initial occupancy, sets the output bias to its logit

    def validate(self) -> None:
        if len(self.channels) != self.levels:
            raise ContractError(f"{self.levels} levels need {self.levels} channel widths")
        if self.grid_resolution % (2 ** self.levels):
            raise ContractError(f"grid resolution {self.grid_resolution} not divisible by 2^{self.levels}")
        if not 0 <= self.spf_levels <= self.levels:
            raise ContractError(f"spf_levels must lie in [0, {self.levels}]")
        if self.n_sparse < 1 or self.rho < 1:
            raise ContractError("n_sparse and rho must be positive")
        if self.sparse_mode not in ("center", "centroid"):
            raise ContractError(f"unknown sparse_mode {self.sparse_mode!r}")
        if not 0 < self.occupancy_prior < 1:
            raise ContractError("occupancy_prior must lie in (0, 1)")


def _kernel(rng, cout, cin, name):
    return parameter((cout, cin, 3, 3, 3), rng, cin * 27, name=name)


class SpfBlock:
    """Prior-gated skip fusion at one decoder level.

    ``g = u * f``; ``d = relu(down(g))``; ``m = [d, deeper]``;
    ``h = relu(up(m))``; output ``relu(fuse([h, g]))`` with the shape of ``f``.
    """

    def __init__(self, channels: int, deeper_channels: int, rng, prefix: str):
        c, cd = channels, deeper_channels
        self.params = {
            f"{prefix}.down.k": _kernel(rng, c, c, f"{prefix}.down.k"),
            f"{prefix}.down.b": zeros_parameter((c,), f"{prefix}.down.b"),
            f"{prefix}.up.k": _kernel(rng, c + cd, c, f"{prefix}.up.k"),
            f"{prefix}.up.b": zeros_parameter((c,), f"{prefix}.up.b"),
            f"{prefix}.fuse.k": _kernel(rng, c, 2 * c, f"{prefix}.fuse.k"),
            f"{prefix}.fuse.b": zeros_parameter((c,), f"{prefix}.fuse.b"),
        }
        self.prefix = prefix

    def __call__(self, f: Tensor, deeper: Tensor, u) -> Tensor:
        return spf_fuse(self, f, deeper, u)

    def p(self, name):
        return self.params[f"{self.prefix}.{name}"]


def spf_fuse(block: SpfBlock, f: Tensor, deeper: Tensor, u) -> Tensor:
    if f.data.ndim != 4 or deeper.data.ndim != 4 or deeper.shape[1] * 2 != f.shape[1]:
        raise DimensionError(f"SPF needs the deeper map at half resolution: {f.shape} vs {deeper.shape}")
    u = as_tensor(u)
    g = mul(f, u)
    d = relu(conv3d(g, block.p("down.k"), block.p("down.b"), stride=2))
    m = concat([d, deeper], axis=0)
    h = relu(conv3d_transposed(m, block.p("up.k"), block.p("up.b"), stride=2))
    return relu(conv3d(concat([h, g], axis=0), block.p("fuse.k"), block.p("fuse.b"), stride=1))


class SkipBlock:
    """Plain U-Net skip: ``relu(up(deeper)) + f``."""

    def __init__(self, channels: int, deeper_channels: int, rng, prefix: str):
        self.params = {
            f"{prefix}.up.k": _kernel(rng, deeper_channels, channels, f"{prefix}.up.k"),
            f"{prefix}.up.b": zeros_parameter((channels,), f"{prefix}.up.b"),
        }
        self.prefix = prefix

    def __call__(self, f: Tensor, deeper: Tensor, u) -> Tensor:
        up = relu(conv3d_transposed(deeper, self.params[f"{self.prefix}.up.k"],
                                    self.params[f"{self.prefix}.up.b"], stride=2))
        return up + f


class Forward(NamedTuple):
    sparse: Tensor          # [n_sparse, 3]
    dense: Tensor           # [rho * n_sparse, 3]
    occupancy: Tensor       # [1, R, R, R]
    cells: np.ndarray       # [n_sparse] grid cell of each sparse point
    levels: list
    fused: list
    threshold: float


class CompletionNet:
    def __init__(self, config: Optional[NetConfig] = None, seed: int = 0):
        self.config = config or NetConfig()
        self.config.validate()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.params = {}
        ch = cfg.channels
        cin = 1
        for lvl in range(cfg.levels):
            self.params[f"enc{lvl}.k"] = _kernel(rng, ch[lvl], cin, f"enc{lvl}.k")
            self.params[f"enc{lvl}.b"] = zeros_parameter((ch[lvl],), f"enc{lvl}.b")
            cin = ch[lvl]
        self.params["bottleneck.k"] = _kernel(rng, cfg.bottleneck_channels, cin, "bottleneck.k")
        self.params["bottleneck.b"] = zeros_parameter((cfg.bottleneck_channels,), "bottleneck.b")
        self.blocks = []
        for lvl in range(cfg.levels):
            deeper = cfg.bottleneck_channels if lvl == cfg.levels - 1 else ch[lvl + 1]
            cls = SpfBlock if lvl < cfg.spf_levels else SkipBlock
            block = cls(ch[lvl], deeper, rng, f"dec{lvl}")
            self.blocks.append(block)
            self.params.update(block.params)
        self.params["out.k"] = _kernel(rng, ch[0], 1, "out.k")
        self.params["out.b"] = zeros_parameter((1,), "out.b")
        p0 = cfg.occupancy_prior
        self.params["out.b"].data[:] = np.log(p0 / (1.0 - p0))
        feat_in = ch[0] + 1 + 3
        self.params["mlp0.w"] = parameter((feat_in, cfg.hidden), rng, feat_in, name="mlp0.w")
        self.params["mlp0.b"] = zeros_parameter((cfg.hidden,), "mlp0.b")
        self.params["mlp1.w"] = parameter((cfg.hidden, 3 * cfg.rho), rng, cfg.hidden, scale=0.1,
                                          name="mlp1.w")
        self.params["mlp1.b"] = zeros_parameter((3 * cfg.rho,), "mlp1.b")

    def parameters(self):
        return list(self.params.values())

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for k, p in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"checkpoint tensor {k} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()

    @property
    def cell(self) -> float:
        return 1.0 / self.config.grid_resolution

    def forward(self, partial, u=1.0) -> Forward:
        return forward(self, partial, u)


def encode(net: CompletionNet, partial):
    """Voxelise the partial cloud and run the strided conv encoder.

    Returns ``(levels, bottleneck)``; level ``l`` has resolution ``R / 2^l``.
    """
    cfg = net.config
    grid = geometry.gridding(partial, cfg.grid_resolution).grid
    x = Tensor(grid)
    levels = []
    for lvl in range(cfg.levels):
        x = relu(conv3d(x, net.params[f"enc{lvl}.k"], net.params[f"enc{lvl}.b"],
                        stride=1 if lvl == 0 else 2))
        levels.append(x)
    bottleneck = relu(conv3d(x, net.params["bottleneck.k"], net.params["bottleneck.b"], stride=2))
    return levels, bottleneck


def decode(net: CompletionNet, levels, bottleneck, u=1.0):
    """Fuse from the deepest level up; the bottleneck feeds the deepest block.

    Returns ``(occupancy [1,R,R,R], fused maps shallow-first)``.
    """
    deeper = bottleneck
    fused = [None] * len(levels)
    for lvl in reversed(range(len(levels))):
        deeper = net.blocks[lvl](levels[lvl], deeper, u)
        fused[lvl] = deeper
    logits = conv3d_transposed(deeper, net.params["out.k"], net.params["out.b"], stride=1)
    return sigmoid(logits), fused


_OFFSETS = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), -1).reshape(-1, 3)


def _neighbourhood_matrix(cells: np.ndarray, res: int) -> sp.csr_matrix:
    """0/1 matrix ``[n, R^3]`` marking each cell's in-grid 3x3x3 neighbourhood."""
    ijk = np.stack(np.unravel_index(cells, (res, res, res)), axis=1)
    nb = ijk[:, None, :] + _OFFSETS[None]                      # [n, 27, 3]
    ok = np.all((nb >= 0) & (nb < res), axis=2)
    lin = (nb[..., 0] * res + nb[..., 1]) * res + nb[..., 2]
    indptr = np.concatenate([[0], np.cumsum(ok.sum(axis=1))])
    return sp.csr_matrix((np.ones(int(indptr[-1])), lin[ok], indptr), shape=(cells.size, res ** 3))


def weighted_cell_points(occupancy: Tensor, cells: np.ndarray) -> Tensor:
    """Occupancy-weighted centroid of each selected cell's 3x3x3 neighbourhood.

    Equals the cell centre when the neighbourhood is uniform or empty apart
    from the cell itself; differentiable with respect to ``occupancy``.
    """
    res = occupancy.shape[1]
    o = occupancy.data.reshape(-1)
    centers = geometry.cell_centers(res)
    a = _neighbourhood_matrix(np.asarray(cells), res)
    den = a @ o
    num = a @ (o[:, None] * centers)
    pts = num / den[:, None]
    shape = occupancy.shape

    def grad_fn(g):
        # d p_i / d o_n = (c_n - p_i) / den_i for neighbours n of i
        gd = g / den[:, None]
        go = a.T @ gd  # [R^3, 3]
        out = np.sum(go * centers, axis=1) - a.T @ np.sum(gd * pts, axis=1)
        return (out.reshape(shape),)

    return _make(pts, (occupancy,), grad_fn, "weighted_cell_points")


def select_sparse_cells(occupancy, n_sparse: int, theta: float):
    """Supra-threshold cells thinned to ``n_sparse`` by farthest point sampling.

    Lowers the threshold by halving while fewer than ``n_sparse`` cells pass.
    Returns ``(cell indices, threshold used)``.
    """
    vals = occupancy.data if isinstance(occupancy, Tensor) else np.asarray(occupancy)
    t = theta
    while True:
        try:
            pts, idx = geometry.gridding_reverse(vals, t, return_index=True)
        except EmptyOutputError:
            pts, idx = np.empty((0, 3)), np.empty(0, dtype=np.int64)
        if idx.size >= n_sparse:
            break
        t *= 0.5
        if t < 1e-3:
            raise EmptyOutputError(f"only {idx.size} occupied cells, need {n_sparse}")
    if idx.size == n_sparse:
        return idx, t
    sel = kernels.fps(pts, n_sparse, 0)
    return idx[sel], t


def sparse_from_grid(occupancy, n_sparse: int = 128, theta: float = 0.3, mode: str = "center"):
    """Sparse cloud ``[n_sparse, 3]`` from an occupancy grid.

    ``center`` places each point at its cell centre (no gradient to the
    occupancy); ``centroid`` uses :func:`weighted_cell_points`.
    Returns ``(points, cells, threshold)``.
    """
    cells, t = select_sparse_cells(occupancy, n_sparse, theta)
    if mode == "centroid":
        return weighted_cell_points(as_tensor(occupancy), cells), cells, t
    if mode != "center":
        raise ValueError(f"unknown sparse mode {mode!r}")
    vals = occupancy.data if isinstance(occupancy, Tensor) else np.asarray(occupancy)
    return Tensor(geometry.cell_centers(vals.shape[-1])[cells]), cells, t


def refine_dense(net: CompletionNet, sparse: Tensor, fused0: Tensor, occupancy: Tensor) -> Tensor:
    """Spawn ``rho`` children per sparse point within ``offset_cells`` cell widths."""
    cfg = net.config
    q = sparse.data
    feats = concat([geometry.point_feature_sampling(fused0, q),
                    geometry.point_feature_sampling(occupancy, q),
                    Tensor(q)], axis=1)
    h = relu(linear(feats, net.params["mlp0.w"], net.params["mlp0.b"]))
    off = tanh(linear(h, net.params["mlp1.w"], net.params["mlp1.b"]))
    off = mul_scalar(reshape(off, (q.shape[0] * cfg.rho, 3)), cfg.offset_cells * net.cell)
    parents = take_rows(sparse, np.repeat(np.arange(q.shape[0]), cfg.rho))
    return parents + off


def forward(net: CompletionNet, partial, u=1.0) -> Forward:
    cfg = net.config
    levels, bottleneck = encode(net, partial)
    occ, fused = decode(net, levels, bottleneck, u)
    sparse, cells, t = sparse_from_grid(occ, cfg.n_sparse, cfg.theta, cfg.sparse_mode)
    dense = refine_dense(net, sparse, fused[0], occ)
    return Forward(sparse, dense, occ, cells, levels, fused, t)
