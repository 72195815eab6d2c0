"""Synthetic labelled shape corpus built from boxes, cylinders and ellipsoids.

Four families (plane, chair, table, vessel) each have a canonical part list.
Standard shapes jitter every canonical dimension by at most 10%; nonstandard
shapes additionally apply one or more structural mutations (a missing part,
an extra part or an extreme aspect ratio).

On disk a dataset is ``manifest.json`` plus PCF1 clouds under ``complete/``
and ``partial/``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np

from . import geometry
from .geometry import PartialViewError
from .tensor import ContractError

CATEGORIES = ("plane", "chair", "table", "vessel")
STYLES = ("standard", "nonstandard")
MANIFEST_VERSION = 1
STANDARD_JITTER = 0.10
MAX_DRAWS = 5
MAX_VIEW_TRIES = 5


# primitives ------------------------------------------------------------------------------

@dataclass
class Box:
    center: np.ndarray
    size: np.ndarray  # full edge lengths

    def area(self) -> float:
        a, b, c = self.size
        return 2.0 * (a * b + b * c + a * c)

    def sample(self, n: int, rng) -> np.ndarray:
        a, b, c = self.size
        faces = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        f = rng.choice(6, size=n, p=faces / faces.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 3))
        axis = f // 2
        u[np.arange(n), axis] = np.where(f % 2 == 0, -0.5, 0.5)
        return self.center + u * self.size

    def scaled(self, s) -> "Box":
        return Box(self.center * s, self.size * s)


@dataclass
class Cylinder:
    center: np.ndarray
    radius: float
    height: float
    axis: int = 2

    def area(self) -> float:
        return 2 * np.pi * self.radius * self.height + 2 * np.pi * self.radius ** 2

    def sample(self, n: int, rng) -> np.ndarray:
        r, h = self.radius, self.height
        side = 2 * np.pi * r * h
        cap = np.pi * r * r
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, size=n)
        # uniform on a disc needs sqrt-distributed radii
        rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(size=n)))
        along = np.where(part == 0, rng.uniform(-h / 2, h / 2, size=n),
                         np.where(part == 1, -h / 2, h / 2))
        local = np.stack([rad * np.cos(theta), rad * np.sin(theta), along], axis=1)
        order = {0: [2, 0, 1], 1: [1, 2, 0], 2: [0, 1, 2]}[self.axis]
        return self.center + local[:, order]

    def scaled(self, s) -> "Cylinder":
        s = np.asarray(s, dtype=np.float64) * np.ones(3)
        radial = [i for i in range(3) if i != self.axis]
        return Cylinder(self.center * s, self.radius * float(np.mean(s[radial])),
                        self.height * float(s[self.axis]), self.axis)


@dataclass
class Ellipsoid:
    center: np.ndarray
    radii: np.ndarray

    def area(self) -> float:
        # Knud Thomsen's approximation, within about 1%
        a, b, c = self.radii
        p = 1.6075
        return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)

    def sample(self, n: int, rng) -> np.ndarray:
        a, b, c = self.radii
        cap = max(b * c, a * c, a * b)
        out = np.empty((0, 3))
        while out.shape[0] < n:
            v = rng.normal(size=(2 * n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            # accept by the local area stretch of the sphere-to-ellipsoid map
            stretch = np.sqrt((b * c * v[:, 0]) ** 2 + (a * c * v[:, 1]) ** 2 + (a * b * v[:, 2]) ** 2)
            keep = rng.uniform(size=v.shape[0]) * cap < stretch
            out = np.concatenate([out, v[keep] * self.radii])
        return self.center + out[:n]

    def scaled(self, s) -> "Ellipsoid":
        return Ellipsoid(self.center * s, self.radii * s)


def _v(*xs) -> np.ndarray:
    return np.array(xs, dtype=np.float64)


# families --------------------------------------------------------------------------------
# each family: ordered {part name: primitive}; essential parts are never removed

def _plane() -> dict:
    return {
        "fuselage": Ellipsoid(_v(0, 0, 0), _v(1.0, 0.12, 0.12)),
        "wings": Box(_v(0.05, 0, 0), _v(0.35, 1.8, 0.04)),
        "stabilizer": Box(_v(-0.85, 0, 0.02), _v(0.2, 0.6, 0.03)),
        "fin": Box(_v(-0.85, 0, 0.2), _v(0.22, 0.03, 0.3)),
    }


def _legs(half_x, half_y, height, radius, top_z):
    z = top_z - height / 2
    return {f"leg{i}": Cylinder(_v(sx * half_x, sy * half_y, z), radius, height, 2)
            for i, (sx, sy) in enumerate([(-1, -1), (-1, 1), (1, -1), (1, 1)])}


def _chair() -> dict:
    parts = {
        "seat": Box(_v(0, 0, 0), _v(0.5, 0.5, 0.06)),
        "back": Box(_v(-0.23, 0, 0.33), _v(0.05, 0.5, 0.6)),
    }
    parts.update(_legs(0.21, 0.21, 0.5, 0.025, -0.03))
    return parts


def _table() -> dict:
    parts = {"top": Box(_v(0, 0, 0), _v(1.2, 0.7, 0.05))}
    parts.update(_legs(0.55, 0.3, 0.7, 0.035, -0.025))
    return parts


def _vessel() -> dict:
    return {
        "hull": Ellipsoid(_v(0, 0, 0), _v(1.0, 0.25, 0.15)),
        "deck": Box(_v(0, 0, 0.1), _v(1.4, 0.35, 0.04)),
        "cabin": Box(_v(-0.2, 0, 0.25), _v(0.4, 0.25, 0.25)),
        "mast": Cylinder(_v(0.25, 0, 0.5), 0.025, 0.8, 2),
    }


FAMILIES = {0: _plane, 1: _chair, 2: _table, 3: _vessel}
ESSENTIAL = {0: {"fuselage", "wings"}, 1: {"seat", "back"}, 2: {"top"}, 3: {"hull", "deck"}}


def _extra_part(category: int, rng) -> tuple:
    """An additional part that does not belong to the canonical family."""
    if category == 0:
        return "engine", Cylinder(_v(0.1, rng.choice([-0.5, 0.5]), -0.1), 0.08, 0.35, 0)
    if category == 1:
        return "armrest", Box(_v(0, rng.choice([-0.25, 0.25]), 0.15), _v(0.45, 0.05, 0.2))
    if category == 2:
        return "shelf", Box(_v(0, 0, -0.5), _v(1.1, 0.6, 0.04))
    return "float", Ellipsoid(_v(0, rng.choice([-0.45, 0.45]), -0.05), _v(0.7, 0.08, 0.08))


class ShapeSpec(NamedTuple):
    category: int
    style: str
    seed: int


def _apply_jitter(parts: dict, rng, amount: float) -> dict:
    out = {}
    for name, p in parts.items():
        s = 1.0 + rng.uniform(-amount, amount, size=3)
        if isinstance(p, Box):
            out[name] = Box(p.center * (1.0 + rng.uniform(-amount, amount, size=3)), p.size * s)
        elif isinstance(p, Cylinder):
            out[name] = Cylinder(p.center * (1.0 + rng.uniform(-amount, amount, size=3)),
                                 p.radius * s[0], p.height * s[1], p.axis)
        else:
            out[name] = Ellipsoid(p.center * (1.0 + rng.uniform(-amount, amount, size=3)),
                                  p.radii * s)
    return out


def _mutate(parts: dict, category: int, rng) -> tuple:
    """Apply at least one structural mutation; returns ``(parts, names)``."""
    kinds = ["missing", "extra", "aspect"]
    n = int(rng.integers(1, 3))
    chosen = sorted(rng.choice(3, size=n, replace=False).tolist())
    applied = []
    for k in chosen:
        kind = kinds[k]
        if kind == "missing":
            optional = [p for p in parts if p not in ESSENTIAL[category]]
            if not optional:
                continue
            drop = optional[int(rng.integers(len(optional)))]
            # dropping one leg of four is barely visible; drop a pair
            if drop.startswith("leg"):
                for leg in [drop, f"leg{3 - int(drop[3:])}"]:
                    parts.pop(leg, None)
            else:
                parts.pop(drop)
        elif kind == "extra":
            name, prim = _extra_part(category, rng)
            parts[name] = prim
        else:
            axis = int(rng.integers(3))
            factor = float(rng.choice([0.45, 2.2]))
            s = np.ones(3)
            s[axis] = factor
            parts = {k2: p.scaled(s) for k2, p in parts.items()}
        applied.append(kind)
    if not applied:  # only possible when "missing" had nothing to drop
        name, prim = _extra_part(category, rng)
        parts[name] = prim
        applied.append("extra")
    return parts, applied


def shape_parts(spec: ShapeSpec, rng: Optional[np.random.Generator] = None):
    """Primitive parts for ``spec`` (before sampling and normalisation)."""
    if spec.category not in FAMILIES:
        raise ContractError(f"unknown category {spec.category}")
    if spec.style not in STYLES:
        raise ContractError(f"unknown style {spec.style!r}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    parts = _apply_jitter(FAMILIES[spec.category](), rng, STANDARD_JITTER)
    mutations = []
    if spec.style == "nonstandard":
        parts, mutations = _mutate(parts, spec.category, rng)
    return parts, mutations


def _degenerate(parts: dict) -> bool:
    for p in parts.values():
        dims = (p.size if isinstance(p, Box) else p.radii if isinstance(p, Ellipsoid)
                else _v(p.radius, p.height))
        if not np.all(np.isfinite(dims)) or np.any(dims <= 1e-6):
            return True
    return sum(p.area() for p in parts.values()) <= 1e-9


def sample_parts(parts: dict, n_points: int, rng) -> np.ndarray:
    """Uniform area-weighted surface sample of a part list."""
    names = list(parts)
    areas = np.array([parts[k].area() for k in names])
    counts = rng.multinomial(n_points, areas / areas.sum())
    chunks = [parts[k].sample(int(c), rng) for k, c in zip(names, counts) if c > 0]
    return np.concatenate(chunks, axis=0)


def gen_shape(spec: ShapeSpec, n_points: int) -> np.ndarray:
    """Normalised complete cloud ``[n_points, 3]``; deterministic given ``spec``."""
    if n_points < 64:
        raise ContractError(f"need at least 64 points, got {n_points}")
    rng = np.random.default_rng(spec.seed)
    for _ in range(MAX_DRAWS):
        parts, _ = shape_parts(spec, rng)
        if not _degenerate(parts):
            break
    else:
        raise RuntimeError(f"degenerate parameter draws for {spec} after {MAX_DRAWS} tries")
    return geometry.normalize(sample_parts(parts, n_points, rng)).points


def canonical_shape(category: int, n_points: int, seed: int = 0) -> np.ndarray:
    """The un-jittered family template, sampled with ``seed``."""
    if category not in FAMILIES:
        raise ContractError(f"unknown category {category}")
    rng = np.random.default_rng(seed)
    return geometry.normalize(sample_parts(FAMILIES[category](), n_points, rng)).points


# datasets --------------------------------------------------------------------------------

@dataclass
class DataConfig:
    categories: int = 4
    per_category: int = 100
    nonstandard_fraction: float = 0.2
    n_complete: int = 512
    n_partial: int = 128
    views: int = 8
    image_res: int = 64   # z-buffer raster; 32 leaves too few visible points on thin shapes
    seed: int = 0
    split: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])

    def validate(self) -> None:
        if not 1 <= self.categories <= len(CATEGORIES):
            raise ContractError(f"categories must lie in [1, {len(CATEGORIES)}]")
        if self.per_category < 10:
            raise ContractError("per_category must be at least 10")
        if not 0.0 <= self.nonstandard_fraction <= 1.0:
            raise ContractError("nonstandard_fraction must lie in [0, 1]")
        if self.n_complete < 64 or not 1 <= self.n_partial <= self.n_complete:
            raise ContractError("need n_complete >= 64 and 1 <= n_partial <= n_complete")
        if self.views < 1:
            raise ContractError("views must be positive")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ContractError("split must be three non-negative fractions summing to 1")


def _seed_for(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


def _split_counts(n: int, fractions) -> list:
    train = int(round(fractions[0] * n))
    val = int(round(fractions[1] * n))
    val = min(val, n - train)
    return [train, val, n - train - val]


def plan_dataset(cfg: DataConfig) -> list:
    """Sample records (id, category, style, seed, split) without touching disk."""
    cfg.validate()
    records = []
    for cat in range(cfg.categories):
        n_non = int(round(cfg.nonstandard_fraction * cfg.per_category))
        order = np.random.default_rng(_seed_for(cfg.seed, cat, 1)).permutation(cfg.per_category)
        styles = np.array(["standard"] * cfg.per_category, dtype=object)
        styles[order[:n_non]] = "nonstandard"
        splits = np.empty(cfg.per_category, dtype=object)
        for style in STYLES:
            members = np.flatnonzero(styles == style)
            perm = np.random.default_rng(_seed_for(cfg.seed, cat, 2, STYLES.index(style))).permutation(members)
            counts = _split_counts(members.size, cfg.split)
            bounds = np.cumsum([0] + counts)
            for name, lo, hi in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
                splits[perm[lo:hi]] = name
        for k in range(cfg.per_category):
            index = cat * cfg.per_category + k
            records.append({
                "id": f"{CATEGORIES[cat]}_{k:04d}",
                "category": cat,
                "style": str(styles[k]),
                "seed": _seed_for(cfg.seed, index),
                "split": str(splits[k]),
            })
    return records


def _partials(complete: np.ndarray, cfg: DataConfig, rng) -> list:
    """``views`` partial clouds, each FPS-thinned to ``n_partial`` points."""
    out = []
    for _ in range(cfg.views):
        best = None
        # thin shapes can show fewer than n_partial points at the base raster;
        # a second round of views uses a doubled resolution
        for res in (cfg.image_res, 2 * cfg.image_res):
            for _ in range(MAX_VIEW_TRIES):
                view = geometry.random_view(rng)
                try:
                    pts, idx = geometry.make_partial(complete, view, res, return_index=True,
                                                     min_points=cfg.n_partial)
                except PartialViewError:
                    continue
                best = (view, pts, idx)
                break
            if best is not None:
                break
        if best is None:
            raise PartialViewError(f"no view kept {cfg.n_partial} points after {2 * MAX_VIEW_TRIES} tries")
        view, pts, idx = best
        sub, sel = geometry.farthest_point_sampling(pts, cfg.n_partial, return_index=True)
        out.append((view, sub, idx[sel]))
    return out


def gen_dataset(cfg: DataConfig, root) -> dict:
    """Write a corpus under ``root`` and return its manifest."""
    cfg.validate()
    root = Path(root)
    (root / "complete").mkdir(parents=True, exist_ok=True)
    (root / "partial").mkdir(parents=True, exist_ok=True)
    samples = []
    for rec in plan_dataset(cfg):
        spec = ShapeSpec(rec["category"], rec["style"], rec["seed"])
        # partials are cut from the stored float32 cloud so they are exact subsets on disk
        complete = gen_shape(spec, cfg.n_complete).astype(np.float32).astype(np.float64)
        cpath = f"complete/{rec['id']}.pcf"
        geometry.write_pcf(root / cpath, complete)
        rng = np.random.default_rng(_seed_for(rec["seed"], 7))
        partials = []
        for v, (view, pts, _) in enumerate(_partials(complete, cfg, rng)):
            ppath = f"partial/{rec['id']}_{v}.pcf"
            geometry.write_pcf(root / ppath, pts)
            partials.append({"path": ppath, "view": [float(x) for x in view]})
        samples.append(dict(rec, complete=cpath, partials=partials))
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "categories": list(CATEGORIES[:cfg.categories]),
        "samples": samples,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise OSError(f"{path}: corrupt manifest ({e})") from e
    manifest["root"] = str(Path(root))
    return manifest


def validate_manifest(manifest: dict) -> None:
    """Check ids are unique and every referenced cloud parses and is normalised."""
    root = Path(manifest["root"])
    ids = [s["id"] for s in manifest["samples"]]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate sample ids in manifest")
    for s in manifest["samples"]:
        for rel in [s["complete"]] + [p["path"] for p in s["partials"]]:
            pts = geometry.read_pcf(root / rel)
            if pts.shape[0] < 1 or np.any(np.abs(pts) > 0.5):
                raise ContractError(f"{rel}: cloud is empty or outside the unit cube")


@dataclass
class TrainSample:
    id: str
    view: int
    category: int
    style: str
    split: str
    partial: np.ndarray
    complete: np.ndarray
    u: Optional[float] = None   # filled in by the harness after the pretext stage
    weight: Optional[float] = None


def record(manifest: dict, sample_id: str) -> dict:
    index = manifest.get("_index")
    if index is None:
        index = manifest["_index"] = {s["id"]: s for s in manifest["samples"]}
    if sample_id not in index:
        raise KeyError(f"unknown sample id {sample_id!r}")
    return index[sample_id]


def load_sample(manifest: dict, sample_id: str, view: int) -> TrainSample:
    rec = record(manifest, sample_id)
    if not 0 <= view < len(rec["partials"]):
        raise KeyError(f"sample {sample_id!r} has no view {view}")
    root = Path(manifest["root"])
    return TrainSample(sample_id, view, rec["category"], rec["style"], rec["split"],
                       geometry.read_pcf(root / rec["partials"][view]["path"]),
                       geometry.read_pcf(root / rec["complete"]))


def load_complete(manifest: dict, sample_id: str) -> np.ndarray:
    return geometry.read_pcf(Path(manifest["root"]) / record(manifest, sample_id)["complete"])


def split_ids(manifest: dict, split: str) -> list:
    return [s["id"] for s in manifest["samples"] if s["split"] == split]
