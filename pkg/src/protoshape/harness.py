"""Experiment stages: data generation, pretext training, prototypes,
completion training, evaluation, the ablation grid and report merging.

Every stage reads an :class:`ExperimentConfig` and writes files under
``cfg.out_dir`` (the corpus lives under ``cfg.data_root``). Wall-clock times
go to ``*.timing.jsonl`` sidecars so that all other artifacts are
byte-identical across reruns with the same config and seed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, data, losses, pretext
from .completion import CompletionNet, NetConfig, forward
from .config import ConfigError, ExperimentConfig, override
from .geometry import EmptyOutputError
from .tensor import Adam, NonFiniteError, gradients

log = logging.getLogger("protoshape")


class NumericFailure(RuntimeError):
    """Training or fitting produced NaN/inf or broke a numeric invariant."""


# small file helpers ------------------------------------------------------------------------

def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise OSError(f"{path}: corrupt JSON ({e})") from e


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _csv(rows: list, columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in columns})
    return buf.getvalue()


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _paths(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    return {
        "out": out,
        "extractor": out / "pretext" / "extractor.ckpt",
        "pretext_state": out / "pretext" / "resume.ckpt",
        "pretext_report": out / "pretext" / "report.json",
        "prototypes": out / "prototypes" / "prototypes.json",
        "prototype_log": out / "prototypes" / "em_log.json",
        "model": out / "train" / "model.ckpt",
        "ledger": out / "train" / "ledger.jsonl",
        "timing": out / "train" / "ledger.timing.jsonl",
        "cache": out / "train" / "priors.ckpt",
        "diagnostics": out / "train" / "nan_diagnostics.json",
        "eval_csv": out / "eval" / "metrics.csv",
        "eval_json": out / "eval" / "summary.json",
    }


def _manifest(cfg: ExperimentConfig) -> dict:
    path = Path(cfg.data_root) / "manifest.json"
    if not path.exists():
        raise OSError(f"{path}: no dataset (run gen-data first)")
    return data.load_manifest(cfg.data_root)


def write_config(cfg: ExperimentConfig) -> None:
    from .config import dump_config

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))


# gen-data --------------------------------------------------------------------------------

def gen_data(cfg: ExperimentConfig) -> dict:
    """Build the corpus; reports whether an existing copy changed."""
    root = Path(cfg.data_root)
    before = _tree_digest(root) if (root / "manifest.json").exists() else None
    dcfg = data.DataConfig(**{k: getattr(cfg.data, k) for k in cfg.data.__dataclass_fields__})
    manifest = data.gen_dataset(dcfg, root)
    after = _tree_digest(root)
    splits = {s: len(data.split_ids(manifest, s)) for s in ("train", "val", "test")}
    summary = {
        "shapes": len(manifest["samples"]),
        "partials": sum(len(s["partials"]) for s in manifest["samples"]),
        "splits": splits,
        "digest": after,
        "changed": before != after,
    }
    return summary


# pretext -----------------------------------------------------------------------------------

def _labelled(manifest: dict, splits) -> tuple:
    recs = [s for s in manifest["samples"] if s["split"] in splits]
    clouds = [data.load_complete(manifest, s["id"]) for s in recs]
    return clouds, np.array([s["category"] for s in recs], dtype=np.int64)


def _pretext_hash(cfg: ExperimentConfig) -> str:
    from .config import config_hash

    return config_hash({"data": cfg.to_dict()["data"], "pretext": cfg.to_dict()["pretext"],
                        "seed": cfg.seed})


def train_pretext(cfg: ExperimentConfig, resume: bool = False, stop_after: Optional[int] = None) -> dict:
    """Train the extractor on complete training clouds; held-out = val + test.

    A resume checkpoint is written after every epoch; ``resume`` continues
    from it and ``stop_after`` stops early (for interrupted-run tests).
    """
    paths = _paths(cfg)
    manifest = _manifest(cfg)
    clouds, labels = _labelled(manifest, ("train",))
    held = _labelled(manifest, ("val", "test"))
    n_classes = len(manifest["categories"])
    ext = pretext.FeatureExtractor(cfg.pretext.dim, n_classes, seed=cfg.seed)
    opt = Adam(ext.parameters(), lr=cfg.pretext.lr)
    rng = np.random.default_rng(cfg.seed)
    state = pretext.PretextTrainState()
    phash = _pretext_hash(cfg)
    if resume and paths["pretext_state"].exists():
        arrays, meta = checkpoint.load(paths["pretext_state"])
        if meta.get("config_hash") != phash:
            raise ConfigError("resume checkpoint was written with a different config; refusing")
        ext.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("ext.")})
        opt.load_state_arrays(arrays, meta["adam_t"])
        rng.bit_generator.state = meta["rng"]
        state = pretext.PretextTrainState(meta["epoch"], list(meta["losses"]))

    def on_epoch(st, optimizer, generator):
        arrays = {f"ext.{k}": v for k, v in ext.state_arrays().items()}
        arrays.update(optimizer.state_arrays())
        meta = {"config_hash": phash, "epoch": st.epoch, "losses": st.losses,
                "adam_t": optimizer.t, "rng": generator.bit_generator.state}
        paths["pretext_state"].parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(paths["pretext_state"], arrays, meta)
        log.info("pretext epoch %d loss %.5f", st.epoch, st.losses[-1])

    acc, state = pretext.train_classifier(ext, clouds, labels, cfg.pretext.epochs, cfg.pretext.lr,
                                          cfg.pretext.batch, held_out=held, optimizer=opt, rng=rng,
                                          state=state, stop_after=stop_after, on_epoch=on_epoch)
    finished = state.epoch >= cfg.pretext.epochs
    report = {"config_hash": phash, "epochs": state.epoch, "finished": finished,
              "held_out_accuracy": acc, "losses": state.losses, "n_train": len(clouds),
              "n_held_out": len(held[0]), "chance": 1.0 / n_classes}
    if finished:
        checkpoint.save(paths["extractor"], ext.state_arrays(),
                        {"config_hash": phash, "dim": ext.dim, "n_classes": n_classes,
                         "accuracy": acc, "trained": ext.trained})
        _dump_json(paths["pretext_report"], report)
    return report


def load_extractor(cfg: ExperimentConfig) -> pretext.FeatureExtractor:
    arrays, meta = checkpoint.load(_paths(cfg)["extractor"])
    ext = pretext.FeatureExtractor(int(meta["dim"]), int(meta["n_classes"]))
    ext.load_state_arrays(arrays)
    ext.trained = bool(meta.get("trained", True))
    return ext


# prototypes --------------------------------------------------------------------------------

def fit_prototypes(cfg: ExperimentConfig) -> dict:
    """Per-category EM on complete training features, then prototype centres and radii."""
    paths = _paths(cfg)
    manifest = _manifest(cfg)
    ext = load_extractor(cfg)
    clouds, labels = _labelled(manifest, ("train",))
    feats = pretext.extract_features(ext, clouds)
    protos, logs = [], []
    for cat in range(len(manifest["categories"])):
        x = feats[labels == cat]
        gmm = pretext.fit_gmm_em(x, cfg.prototype.k, cfg.prototype.iterations, cfg.seed)
        mono = pretext.loglik_is_monotone(gmm.loglik)
        logs.append({"category": cat, "loglik": gmm.loglik, "monotone": mono,
                     "weights": gmm.weights.tolist()})
        log.info("category %d EM log-likelihood %.3f -> %.3f (monotone=%s)",
                 cat, gmm.loglik[0], gmm.loglik[-1], mono)
        if not mono:
            _dump_json(paths["prototype_log"], logs)
            raise NumericFailure(f"EM log-likelihood decreased for category {cat}")
        protos.append(pretext.prototype_from_gmm(gmm, x, cat, cfg.prototype.mode))
    records = [dict(p.as_record(cfg.prototype.k, cfg.prototype.iterations, cfg.seed),
                    config_hash=_pretext_hash(cfg), mode=cfg.prototype.mode) for p in protos]
    _dump_json(paths["prototypes"], records)
    _dump_json(paths["prototype_log"], logs)
    return {"prototypes": len(protos), "radii": [p.radius for p in protos], "em": logs}


# priors cache ------------------------------------------------------------------------------

@dataclass
class PriorCache:
    keys: list          # (id, view)
    u: np.ndarray       # soft prior per partial
    cos: np.ndarray     # cosine between complete and partial feature
    weight: np.ndarray  # difficulty weight used in training

    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.keys)}


def _weights(cfg: ExperimentConfig, cos, fc, fp) -> np.ndarray:
    lo = cfg.loss
    if lo.sampling == "none":
        return np.ones(len(cos))
    if lo.sampling == "cos":
        return np.array([pretext.difficulty_weight(c, lo.difficulty_t, lo.difficulty_k) for c in cos])
    return np.array([pretext.l2_difficulty_weight(a, b, lo.difficulty_t, lo.difficulty_k)
                     for a, b in zip(fc, fp)])


def compute_priors(cfg: ExperimentConfig, manifest: dict, ext, protos, keys) -> PriorCache:
    """Soft prior, cosine gap and weight for every ``(id, view)`` in ``keys``."""
    partials = [data.load_sample(manifest, i, v).partial for i, v in keys]
    ids = sorted({i for i, _ in keys})
    comp = dict(zip(ids, pretext.extract_features(ext, [data.load_complete(manifest, i) for i in ids])))
    fp = pretext.extract_features(ext, partials)
    fc = np.stack([comp[i] for i, _ in keys])
    u = np.array([pretext.soft_prior(f, protos) for f in fp])
    cos = np.array([pretext.cosine_gap(a, b) for a, b in zip(fc, fp)])
    return PriorCache(list(keys), u, cos, _weights(cfg, cos, fc, fp))


def check_prior_cache(cfg, manifest, ext, protos, cache: PriorCache, n: int = 20, tol: float = 1e-12):
    """Recompute ``n`` cached entries one cloud at a time and compare."""
    picks = np.linspace(0, len(cache.keys) - 1, min(n, len(cache.keys))).astype(int)
    fresh = compute_priors(cfg, manifest, ext, protos, [cache.keys[i] for i in picks])
    for name in ("u", "cos", "weight"):
        err = np.max(np.abs(getattr(fresh, name) - getattr(cache, name)[picks]))
        if not err <= tol:
            raise NumericFailure(f"cached {name} differs from a fresh computation by {err:.3g}")


# completion training -----------------------------------------------------------------------

def net_config(cfg: ExperimentConfig) -> NetConfig:
    c = cfg.completion
    return NetConfig(grid_resolution=c.grid_resolution, levels=c.levels, channels=list(c.channels),
                     bottleneck_channels=c.bottleneck_channels, n_sparse=c.n_sparse, rho=c.rho,
                     theta=c.theta, hidden=c.hidden, spf_levels=cfg.loss.spf_levels,
                     offset_cells=c.offset_cells, sparse_mode=c.sparse_mode,
                     occupancy_prior=c.occupancy_prior)


def _split_tags(u: np.ndarray, fraction: float = 0.2) -> np.ndarray:
    """``standard`` for the lowest-u fraction, ``nonstandard`` for the highest, else ``mid``."""
    n = len(u)
    k = int(round(fraction * n))
    order = np.argsort(u, kind="stable")
    tags = np.array(["mid"] * n, dtype=object)
    if k:
        tags[order[:k]] = "standard"
        tags[order[n - k:]] = "nonstandard"
    return tags


class _Memory:
    """In-memory partial/complete clouds for one manifest."""

    def __init__(self, manifest: dict):
        self.manifest = manifest
        self.complete = {}
        self.partial = {}

    def gt(self, sid):
        if sid not in self.complete:
            self.complete[sid] = data.load_complete(self.manifest, sid)
        return self.complete[sid]

    def part(self, sid, view):
        key = (sid, view)
        if key not in self.partial:
            self.partial[key] = data.load_sample(self.manifest, sid, view).partial
        return self.partial[key]


def predict(net: CompletionNet, partial, u: float):
    return forward(net, partial, u)


def n_workers(cfg: ExperimentConfig) -> int:
    """Thread count for per-sample work; ``workers: 0`` means one per CPU."""
    return cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)


def _pmap(fn, items, workers: int) -> list:
    """Ordered map, threaded when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def evaluate_keys(net, mem: _Memory, keys, u_net, f_threshold: float, workers: int = 1):
    """Dense CD and F-score of the network on ``(id, view)`` pairs."""
    def one(item):
        (sid, view), u = item
        out = predict(net, mem.part(sid, view), u)
        gt = mem.gt(sid)
        return (losses.chamfer_value(out.dense.data, gt),
                losses.f_score(out.dense.data, gt, f_threshold))

    res = _pmap(one, zip(keys, u_net), workers)
    return np.array([r[0] for r in res]), np.array([r[1] for r in res])


def _subset_means(values: np.ndarray, tags: np.ndarray) -> dict:
    out = {}
    for tag in ("standard", "nonstandard"):
        sel = values[tags == tag]
        out[tag] = float(sel.mean()) if sel.size else float("nan")
    return out


def train(cfg: ExperimentConfig) -> dict:
    """Train the completion network and write checkpoint, ledger and timing sidecar."""
    paths = _paths(cfg)
    chash = cfg.hash()
    manifest = _manifest(cfg)
    ext = load_extractor(cfg)
    protos = pretext.load_prototypes(paths["prototypes"])
    c, lo = cfg.completion, cfg.loss
    views = cfg.data.views
    train_ids = data.split_ids(manifest, "train")
    val_ids = data.split_ids(manifest, "val")
    test_ids = data.split_ids(manifest, "test")
    keys = [(i, v) for i in train_ids + val_ids + test_ids for v in range(views)]
    cache = compute_priors(cfg, manifest, ext, protos, keys)
    check_prior_cache(cfg, manifest, ext, protos, cache)
    checkpoint.save(paths["cache"], {"u": cache.u, "cos": cache.cos, "weight": cache.weight},
                    {"config_hash": chash, "keys": [list(k) for k in cache.keys]})
    index = cache.index()

    def u_for_net(key):
        return float(cache.u[index[key]]) if lo.use_prior else 1.0

    net = CompletionNet(net_config(cfg), seed=cfg.seed)
    params = net.parameters()
    opt = Adam(params, lr=c.lr)
    rng = np.random.default_rng(cfg.seed)
    rots = losses.view_rotations(lo.n_views, cfg.seed)
    mem = _Memory(manifest)
    workers = n_workers(cfg)
    gt_masks = {}
    val_keys = [(i, v) for i in val_ids for v in range(c.val_views)]
    val_u = np.array([cache.u[index[k]] for k in val_keys])
    val_tags = _split_tags(val_u)
    rows = [{"kind": "header", "config_hash": chash, "n_train": len(train_ids),
             "n_val": len(val_keys), "backend": _backend()}]
    timing = []

    def masks(sid):
        if sid not in gt_masks:
            gt_masks[sid] = losses.render_masks(mem.gt(sid), rots, lo.render_points, lo.height,
                                                lo.width, rng=np.random.default_rng(0)).data
        return gt_masks[sid]

    def sample_grad(item):
        # one graph per sample; gradients are summed by the caller in batch order
        epoch, pos, key = item
        sid = key[0]
        gt = mem.gt(sid)
        use_masks = lo.use_proj and c.lambda_proj != 0
        out = forward(net, mem.part(*key), u_for_net(key))
        loss, rep = losses.total_loss(
            out.sparse, out.dense, gt, float(cache.weight[index[key]]), c.lambda_proj,
            rots, lo.use_proj, lo.render_points, lo.height, lo.width, lo.bce_orientation,
            np.random.default_rng([cfg.seed, epoch, pos]), masks(sid) if use_masks else None,
            occupancy=out.occupancy, cells=out.cells, existence_grad=c.existence_grad)
        return gradients(loss, params), rep

    t_start = time.perf_counter()
    for epoch in range(1, c.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_ids))
        picks = rng.integers(0, views, size=len(train_ids))
        sums = dict(loss=0.0, cd_sparse=0.0, cd_dense=0.0, proj_sparse=0.0, proj_dense=0.0, weight=0.0)
        for s in range(0, len(order), c.batch):
            batch = [(epoch, int(p), (train_ids[j], int(picks[j])))
                     for p, j in zip(range(s, s + c.batch), order[s:s + c.batch])]
            try:
                results = _pmap(sample_grad, batch, workers)
            except (NonFiniteError, EmptyOutputError) as e:
                _dump_json(paths["diagnostics"], {
                    "epoch": epoch, "batch_ids": [list(b[2]) for b in batch], "error": str(e)})
                raise NumericFailure(f"epoch {epoch}: {e}; diagnostics in {paths['diagnostics']}") from e
            for prm, *gs in zip(params, *[r[0] for r in results]):
                total = None
                for g in gs:
                    if g is not None:
                        total = g if total is None else total + g
                prm.grad = total
            opt.step()
            for _, r in results:
                sums["loss"] += r.total
                for k in ("cd_sparse", "cd_dense", "proj_sparse", "proj_dense", "weight"):
                    sums[k] += getattr(r, k)
        n = len(order)
        cds, fs = evaluate_keys(net, mem, val_keys, [u_for_net(k) for k in val_keys],
                                cfg.eval.f_threshold, workers)
        sub = _subset_means(cds, val_tags)
        row = {"kind": "epoch", "epoch": epoch, **{f"train_{k}": v / n for k, v in sums.items()},
               "val_cd_dense": float(cds.mean()), "val_f_score": float(fs.mean()),
               "val_cd_standard": sub["standard"], "val_cd_nonstandard": sub["nonstandard"]}
        rows.append(row)
        timing.append({"epoch": epoch, "wall_s": time.perf_counter() - t0})
        log.info("epoch %d loss %.5f val cd %.5f (std %.5f / non %.5f) %.1fs", epoch,
                 row["train_loss"], row["val_cd_dense"], sub["standard"], sub["nonstandard"],
                 timing[-1]["wall_s"])
    test_keys = [(i, v) for i in test_ids for v in range(views)]
    cds, fs = evaluate_keys(net, mem, test_keys, [u_for_net(k) for k in test_keys],
                            cfg.eval.f_threshold, workers)
    test_tags = _split_tags(np.array([cache.u[index[k]] for k in test_keys]))
    sub = _subset_means(cds, test_tags)
    final = {"kind": "final", "test_cd_dense": float(cds.mean()), "test_f_score": float(fs.mean()),
             "test_cd_standard": sub["standard"], "test_cd_nonstandard": sub["nonstandard"],
             "n_test": len(test_keys)}
    rows.append(final)
    timing.append({"total_wall_s": time.perf_counter() - t_start})
    paths["ledger"].parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(paths["model"], net.state_arrays(),
                    {"config_hash": chash, "epochs": c.epochs, "net": net_config(cfg).__dict__})
    paths["ledger"].write_text(_jsonl(rows))
    paths["timing"].write_text(_jsonl(timing))
    return {"rows": rows, "timing": timing}


def _backend() -> str:
    from . import kernels

    return kernels.BACKEND


def read_ledger(path) -> list:
    path = Path(path)
    if not path.exists():
        raise OSError(f"{path}: ledger not found")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    epochs = [r["epoch"] for r in rows if r.get("kind") == "epoch"]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ValueError(f"{path}: epochs are not strictly increasing")
    return rows


def load_model(cfg: ExperimentConfig, path=None) -> CompletionNet:
    arrays, meta = checkpoint.load(path or _paths(cfg)["model"])
    net = CompletionNet(NetConfig(**meta["net"]), seed=cfg.seed)
    net.load_state_arrays(arrays)
    return net


# evaluation --------------------------------------------------------------------------------

EVAL_COLUMNS = ("sample_id", "category", "cd_dense", "f_score", "u_prior", "weight", "split_tag")


def evaluate(cfg: ExperimentConfig, model_path=None) -> dict:
    """Per-shape metrics on one split (view 0) plus multi-view consistency.

    Each shape's views form one track for the consistency score. With
    ``eval.oracle`` the ground truth stands in for every prediction.
    """
    paths = _paths(cfg)
    manifest = _manifest(cfg)
    ids = data.split_ids(manifest, cfg.eval.split)
    views = cfg.data.views
    ext = load_extractor(cfg)
    protos = pretext.load_prototypes(paths["prototypes"])
    keys = [(i, v) for i in ids for v in range(views)]
    cache = compute_priors(cfg, manifest, ext, protos, keys)
    first = np.arange(len(ids)) * views  # rows of view 0
    tags = _split_tags(cache.u[first])
    mem = _Memory(manifest)
    net = None if cfg.eval.oracle else load_model(cfg, model_path)
    categories = manifest["categories"]

    def one(n):
        sid = ids[n]
        gt = mem.gt(sid)
        preds = []
        for v in range(views):
            if net is None:
                preds.append(gt)
                continue
            u = float(cache.u[n * views + v]) if cfg.loss.use_prior else 1.0
            preds.append(predict(net, mem.part(sid, v), u).dense.data)
        row = {"sample_id": sid, "category": categories[data.record(manifest, sid)["category"]],
               "cd_dense": losses.chamfer_value(preds[0], gt),
               "f_score": losses.f_score(preds[0], gt, cfg.eval.f_threshold),
               "u_prior": float(cache.u[first[n]]), "weight": float(cache.weight[first[n]]),
               "split_tag": str(tags[n])}
        return row, preds

    res = _pmap(one, range(len(ids)), n_workers(cfg))
    rows = [r[0] for r in res]
    tracks = [r[1] for r in res]
    cds = np.array([r["cd_dense"] for r in rows])
    summary = {
        "config_hash": cfg.hash(), "split": cfg.eval.split, "n": len(rows), "oracle": cfg.eval.oracle,
        "cd_dense": float(cds.mean()), "f_score": float(np.mean([r["f_score"] for r in rows])),
        "cd_standard": _subset_means(cds, tags)["standard"],
        "cd_nonstandard": _subset_means(cds, tags)["nonstandard"],
        "consistency": losses.consistency(tracks) if views >= 2 else None,
    }
    paths["eval_csv"].parent.mkdir(parents=True, exist_ok=True)
    paths["eval_csv"].write_text(_csv(rows, EVAL_COLUMNS))
    _dump_json(paths["eval_json"], summary)
    return summary


# ablation ----------------------------------------------------------------------------------

# (SPF levels, prior, difficulty sampling, projection) per method, plus reference CD (x1e-3)
# and F-score reported for the full-scale benchmark
ABLATION = {
    "A": (0, False, "none", False, 9.16, 0.635),
    "B": (1, True, "none", False, 8.58, 0.652),
    "C": (2, True, "none", False, 8.42, 0.660),
    "D": (3, True, "none", False, 8.39, 0.662),
    "E": (3, True, "cos", False, 8.10, 0.692),
    "F": (3, False, "cos", True, 8.24, 0.682),
    "G": (3, True, "l2", True, 8.12, 0.695),
    "H": (3, True, "cos", True, 8.05, 0.709),
}
ABLATION_COLUMNS = ("method", "SPF", "Pri", "DS", "Proj", "CD", "F-Score", "cd_standard",
                    "cd_nonstandard", "reference_CD_x1e3", "reference_F-Score")


def ablation_config(cfg: ExperimentConfig, method: str, seed: Optional[int] = None) -> ExperimentConfig:
    spf, pri, ds, proj, _, _ = ABLATION[method]
    seed = cfg.seed if seed is None else seed
    out = Path(cfg.out_dir) / "ablate" / f"{method}_seed{seed}"
    return override(cfg, {"loss.spf_levels": spf, "loss.use_prior": pri, "loss.sampling": ds,
                          "loss.use_proj": proj, "seed": seed, "out_dir": str(out)})


def _share_pretext(src: ExperimentConfig, dst: ExperimentConfig) -> None:
    """Point ``dst`` at the extractor and prototypes trained under ``src``."""
    a, b = _paths(src), _paths(dst)
    for key in ("extractor", "prototypes"):
        b[key].parent.mkdir(parents=True, exist_ok=True)
        b[key].write_bytes(a[key].read_bytes())


def ablate(cfg: ExperimentConfig, methods: Sequence[str] = tuple(ABLATION),
           seeds: Optional[Sequence[int]] = None) -> list:
    """Train and test every method; one report row per (method, seed)."""
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for method in methods:
        if method not in ABLATION:
            raise ConfigError(f"unknown ablation method {method!r}")
        spf, pri, ds, proj, ref_cd, ref_f = ABLATION[method]
        for seed in seeds:
            vcfg = ablation_config(cfg, method, seed)
            _share_pretext(cfg, vcfg)
            write_config(vcfg)
            final = train(vcfg)["rows"][-1]
            rows.append({"method": method, "seed": seed, "SPF": spf or "-", "Pri": "yes" if pri else "-",
                         "DS": {"none": "-", "cos": "Cos", "l2": "L2"}[ds],
                         "Proj": "yes" if proj else "-", "CD": final["test_cd_dense"],
                         "F-Score": final["test_f_score"], "cd_standard": final["test_cd_standard"],
                         "cd_nonstandard": final["test_cd_nonstandard"],
                         "reference_CD_x1e3": ref_cd, "reference_F-Score": ref_f})
    out = Path(cfg.out_dir) / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    cols = ("method", "seed") + ABLATION_COLUMNS[1:]
    (out / "report.csv").write_text(_csv(rows, cols))
    _dump_json(out / "report.json", {"config_hash": cfg.hash(), "rows": rows})
    return rows


# report ------------------------------------------------------------------------------------

LEDGER_METRICS = ("train_loss", "train_cd_sparse", "train_cd_dense", "train_proj_sparse",
                  "train_proj_dense", "val_cd_dense", "val_f_score", "val_cd_standard",
                  "val_cd_nonstandard")


def report(ledgers: Sequence, out_dir, labels: Optional[Sequence[str]] = None) -> dict:
    """Merge ledgers into long-format CSV/JSON plus the standard/nonstandard curves.

    With two ledgers the first is labelled ``baseline`` and the second ``ours``.
    """
    ledgers = [Path(p) for p in ledgers]
    if not ledgers:
        raise ConfigError("report needs at least one ledger")
    if labels is None:
        labels = ["baseline", "ours"] if len(ledgers) == 2 else [p.parent.parent.name or p.stem
                                                                 for p in ledgers]
    if len(labels) != len(ledgers) or len(set(labels)) != len(labels):
        raise ConfigError("need one distinct label per ledger")
    runs = {lab: read_ledger(p) for lab, p in zip(labels, ledgers)}
    long_rows, curves = [], []
    for lab, rows in runs.items():
        for r in rows:
            if r.get("kind") != "epoch":
                continue
            for m in LEDGER_METRICS:
                long_rows.append({"run": lab, "epoch": r["epoch"], "metric": m, "value": r[m]})
            for subset in ("standard", "nonstandard"):
                curves.append({"series": f"{lab}/{subset}", "epoch": r["epoch"],
                               "cd": r[f"val_cd_{subset}"]})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.csv").write_text(_csv(long_rows, ("run", "epoch", "metric", "value")))
    (out / "standard_vs_nonstandard.csv").write_text(_csv(curves, ("series", "epoch", "cd")))
    hashes = {lab: next((r["config_hash"] for r in rows if r.get("kind") == "header"), None)
              for lab, rows in runs.items()}
    finals = {lab: next((r for r in rows if r.get("kind") == "final"), None) for lab, rows in runs.items()}
    summary = {"runs": list(runs), "config_hashes": hashes, "final": finals,
               "series": sorted({c["series"] for c in curves})}
    _dump_json(out / "report.json", summary)
    return summary
