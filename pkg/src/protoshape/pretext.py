"""Shape-clustering pretext task: feature extractor, EM prototypes and priors."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import (Adam, ContractError, Tensor, cross_entropy, linear, max_over_points,
                     parameter, relu, reshape, zeros_parameter)

VARIANCE_FLOOR = 1e-4
RADIUS_FLOOR = 1e-6
DIFFICULTY_T = 0.25
DIFFICULTY_K = 8.0


# feature extractor -------------------------------------------------------------------

class FeatureExtractor:
    """Shared per-point MLP 3-64-128-D, max pooling, and a D-D/2-C classifier head."""

    def __init__(self, dim: int = 128, n_classes: int = 4, seed: int = 0):
        self.dim = dim
        self.n_classes = n_classes
        self.trained = False
        rng = np.random.default_rng(seed)
        widths = [3, 64, 128, dim]
        self.params = {}
        for i in range(3):
            self.params[f"enc{i}.w"] = parameter((widths[i], widths[i + 1]), rng, widths[i])
            self.params[f"enc{i}.b"] = zeros_parameter((widths[i + 1],))
        self.params["cls0.w"] = parameter((dim, dim // 2), rng, dim)
        self.params["cls0.b"] = zeros_parameter((dim // 2,))
        self.params["cls1.w"] = parameter((dim // 2, n_classes), rng, dim // 2, scale=0.5)
        self.params["cls1.b"] = zeros_parameter((n_classes,))
        for name, p in self.params.items():
            p.name = name

    def parameters(self):
        return list(self.params.values())

    def embed(self, clouds) -> Tensor:
        """Global features ``[B, D]`` for a batch of equally sized clouds ``[B, N, 3]``."""
        x = np.asarray(clouds, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        b, n, _ = x.shape
        if n < 1:
            raise ContractError("cannot embed an empty cloud")
        h = Tensor(x.reshape(b * n, 3))
        p = self.params
        for i in range(3):
            h = relu(linear(h, p[f"enc{i}.w"], p[f"enc{i}.b"]))
        return max_over_points(reshape(h, (b, n, self.dim)))

    def logits(self, feats: Tensor) -> Tensor:
        p = self.params
        h = relu(linear(feats, p["cls0.w"], p["cls0.b"]))
        return linear(h, p["cls1.w"], p["cls1.b"])

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for k, p in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"checkpoint tensor {k} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()


def _warn_untrained(ext: FeatureExtractor) -> None:
    if not ext.trained:
        warnings.warn("extracting features with an untrained extractor", RuntimeWarning,
                      stacklevel=3)


def extract_feature(ext: FeatureExtractor, cloud) -> np.ndarray:
    """Latent feature of one cloud: max over the per-point embeddings."""
    _warn_untrained(ext)
    return ext.embed(np.asarray(cloud, dtype=np.float64)[None]).data[0]


def extract_features(ext: FeatureExtractor, clouds: Sequence, batch: int = 64) -> np.ndarray:
    """Features for many clouds; clouds of different sizes are embedded one by one."""
    _warn_untrained(ext)
    return _embed_all(ext, clouds, batch)


def _embed_all(ext: FeatureExtractor, clouds: Sequence, batch: int) -> np.ndarray:
    clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
    out = np.empty((len(clouds), ext.dim))
    sizes = {c.shape[0] for c in clouds}
    if len(sizes) == 1:
        for s in range(0, len(clouds), batch):
            out[s:s + batch] = ext.embed(np.stack(clouds[s:s + batch])).data
    else:
        for i, c in enumerate(clouds):
            out[i] = ext.embed(c[None]).data[0]
    return out


def accuracy(ext: FeatureExtractor, clouds, labels, batch: int = 64) -> float:
    labels = np.asarray(labels)
    feats = _embed_all(ext, clouds, batch)
    pred = np.argmax(ext.logits(Tensor(feats)).data, axis=1)
    return float(np.mean(pred == labels))


@dataclass
class PretextTrainState:
    epoch: int = 0
    losses: list = field(default_factory=list)


def train_classifier(ext: FeatureExtractor, clouds, labels, epochs: int, lr: float = 1e-3,
                     batch: int = 64, held_out=None, seed: int = 0, optimizer: Optional[Adam] = None,
                     rng: Optional[np.random.Generator] = None, state: Optional[PretextTrainState] = None,
                     stop_after: Optional[int] = None, on_epoch=None):
    """Fit extractor and classifier with Adam on softmax cross-entropy.

    ``held_out`` is ``(clouds, labels)`` for the returned accuracy (training
    data when omitted). ``optimizer``, ``rng`` and ``state`` let a caller
    resume; ``stop_after`` ends the run early after that many epochs in total.
    Returns ``(accuracy, state)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ContractError("classifier training needs at least two categories")
    data = np.stack([np.asarray(c, dtype=np.float64) for c in clouds])
    opt = optimizer or Adam(ext.parameters(), lr=lr)
    rng = rng or np.random.default_rng(seed)
    state = state or PretextTrainState()
    last = epochs if stop_after is None else min(epochs, stop_after)
    while state.epoch < last:
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            opt.zero_grad()
            loss = cross_entropy(ext.logits(ext.embed(data[idx])), labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
            count += idx.size
        state.epoch += 1
        state.losses.append(total / count)
        if on_epoch is not None:
            on_epoch(state, opt, rng)
    if state.epoch >= epochs > 0:
        ext.trained = True
    hc, hl = held_out if held_out is not None else (data, labels)
    return accuracy(ext, hc, hl, batch), state


# EM Gaussian mixture -------------------------------------------------------------------

@dataclass
class GmmState:
    weights: np.ndarray      # [K]
    means: np.ndarray        # [K, D]
    variances: np.ndarray    # [K, D]
    resp: np.ndarray         # [K, N]
    loglik: list             # data log-likelihood before every M-step, then the final one
    seed: int = 0


def _log_gauss(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """``[K, N]`` diagonal Gaussian log densities."""
    out = np.empty((mean.shape[0], x.shape[0]))
    for k in range(mean.shape[0]):
        diff = x - mean[k]
        out[k] = -0.5 * (np.sum(np.log(2 * np.pi * var[k])) + np.sum(diff * diff / var[k], axis=1))
    return out


def _e_step(x, weights, means, variances):
    with np.errstate(divide="ignore"):
        logp = np.log(weights)[:, None] + _log_gauss(x, means, variances)
    top = logp.max(axis=0)
    lse = top + np.log(np.exp(logp - top).sum(axis=0))
    return np.exp(logp - lse), float(lse.sum())


def _fps_rows(x: np.ndarray, k: int, start: int) -> np.ndarray:
    chosen = [start]
    mind = np.sum((x - x[start]) ** 2, axis=1)
    for _ in range(1, k):
        j = int(np.argmax(mind))
        chosen.append(j)
        mind = np.minimum(mind, np.sum((x - x[j]) ** 2, axis=1))
    return np.array(chosen)


def fit_gmm_em(features, k: int = 4, iterations: int = 20, seed: int = 0,
               check: bool = True) -> GmmState:
    """Diagonal-covariance Gaussian mixture fitted by EM in log space.

    Means start at ``k`` features picked by farthest point sampling in feature
    space from a seeded start row; mixing weights start uniform and variances
    at the global per-dimension variance. A component whose total
    responsibility vanishes is re-seeded at the feature farthest from all
    current means.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < k:
        raise ContractError(f"need at least K={k} features, got {n}")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    means = x[_fps_rows(x, k, start)].copy()
    weights = np.full(k, 1.0 / k)
    gvar = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    variances = np.tile(gvar, (k, 1))
    trace = []
    resp = None
    for _ in range(iterations):
        resp, ll = _e_step(x, weights, means, variances)
        trace.append(ll)
        if check:
            _check_simplex(resp, weights)
        nk = resp.sum(axis=1)
        for j in np.flatnonzero(nk < 1e-10):
            far = int(np.argmax(np.min(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)))
            resp[:, far] = 0.0
            resp[j, far] = 1.0
            nk = resp.sum(axis=1)
        weights = nk / n
        means = (resp @ x) / nk[:, None]
        for j in range(k):
            diff = x - means[j]
            variances[j] = resp[j] @ (diff * diff) / nk[j]
        np.maximum(variances, VARIANCE_FLOOR, out=variances)
    resp, ll = _e_step(x, weights, means, variances)
    trace.append(ll)
    if check:
        _check_simplex(resp, weights)
    return GmmState(weights, means, variances, resp, trace, seed)


def _check_simplex(resp, weights):
    if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0):
        raise AssertionError("mixing weights left the simplex")
    if np.max(np.abs(resp.sum(axis=0) - 1.0)) > 1e-9:
        raise AssertionError("responsibilities do not sum to one")


def loglik_is_monotone(trace, tol: float = 1e-8) -> bool:
    return all(b >= a - tol * max(1.0, abs(a)) for a, b in zip(trace, trace[1:]))


# prototypes ------------------------------------------------------------------------------

@dataclass
class Prototype:
    category: int
    center: np.ndarray
    radius: float

    def as_record(self, k: int, iterations: int, seed: int) -> dict:
        return {"category_id": int(self.category), "center": [float(v) for v in self.center],
                "radius": float(self.radius), "D": int(self.center.size), "K": int(k),
                "em_iterations": int(iterations), "seed": int(seed)}


def prototype_from_gmm(gmm: GmmState, features, category: int = 0,
                       mode: str = "weighted_mean") -> Prototype:
    """Dense centre and maximum radius of one category.

    ``weighted_mean``: hard-assign every feature to its most responsible
    component and average the component means weighted by those counts.
    ``densest_cluster``: the mean of the component with the highest mixture
    density at its own mean.
    """
    x = np.asarray(features, dtype=np.float64)
    if mode == "weighted_mean":
        assign = np.argmax(gmm.resp, axis=0)
        counts = np.bincount(assign, minlength=gmm.means.shape[0]).astype(np.float64)
        center = (counts @ gmm.means) / counts.sum()
    elif mode == "densest_cluster":
        peak = np.log(gmm.weights) - 0.5 * np.sum(np.log(2 * np.pi * gmm.variances), axis=1)
        center = gmm.means[int(np.argmax(peak))].copy()
    else:
        raise ValueError(f"unknown prototype mode {mode!r}")
    radius = float(np.max(np.linalg.norm(x - center, axis=1)))
    return Prototype(category, center, max(radius, RADIUS_FLOOR))


def save_prototypes(path, prototypes: Sequence[Prototype], k: int, iterations: int, seed: int) -> str:
    records = [p.as_record(k, iterations, seed) for p in prototypes]
    text = json.dumps(records, indent=1) + "\n"
    Path(path).write_text(text)
    return text


def load_prototypes(path) -> list:
    records = json.loads(Path(path).read_text())
    out = []
    for r in records:
        center = np.asarray(r["center"], dtype=np.float64)
        if center.size != r["D"]:
            raise ContractError(f"prototype {r['category_id']}: centre has {center.size} entries, D={r['D']}")
        out.append(Prototype(int(r["category_id"]), center, float(r["radius"])))
    return out


# priors and weights ----------------------------------------------------------------------

def prior_terms(feature, prototypes: Sequence[Prototype]) -> np.ndarray:
    """Radius-normalised distances of ``feature`` to every prototype."""
    r = np.asarray(feature, dtype=np.float64)
    return np.array([np.linalg.norm(r - p.center) / p.radius for p in prototypes])


def soft_prior(feature, prototypes: Sequence[Prototype]) -> float:
    """Smallest radius-normalised distance to any category prototype."""
    if not prototypes:
        raise ContractError("soft prior needs at least one prototype")
    return float(prior_terms(feature, prototypes).min())


def cosine_gap(r, r_partial) -> float:
    a = np.asarray(r, dtype=np.float64)
    b = np.asarray(r_partial, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def difficulty_weight(cos: float, t: float = DIFFICULTY_T, k: float = DIFFICULTY_K) -> float:
    """``1 + sigmoid_{t,k}(1 - cos)`` with ``sigmoid(x) = 1 / (1 + exp(k (t - x)))``."""
    x = 1.0 - float(cos)
    return 1.0 + 1.0 / (1.0 + np.exp(k * (t - x)))


def l2_difficulty_weight(r, r_partial, t: float = DIFFICULTY_T, k: float = DIFFICULTY_K) -> float:
    """Difficulty weight driven by the relative L2 gap ``|r - r~| / |r|``."""
    a = np.asarray(r, dtype=np.float64)
    b = np.asarray(r_partial, dtype=np.float64)
    na = np.linalg.norm(a)
    if na == 0:
        raise ContractError("L2 gap relative to a zero vector")
    x = float(np.linalg.norm(a - b) / na)
    return 1.0 + 1.0 / (1.0 + np.exp(k * (t - x)))
