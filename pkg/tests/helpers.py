"""Shared oracles for the test suite."""

import numpy as np

from protoshape.tensor import Tensor


def numgrad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x.copy())
        x[i] = old - eps
        lo = f(x.copy())
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def autograd(f, x: np.ndarray) -> np.ndarray:
    """Gradient of scalar tensor function ``f`` at ``x`` via backward."""
    t = Tensor(x, requires_grad=True)
    f(t).backward()
    return t.grad


def brute_chamfer(a, b) -> float:
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(d.min(1).mean() + d.min(0).mean())


def brute_fscore(pred, gt, thr) -> float:
    d = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    p = float((d.min(1) < thr).mean())
    r = float((d.min(0) < thr).mean())
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)
