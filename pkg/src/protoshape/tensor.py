"""Minimal dense tensor with reverse-mode automatic differentiation.

Values are float64 numpy arrays. Each op records its parents and a closure
mapping the output gradient to parent gradients; :meth:`Tensor.backward`
walks the graph in reverse topological order, accumulates ``grad`` on every
leaf that requires it, and then drops the graph.

Only scalar-tensor broadcasting is supported.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a finite sum proves every entry finite; only an inf/nan sum needs the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(arr, axis=None)
    if not np.isfinite(total) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{req})"

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul_scalar(self, 1.0 / float(other))

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def graph_nodes(root: Tensor) -> list:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(loss: Tensor, sink: Callable) -> None:
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = graph_nodes(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                _check_finite(g, "backward")
                sink(node, g)
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    def sink(node, g):
        node.grad = g.copy() if node.grad is None else node.grad + g

    _backprop(loss, sink)


def gradients(loss: Tensor, leaves: Sequence[Tensor]) -> list:
    """Gradients of ``loss`` w.r.t. ``leaves`` (None where unreachable).

    Leaves are left untouched, so graphs sharing parameters can be
    differentiated on separate threads.
    """
    found = {}

    def sink(node, g):
        found[id(node)] = g

    _backprop(loss, sink)
    return [found.get(id(t)) for t in leaves]


# elementwise ----------------------------------------------------------------

def _binary_operands(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not match")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


_POINTWISE = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def pointwise(x: Tensor, fn: str, scalar: float = 1.0) -> Tensor:
    """Apply ``relu``, ``tanh``, ``sigmoid`` or ``mul_scalar`` elementwise."""
    if fn == "mul_scalar":
        return mul_scalar(x, scalar)
    try:
        return _POINTWISE[fn](x)
    except KeyError:
        raise ValueError(f"unknown pointwise function {fn!r}") from None


# reductions and shape ---------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take_rows(x: Tensor, index) -> Tensor:
    """Rows of ``x`` selected by an integer index array (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), grad_fn, "take_rows")


def max_over_points(x: Tensor) -> Tensor:
    """Columnwise max over the point axis of ``[N, D]`` (or ``[B, N, D]``).

    The subgradient goes to one argmax row per column; ties pick the lowest
    row index.
    """
    if x.data.ndim not in (2, 3):
        raise DimensionError(f"expected [N,D] or [B,N,D], got {x.shape}")
    axis = x.data.ndim - 2
    if x.shape[axis] == 0:
        raise ContractError("max over an empty point set")
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _make(out, (x,), grad_fn, "max_over_points")


# dense layers -------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for ``x: [B, I]``, ``w: [I, O]``, ``b: [O]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: x{x.shape} incompatible with w{w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match w{w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)

    def grad_fn(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, grad_fn, "linear")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[B, C]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.size
    loss = -logp[np.arange(n), labels].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(loss), (logits,), grad_fn, "cross_entropy")


# 3-D convolution ------------------------------------------------------------------

def _check_volume(x: np.ndarray, what: str) -> int:
    if x.ndim != 4 or not (x.shape[1] == x.shape[2] == x.shape[3]):
        raise DimensionError(f"{what}: expected a cubic [C,R,R,R] volume, got {x.shape}")
    return x.shape[1]


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """``[C*27, R'^3]`` patch matrix of a zero-padded volume."""
    return kernels.im2col(x, stride)


def _conv_fwd(x: np.ndarray, k: np.ndarray, stride: int, cols=None) -> np.ndarray:
    if cols is None:
        cols = _im2col(x, stride)
    rp = x.shape[1] // stride
    return (k.reshape(k.shape[0], -1) @ cols).reshape(k.shape[0], rp, rp, rp)


def _conv_adj(g: np.ndarray, k: np.ndarray, stride: int, res: int) -> np.ndarray:
    # adjoint of _conv_fwd w.r.t. its input
    if stride == 1:
        return _conv_fwd(g, np.ascontiguousarray(k[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)), 1)
    rp = g.shape[1]
    cols = (k.reshape(k.shape[0], -1).T @ g.reshape(g.shape[0], -1))
    cols = cols.reshape(k.shape[1], 3, 3, 3, rp, rp, rp)
    xp = np.zeros((k.shape[1], res + 2, res + 2, res + 2))
    span = stride * (rp - 1) + 1
    for a in range(3):
        for b in range(3):
            for d in range(3):
                xp[:, a:a + span:stride, b:b + span:stride, d:d + span:stride] += cols[:, a, b, d]
    return xp[:, 1:-1, 1:-1, 1:-1]


def _conv_kgrad(g: np.ndarray, x: np.ndarray, stride: int, cols=None) -> np.ndarray:
    if cols is None:
        cols = _im2col(x, stride)
    gk = g.reshape(g.shape[0], -1) @ cols.T
    return gk.reshape(g.shape[0], x.shape[0], 3, 3, 3)


def _check_kernel(k: np.ndarray, cin: int, what: str) -> None:
    if k.ndim != 5 or k.shape[2:] != (3, 3, 3):
        raise DimensionError(f"{what}: kernel must be [Co,Ci,3,3,3], got {k.shape}")
    if k.shape[1] != cin:
        raise DimensionError(f"{what}: kernel expects {k.shape[1]} input channels, got {cin}")


def conv3d(x: Tensor, k: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """3x3x3 cross-correlation with zero padding 1 and stride 1 or 2.

    ``x: [C_in,R,R,R]``, ``k: [C_out,C_in,3,3,3]``, optional ``b: [C_out]``;
    output is ``[C_out, R/stride, ...]``.
    """
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    res = _check_volume(x.data, "conv3d")
    _check_kernel(k.data, x.shape[0], "conv3d")
    if res % stride:
        raise DimensionError(f"conv3d: resolution {res} not divisible by stride {stride}")
    xd, kd = x.data, k.data
    cols = _im2col(xd, stride)
    out = _conv_fwd(xd, kd, stride, cols)
    parents = [x, k]
    if b is not None:
        if b.shape != (kd.shape[0],):
            raise DimensionError(f"conv3d: bias {b.shape} for {kd.shape[0]} channels")
        out = out + b.data[:, None, None, None]
        parents.append(b)

    def grad_fn(g):
        gx = _conv_adj(g, kd, stride, res) if x.requires_grad else None
        gk = _conv_kgrad(g, xd, stride, cols) if k.requires_grad else None
        if b is None:
            return gx, gk
        return gx, gk, g.sum(axis=(1, 2, 3))

    return _make(out, parents, grad_fn, "conv3d")


def conv3d_transposed(y: Tensor, k: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Adjoint of :func:`conv3d` with the same kernel layout.

    ``y: [C_out,R',R',R']`` and ``k: [C_out,C_in,3,3,3]`` give
    ``[C_in, stride*R', ...]``; the optional bias has ``C_in`` entries.
    """
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    rp = _check_volume(y.data, "conv3d_transposed")
    kd, yd = k.data, y.data
    if kd.ndim != 5 or kd.shape[2:] != (3, 3, 3) or kd.shape[0] != y.shape[0]:
        raise DimensionError(f"conv3d_transposed: kernel {kd.shape} vs input {y.shape}")
    res = rp * stride
    out = _conv_adj(yd, kd, stride, res)
    parents = [y, k]
    if b is not None:
        if b.shape != (kd.shape[1],):
            raise DimensionError(f"conv3d_transposed: bias {b.shape} for {kd.shape[1]} channels")
        out = out + b.data[:, None, None, None]
        parents.append(b)

    def grad_fn(g):
        gy = _conv_fwd(g, kd, stride) if y.requires_grad else None
        gk = _conv_kgrad(yd, g, stride) if k.requires_grad else None
        if b is None:
            return gy, gk
        return gy, gk, g.sum(axis=(1, 2, 3))

    return _make(out, parents, grad_fn, "conv3d_transposed")


# optimisation ------------------------------------------------------------------------

class Adam:
    """Adam over a fixed, ordered list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = int(t)
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"adam.m.{i}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"adam.v.{i}"], dtype=np.float64)


def parameter(shape, rng: np.random.Generator, fan_in: int, name=None, scale: float = 1.0) -> Tensor:
    """He-uniform initialised trainable tensor."""
    bound = scale * np.sqrt(6.0 / max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_parameter(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)
