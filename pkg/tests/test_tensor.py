import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import autograd, numgrad, rel_err
from protoshape.tensor import (Adam, ContractError, DimensionError, NonFiniteError, Tensor,
                               concat, conv3d, conv3d_transposed, cross_entropy, gradients,
                               linear, log, max_over_points, mean, mul_scalar, pointwise,
                               relu, reshape, sigmoid, square, take_rows, tanh, tsum)


def rng(seed=0):
    return np.random.default_rng(seed)


# linear

def test_linear_zero_input():
    w = Tensor(rng().normal(size=(3, 4)))
    out = linear(Tensor(np.zeros((2, 3))), w, Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_linear_identity():
    x = rng().normal(size=(5, 3))
    out = linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_weight_grad(seed):
    r = rng(seed)
    x, w, b = Tensor(r.normal(size=(4, 3))), r.normal(size=(3, 5)), Tensor(r.normal(size=5))
    g = autograd(lambda t: tsum(linear(x, t, b)), w)
    fd = numgrad(lambda v: (x.data @ v + b.data).sum(), w)
    assert rel_err(g, fd) <= 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_all_grads(seed):
    r = rng(seed)
    x, w, b = r.normal(size=(4, 3)), r.normal(size=(3, 2)), r.normal(size=2)
    c = r.normal(size=(4, 2))
    f = lambda xx, ww, bb: float(((xx @ ww + bb) ** 2 * c).sum())
    tx, tw, tb = (Tensor(v, requires_grad=True) for v in (x, w, b))
    tsum(square(linear(tx, tw, tb)) * Tensor(c)).backward()
    assert rel_err(tx.grad, numgrad(lambda v: f(v, w, b), x)) <= 1e-6
    assert rel_err(tw.grad, numgrad(lambda v: f(x, v, b), w)) <= 1e-6
    assert rel_err(tb.grad, numgrad(lambda v: f(x, w, v), b)) <= 1e-6


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(DimensionError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))


# conv3d

def test_conv3d_delta_kernel_is_identity():
    x = rng().normal(size=(1, 5, 5, 5))
    k = np.zeros((1, 1, 3, 3, 3))
    k[0, 0, 1, 1, 1] = 1.0
    assert np.array_equal(conv3d(Tensor(x), Tensor(k)).data, x)


def test_conv3d_zero_input():
    k = Tensor(rng().normal(size=(2, 3, 3, 3, 3)))
    out = conv3d(Tensor(np.zeros((3, 4, 4, 4))), k, stride=2)
    assert out.shape == (2, 2, 2, 2) and not out.data.any()


def _direct_conv(x, k, stride):
    """Loop-level cross-correlation with zero padding 1."""
    ci, res = x.shape[0], x.shape[1]
    rp = res // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((k.shape[0], rp, rp, rp))
    for i in range(rp):
        for j in range(rp):
            for l in range(rp):
                patch = xp[:, stride * i:stride * i + 3, stride * j:stride * j + 3,
                           stride * l:stride * l + 3]
                out[:, i, j, l] = (k * patch[None]).reshape(k.shape[0], -1).sum(1)
    return out


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conv3d_matches_direct_loops(stride, seed):
    r = rng(seed)
    x, k = r.normal(size=(2, 4, 4, 4)), r.normal(size=(3, 2, 3, 3, 3))
    out = conv3d(Tensor(x), Tensor(k), stride=stride).data
    assert np.allclose(out, _direct_conv(x, k, stride), atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conv3d_grads(stride, seed):
    r = rng(seed)
    x, k, b = r.normal(size=(1, 4, 4, 4)), r.normal(size=(2, 1, 3, 3, 3)), r.normal(size=2)
    c = r.normal(size=(2,) + (4 // stride,) * 3)
    f = lambda xx, kk, bb: float(((_direct_conv(xx, kk, stride) + bb[:, None, None, None]) * c).sum())
    tx, tk, tb = (Tensor(v, requires_grad=True) for v in (x, k, b))
    tsum(conv3d(tx, tk, tb, stride=stride) * Tensor(c)).backward()
    assert rel_err(tx.grad, numgrad(lambda v: f(v, k, b), x)) <= 1e-4
    assert rel_err(tk.grad, numgrad(lambda v: f(x, v, b), k)) <= 1e-4
    assert rel_err(tb.grad, numgrad(lambda v: f(x, k, v), b)) <= 1e-4


def test_conv3d_rejects_bad_shapes():
    k = Tensor(np.zeros((1, 1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        conv3d(Tensor(np.zeros((1, 4, 4, 5))), k)
    with pytest.raises(DimensionError):
        conv3d(Tensor(np.zeros((2, 4, 4, 4))), k)
    with pytest.raises(ContractError):
        conv3d(Tensor(np.zeros((1, 4, 4, 4))), k, stride=3)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conv_transposed_is_adjoint(stride, seed):
    r = rng(seed)
    x = r.normal(size=(3, 8, 8, 8))
    k = r.normal(size=(4, 3, 3, 3, 3))
    y = r.normal(size=(4,) + (8 // stride,) * 3)
    lhs = float((conv3d(Tensor(x), Tensor(k), stride=stride).data * y).sum())
    rhs = float((x * conv3d_transposed(Tensor(y), Tensor(k), stride=stride).data).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_conv_transposed_shapes_and_zeros():
    k = Tensor(rng().normal(size=(2, 5, 3, 3, 3)))
    out = conv3d_transposed(Tensor(np.zeros((2, 2, 2, 2))), k)
    assert out.shape == (5, 4, 4, 4) and not out.data.any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conv_transposed_grads(seed):
    r = rng(seed)
    y, k, b = r.normal(size=(2, 2, 2, 2)), r.normal(size=(2, 1, 3, 3, 3)), r.normal(size=1)
    c = r.normal(size=(1, 4, 4, 4))

    def f(yy, kk, bb):
        return float(((conv3d_transposed(Tensor(yy), Tensor(kk), stride=2).data + bb[0]) * c).sum())

    ty, tk, tb = (Tensor(v, requires_grad=True) for v in (y, k, b))
    tsum(conv3d_transposed(ty, tk, tb, stride=2) * Tensor(c)).backward()
    assert rel_err(ty.grad, numgrad(lambda v: f(v, k, b), y)) <= 1e-4
    assert rel_err(tk.grad, numgrad(lambda v: f(y, v, b), k)) <= 1e-4
    assert rel_err(tb.grad, numgrad(lambda v: f(y, k, v), b)) <= 1e-4


# pointwise

def test_pointwise_values():
    assert np.array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert tanh(Tensor(0.0)).item() == 0.0
    assert pointwise(Tensor([3.0]), "mul_scalar", 2.0).data[0] == 6.0
    with pytest.raises(ValueError):
        pointwise(Tensor([1.0]), "softplus")


def test_tanh_grad_at_zero():
    g = autograd(lambda t: tsum(tanh(t)), np.zeros(1))
    assert g[0] == 1.0
    assert abs(numgrad(lambda v: float(np.tanh(v).sum()), np.zeros(1))[0] - 1.0) < 1e-9


@pytest.mark.parametrize("name,fn,ref", [
    ("relu", relu, lambda v: np.maximum(v, 0)),
    ("tanh", tanh, np.tanh),
    ("sigmoid", sigmoid, lambda v: 1 / (1 + np.exp(-v))),
    ("square", square, np.square),
    ("log", log, np.log),
    ("mul_scalar", lambda t: mul_scalar(t, -2.5), lambda v: -2.5 * v),
])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pointwise_grads(name, fn, ref, seed):
    r = rng(seed)
    x = r.uniform(0.2, 2.0, 6) * r.choice([-1, 1], 6)
    if name == "log":
        x = np.abs(x)
    c = r.normal(size=6)
    g = autograd(lambda t: tsum(fn(t) * Tensor(c)), x)
    assert rel_err(g, numgrad(lambda v: float((ref(v) * c).sum()), x)) <= 1e-6


# max over points

def test_max_single_row():
    row = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(max_over_points(Tensor(row)).data, row[0])


@given(st.integers(0, 2 ** 31 - 1))
def test_max_permutation_invariant(seed):
    r = rng(seed)
    x = r.normal(size=(7, 4))
    perm = r.permutation(7)
    assert np.array_equal(max_over_points(Tensor(x)).data, max_over_points(Tensor(x[perm])).data)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_max_grad(seed):
    x = rng(seed).normal(size=(5, 3))
    c = rng(seed + 10).normal(size=3)
    g = autograd(lambda t: tsum(max_over_points(t) * Tensor(c)), x)
    assert rel_err(g, numgrad(lambda v: float((v.max(0) * c).sum()), x)) <= 1e-6


def test_max_ties_pick_lowest_index():
    t = Tensor(np.ones((3, 2)), requires_grad=True)
    tsum(max_over_points(t)).backward()
    assert np.array_equal(t.grad, [[1, 1], [0, 0], [0, 0]])


def test_max_empty_is_error():
    with pytest.raises(ContractError):
        max_over_points(Tensor(np.zeros((0, 3))))


# graph and backward

def test_sum_grad_is_ones():
    assert np.array_equal(autograd(tsum, np.arange(6.0).reshape(2, 3)), np.ones((2, 3)))


def test_zero_times_anything():
    w = Tensor(rng().normal(size=(3, 3)), requires_grad=True)
    tsum(mul_scalar(sigmoid(w), 0.0)).backward()
    assert np.array_equal(w.grad, np.zeros((3, 3)))


def test_non_scalar_backward_is_error():
    with pytest.raises(ContractError):
        Tensor(np.ones(3), requires_grad=True).backward()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composite_conv_relu_linear(seed):
    r = rng(seed)
    x = r.normal(size=(1, 4, 4, 4))
    k = r.normal(size=(2, 1, 3, 3, 3))
    w = r.normal(size=(128, 3))

    def f(kk):
        h = np.maximum(_direct_conv(x, kk, 1), 0).reshape(1, -1)
        return float(np.tanh(h @ w).sum())

    tk = Tensor(k, requires_grad=True)
    h = relu(conv3d(Tensor(x), tk))
    tsum(tanh(linear(reshape(h, (1, -1)), Tensor(w)))).backward()
    assert rel_err(tk.grad, numgrad(f, k)) <= 1e-3


def test_graph_cleared_after_backward():
    w = Tensor(np.ones(3), requires_grad=True)
    y = tanh(w)
    loss = tsum(y)
    loss.backward()
    assert y._parents == () and loss._parents == ()


def test_gradients_matches_backward_and_leaves_untouched():
    r = rng(3)
    w = Tensor(r.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(r.normal(size=(4, 3)))
    make = lambda: tsum(square(tanh(linear(x, w))))
    (g,) = gradients(make(), [w])
    assert w.grad is None
    make().backward()
    assert np.array_equal(g, w.grad)


def test_shared_leaf_accumulates():
    w = Tensor([2.0], requires_grad=True)
    tsum(w * w + w).backward()
    assert w.grad[0] == 5.0


def test_concat_take_rows_reshape_mean_grads():
    r = rng(4)
    a, c = r.normal(size=(3, 2)), r.normal(size=(5, 2))
    idx = np.array([0, 2, 2, 1, 0])

    def f(v):
        return float((np.concatenate([v, v * 2])[idx] * c).mean())

    g = autograd(lambda t: mean(take_rows(concat([t, mul_scalar(t, 2.0)]), idx) * Tensor(c)), a)
    assert rel_err(g, numgrad(f, a)) <= 1e-6


def test_cross_entropy_grad():
    r = rng(5)
    logits, labels = r.normal(size=(4, 3)), np.array([0, 2, 1, 2])

    def f(v):
        z = v - v.max(1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(1, keepdims=True))
        return float(-lp[np.arange(4), labels].mean())

    g = autograd(lambda t: cross_entropy(t, labels), logits)
    assert rel_err(g, numgrad(f, logits)) <= 1e-6


def test_non_finite_is_error():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        log(Tensor([0.0]))


def test_no_broadcasting_beyond_scalars():
    with pytest.raises(DimensionError):
        Tensor(np.ones(3)) + Tensor(np.ones(2))
    assert np.array_equal((Tensor(np.ones(3)) * 2.0).data, [2, 2, 2])


def test_deterministic_outputs():
    def run():
        r = rng(7)
        x, k = Tensor(r.normal(size=(2, 8, 8, 8))), Tensor(r.normal(size=(3, 2, 3, 3, 3)), requires_grad=True)
        tsum(square(conv3d(x, k, stride=2))).backward()
        return k.grad

    assert np.array_equal(run(), run())


def test_adam_first_step_moves_by_lr():
    w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    tsum(w * Tensor([3.0, -0.5])).backward()
    opt.step()
    assert np.allclose(w.data, [0.9, -0.9], atol=1e-6)
