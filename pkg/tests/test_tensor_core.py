import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from musp import functional as F
from musp.autograd import ShapeError, Tensor, computation_record, concat, exp, log, stack
from musp.functional import ConfigError
from musp.optim import AdamState, adam_step

from conftest import FD_TOL, GRAD_SEEDS, leaf, max_grad_error


# -- independent oracles --------------------------------------------------------

def conv_oracle(x, kernel, bias):
    h, w, cin = x.shape
    cout = kernel.shape[3]
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for co in range(cout):
                s = bias[co]
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            for ci in range(cin):
                                s += x[ii, jj, ci] * kernel[di, dj, ci, co]
                out[i, j, co] = s
    return out


def linear_oracle(x, weight, bias):
    return np.array(
        [sum(x[i] * weight[i, j] for i in range(len(x))) + bias[j] for j in range(weight.shape[1])]
    )


# -- conv2d -----------------------------------------------------------------------

def test_conv_zero_kernel_passes_bias():
    out = F.conv2d(Tensor([[[2.0]]]), Tensor(np.zeros((3, 3, 1, 1))), Tensor([3.0]))
    assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 3.0


def test_conv_identity_kernel():
    kernel = np.zeros((3, 3, 1, 1))
    kernel[1, 1, 0, 0] = 1.0
    out = F.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(kernel), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, np.ones((3, 3, 1)))


@pytest.mark.parametrize("seed", range(20))
def test_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w, cin, cout = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 4), rng.integers(1, 4)
    x, k, b = rng.normal(size=(h, w, cin)), rng.normal(size=(3, 3, cin, cout)), rng.normal(size=cout)
    out = F.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    np.testing.assert_allclose(out, conv_oracle(x, k, b), rtol=0, atol=1e-12)


def test_conv_4x4x2_to_3_oracle():
    rng = np.random.default_rng(7)
    x, k, b = rng.normal(size=(4, 4, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    np.testing.assert_allclose(F.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, conv_oracle(x, k, b), atol=1e-12)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(3)
    x, k, b = rng.normal(size=(3, 5, 4, 2)), rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
    batched = F.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv_oracle(x[i], k, b), atol=1e-12)


def test_conv_channel_mismatch_is_diagnosed():
    with pytest.raises(ShapeError, match="3 channels but kernel expects 2"):
        F.conv2d(Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros((3, 3, 2, 1))))


# -- linear -----------------------------------------------------------------------

def test_linear_identity_and_zero_input():
    x = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(F.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    bias = np.array([0.1, 0.2])
    np.testing.assert_array_equal(F.linear(Tensor(np.zeros(3)), Tensor(np.ones((3, 2))), Tensor(bias)).data, bias)


@pytest.mark.parametrize("seed", range(20))
def test_linear_matches_dot_oracle(seed):
    rng = np.random.default_rng(seed)
    x, wt, b = rng.normal(size=5), rng.normal(size=(5, 3)), rng.normal(size=3)
    np.testing.assert_allclose(F.linear(Tensor(x), Tensor(wt), Tensor(b)).data, linear_oracle(x, wt, b), atol=1e-12)


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError, match="input length 4"):
        F.linear(Tensor(np.zeros(4)), Tensor(np.zeros((5, 2))))


# -- softmax / sigmoid / relu -----------------------------------------------------

def test_softmax_cases():
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros(5))).data, 0.2, atol=1e-15)
    big = F.softmax(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0, 0.0], atol=1e-300)
    logits = [0.1, 0.5, -0.2]
    denom = sum(math.exp(v) for v in logits)
    np.testing.assert_allclose(F.softmax(Tensor(logits)).data, [math.exp(v) / denom for v in logits], rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=3.0, size=(4, 6))
    oracle = np.array([[math.exp(v) / sum(math.exp(u) for u in row) for v in row] for row in x])
    np.testing.assert_allclose(F.softmax(Tensor(x), axis=1).data, oracle, rtol=0, atol=1e-12)


@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(x, shift):
    a = F.softmax(Tensor(x)).data
    b = F.softmax(Tensor(x + shift)).data
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_sigmoid_cases():
    assert F.sigmoid(Tensor(0.0)).item() == 0.5
    tiny = F.sigmoid(Tensor(-800.0)).item()
    assert 0.0 <= tiny <= 1e-9
    assert F.sigmoid(Tensor(1.0)).item() == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert F.sigmoid(Tensor(1.0)).item() == pytest.approx(0.7310585786300049, abs=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_sigmoid_scalar_oracle(seed):
    x = np.random.default_rng(seed).normal(scale=4.0, size=10)
    np.testing.assert_allclose(F.sigmoid(Tensor(x)).data, [1 / (1 + math.exp(-v)) for v in x], rtol=0, atol=1e-12)


def test_relu_cases():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    pos = np.array([0.5, 3.0])
    np.testing.assert_array_equal(F.relu(Tensor(pos)).data, pos)
    x = np.random.default_rng(0).normal(size=(5, 5))
    np.testing.assert_array_equal(F.relu(Tensor(x)).data, [[v if v > 0 else 0.0 for v in row] for row in x])


# -- batch norm -------------------------------------------------------------------

def _bn(x, gamma=None, beta=None, training=True):
    c = x.shape[-1]
    gamma = np.ones(c) if gamma is None else gamma
    beta = np.zeros(c) if beta is None else beta
    rm, rv = np.zeros(c), np.ones(c)
    out = F.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training)
    return out.data, rm, rv


def test_bn_constant_batch_gives_shift():
    out, _, _ = _bn(np.full((4, 3), 2.5), beta=np.array([0.1, -0.2, 0.3]))
    np.testing.assert_allclose(out, np.tile([0.1, -0.2, 0.3], (4, 1)), atol=1e-12)


def test_bn_symmetric_pair():
    a = np.array([1.0, 4.0])
    out, _, _ = _bn(np.stack([-a, a]))
    np.testing.assert_allclose(out, [[-1, -1], [1, 1]], atol=1e-5)


def test_bn_moments_of_random_batch():
    x = np.random.default_rng(5).normal(loc=3.0, scale=2.0, size=(8, 6))
    out, rm, rv = _bn(x)
    assert np.abs(out.mean(axis=0)).max() <= 1e-10
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-5)
    # raw normalized variance is var / (var + eps)
    raw = x.var(axis=0)
    np.testing.assert_allclose(out.var(axis=0), raw / (raw + 1e-5), atol=1e-6)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1), atol=1e-12)


def test_bn_inference_uses_running_stats():
    x = np.random.default_rng(2).normal(size=(3, 2))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    out = F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False).data
    np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + 1e-5), atol=1e-12)


def test_bn_rejects_single_sample_in_training():
    with pytest.raises(ConfigError):
        _bn(np.ones((1, 3)))


# -- backward -------------------------------------------------------------------

def test_backward_sum_and_zero_scaling():
    x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    y = leaf([1.0, 2.0])
    (exp(y).sum() * 0.0).backward()
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_backward_accumulates_over_reuse():
    x = leaf([1.0, -2.0])
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [3.0, -3.0])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_computation_record_is_topological():
    a, b = leaf([1.0]), leaf([2.0])
    c = a * b
    d = c + a
    e = (d * c).sum()
    order = computation_record(e)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]
    assert order[-1] is e


# -- finite-difference gradient checks ---------------------------------------------

def _primitive_cases(rng):
    x = leaf(rng.normal(size=(2, 4, 3, 2)))
    k = leaf(rng.normal(size=(3, 3, 2, 3)))
    b = leaf(rng.normal(size=3))
    tconv = rng.normal(size=(2, 4, 3, 3))
    yield "conv2d", lambda: (F.conv2d(x, k, b) * tconv).sum(), [x, k, b]

    v, wt, bl = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=(5, 4))), leaf(rng.normal(size=4))
    t = rng.normal(size=(3, 4))
    yield "linear", lambda: (F.linear(v, wt, bl) * t).sum(), [v, wt, bl]

    s = leaf(rng.normal(size=(4, 5)))
    ts = rng.normal(size=(4, 5))
    yield "softmax", lambda: (F.softmax(s) * ts).sum(), [s]
    yield "log_softmax", lambda: (F.log_softmax(s) * ts).sum(), [s]
    yield "sigmoid", lambda: (F.sigmoid(s) * ts).sum(), [s]
    r = leaf(rng.normal(size=(4, 5)) + np.sign(rng.normal(size=(4, 5))) * 0.1)
    yield "relu", lambda: (F.relu(r) * ts).sum(), [r]

    bx = leaf(rng.normal(size=(6, 3)))
    gm, bt = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    tb = rng.normal(size=(6, 3))
    yield "batch_norm", lambda: (F.batch_norm(bx, gm, bt, np.zeros(3), np.ones(3), True) * tb).sum(), [bx, gm, bt]

    px = leaf(rng.normal(size=(2, 4, 6, 3)))
    tp = rng.normal(size=(2, 2, 3, 3))
    yield "avg_pool2d", lambda: (F.avg_pool2d(px) * tp).sum(), [px]
    tg = rng.normal(size=(2, 3))
    yield "global_avg_pool", lambda: (F.global_avg_pool(px) * tg).sum(), [px]

    e = leaf(rng.normal(size=(5, 3)))
    td = rng.normal(size=(5, 5))
    yield "pairwise_distance", lambda: (F.pairwise_distance(e) * td).sum(), [e]

    q = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    tq = rng.normal(size=(3, 4))
    yield "sqrt/log/exp/div", lambda: (F.sqrt(q) * log(q) + exp(q) / q - q * tq).sum(), [q]

    m1, m2 = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 2)))
    yield "batched matmul", lambda: ((m1 @ m2) * (m1 @ m2)).sum(), [m1, m2]

    c1, c2 = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(1, 3)))
    tc = rng.normal(size=(3, 3))
    ts2 = rng.normal(size=(2, 2, 3))
    yield "concat/stack/index", lambda: (
        (concat([c1, c2]) * tc).sum() + (stack([c1, c1 * 2.0]) * ts2).sum() + c1[[0, 0, 1], 2].sum()
    ), [c1, c2]

    bc, bd = leaf(rng.normal(size=(3, 1))), leaf(rng.normal(size=(4,)))
    tbc = rng.normal(size=(3, 4))
    yield "broadcast add/mul/mean", lambda: (((bc + bd) * bd - bc).mean(axis=0) * tbc[0]).sum() + (
        (bc * bd * tbc).transpose(1, 0).reshape(-1).sum()
    ), [bc, bd]


PRIMITIVES = [name for name, _, _ in _primitive_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", PRIMITIVES)
@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_primitive_gradients(name, seed):
    cases = {n: (fn, ts) for n, fn, ts in _primitive_cases(np.random.default_rng([seed, 11]))}
    fn, tensors = cases[name]
    assert max_grad_error(fn, tensors) <= FD_TOL


# -- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": leaf([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = {"w": leaf([1.0, 1.0, 1.0])}
    adam_step(p, {"w": np.array([0.3, -5.0, 2e-3])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"].data - 1.0, [-0.01, 0.01, -0.01], rtol=1e-5)


def test_adam_three_step_recurrence_oracle():
    a, c, x0, lr, wd = 2.0, 0.7, -1.3, 0.05, 0.01
    b1, b2, eps = 0.9, 0.999, 1e-8
    x, m, v = x0, 0.0, 0.0
    expected = []
    for t in range(1, 4):
        g = a * (x - c) + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        expected.append(x)

    p = {"x": leaf([x0])}
    state = AdamState()
    got = []
    for _ in range(3):
        grad = a * (p["x"].data - c)
        adam_step(p, {"x": grad}, state, lr, wd)
        got.append(p["x"].data[0])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    assert state.step == 3


@settings(max_examples=30)
@given(arrays(np.float64, 4, elements=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3)))
def test_adam_step_changes_params_when_gradient_nonzero(g):
    p = {"w": leaf(np.zeros(4))}
    adam_step(p, {"w": g}, AdamState(), lr=1e-3)
    assert np.all(p["w"].data != 0.0)
