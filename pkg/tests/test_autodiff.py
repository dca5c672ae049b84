import math

import numpy as np
import pytest

from corf import autodiff as ad
from corf.autodiff import Tensor, backward, finite_diff_check, grad_map, param
from corf.optim import Adam, adam_step
from corf.rng import Rng


def test_softplus_at_zero_is_ln2():
    out = ad.softplus(Tensor(0.0))
    assert abs(out.item() - math.log(2.0)) < 1e-15


def test_matmul_identity():
    x = np.arange(12, dtype=np.float64).reshape(3, 4)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(x))
    assert np.array_equal(out.data, x)


def test_conv2d_all_ones_sums_kernel_window():
    # 1x1x3x3 ones against a 1x1x3x3 ones kernel, valid padding: 9 products of 1
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_backward_square():
    x = param(3.0)
    y = ad.mul(x, x)
    g = backward(y, [x])[x]
    assert g.item() == 6.0


def test_backward_relu_dead_region():
    x = param(np.array([-1.0]))
    y = ad.tsum(ad.relu(x))
    g = backward(y, [x])[x]
    assert g.data[0] == 0.0


def test_double_backward_cubic():
    x = param(2.0)
    y = ad.power(x, 3.0)
    g = grad_map(y, [x], create_graph=True)[x]
    assert abs(g.item() - 12.0) < 1e-12  # 3x^2 at 2
    g2 = backward(g, [x])[x]
    assert abs(g2.item() - 12.0) < 1e-12  # 6x at 2


def test_backward_requires_scalar():
    x = param(np.ones(3))
    with pytest.raises(ad.ShapeError):
        backward(ad.mul(x, 2.0), [x])


def test_finite_diff_sum_exact_at_zero():
    err = finite_diff_check(lambda t: ad.tsum(t), np.zeros(4), eps=1e-4)
    assert err == 0.0


def test_finite_diff_sum_exp():
    err = finite_diff_check(lambda t: ad.tsum(ad.exp(t)), np.zeros(4), eps=1e-4)
    assert err < 1e-6


def test_finite_diff_flags_relu_kink():
    err, kinks = finite_diff_check(
        lambda t: ad.tsum(ad.relu(t)), np.array([0.0, 1.0]), eps=1e-5, details=True
    )
    assert kinks[0] and not kinks[1]
    assert err < 1e-6  # the kink coordinate is excluded from the max


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: ad.tsum(t), np.zeros(2), eps=0.0)


def test_broadcast_shape_errors_are_descriptive():
    a, b = Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(a, b)
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(a, Tensor(np.ones((3, 4))))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_broadcasting_follows_trailing_alignment():
    a = param(np.ones((2, 3)))
    b = param(np.ones(3))
    out = ad.tsum(ad.mul(a, b))
    grads = backward(out, [a, b])
    assert grads[a].shape == (2, 3)
    assert grads[b].shape == (3,)
    assert np.array_equal(grads[b].data, np.full(3, 2.0))


SMOOTH_OPS = [
    ("exp", lambda t: ad.tsum(ad.exp(t)), 0.5),
    ("log", lambda t: ad.tsum(ad.log(ad.add(ad.mul(t, t), 1.5))), 1.0),
    ("softplus", lambda t: ad.tsum(ad.softplus(t)), 1.0),
    ("sigmoid", lambda t: ad.tsum(ad.sigmoid(t)), 1.0),
    ("sqrt", lambda t: ad.tsum(ad.sqrt(ad.add(ad.mul(t, t), 1.0))), 1.0),
    ("sin", lambda t: ad.tsum(ad.sin(t)), 1.0),
    ("cos", lambda t: ad.tsum(ad.cos(t)), 1.0),
    ("div", lambda t: ad.tsum(ad.div(1.0, ad.add(ad.mul(t, t), 2.0))), 1.0),
    ("mean", lambda t: ad.tmean(ad.mul(t, t)), 1.0),
    ("cumsum", lambda t: ad.tsum(ad.mul(ad.cumsum(t), ad.cumsum(t))), 1.0),
    ("l2_norm", lambda t: ad.l2_norm(ad.add(t, 0.3)), 1.0),
    ("pow", lambda t: ad.tsum(ad.power(ad.add(ad.mul(t, t), 1.0), 1.7)), 1.0),
]


@pytest.mark.parametrize("name,fn,scale", SMOOTH_OPS, ids=[o[0] for o in SMOOTH_OPS])
def test_smooth_primitives_match_finite_differences(name, fn, scale):
    rng = Rng(17)
    for trial in range(3):
        point = scale * rng.normal((5,))
        assert finite_diff_check(fn, point, eps=1e-5) < 1e-3


def test_matmul_gradient_matches_finite_differences():
    rng = Rng(3)
    b = Tensor(rng.normal((4, 3)))

    def fn(t):
        return ad.tsum(ad.mul(ad.matmul(t, b), ad.matmul(t, b)))

    assert finite_diff_check(fn, rng.normal((2, 4)), eps=1e-5) < 1e-3


def test_batched_matmul_gradients():
    rng = Rng(4)
    a0 = rng.normal((2, 3, 4))
    b0 = rng.normal((2, 4, 5))

    def fa(t):
        return ad.tsum(ad.mul(ad.matmul(t, Tensor(b0)), 1.3))

    def fb(t):
        return ad.tsum(ad.power(ad.matmul(Tensor(a0), t), 2.0))

    assert finite_diff_check(fa, a0, eps=1e-5) < 1e-3
    assert finite_diff_check(fb, b0, eps=1e-5) < 1e-3


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_gradients_match_finite_differences(stride, pad):
    rng = Rng(11 + stride * 10 + pad)
    x0 = rng.normal((2, 2, 5, 5))
    w0 = rng.normal((3, 2, 3, 3))

    def fx(t):
        return ad.tsum(ad.power(ad.conv2d(t, Tensor(w0), stride=stride, pad=pad), 2.0))

    def fw(t):
        return ad.tsum(ad.power(ad.conv2d(Tensor(x0), t, stride=stride, pad=pad), 2.0))

    assert finite_diff_check(fx, x0, eps=1e-5) < 1e-3
    assert finite_diff_check(fw, w0, eps=1e-5) < 1e-3


def test_double_backward_conv_dense_lrelu_reduction():
    # same pattern as the adversarial gradient regularizer: differentiate
    # the squared norm of an input gradient with respect to the weights
    rng = Rng(23)
    x0 = rng.normal((1, 1, 6, 6))
    w1_0 = 0.5 * rng.normal((2, 1, 3, 3))
    w2_0 = 0.5 * rng.normal((1, 2, 2, 2))

    def penalty(w1_arr, w2_arr):
        x = param(x0.copy())
        h = ad.leaky_relu(ad.conv2d(x, Tensor(w1_arr), stride=2, pad=1))
        s = ad.tsum(ad.conv2d(h, Tensor(w2_arr)))
        gx = grad_map(s, [x], create_graph=True)[x]
        return ad.tsum(ad.mul(gx, gx))

    def fn_w1(t):
        x = param(x0.copy())
        h = ad.leaky_relu(ad.conv2d(x, t, stride=2, pad=1))
        s = ad.tsum(ad.conv2d(h, Tensor(w2_0)))
        gx = grad_map(s, [x], create_graph=True)[x]
        return ad.tsum(ad.mul(gx, gx))

    # analytic gradient of the penalty w.r.t. w1 via a second backward pass
    w1 = param(w1_0.copy())
    x = param(x0.copy())
    h = ad.leaky_relu(ad.conv2d(x, w1, stride=2, pad=1))
    s = ad.tsum(ad.conv2d(h, Tensor(w2_0)))
    gx = grad_map(s, [x], create_graph=True)[x]
    pen = ad.tsum(ad.mul(gx, gx))
    analytic = backward(pen, [w1])[w1].data

    numeric = np.zeros_like(w1_0)
    eps = 1e-5
    flat_w, flat_n = w1_0.reshape(-1), numeric.reshape(-1)
    for i in range(flat_w.size):
        orig = flat_w[i]
        flat_w[i] = orig + eps
        fp = penalty(w1_0, w2_0).item()
        flat_w[i] = orig - eps
        fm = penalty(w1_0, w2_0).item()
        flat_w[i] = orig
        flat_n[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    assert np.max(np.abs(analytic - numeric) / denom) < 1e-2
    assert finite_diff_check(fn_w1, w1_0, eps=1e-5) < 1e-2


def test_graph_is_acyclic_and_topo_valid():
    x = param(np.ones(3))
    y = ad.tsum(ad.mul(ad.exp(x), ad.add(x, 1.0)))
    g = ad.Graph.from_output(y)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for node in g.nodes:
        for p in node.parents:
            assert pos[id(p)] < pos[id(node)]  # parents evaluated first
    assert x in g.leaves
    assert g.nodes[-1] is y


def test_forward_op_dispatch():
    out = ad.forward_op("add", Tensor(1.0), Tensor(2.0))
    assert out.item() == 3.0
    with pytest.raises(KeyError):
        ad.forward_op("no-such-op", Tensor(1.0))


def test_no_grad_suppresses_recording():
    x = param(np.ones(2))
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert y.parents == () and not y.requires_grad


def test_graph_evaluation_deterministic():
    def run():
        rng = Rng(99)
        x = param(rng.normal((4, 4)))
        y = ad.tsum(ad.sigmoid(ad.matmul(x, x)))
        return y.item(), backward(y, [x])[x].data.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = param(np.array([1.0, -2.0]))
    state = {}
    adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(p.data, np.array([1.0, -2.0]))


def test_adam_first_step_is_signed_lr():
    p = param(np.array([0.0, 0.0]))
    g = np.array([0.3, -5.0])
    adam_step({"p": p}, {"p": g}, {}, lr=0.01, eps=1e-12)
    # bias-corrected first step: lr * g / sqrt(g^2) = lr * sign(g)
    assert np.allclose(p.data, -0.01 * np.sign(g), atol=1e-9)


def test_adam_is_deterministic():
    def run():
        p = param(np.array([1.0, 2.0]))
        opt = Adam(lr=0.05, beta1=0.0, beta2=0.99)
        for k in range(5):
            opt.step({"p": p}, {"p": np.array([0.1 * k, -0.2])})
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    p = param(np.zeros(3))
    with pytest.raises(ad.ShapeError):
        adam_step({"p": p}, {"p": np.zeros(4)}, {}, lr=0.1)


# ---------------------------------------------------------------------------
# Rng
# ---------------------------------------------------------------------------

def test_rng_repeatable_and_splittable():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal((8,)), b.normal((8,)))
    ca, cb = a.split("child"), b.split("child")
    assert np.array_equal(ca.uniform(0, 1, (4,)), cb.uniform(0, 1, (4,)))
    assert not np.array_equal(ca.normal((4,)), a.split("other").normal((4,)))


def test_rng_state_roundtrip():
    r = Rng(7)
    r.normal((13,))
    st = r.get_state()
    r2 = Rng.from_state(st)
    assert np.array_equal(r.normal((5,)), r2.normal((5,)))
