import numpy as np
import pytest

from xdistill import autograd as ag
from xdistill.autograd import Tensor, backward
from xdistill.autograd.gradcheck import gradcheck


def naive_conv(x, w, b, stride=1, pad=1):
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for dy in range(k):
                            for dx in range(k):
                                acc += xp[i, ci, y * stride + dy, xx * stride + dx] * w[o, ci, dy, dx]
                    out[i, o, y, xx] = acc
    return out


def scalar_bilinear(img, x, y):
    h, w = img.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    if x0 < 0 or y0 < 0 or x0 + 1 > w - 1 or y0 + 1 > h - 1:
        return 0.0, 0.0
    fx, fy = x - x0, y - y0
    v = (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x0 + 1] * fx * (1 - fy)
         + img[y0 + 1, x0] * (1 - fx) * fy + img[y0 + 1, x0 + 1] * fx * fy)
    return v, 1.0


# -- elementwise ----------------------------------------------------------------


def test_relu_and_sigmoid_values():
    assert ag.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert ag.sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_sigmoid_is_finite_for_extreme_inputs():
    out = ag.sigmoid(Tensor([-1e4, -50.0, 50.0, 1e4]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == 0.0 and out.data[-1] == 1.0


def test_mul_gradient_product_rule():
    x = Tensor([2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    backward(ag.sum_(ag.mul(x, y)))
    assert x.grad.tolist() == [3.0]
    assert y.grad.tolist() == [2.0]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        ag.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_unguarded_log_of_nonpositive_raises():
    with pytest.raises(ValueError):
        ag.log(Tensor([0.0, 1.0]), guard=False)
    assert np.all(np.isfinite(ag.log(Tensor([0.0, 1.0])).data))


def test_scalar_operand_broadcasts():
    out = ag.add(Tensor([1.0, 2.0]), 3.0)
    assert out.data.tolist() == [4.0, 5.0]


# -- reductions -----------------------------------------------------------------


def test_mean_and_sum_gradients():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    assert ag.mean(x).item() == 2.0
    backward(ag.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_min_routes_gradient_to_argmin():
    x = Tensor([[3.0, 1.0], [2.0, 5.0]], requires_grad=True)
    m = ag.min_(x, axis=1)
    assert m.data.tolist() == [1.0, 2.0]
    backward(ag.sum_(m))
    np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0]])


def test_min_ties_take_first_index():
    x = Tensor([[2.0, 2.0, 2.0]], requires_grad=True)
    backward(ag.sum_(ag.min_(x, axis=1)))
    np.testing.assert_array_equal(x.grad, [[1, 0, 0]])


def test_empty_reduction_axis_raises():
    with pytest.raises(ValueError):
        ag.mean(Tensor(np.zeros((0, 3))), axis=0)


def test_mean_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(ag.mean(ag.mul(x, x)))
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


# -- conv2d ---------------------------------------------------------------------


def test_identity_kernel_reproduces_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 6)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = ag.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_zero_weight_gives_bias():
    out = ag.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))), Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data[0, :, 2, 2], [1.0, 2.0, 3.0])
    assert np.all(out.data[0, 1] == 2.0)


@pytest.mark.parametrize("cin,cout,stride", [(2, 3, 1), (2, 3, 2), (16, 16, 1), (16, 16, 2), (1, 32, 1)])
def test_conv_matches_loop_oracle(cin, cout, stride):
    rng = np.random.default_rng(cin * 10 + stride)
    x = rng.normal(size=(1, cin, 4, 4))
    w = rng.normal(size=(cout, cin, 3, 3))
    b = rng.normal(size=cout)
    out = ag.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                    stride=stride)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride), atol=1e-10)
    out32 = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride)
    np.testing.assert_allclose(out32.data, naive_conv(x, w, b, stride), atol=1e-5 * cin)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        ag.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 4, 3, 3))))


def test_conv_does_not_mutate_inputs():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
    xs, ws = x.copy(), w.copy()
    tx, tw = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    backward(ag.sum_(ag.conv2d(tx, tw)))
    np.testing.assert_array_equal(tx.data, xs)
    np.testing.assert_array_equal(tw.data, ws)


# -- batchnorm ------------------------------------------------------------------


def test_batchnorm_matches_formula():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 4))
    g, b = rng.uniform(0.5, 2, 3), rng.normal(size=3)
    out, new_mean, new_var = ag.batchnorm(Tensor(x, dtype=np.float64), Tensor(g, dtype=np.float64),
                                          Tensor(b, dtype=np.float64), np.zeros(3), np.ones(3), True)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    ref = (x - mu) / np.sqrt(var + ag.BN_EPS) * g[None, :, None, None] + b[None, :, None, None]
    np.testing.assert_allclose(out.data, ref, atol=1e-10)
    np.testing.assert_allclose(new_mean, ag.BN_MOMENTUM * mu.ravel(), atol=1e-12)
    unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(new_var, (1 - ag.BN_MOMENTUM) + ag.BN_MOMENTUM * unbiased, atol=1e-12)


def test_batchnorm_constant_channel_and_zero_gamma():
    x = Tensor(np.full((2, 1, 3, 3), 4.0))
    out = ag.batchnorm(x, Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1), True)[0]
    assert np.all(np.isfinite(out.data)) and np.allclose(out.data, 0.0)
    rnd = Tensor(np.random.default_rng(0).normal(size=(2, 2, 3, 3)))
    out = ag.batchnorm(rnd, Tensor([0.0, 0.0]), Tensor([0.5, -1.0]), np.zeros(2), np.ones(2), True)[0]
    np.testing.assert_allclose(out.data[:, 0], 0.5)
    np.testing.assert_allclose(out.data[:, 1], -1.0)


def test_batchnorm_eval_uses_running_stats():
    x = np.random.default_rng(3).normal(size=(1, 2, 2, 2))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = ag.batchnorm(Tensor(x, dtype=np.float64), Tensor([1.0, 1.0], dtype=np.float64),
                       Tensor([0.0, 0.0], dtype=np.float64), rm, rv, False)[0]
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + ag.BN_EPS)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


# -- bilinear sampling ----------------------------------------------------------


def test_bilinear_integer_and_midpoint():
    img = np.arange(20.0).reshape(1, 1, 4, 5)
    coords = np.zeros((1, 2, 1, 2))
    coords[0, :, 0, 0] = [3, 2]  # x=3, y=2
    coords[0, :, 0, 1] = [0.5, 0]
    out, valid = ag.bilinear_sample(Tensor(img), Tensor(coords))
    assert out.data[0, 0, 0, 0] == img[0, 0, 2, 3]
    assert out.data[0, 0, 0, 1] == 0.5
    assert valid.data.tolist() == [[[[1.0, 1.0]]]]


def test_bilinear_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(2, 3, 6, 7))
    coords = rng.uniform(-1.5, 7.5, size=(2, 2, 5, 4))
    out, valid = ag.bilinear_sample(Tensor(img, dtype=np.float64), Tensor(coords, dtype=np.float64))
    for n in range(2):
        for i in range(5):
            for j in range(4):
                x, y = coords[n, :, i, j]
                for c in range(3):
                    v, ok = scalar_bilinear(img[n, c], x, y)
                    assert abs(out.data[n, c, i, j] - v) < 1e-12
                    assert valid.data[n, 0, i, j] == ok


def test_bilinear_coordinate_gradient():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(1, 2, 5, 6))
    coords = rng.integers(0, 4, size=(1, 2, 3, 4)) + rng.uniform(0.1, 0.9, size=(1, 2, 3, 4))
    res = gradcheck(lambda c: ag.bilinear_sample(Tensor(img.astype(np.float32)), c)[0],
                    [coords.astype(np.float32)])
    assert res.max_error <= 1e-3


# -- backward -------------------------------------------------------------------


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(ag.mul(x, 2.0))


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ag.sum_(ag.mul(x, x))
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_unreachable_tensor_keeps_no_grad():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    backward(ag.sum_(ag.mul(x, 3.0)))
    assert y.grad is None


def test_shared_node_accumulates():
    x = Tensor([1.5], requires_grad=True)
    y = ag.mul(x, x)
    backward(ag.sum_(ag.add(y, y)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_is_linear():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(3, 4))

    def grad_of(fn):
        x = Tensor(data, requires_grad=True, dtype=np.float64)
        backward(fn(x))
        return x.grad

    l1 = lambda x: ag.sum_(ag.exp(x))
    l2 = lambda x: ag.mean(ag.mul(x, x))
    combo = grad_of(lambda x: ag.add(ag.scale(l1(x), 2.0), ag.scale(l2(x), -0.5)))
    np.testing.assert_allclose(combo, 2.0 * grad_of(l1) - 0.5 * grad_of(l2), atol=1e-5)


def test_composite_conv_bn_relu_mean_gradients():
    def fn(w, b, g, beta):
        y = ag.conv2d(Tensor(x, dtype=w.dtype), w, b)
        y = ag.batchnorm(y, g, beta, np.zeros(3), np.ones(3), True)[0]
        return ag.mean(ag.relu(y))

    # pick an instance whose pre-activations stay clear of the relu kink
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 2, 6, 6))
        params = [rng.normal(scale=0.4, size=(3, 2, 3, 3)), rng.normal(size=3), rng.uniform(0.5, 1.5, 3),
                  rng.normal(size=3)]
        pre = ag.batchnorm(ag.conv2d(Tensor(x, dtype=np.float64), Tensor(params[0], dtype=np.float64)),
                           Tensor(params[2], dtype=np.float64), Tensor(params[3], dtype=np.float64),
                           np.zeros(3), np.ones(3), True)[0].data
        if np.abs(pre).min() > 0.03:
            break
    for dtype, tol in ((np.float32, 1e-3), (np.float64, 1e-6)):
        res = gradcheck(fn, [a.astype(dtype) for a in params])
        assert res.max_error <= tol, (dtype, res)


def test_determinism_bit_identical():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 4, 3, 3)).astype(np.float32)

    def run():
        tw = Tensor(w, requires_grad=True)
        loss = ag.mean(ag.sigmoid(ag.conv2d(Tensor(x), tw)))
        backward(loss)
        return loss.data.copy(), tw.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_float32_is_default_dtype():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor([1.0], dtype=np.float64).dtype == np.float64
