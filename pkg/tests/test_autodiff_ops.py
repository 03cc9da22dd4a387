import math

import numpy as np
import pytest

from rtn.autodiff import Tensor, check_gradients, default_dtype, no_grad, ops

# Frozen 50-digit references computed once with mpmath.
SOFTMAX_123 = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
GELU_1 = 0.84134474606854294859
LN2 = 0.69314718055994530942
LAYERNORM_UNIT = 0.9999950000374996875  # 1 / sqrt(1 + 1e-5)
CE_LOGITS = [
    [-4.811510416188904, 0.19229974201129232],
    [2.2226738876301777, 0.4578575806969592],
    [2.5912316739699954, 8.739297667511913],
    [-4.436470081993204, 2.83641892393758],
    [-4.998406371953893, 1.031233744358039],
    [-1.5373311278545732, 3.9712768700657164],
]
CE_LABELS = [1, 1, 1, 1, 0, 1]
CE_MEAN = 1.3280778288150301461


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield np.random.default_rng(0)


# -- forward values -------------------------------------------------------------


def test_matmul_identity_and_row_sums():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(ops.matmul(a, np.eye(3)).data, a)
    out = ops.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_matches_naive_loops(f64):
    a, b = f64.normal(size=(2, 3, 4)), f64.normal(size=(2, 4, 5))
    ref = np.zeros((2, 3, 5))
    for n in range(2):
        for i in range(3):
            for j in range(5):
                ref[n, i, j] = sum(a[n, i, k] * b[n, k, j] for k in range(4))
    np.testing.assert_allclose(ops.matmul(a, b).data, ref, rtol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_values():
    np.testing.assert_allclose(ops.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])
    big = ops.softmax(np.array([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-6)
    with default_dtype(np.float64):
        np.testing.assert_allclose(ops.softmax(np.array([1.0, 2.0, 3.0])).data, SOFTMAX_123, rtol=1e-14)


def test_layernorm_values():
    gain, bias = np.ones(4), np.zeros(4)
    np.testing.assert_array_equal(ops.layernorm(np.full((1, 4), 5.0), gain, bias).data, 0.0)
    with default_dtype(np.float64):
        out = ops.layernorm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [[LAYERNORM_UNIT, -LAYERNORM_UNIT]], rtol=1e-14)


def test_gelu_values():
    assert ops.gelu(np.array([0.0])).data[0] == 0.0
    with default_dtype(np.float64):
        x = np.linspace(-4, 4, 17)
        g = ops.gelu(x).data
        # x*Phi(x) - (-x)*Phi(-x) = x*(Phi(x) + Phi(-x)) = x
        np.testing.assert_allclose(g - ops.gelu(-x).data, x, atol=1e-14)
        assert g[10] == pytest.approx(GELU_1, rel=1e-14)
        ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(g, ref, rtol=1e-13, atol=1e-15)


def naive_conv3d(x, w, b, stride, padding):
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    od = (d + 2 * padding - k) // stride + 1
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, od, oh, ow))
    for i in range(n):
        for o in range(cout):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        patch = xp[i, :, z * stride : z * stride + k, y * stride : y * stride + k, xx * stride : xx * stride + k]
                        out[i, o, z, y, xx] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def test_conv3d_identity_and_counting():
    x = np.random.default_rng(1).normal(size=(1, 3, 4, 5))
    out = ops.conv3d(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_allclose(out.data, x, rtol=1e-6)
    out = ops.conv3d(np.ones((1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 27.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv3d_matches_naive_loops(f64, stride, padding):
    x = f64.normal(size=(2, 2, 5, 6, 5))
    w = f64.normal(size=(3, 2, 3, 3, 3))
    b = f64.normal(size=3)
    got = ops.conv3d(x, w, b, stride=stride, padding=padding).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, b, stride, padding), rtol=1e-11, atol=1e-12)


def test_conv3d_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        ops.conv3d(np.ones((2, 4, 4, 4)), np.ones((1, 1, 3, 3, 3)))
    with pytest.raises(ValueError, match="larger than padded input"):
        ops.conv3d(np.ones((1, 2, 2, 2)), np.ones((1, 1, 3, 3, 3)))


def test_cross_entropy_values():
    assert ops.cross_entropy_logits(np.array([[0.0, 0.0]]), [0]).item() == pytest.approx(LN2, rel=1e-6)
    stable = ops.cross_entropy_logits(np.array([[1e3, -1e3]]), [0]).item()
    assert math.isfinite(stable) and stable == pytest.approx(0.0, abs=1e-6)
    with default_dtype(np.float64):
        got = ops.cross_entropy_logits(np.array(CE_LOGITS), CE_LABELS).item()
    assert got == pytest.approx(CE_MEAN, abs=1e-6)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="labels must be 0 or 1"):
        ops.cross_entropy_logits(np.zeros((1, 2)), [2])


# -- backward ---------------------------------------------------------------------


def test_backward_linear_and_square(f64):
    x = leaf(f64, 3, 4)
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    x.grad = None
    ops.sum(x * x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar_and_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()
    with pytest.raises(RuntimeError):
        Tensor(np.ones(())).backward()


def test_gradient_accumulates_over_reuse_and_broadcast(f64):
    x = leaf(f64, 3)
    b = leaf(f64, 1)
    ops.sum(x * x + x * b).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + b.data)
    np.testing.assert_allclose(b.grad, [x.data.sum()])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_matmul_grad_is_ones_times_bt(f64):
    a, b = leaf(f64, 3, 4), leaf(f64, 4, 2)
    ops.sum(ops.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)


GRAD_CASES = {
    "add": lambda t: ops.add(t[0], t[1]),
    "sub": lambda t: ops.sub(t[0], t[1]),
    "mul": lambda t: ops.mul(t[0], t[1]),
    "div": lambda t: ops.div(t[0], ops.exp(t[1])),
    "power": lambda t: ops.power(ops.exp(t[0]), 1.7),
    "exp": lambda t: ops.exp(t[0]),
    "log": lambda t: ops.log(ops.exp(t[0]) + 0.5),
    "relu": lambda t: ops.relu(t[0] + 0.05),
    "gelu": lambda t: ops.gelu(t[0]),
    "sum_axis": lambda t: ops.sum(t[0], axis=1) * ops.sum(t[1], axis=1),
    "mean_axis": lambda t: ops.mean(t[0] * t[1], axis=0),
    "max": lambda t: ops.max(t[0], axis=1),
    "reshape": lambda t: ops.reshape(t[0], (4, 3)) * ops.reshape(t[1], (4, 3)),
    "transpose": lambda t: ops.transpose(t[0]) * 2.0,
    "swapaxes": lambda t: ops.swapaxes(t[0], 0, 1) * ops.transpose(t[1]),
    "getitem": lambda t: ops.getitem(t[0], (slice(1, 3), [0, 2, 2])) * 3.0,
    "concat": lambda t: ops.concat([t[0], t[1] * 2.0], axis=0),
    "stack": lambda t: ops.stack([t[0], t[1]], axis=1),
    "matmul": lambda t: ops.matmul(t[0], ops.transpose(t[1])),
    "linear": lambda t: ops.linear(t[0], ops.transpose(t[1])),
    "softmax": lambda t: ops.softmax(t[0], axis=1) * t[1],
    "log_softmax": lambda t: ops.log_softmax(t[0], axis=0) * t[1],
    "layernorm": lambda t: ops.layernorm(t[0], ops.getitem(t[1], 0), ops.getitem(t[1], 1)),
    "cross_entropy": lambda t: ops.cross_entropy_logits(ops.getitem(t[0], (slice(None), slice(0, 2))), [0, 1, 1]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients_match_finite_differences(f64, name):
    a, b = leaf(f64, 3, 4), leaf(f64, 3, 4)
    if name == "layernorm":
        b = leaf(f64, 2, 4)
    errors = check_gradients(lambda: GRAD_CASES[name]((a, b)), [a, b])
    assert max(errors) < 1e-6, errors


def test_layernorm_gradcheck_on_4x8(f64):
    x, g, b = leaf(f64, 4, 8), leaf(f64, 8), leaf(f64, 8)
    assert max(check_gradients(lambda: ops.layernorm(x, g, b) * ops.exp(x), [x, g, b])) < 1e-3


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0)])
def test_conv3d_gradients(f64, stride, padding):
    x = leaf(f64, 2, 2, 4, 4, 4)
    w = leaf(f64, 3, 2, 3, 3, 3) if padding or stride == 1 else leaf(f64, 3, 2, 1, 1, 1)
    b = leaf(f64, 3)
    errors = check_gradients(lambda: ops.conv3d(x, w, b, stride=stride, padding=padding), [x, w, b])
    assert max(errors) < 1e-6, errors


def test_conv3d_weight_gradient_single_volume(f64):
    x = Tensor(f64.normal(size=(1, 4, 4, 4)))
    w = leaf(f64, 2, 1, 3, 3, 3)
    assert check_gradients(lambda: ops.gelu(ops.conv3d(x, w, padding=1)), [w])[0] < 1e-3


def test_softmax_large_magnitudes_stay_finite():
    x = np.random.default_rng(0).uniform(-1e4, 1e4, size=(20, 7))
    p = ops.softmax(x, axis=-1).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_backward_twice_is_deterministic(f64):
    x = leaf(f64, 3, 4)
    w = leaf(f64, 4, 2)
    loss = ops.sum(ops.gelu(ops.matmul(x, w)))
    loss.backward()
    first = x.grad.copy(), w.grad.copy()
    x.grad = w.grad = None
    loss.backward()
    assert x.grad.tobytes() == first[0].tobytes() and w.grad.tobytes() == first[1].tobytes()
