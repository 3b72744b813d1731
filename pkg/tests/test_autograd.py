import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpillum.autograd import Tape, TapeStateError, Tensor3


def leaf(a):
    return Tensor3(a, requires_grad=True)


def central_diff(fn, arr, h=1e-4):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = fn()
        arr[idx] = old - h
        fm = fn()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def check_primitive(build, arrays, tol=1e-4):
    """``build(tape, tensors) -> loss tensor``; compare every input gradient
    with central differences."""
    def loss_value():
        tape = Tape()
        return float(build(tape, [Tensor3(a) for a in arrays]).value.reshape(()))

    tape = Tape()
    ts = [leaf(a) for a in arrays]
    loss = build(tape, ts)
    grads = tape.backward(loss)
    for t, a in zip(ts, arrays):
        assert rel_err(grads[t], central_diff(loss_value, a)) < tol


def _target(shape, seed=9):
    return Tensor3(np.random.default_rng(seed).standard_normal(shape))


def test_silu_zero():
    tape = Tape()
    out = tape.silu(Tensor3(np.zeros((2, 2, 1))))
    np.testing.assert_array_equal(out.value, 0.0)


def test_identity_conv():
    x = np.random.default_rng(0).standard_normal((4, 5, 2))
    tape = Tape()
    k = np.zeros((1, 2, 2))
    k[0] = np.eye(2)
    out = tape.conv2d_circular(Tensor3(x), Tensor3(k), Tensor3(np.zeros((1, 1, 2))))
    np.testing.assert_array_equal(out.value, x)


def test_mse_self_zero_gradient():
    a = leaf(np.random.default_rng(0).standard_normal((3, 3, 2)))
    tape = Tape()
    loss = tape.mse(a, a)
    assert float(loss.value.reshape(())) == 0.0
    np.testing.assert_array_equal(tape.backward(loss)[a], 0.0)


def test_sum_of_squares_gradient():
    x = np.random.default_rng(1).standard_normal((2, 3, 4))
    a = leaf(x)
    tape = Tape()
    loss = tape.scale(tape.mse(a, Tensor3(np.zeros_like(x))), x.size)
    np.testing.assert_allclose(tape.backward(loss)[a], 2 * x, rtol=1e-14)


@pytest.mark.parametrize("horizontal", ["circular", "zero"])
def test_conv_gradients(rng, horizontal):
    x = rng.standard_normal((5, 6, 2))
    k = rng.standard_normal((9, 2, 3))
    b = rng.standard_normal((1, 1, 3))
    y = _target((5, 6, 3))
    check_primitive(lambda tp, t: tp.mse(tp.conv2d_circular(t[0], t[1], t[2], horizontal), y), [x, k, b])


def test_dense_silu_concat_add_scale(rng):
    x = rng.standard_normal((3, 4, 2))
    w = rng.standard_normal((1, 4, 2))
    b = rng.standard_normal((1, 1, 2))
    y = _target((3, 4, 2))

    def build(tp, t):
        c = tp.concat_channels(t[0], tp.silu(t[0]))
        d = tp.dense(c, t[1], t[2])
        return tp.mse(tp.add(tp.scale(d, 0.7), t[0]), y)

    check_primitive(build, [x, w, b])


def test_two_layer_network(rng):
    x = rng.standard_normal((4, 6, 3))
    k1 = rng.standard_normal((9, 3, 4)) * 0.3
    b1 = rng.standard_normal((1, 1, 4)) * 0.1
    k2 = rng.standard_normal((9, 4, 3)) * 0.3
    b2 = rng.standard_normal((1, 1, 3)) * 0.1
    y = _target((4, 6, 3))

    def build(tp, t):
        h = tp.silu(tp.conv2d_circular(Tensor3(x), t[0], t[1]))
        return tp.mse(tp.conv2d_circular(h, t[2], t[3]), y)

    check_primitive(build, [k1, b1, k2, b2])


def test_vector_seed_gives_vjp(rng):
    x = rng.standard_normal((3, 4, 2))
    k = rng.standard_normal((9, 2, 2))
    b = np.zeros((1, 1, 2))
    c = rng.standard_normal((3, 4, 2))
    xt = leaf(x)
    tape = Tape()
    out = tape.conv2d_circular(xt, Tensor3(k), Tensor3(b))
    vjp = tape.backward(out, c)[xt]

    def f():
        return float(np.sum(Tape().conv2d_circular(Tensor3(x), Tensor3(k), Tensor3(b)).value * c))

    assert rel_err(vjp, central_diff(f, x)) < 1e-6
    with pytest.raises(ValueError):
        tape.backward(out, c[:, :2])


def test_backward_before_forward():
    with pytest.raises(TapeStateError):
        Tape().backward(Tensor3(np.zeros((1, 1, 1))))


def test_shape_errors():
    tape = Tape()
    a = Tensor3(np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        tape.add(a, Tensor3(np.zeros((2, 3, 1))))
    with pytest.raises(ValueError):
        tape.conv2d_circular(a, Tensor3(np.zeros((4, 1, 1))), Tensor3(np.zeros((1, 1, 1))))
    with pytest.raises(ValueError):
        Tensor3(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Tensor3(np.full((1, 1, 1), np.nan))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 11), st.integers(0, 2**31 - 1))
def test_circular_conv_rotation_equivariance(k, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((5, 12, 2))
    ker = Tensor3(r.standard_normal((9, 2, 3)))
    b = Tensor3(r.standard_normal((1, 1, 3)))
    out = Tape().conv2d_circular(Tensor3(x), ker, b).value
    rot = Tape().conv2d_circular(Tensor3(np.roll(x, k, axis=1)), ker, b).value
    np.testing.assert_array_equal(rot, np.roll(out, k, axis=1))


def test_determinism(rng):
    x = rng.standard_normal((4, 4, 2))
    k = rng.standard_normal((9, 2, 2))

    def run():
        kt = leaf(k)
        tp = Tape()
        loss = tp.mse(tp.silu(tp.conv2d_circular(Tensor3(x), kt, Tensor3(np.zeros((1, 1, 2))))), _target((4, 4, 2)))
        return loss.value.copy(), tp.backward(loss)[kt]

    (l1, g1), (l2, g2) = run(), run()
    np.testing.assert_array_equal(l1, l2)
    np.testing.assert_array_equal(g1, g2)
