"""Core autodiff engine: recording, backward, double backward, detach."""

import numpy as np
import pytest

from bilevelaug import ops
from bilevelaug.tape import NonFiniteError, ShapeMismatch, Tape, TapeError, Tensor


def test_matmul_identity():
    t = Tape()
    a = t.constant([[1.0, 2.0], [3.0, 4.0]])
    eye = t.constant(np.eye(2))
    out = ops.matmul(a, eye)
    assert np.array_equal(out.value, [[1.0, 2.0], [3.0, 4.0]])


def test_leaky_relu_fixed_slope():
    out = ops.leaky_relu(Tensor(-1.0), 0.2)
    assert out.value == pytest.approx(-0.2, abs=0)


def test_softmax_cross_entropy_uniform_logits():
    t = Tape()
    logits = t.constant(np.zeros((1, 3)))
    loss = ops.softmax_cross_entropy(logits, np.array([1]))
    assert loss.value == pytest.approx(np.log(3.0), rel=1e-12)


def test_backward_quadratic():
    t = Tape()
    x = t.leaf([1.0, 2.0, 3.0], requires_grad=True)
    loss = ops.sum_(ops.mul(x, x))
    grads = ops.backward(loss, [x])
    assert np.array_equal(grads[x].value, [2.0, 4.0, 6.0])


def test_backward_tanh_at_zero():
    t = Tape()
    w = t.leaf(0.0, requires_grad=True)
    loss = ops.tanh(ops.mul(w, 5.0))
    assert ops.backward(loss, [w])[w].value == pytest.approx(5.0, abs=1e-15)


def test_double_backward_cubic():
    # d(w^3)/dw = 3w^2, then d(3w^2)/dw at w=2 -> 12
    t = Tape()
    w = t.leaf(2.0, requires_grad=True)
    cube = ops.mul(ops.mul(w, w), w)
    first = ops.backward(cube, [w], retain_graph=True)[w]
    assert first.value == pytest.approx(12.0, abs=1e-12)
    second = ops.backward(first, [w])[w]
    assert second.value == pytest.approx(12.0, abs=1e-12)


def test_retained_gradients_are_tape_nodes():
    t = Tape()
    x = t.leaf([1.0, -2.0], requires_grad=True)
    g = ops.backward(ops.sum_(ops.mul(x, x)), [x], retain_graph=True)[x]
    assert g.node_id is not None and g.tape is t


def test_backward_requires_scalar_loss():
    t = Tape()
    x = t.leaf([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        ops.backward(ops.mul(x, x), [x])


def test_backward_rejects_foreign_target():
    t1, t2 = Tape(), Tape()
    x = t1.leaf([1.0], requires_grad=True)
    y = t2.leaf([1.0], requires_grad=True)
    loss = ops.sum_(ops.mul(x, x))
    with pytest.raises(TapeError):
        ops.backward(loss, [y])


def test_unreachable_target_gets_zeros():
    t = Tape()
    x = t.leaf([1.0, 2.0], requires_grad=True)
    y = t.leaf([3.0], requires_grad=True)
    grads = ops.backward(ops.sum_(ops.mul(x, x)), [x, y])
    assert np.array_equal(grads[y].value, [0.0])


def test_finite_diff_sum_of_squares():
    fd = ops.finite_diff_gradient(lambda v: ops.sum_(ops.mul(v, v)), Tensor([1.0, 2.0]), h=1e-5)
    assert np.allclose(fd.value, [2.0, 4.0], atol=1e-8)


def test_finite_diff_constant_function():
    fd = ops.finite_diff_gradient(lambda v: Tensor(7.0), Tensor([1.0, 2.0, 3.0]))
    assert np.array_equal(fd.value, [0.0, 0.0, 0.0])


def test_finite_diff_rejects_nonfinite():
    def bad(v):
        return ops.log(ops.sum_(v))  # negative sums go non-finite

    with pytest.raises(NonFiniteError):
        ops.finite_diff_gradient(bad, Tensor([-5.0, 1.0]))


def test_detach_stops_gradients():
    t = Tape()
    x = t.leaf([1.0, 2.0], requires_grad=True)
    d = ops.detach(ops.mul(x, x))
    assert d.requires_grad is False
    loss = ops.sum_(ops.mul(d, x))
    grads = ops.backward(loss, [x])
    # only the direct x factor contributes: grad = detached values
    assert np.array_equal(grads[x].value, [1.0, 4.0])


def test_backward_is_deterministic():
    def run():
        t = Tape()
        rng = np.random.default_rng(0)
        x = t.leaf(rng.normal(size=(4, 3)), requires_grad=True)
        w = t.leaf(rng.normal(size=(3, 2)), requires_grad=True)
        loss = ops.sum_(ops.tanh(ops.matmul(x, w)))
        g = ops.backward(loss, [x, w])
        return g[x].value.copy(), g[w].value.copy()

    a1, b1 = run()
    a2, b2 = run()
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_checked_mode_catches_nonfinite():
    t = Tape(checked=True)
    x = t.constant([0.0, 1.0])
    with pytest.raises(NonFiniteError):
        ops.log(x)
    with pytest.raises(NonFiniteError):
        t.leaf([np.nan])


def test_unchecked_mode_allows_nonfinite():
    t = Tape(checked=False)
    out = ops.log(t.constant([0.0]))
    assert np.isneginf(out.value[0])


def test_shape_mismatch_raises():
    t = Tape()
    a = t.constant(np.ones((2, 3)))
    b = t.constant(np.ones((4, 5)))
    with pytest.raises(ShapeMismatch):
        ops.matmul(a, b)
    with pytest.raises(ShapeMismatch):
        ops.add(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 4))))


def test_sever_turns_node_into_leaf():
    t = Tape()
    x = t.leaf([1.0], requires_grad=True)
    y = ops.mul(x, 3.0)
    z = ops.mul(y, y)
    t.sever(y.node_id)
    grads = ops.backward(ops.sum_(z), [x])
    assert np.array_equal(grads[x].value, [0.0])


def test_drop_range_releases_nodes():
    t = Tape()
    x = t.leaf([1.0], requires_grad=True)
    start = t.checkpoint()
    y = ops.mul(x, 2.0)
    kept = ops.mul(y, 3.0)
    end = t.next_id
    t.drop_range(start, end, keep=(kept.node_id,))
    assert y.node_id not in t.nodes
    assert kept.node_id in t.nodes


def test_no_recording_mode_computes_eagerly():
    t = Tape()
    t.recording = False
    x = Tensor([1.0, 2.0])
    out = ops.mul(x, 2.0)
    assert out.node_id is None
    assert np.array_equal(out.value, [2.0, 4.0])
    assert len(t) == 0


def test_dropout_uses_external_mask():
    t = Tape()
    rng = np.random.default_rng(5)
    mask = ops.dropout_mask(rng, (1000,), 0.2)
    assert set(np.unique(mask)).issubset({0.0, 1.25})
    x = t.constant(np.ones(1000))
    out = ops.dropout(x, t.constant(mask))
    assert np.array_equal(out.value, mask)


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(k)).value
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 3, 5, 6))
    for b in range(2):
        for f in range(3):
            for i in range(5):
                for j in range(6):
                    want[b, f, i, j] = np.sum(padded[b, :, i : i + 3, j : j + 3] * k[f])
    assert np.allclose(out, want, atol=1e-12)
