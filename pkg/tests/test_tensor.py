import numpy as np
import pytest

from sable import tensor as T
from gradcheck import check_gradients


def test_matmul_identity():
    x = T.constant(np.arange(4.0).reshape(2, 2))
    eye = T.constant(np.eye(2))
    out = T.matmul(eye, x)
    np.testing.assert_array_equal(out.data, x.data)


def test_matmul_hand_case():
    a = T.constant([[1.0, 2.0], [3.0, 4.0]])
    b = T.constant([[1.0], [1.0]])
    out = T.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    a = T.constant(np.ones((2, 3)))
    b = T.constant(np.ones((4, 2)))
    with pytest.raises(T.DimensionError):
        T.matmul(a, b)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    w = rng.normal(size=(5, 3))  # fixed weighting so the loss is scalar

    def build(ts):
        return T.tsum(T.mul(T.matmul(ts[0], ts[1]), T.Tensor(w, _track=False)))

    worst = check_gradients(build, [a, b], rel_tol=1e-6)
    assert worst < 1e-6


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=(5, 2))

    def build(ts):
        return T.tsum(T.matmul(ts[0], ts[1]))

    check_gradients(build, [a, b], rel_tol=1e-6)


def test_add_zero_is_identity():
    x = T.constant(np.arange(6.0).reshape(2, 3))
    out = T.add(x, T.constant(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, x.data)


def test_broadcast_mismatch_raises():
    with pytest.raises(T.DimensionError):
        T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((4,))))


def test_swish_at_zero():
    assert T.swish(T.constant(0.0)).item() == 0.0


@pytest.mark.parametrize("op", [T.gelu, T.swish, T.sigmoid, T.texp])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(11,))

    def build(ts):
        return T.tsum(op(ts[0]))

    check_gradients(build, [x], rel_tol=1e-5)


def test_elementwise_mixed_gradcheck():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))

    def build(ts):
        return T.tsum(T.mul(T.sigmoid(ts[0]), T.texp(ts[1])))

    check_gradients(build, [a, b])


def test_minimum_maximum_where():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6,))
    b = rng.normal(size=(6,))

    def build(ts):
        lo = T.minimum(ts[0], ts[1])
        hi = T.maximum(ts[0], ts[1])
        return T.tsum(T.add(T.mul(lo, lo), hi))

    check_gradients(build, [a, b])


def test_getitem_concat_reshape_gradients():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 6))

    def build(ts):
        top = ts[0][:2]
        bottom = ts[0][2:]
        back = T.concat([top, bottom], axis=0)
        return T.tsum(T.mul(back, back).reshape(24))

    check_gradients(build, [x])


def test_gather_last_gradient():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(5, 4))
    idx = rng.integers(0, 4, size=(5,))

    def build(ts):
        return T.tsum(T.gather_last(ts[0], idx))

    check_gradients(build, [x])
    t = T.parameter(x)
    out = T.gather_last(t, idx)
    np.testing.assert_array_equal(out.data, x[np.arange(5), idx])


def test_log_softmax_normalizes():
    rng = np.random.default_rng(17)
    x = T.constant(rng.normal(size=(3, 5)))
    ls = T.log_softmax(x)
    np.testing.assert_allclose(np.exp(ls.data).sum(axis=-1), 1.0, atol=1e-12)

    weight = rng.normal(size=(3, 5))

    def build(ts):
        return T.tsum(T.mul(T.log_softmax(ts[0]), T.Tensor(weight, _track=False)))

    check_gradients(build, [x.data])


def test_group_norm_constant_input_is_zero():
    x = T.constant(np.full((2, 8), 3.7))
    w = T.constant(np.ones(8))
    b = T.constant(np.zeros(8))
    out = T.group_norm(x, num_groups=2, weight=w, bias=b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_group_norm_statistics():
    rng = np.random.default_rng(19)
    x = T.constant(rng.normal(size=(10, 12)))
    out = T.group_norm(x, 3, T.constant(np.ones(12)), T.constant(np.zeros(12)))
    grouped = out.data.reshape(10, 3, 4)
    mean = grouped.mean(axis=-1)
    var = grouped.var(axis=-1)
    assert np.abs(mean).max() < 1e-10
    assert np.abs(var - 1.0).max() < 1e-6


def test_group_norm_bad_group_count():
    with pytest.raises(T.DimensionError):
        T.group_norm(T.constant(np.ones((2, 10))), 3, T.constant(np.ones(10)), T.constant(np.zeros(10)))


def test_group_norm_gradient():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(4, 8))
    w = rng.normal(size=(8,))
    b = rng.normal(size=(8,))
    tgt = rng.normal(size=(4, 8))

    def build(ts):
        out = T.group_norm(ts[0], 2, ts[1], ts[2])
        return T.tsum(T.mul(out, T.Tensor(tgt, _track=False)))

    check_gradients(build, [x, w, b], rel_tol=1e-4)


def test_rms_and_layer_norm_gradients():
    rng = np.random.default_rng(29)
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(6,))
    b = rng.normal(size=(6,))

    def build_rms(ts):
        return T.tsum(T.rms_norm(ts[0], ts[1]))

    def build_ln(ts):
        return T.tsum(T.layer_norm(ts[0], ts[1], ts[2]))

    check_gradients(build_rms, [x, w])
    check_gradients(build_ln, [x, w, b])


def test_backward_requires_scalar():
    x = T.parameter(np.ones((2, 2)))
    y = T.mul(x, x)
    with pytest.raises(T.ContractError):
        T.backward(y)


def test_backward_accumulates_without_reset():
    x = T.parameter(np.array([2.0, 3.0]))
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    first = x.grad.copy()
    loss2 = T.tsum(T.mul(x, x))
    T.backward(loss2)
    np.testing.assert_allclose(x.grad, 2.0 * first)
    T.zero_grads([x])
    assert x.grad is None


def test_sum_of_linear_map_gradient_structure():
    rng = np.random.default_rng(31)
    w = T.parameter(rng.normal(size=(3, 4)))
    x = T.constant(rng.normal(size=(4, 2)))
    loss = T.tsum(T.matmul(w, x))
    T.backward(loss)
    expected = np.ones((3, 2)) @ x.data.T
    np.testing.assert_allclose(w.grad, expected)


def test_unused_parameter_has_zero_grad():
    used = T.parameter(np.ones(3))
    unused = T.parameter(np.ones(3))
    T.backward(T.tsum(used))
    np.testing.assert_array_equal(unused.grad_array(), np.zeros(3))


def test_no_grad_blocks_graph():
    x = T.parameter(np.ones(3))
    with T.no_grad():
        y = T.tsum(T.mul(x, x))
    assert not y.requires_grad
    T.backward(T.tsum(T.mul(x, x)))
    assert x.grad is not None


def test_allocation_meter_peak_and_determinism():
    def run():
        with T.AllocationMeter() as m:
            a = T.Tensor(np.zeros((64, 64)))
            b = T.Tensor(np.zeros((64, 64)))
            c = T.matmul(a, b)
            del a, b, c
            peaks = (m.live_bytes, m.peak_bytes)
        return peaks, m.peak_bytes

    (live1, peak1), final1 = run()
    (live2, peak2), final2 = run()
    assert peak1 == peak2 == final1 == final2
    assert peak1 >= 3 * 64 * 64 * 8
    assert live1 == live2
    assert peak1 >= live1


def test_allocation_meter_tracks_backward_buffers():
    with T.AllocationMeter() as m:
        x = T.parameter(np.zeros((32, 32)))
        loss = T.tsum(T.mul(x, x))
        T.backward(loss)
        peak = m.peak_bytes
    assert peak >= 2 * 32 * 32 * 8  # value + gradient buffers at minimum
