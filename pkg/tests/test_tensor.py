import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jcast import tensor as T
from jcast.errors import ContractError, NumericError, ShapeError
from gradcheck import check_op

rng = np.random.default_rng(1234)


def r(*shape):
    return rng.normal(size=shape)


OPS = {
    "add": (lambda a, b: T.add(a, b), [r(3, 4), r(4)]),
    "sub": (lambda a, b: T.sub(a, b), [r(2, 3, 4), r(3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [r(3, 4), r(3, 4)]),
    "div_scalar": (lambda a: a / 4.0, [r(3, 4)]),
    "exp": (T.exp, [r(5)]),
    "log": (T.log, [np.abs(r(5)) + 0.5]),
    "relu": (T.relu, [r(4, 5) + 0.05]),
    "reshape": (lambda x: T.reshape(x, (6, 2)), [r(3, 4)]),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), [r(2, 3, 4)]),
    "expand": (lambda x: T.expand(x, (2, 3, 4)), [r(3, 1)]),
    "getitem_basic": (lambda x: x[1:, ::2], [r(4, 5)]),
    "getitem_fancy": (lambda x: T.getitem(x, np.array([0, 2, 0])), [r(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
    "stack": (lambda a, b: T.stack([a, b], axis=0), [r(2, 3), r(2, 3)]),
    "sum": (lambda x: T.sum(x, axis=1, keepdims=True), [r(3, 4)]),
    "mean": (lambda x: T.mean(x, axis=0), [r(3, 4)]),
    "log_sum_exp": (lambda x: T.log_sum_exp(x, axis=-1), [r(3, 5)]),
    "softmax": (lambda x: T.softmax(x, axis=-1), [r(3, 5)]),
    "log_softmax": (lambda x: T.log_softmax(x, axis=-1), [r(3, 5)]),
    "matmul": (lambda a, b: T.matmul(a, b), [r(2, 3, 4), r(2, 4, 5)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [r(2, 3, 4), r(4, 5), r(5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [r(3, 6), r(6), r(6)]),
    "embedding": (lambda w: T.embedding_lookup(w, np.array([[1, 0, 1], [2, 2, 0]])), [r(3, 4)]),
    "take_last": (lambda x: T.take_last(x, np.array([[0, 2, 2]])), [r(2, 4)]),
    "masked_fill": (lambda x: T.masked_fill(x, np.array([True, False, True]), -1.0), [r(2, 3)]),
    "where": (lambda a, b: T.where(np.array([[1, 0, 1]], bool), a, b), [r(1, 3), r(1, 3)]),
    "label_smoothing": (lambda x: T.cross_entropy_with_label_smoothing(
        T.log_softmax(x), np.array([1, 3]), 0.1), [r(2, 5)]),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=(2, 2), pad_f=1),
               [r(2, 2, 7, 6), r(3, 2, 3, 3), r(3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    fn, arrays = OPS[name]
    check_op(fn, *arrays)


def test_tensor_division_is_refused():
    with pytest.raises(ShapeError):
        T.tensor(r(2)) / T.tensor(r(2))


def test_suffix_broadcast_only():
    a = T.tensor(r(2, 3))
    assert T.add(a, T.tensor(r(3))).shape == (2, 3)
    with pytest.raises(ShapeError):
        T.add(a, T.tensor(r(2, 1)))
    assert T.add(T.expand(T.tensor(r(2, 1)), (2, 3)), a).shape == (2, 3)


def test_gradients_accumulate_until_reset():
    x = T.tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_shared_subexpression_gets_both_paths():
    x = T.tensor(np.array(3.0), requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.add(y, y))
    assert x.grad == pytest.approx(12.0)


def test_backward_contracts():
    x = T.tensor(r(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))
    with pytest.raises(ContractError):
        T.backward(T.sum(T.tensor(r(3))))


def test_unreached_leaf_gets_zero_grad():
    x = T.tensor(r(3), requires_grad=True)
    y = T.tensor(r(2), requires_grad=True)
    T.backward(T.sum(x), leaves=[x, y])
    np.testing.assert_array_equal(y.grad, np.zeros(2))


def test_nan_is_reported_at_the_op():
    with pytest.raises(NumericError, match="log"):
        T.log(T.tensor(np.array([-1.0])))
    with pytest.raises(NumericError):
        T.tensor(np.array([np.nan]))


def test_no_grad_records_nothing():
    x = T.tensor(r(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y._parents == ()
    assert T.is_grad_enabled()


def test_log_sum_exp_of_all_neg_inf_row():
    x = T.tensor(np.array([[-np.inf, -np.inf], [0.0, 0.0]]), requires_grad=True)
    out = T.log_sum_exp(x, axis=-1)
    assert out.data[0] == -np.inf and out.data[1] == pytest.approx(np.log(2))
    T.backward(T.getitem(out, 1))
    np.testing.assert_array_equal(x.grad[0], [0.0, 0.0])
    np.testing.assert_allclose(x.grad[1], [0.5, 0.5])


def test_dropout_is_seeded_and_inverted():
    x = T.tensor(np.ones((200, 50)))
    a = T.dropout(x, 0.25, (7, 3, 1)).data
    b = T.dropout(x, 0.25, (7, 3, 1)).data
    c = T.dropout(x, 0.25, (7, 4, 1)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.75}
    assert abs(a.mean() - 1.0) < 0.05
    assert T.dropout(x, 0.0, 1) is x
    with pytest.raises(ContractError):
        T.dropout(x, 1.0, 1)


def test_conv2d_matches_direct_loops():
    x, w, b = r(1, 2, 7, 5), r(3, 2, 3, 3), r(3)
    out = T.conv2d(T.tensor(x), T.tensor(w), T.tensor(b), stride=(2, 2), pad_f=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1)))
    To, Fo = (7 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
    assert out.shape == (1, 3, To, Fo)
    for o in range(3):
        for t in range(To):
            for f in range(Fo):
                ref = np.sum(xp[0, :, 2 * t:2 * t + 3, 2 * f:2 * f + 3] * w[o]) + b[o]
                assert out[0, o, t, f] == pytest.approx(ref, abs=1e-12)


def test_label_smoothing_value():
    lp = np.log(np.array([[0.5, 0.25, 0.25]]))
    got = T.cross_entropy_with_label_smoothing(T.tensor(lp), np.array([0]), 0.1).data[0]
    want = -(0.9 * lp[0, 0] + 0.05 * lp[0, 1] + 0.05 * lp[0, 2])
    assert got == pytest.approx(want, abs=1e-12)


finite = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                elements=st.floats(-30, 30))


@settings(max_examples=50, deadline=None)
@given(finite)
def test_softmax_is_a_distribution(x):
    p = T.softmax(T.tensor(x), axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    lp = T.log_softmax(T.tensor(x), axis=-1).data
    assert np.all(lp <= 1e-12)
    np.testing.assert_allclose(np.exp(lp), p, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(finite)
def test_log_sum_exp_matches_naive(x):
    got = T.log_sum_exp(T.tensor(x), axis=-1).data
    m = x.max(axis=-1)
    np.testing.assert_allclose(got, m + np.log(np.exp(x - m[:, None]).sum(axis=-1)), atol=1e-12)
