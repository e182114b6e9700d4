import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from rsicnet import tensor as T
from rsicnet.tensor import ShapeError, Tensor

finite = st.floats(-10, 10, allow_nan=False, width=32)


def test_mul_by_zeros_annihilates():
    out = T.elementwise("mul", Tensor([1, 2, 3]), Tensor([0, 0, 0]))
    assert out.data.tolist() == [0, 0, 0]


def test_broadcast_identity_with_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3, 5)))
    assert np.array_equal((x * Tensor(np.ones((4, 3, 1)))).data, x.data)


def test_add_and_sum_backward():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    y = a + b
    assert y.data.tolist() == [4, 6]
    T.sum(y).backward()
    assert a.grad.tolist() == [1, 1] and b.grad.tolist() == [1, 1]


def test_broadcast_gradient_is_summed(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    T.sum(a * b).backward()
    assert b.grad.shape == (4,)
    assert np.allclose(b.grad, a.data.sum(0), atol=1e-6)


def test_unbroadcastable_shapes_name_both():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5,\)"):
        T.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros(5)))


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        T.elementwise("pow", Tensor([1.0]), Tensor([2.0]))


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal((a @ Tensor(np.eye(2))).data, a.data)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_matches_loop(m, k, n, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(m, k)), g.normal(size=(k, n))
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a, b), atol=1e-5)


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(5, 6, 1)).astype(np.float32)
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(y.data, x)


def test_conv_zero_kernel(rng):
    y = T.conv2d(Tensor(rng.normal(size=(2, 7, 7, 3))), Tensor(np.zeros((3, 3, 3, 4))))
    assert y.shape == (2, 7, 7, 4) and not y.data.any()


@given(st.integers(3, 9), st.integers(3, 9), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2, 3]),
       st.sampled_from(["same", "valid"]), st.integers(0, 2**31 - 1))
def test_conv_matches_loop(h, w, k, stride, padding, seed):
    if padding == "valid" and (k > h or k > w):
        return
    g = np.random.default_rng(seed)
    x = g.normal(size=(h, w, 2))
    kern = g.normal(size=(k, k, 2, 3))
    b = g.normal(size=3)
    y = T.conv2d(Tensor(x), Tensor(kern), Tensor(b), stride, padding).data
    assert y.shape[:2] == (T.conv_output_size(h, k, stride, padding), T.conv_output_size(w, k, stride, padding))
    assert np.allclose(y, oracles.conv2d(x, kern, b, stride, padding), atol=1e-4)


def test_conv_rejects_bad_arguments():
    x = Tensor(np.zeros((4, 4, 2)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((3, 3, 3, 1))))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((3, 3, 2, 1))), padding="full")
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((5, 5, 2, 1))), padding="valid")


def test_mean_of_constant():
    assert T.mean(Tensor(np.full((3, 4, 5), 2.5))).item() == 2.5


def test_max_over_channels_shape():
    assert T.max(Tensor(np.zeros((4, 3, 6))), -1).shape == (4, 3)


def test_bad_axis():
    with pytest.raises(ShapeError):
        T.sum(Tensor(np.zeros((2, 3))), 2)


def test_max_gradient_goes_to_first_argmax():
    x = Tensor([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]], requires_grad=True)
    T.sum(T.max(x, 1)).backward()
    assert x.grad.tolist() == [[0, 1, 0], [1, 0, 0]]


def test_softmax_and_sigmoid_closed_forms():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0]), -1).data, [0.5, 0.5])
    assert T.sigmoid(Tensor([0.0])).item() == 0.5
    assert np.allclose(T.softmax(Tensor([math.log(1), math.log(3)]), -1).data, [0.25, 0.75], atol=1e-7)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_on_simplex(x):
    p = T.softmax(Tensor(x), -1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)


def test_softmax_large_logits_stay_finite():
    p = T.softmax(Tensor([1e4, 0.0, -1e4]), -1).data
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def test_guarded_ops_stay_finite():
    assert np.isfinite(T.log(Tensor([0.0])).item())
    assert np.isfinite(T.div(Tensor([1.0]), Tensor([0.0])).item())
    assert np.all(np.isfinite(T.sigmoid(Tensor([-1e4, 1e4])).data))


def test_activation_dispatch():
    x = Tensor([-1.0, 2.0])
    assert T.activation(x, "relu").data.tolist() == [0, 2]
    with pytest.raises(ValueError):
        T.activation(x, "gelu")


def test_dropout_identities(rng):
    x = Tensor(rng.normal(size=(5, 7)))
    assert np.array_equal(T.dropout(x, 0.0, True, rng).data, x.data)
    assert np.array_equal(T.dropout(x, 0.5, False).data, x.data)


def test_dropout_is_inverted_and_seeded():
    x = Tensor(np.ones((200, 50)))
    y1 = T.dropout(x, 0.3, True, np.random.default_rng(4)).data
    y2 = T.dropout(x, 0.3, True, np.random.default_rng(4)).data
    assert np.array_equal(y1, y2)
    assert np.allclose(np.unique(y1), [0.0, 1 / 0.7])
    assert abs(y1.mean() - 1.0) < 0.03


def test_backward_of_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.sum(T.square(x)).backward()
    assert x.grad.tolist() == [2, 4]


def test_backward_of_sigmoid_at_zero():
    x = Tensor([0.0], requires_grad=True)
    T.sum(T.sigmoid(x)).backward()
    assert x.grad.tolist() == [0.25]


def test_backward_needs_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_reused_node_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad.tolist() == [7.0]


def test_tape_cleared_after_backward():
    x = Tensor([1.0], requires_grad=True)
    T.sum(x * 2).backward()
    assert len(T.get_tape()) == 0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.tracked and len(T.get_tape()) == 0


@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=5), elements=finite))
def test_every_leaf_gets_a_grad(x):
    a = Tensor(x, requires_grad=True)
    b = Tensor(np.ones_like(x), requires_grad=True)
    T.sum(T.relu(a) * b + T.sigmoid(a)).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert np.all(np.isfinite(a.grad))


def test_layout_ops(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    assert T.transpose(x, (2, 0, 1)).shape == (4, 2, 3)
    assert T.swapaxes(x, 0, 2).shape == (4, 3, 2)
    assert T.concat([x, x], axis=1).shape == (2, 6, 4)
    assert T.reshape(x, (6, 4)).shape == (6, 4)
    with pytest.raises(ShapeError):
        T.reshape(x, (5, 5))
