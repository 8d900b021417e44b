import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poirec import tensor as T
from poirec.tensor import Tensor, backward, forward_op, grad_check


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# -- catalog basics ------------------------------------------------------------


def test_matmul_identity():
    a = rand((3, 4), 1)
    out = forward_op("matmul", Tensor(np.eye(3)), Tensor(a))
    assert np.allclose(out.data, a)


def test_softmax_uniform_logits():
    out = forward_op("softmax_lastdim", Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_row_gather_definition():
    table = rand((5, 3), 2)
    out = forward_op("row_gather", Tensor(table), [4, 0])
    assert np.array_equal(out.data, np.stack([table[4], table[0]]))


def test_row_gather_out_of_range():
    with pytest.raises(IndexError):
        forward_op("row_gather", Tensor(rand((3, 2))), [3])


def test_shape_mismatch_names_shapes():
    with pytest.raises(T.ShapeMismatch) as e:
        forward_op("add", Tensor(rand((2, 3))), Tensor(rand((3, 2))))
    assert "(2, 3)" in str(e.value) and "(3, 2)" in str(e.value)


def test_forward_op_rejects_nonfinite():
    with pytest.raises(T.NonFiniteError):
        forward_op("add", Tensor([np.nan]), Tensor([1.0]))


def test_forward_op_rejects_unknown_kind():
    with pytest.raises(KeyError):
        forward_op("convolve", Tensor([1.0]))


def test_concat_and_transpose():
    a, b = Tensor(rand((2, 3), 3)), Tensor(rand((2, 2), 4))
    out = forward_op("concat", [a, b], axis=-1)
    assert out.shape == (2, 5)
    tr = forward_op("transpose", a)
    assert np.array_equal(tr.data, a.data.T)


def test_broadcast_add():
    x, v = rand((4, 3), 5), rand((3,), 6)
    out = forward_op("broadcast_add", Tensor(x), Tensor(v))
    assert np.allclose(out.data, x + v)


# -- backward basics -----------------------------------------------------------


def test_backward_sum_is_ones():
    x = Tensor(rand((2, 2)), requires_grad=True)
    backward(forward_op("sum", x))
    assert np.array_equal(x.grad, np.ones((2, 2)))


def test_backward_l2_is_2x():
    x = Tensor(rand((3, 2), 7), requires_grad=True)
    backward(forward_op("l2_norm_squared", x))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_rejects_nonscalar():
    x = Tensor(rand((2, 2)), requires_grad=True)
    with pytest.raises(T.ShapeMismatch):
        backward(forward_op("scale", x, 2.0))


def test_unreachable_param_keeps_zero_grad():
    x = Tensor(rand((2,)), requires_grad=True)
    y = Tensor(rand((2,)), requires_grad=True)
    backward(T.sum_all(x * 2.0))
    assert np.array_equal(y.grad, np.zeros(2))
    assert not np.array_equal(x.grad, np.zeros(2))


def test_grad_accumulates_over_shared_subexpression():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    y = x + x  # d/dx = 2
    backward(T.sum_all(y))
    assert np.allclose(x.grad, [2.0, 2.0])


def test_softmax_cross_entropy_grad_matches_closed_form():
    z = Tensor(rand((6,), 8), requires_grad=True)
    target = 2
    loss = T.cross_entropy_rows(T.reshape(z, (1, 6)), [target])
    backward(loss)
    p = np.exp(z.data - z.data.max())
    p /= p.sum()
    p[target] -= 1.0
    assert np.allclose(z.grad, p)


# -- finite-difference checks over the whole catalog ----------------------------

CATALOG_FUNCS = {
    "matmul": lambda x: T.sum_all(T.matmul(x, Tensor(rand((4, 3), 11)))),
    "add": lambda x: T.sum_all(T.multiply(T.add(x, Tensor(rand((3, 4), 12))), x)),
    "subtract": lambda x: T.l2_norm_squared(T.subtract(x, Tensor(rand((3, 4), 13)))),
    "elementwise_multiply": lambda x: T.sum_all(T.multiply(x, x)),
    "scale": lambda x: T.sum_all(T.multiply(T.scale(x, -1.7), x)),
    "concat": lambda x: T.l2_norm_squared(T.concat([x, T.scale(x, 2.0)], axis=-1)),
    "row_gather": lambda x: T.l2_norm_squared(T.row_gather(x, [2, 0, 2])),
    "softmax_lastdim": lambda x: T.sum_all(T.multiply(T.softmax_lastdim(x), Tensor(rand((3, 4), 14)))),
    "mean_lastaxis": lambda x: T.l2_norm_squared(T.mean_lastaxis(x)),
    "sum": lambda x: T.scale(T.sum_all(x), 3.0),
    "relu_or_gelu": lambda x: T.sum_all(T.multiply(T.gelu(x), Tensor(rand((3, 4), 15)))),
    "exponential": lambda x: T.sum_all(T.exponential(T.scale(x, 0.3))),
    "l2_norm_squared": lambda x: T.l2_norm_squared(x),
    "transpose": lambda x: T.sum_all(T.multiply(T.transpose(x), Tensor(rand((4, 3), 16)))),
    "broadcast_add": lambda x: T.l2_norm_squared(T.broadcast_add(x, Tensor(rand((4,), 17)))),
}


@pytest.mark.parametrize("kind", sorted(CATALOG_FUNCS))
def test_grad_check_catalog_op(kind):
    func = CATALOG_FUNCS[kind]
    for trial in range(10):
        err = grad_check(func, Tensor(rand((3, 4), 100 + trial)), epsilon=1e-5)
        assert err < 1e-4, f"{kind}: relative error {err}"


INTERNAL_FUNCS = {
    "log": lambda x: T.sum_all(T.log(T.add(T.multiply(x, x), Tensor(np.ones((3, 4)))))),
    "logsumexp": lambda x: T.sum_all(T.logsumexp_lastdim(x)),
    "cross_entropy": lambda x: T.cross_entropy_rows(x, [1, 3, 0]),
    "mean_rows": lambda x: T.l2_norm_squared(T.mean_rows(x)),
    "scale_rows": lambda x: T.l2_norm_squared(T.scale_rows(x, Tensor(rand((3,), 18)))),
    "segment_softmax_chain": lambda x: T.sum_all(
        T.multiply(
            T.reshape(T.segment_softmax(T.reshape(x, (12,)), [0, 0, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3], 4), (3, 4)),
            Tensor(rand((3, 4), 19)),
        )
    ),
    "segment_sum": lambda x: T.l2_norm_squared(T.segment_sum(x, [0, 1, 0], 2)),
    "reshape": lambda x: T.l2_norm_squared(T.reshape(x, (12,))),
}


@pytest.mark.parametrize("kind", sorted(INTERNAL_FUNCS))
def test_grad_check_internal_op(kind):
    func = INTERNAL_FUNCS[kind]
    for trial in range(5):
        err = grad_check(func, Tensor(rand((3, 4), 200 + trial)), epsilon=1e-5)
        assert err < 1e-4, f"{kind}: relative error {err}"


def test_grad_check_linear_exact():
    err = grad_check(lambda x: T.sum_all(x), Tensor(rand((3, 4), 20)))
    assert err < 1e-8


def test_grad_check_matmul_softmax_chain():
    w = Tensor(rand((4, 4), 21))
    probe = Tensor(rand((3, 4), 22))

    def chain(x):
        return T.sum_all(T.multiply(T.softmax_lastdim(T.matmul(x, w)), probe))

    err = grad_check(chain, Tensor(rand((3, 4), 23)))
    assert err < 1e-6


def test_spmm_matches_dense_and_grad():
    import scipy.sparse as sp

    rng = np.random.default_rng(24)
    dense = rng.random((5, 5)) * (rng.random((5, 5)) > 0.5)
    mat = sp.csr_matrix(dense)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    out = T.spmm(mat, x)
    assert np.allclose(out.data, dense @ x.data)
    probe = rng.normal(size=(5, 3))
    backward(T.sum_all(T.multiply(out, Tensor(probe))))
    assert np.allclose(x.grad, dense.T @ probe)


def test_dropout_mask_and_grad():
    rng = np.random.default_rng(25)
    x = Tensor(np.ones((200, 4)), requires_grad=True)
    out = T.dropout(x, 0.5, rng)
    kept = out.data != 0
    assert np.allclose(out.data[kept], 2.0)
    assert 0.3 < kept.mean() < 0.7
    backward(T.sum_all(out))
    assert np.array_equal(x.grad != 0, kept)
    assert T.dropout(x, 0.0, rng) is x


# -- properties ------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one_and_positive(logits):
    p = T.softmax_lastdim(Tensor(logits)).data
    assert abs(p.sum() - 1.0) < 1e-9
    assert (p > 0).all()


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8),
    st.floats(min_value=-100, max_value=100),
)
def test_softmax_shift_invariance(logits, c):
    base = T.softmax_lastdim(Tensor(logits)).data
    shifted = T.softmax_lastdim(Tensor(np.asarray(logits) + c)).data
    assert np.max(np.abs(base - shifted)) < 1e-9


def test_determinism_same_inputs_same_bits():
    a, b = rand((8, 8), 30), rand((8, 8), 31)
    r1 = T.matmul(T.softmax_lastdim(Tensor(a)), Tensor(b)).data
    r2 = T.matmul(T.softmax_lastdim(Tensor(a)), Tensor(b)).data
    assert np.array_equal(r1, r2)


def test_no_tape_without_grad_participation():
    out = T.matmul(Tensor(rand((3, 3))), Tensor(rand((3, 3))))
    assert out._parents == () and out._backward is None
