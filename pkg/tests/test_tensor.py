import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from cmpose import tensor as T
from cmpose.gradcheck import check_ops
from cmpose.tensor import ContractError, ShapeError, Tensor

from conftest import central_diff

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_product():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_matmul_gradient_is_row_sums_of_b(rng):
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    T.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (4, 5)), rtol=1e-12)
    numeric = central_diff(lambda: (a.data @ b.data).sum(), a.data)
    np.testing.assert_allclose(a.grad, numeric, rtol=1e-6, atol=1e-8)


def test_softmax_rows_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_rows(Tensor([[1000.0] * 3])).data, [[1 / 3] * 3], rtol=1e-12)
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]], rtol=1e-12)


def test_softmax_rows_rejects_non_matrix():
    with pytest.raises(ShapeError):
        T.softmax_rows(Tensor(np.zeros(3)))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=finite),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, p, atol=1e-12)


def test_backward_sum_gives_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_square():
    w = Tensor([2.0], requires_grad=True)
    T.sum_squares(w).backward()
    assert w.grad.tolist() == [4.0]


def test_backward_accumulates_without_reset():
    w = Tensor([2.0], requires_grad=True)
    T.sum_squares(w).backward()
    T.sum_squares(w).backward()
    assert w.grad.tolist() == [8.0]


def test_backward_non_scalar_is_contract_error():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (w * 2.0).backward()


def test_reused_leaf_accumulates_once_per_use():
    w = Tensor([3.0], requires_grad=True)
    (w * w + w).sum().backward()  # d/dw (w^2 + w) = 2w + 1
    assert w.grad.tolist() == [7.0]


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = w * 3.0
    assert not y.requires_grad and y._ctx is None


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4)), elements=finite),
       hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4)), elements=finite))
def test_concat_then_slice_is_identity(a, b):
    b = b[:, :1].repeat(a.shape[1], axis=1)
    out = T.concat([Tensor(a), Tensor(b)], axis=0)
    np.testing.assert_array_equal(out[: a.shape[0]].data, a)
    np.testing.assert_array_equal(out[a.shape[0]:].data, b)


def test_layer_norm_guarded_by_epsilon():
    x = Tensor(np.full((2, 4), 7.0))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(np.isfinite(out.data)) and np.allclose(out.data, 0.0)


def test_softmax_finite_for_extreme_logits():
    out = T.softmax(Tensor([[1e300, -1e300, 0.0]]), axis=-1)
    assert np.all(np.isfinite(out.data))


def test_gather_rows_out_of_range():
    with pytest.raises(ContractError):
        T.gather_rows(Tensor(np.ones((3, 2))), np.array([3]))


def test_operations_are_deterministic(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 4))

    def run():
        a = Tensor(x, requires_grad=True)
        y = T.layer_norm(T.gelu(a @ Tensor(w)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        T.softmax(y, axis=-1).sum().backward()
        return y.data, a.grad

    (y1, g1), (y2, g2) = run(), run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    for res in check_ops(seed):
        assert res.rel_error <= 1e-4, res


def test_precision_block_switches_dtype():
    with T.precision(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        with T.precision(np.int32):
            pass


def test_float32_backward_stays_float32():
    with T.precision(np.float32):
        w = Tensor(np.ones((2, 3)), requires_grad=True)
        (T.gelu(w) * 2.0).sum().backward()
    assert w.grad.dtype == np.float32
