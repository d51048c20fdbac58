import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from melt import tensor as tn
from melt.gradcheck import check_op, op_cases
from melt.tensor import Tape, Tensor

TOL = 1e-4
OPS = op_cases()
RNG = np.random.default_rng(0)


def r(*shape):
    return RNG.standard_normal(shape)


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    fn, inputs = OPS[name]
    res = check_op(fn, inputs, trials=100, seed=hash(name) % 1000)
    assert res.max_rel_err < TOL, (name, res)


def test_backward_accumulates_and_zero_grad_resets():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = tn.sum(tn.mul(x, x))
        tn.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [4.0, 8.0])
    tn.zero_grad([x])
    assert x.grad is None or not x.grad.any()


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with tn.no_grad():
            tn.mul(x, x)
    assert len(tape) == 0


def test_backward_needs_scalar_on_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = tn.mul(x, x)
    with pytest.raises(ValueError):
        tn.backward(y, tape)
    other = Tape()
    with Tape():
        s = tn.sum(tn.mul(x, x))
    with pytest.raises(ValueError):
        tn.backward(s, other)


def test_detach_blocks_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = tn.sum(tn.mul(x, tn.detach(x)))
    tn.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [3.0])


def test_shape_errors_name_the_op():
    with pytest.raises(tn.DimensionError, match="matmul"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(tn.DimensionError):
        tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_softmax_masked_entries_are_exactly_zero():
    mask = np.tril(np.ones((3, 3), bool))
    y = tn.softmax_rows(Tensor(r(2, 3, 3)), mask).data
    assert (y[:, ~mask] == 0.0).all()
    np.testing.assert_allclose(y.sum(-1), 1.0)
    with pytest.raises(ValueError, match="fully masked"):
        tn.softmax_rows(Tensor(r(2, 2)), np.array([[True, False], [False, False]]))


def test_embedding_rejects_out_of_range():
    with pytest.raises(IndexError):
        tn.embedding(Tensor(np.ones((4, 2))), np.array([4]))


def test_sigmoid_is_finite_at_extremes():
    y = tn.sigmoid(Tensor(np.array([-1e4, -40.0, 0.0, 40.0, 1e4]))).data
    assert np.isfinite(y).all()
    assert y[0] == 0.0 and y[-1] == 1.0 and y[2] == 0.5


def test_check_finite_raises():
    with pytest.raises(tn.NonFiniteError):
        tn.check_finite(Tensor(np.array([1.0, np.nan])), "probe")


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    y = tn.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-20, 20)), st.floats(-5, 5))
def test_softmax_shift_invariant(x, c):
    a = tn.softmax_rows(Tensor(x)).data
    b = tn.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(st.integers(0, 20), st.integers(1, 8))
def test_rope_preserves_norm_and_inverts(pos, n):
    x = np.random.default_rng(pos).standard_normal((1, n, 8))
    p = np.arange(pos, pos + n)
    y = tn.rope(Tensor(x), p).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)


def test_rope_relative_position_property():
    # q.k after rotation depends only on the position difference
    rng = np.random.default_rng(1)
    q, k = rng.standard_normal((1, 1, 8)), rng.standard_normal((1, 1, 8))
    dots = []
    for shift in (0, 5, 11):
        qr = tn.rope(Tensor(q), np.array([3 + shift])).data
        kr = tn.rope(Tensor(k), np.array([1 + shift])).data
        dots.append(float((qr * kr).sum()))
    np.testing.assert_allclose(dots, dots[0], rtol=1e-12)


def test_relative_error():
    assert tn.relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    # normalised by the larger of the two norms
    assert tn.relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1, rel=1e-12)
