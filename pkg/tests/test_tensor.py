import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aidflow import tensor as T
from aidflow.errors import DimensionError, NumericError
from aidflow.gradcheck import gradcheck
from aidflow.tensor import Tensor, no_grad

from conftest import numeric_grad


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def check_grads(fn, *arrays, tol=1e-7):
    """Backprop through ``sum(fn(*tensors) * w)`` and compare with central differences."""
    leaves = [leaf(a) for a in arrays]
    out = fn(*leaves)
    w = np.random.default_rng(0).normal(size=out.shape)
    (out * Tensor(w)).sum().backward()
    for t in leaves:

        def f():
            with no_grad():
                return float(np.sum(fn(*leaves).data * w))

        num = numeric_grad(f, t.data)
        np.testing.assert_allclose(t.grad, num, atol=tol, rtol=1e-6)


R = np.random.default_rng(7)


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("add_broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
        ("sub_broadcast", lambda a, b: a - b, [(2, 3, 4), (3, 1)]),
        ("mul_broadcast", lambda a, b: a * b, [(2, 3), (1, 3)]),
        ("scalar_div", lambda a: a / 3.0, [(4,)]),
        ("neg", lambda a: -a, [(3,)]),
        ("square", T.square, [(3, 2)]),
        ("matmul_2d", T.matmul, [(3, 4), (4, 5)]),
        ("matmul_batched", T.matmul, [(2, 3, 4), (4, 2)]),
        ("matmul_batched_both", T.matmul, [(2, 3, 4), (2, 4, 2)]),
        ("reshape", lambda a: a.reshape(6, 2), [(3, 4)]),
        ("transpose", lambda a: a.transpose(2, 0, 1), [(2, 3, 4)]),
        ("swap_last", T.swap_last, [(2, 3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        ("slice", lambda a: a[:, 1:3], [(3, 4)]),
        ("fancy_index_repeat", lambda a: a[np.array([0, 0, 2])], [(3, 2)]),
        ("sum_axis", lambda a: a.sum(axis=1), [(3, 4)]),
        ("mean_keepdims", lambda a: a.mean(axis=0, keepdims=True), [(3, 4)]),
        ("mse", T.mse, [(3, 4), (3, 4)]),
        ("l2_rows", T.l2_norm_rows, [(3, 4)]),
        ("tanh", T.tanh, [(5,)]),
        ("sigmoid", T.sigmoid, [(5,)]),
        ("silu", T.silu, [(5,)]),
        ("log_sigmoid", T.log_sigmoid, [(5,)]),
        ("softmax_last", lambda a: T.softmax(a, axis=-1), [(2, 3, 4)]),
        ("softmax_axis0", lambda a: T.softmax(a, axis=0), [(3, 4)]),
        ("layernorm", lambda a, g, b: T.layernorm(a, g, b), [(2, 3, 5), (5,), (5,)]),
        ("clip", lambda a: T.clip(a * 3.0, -1.0, 1.0), [(6,)]),
    ],
)
def test_backward_matches_finite_differences(name, fn, shapes):
    check_grads(fn, *[R.normal(size=s) for s in shapes])


def test_embedding_scatter_adds_repeated_ids():
    w = leaf(R.normal(size=(5, 3)))
    ids = np.array([[0, 2, 2], [4, 0, 2]])
    out = T.embedding(w, ids)
    out.sum().backward()
    counts = np.bincount(ids.ravel(), minlength=5)[:, None]
    np.testing.assert_array_equal(w.grad, np.broadcast_to(counts, (5, 3)))


def test_l2_norm_gradient_is_zero_at_zero_row():
    a = leaf(np.zeros((2, 3)))
    T.l2_norm_rows(a).sum().backward()
    assert np.all(np.isfinite(a.grad)) and np.all(a.grad == 0)


def test_gradient_accumulates_over_shared_input():
    a = leaf([2.0])
    (a * a + a).sum().backward()
    assert a.grad[0] == pytest.approx(5.0)


def test_tape_consumed_once():
    a = leaf([1.0, 2.0])
    out = (a * a).sum()
    out.backward()
    with pytest.raises(RuntimeError):
        out.backward()


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with no_grad():
        out = a * 2.0
    assert not out.requires_grad
    assert T.grad_enabled()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(leaf(np.ones((2, 3))), leaf(np.ones((4, 5))))


def test_incompatible_broadcast_rejected():
    with pytest.raises(DimensionError):
        leaf(np.ones((2, 3))) + leaf(np.ones((4,)))


def test_softmax_rejects_nonfinite_input():
    with pytest.raises(NumericError):
        T.softmax(leaf([1.0, np.inf, 0.0]))


def test_softmax_is_shift_stable_for_large_logits():
    out = T.softmax(leaf([1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_item_requires_single_element():
    with pytest.raises(DimensionError):
        leaf([1.0, 2.0]).item()
    assert leaf([3.5]).item() == 3.5


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=st.floats(-3, 3)),
    st.booleans(),
)
def test_unbroadcast_sums_to_input_shape(a, row):
    b_shape = (1, a.shape[1]) if row else (a.shape[1],)
    x, y = leaf(a), leaf(np.ones(b_shape))
    (x * y).sum().backward()
    assert y.grad.shape == b_shape
    np.testing.assert_allclose(y.grad.reshape(-1), a.sum(axis=0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(T.softmax(leaf(x)).data.sum(), 1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-80, 80)))
def test_float32_tape_agrees_with_float64_differences(x):
    """32-bit tape gradients of a smooth chain stay close to 64-bit finite differences."""
    fn = lambda a: T.silu(T.tanh(a) * 2.0)
    a32 = Tensor(x.astype(np.float32), requires_grad=True)
    fn(a32).sum().backward()
    a64 = x.astype(np.float64)
    num = numeric_grad(lambda: float(fn(Tensor(a64)).data.sum()), a64)
    np.testing.assert_allclose(a32.grad, num, atol=1e-5, rtol=1e-4)


def test_gradcheck_catches_a_corrupted_rule(monkeypatch):
    w = leaf(R.normal(size=(3, 2)))
    x = Tensor(R.normal(size=(4, 3)))
    fn = lambda: T.tanh(T.matmul(x, w)).sum()
    assert gradcheck(fn, {"w": w}).passed
    original = T.BACKWARD["tanh"]
    monkeypatch.setitem(T.BACKWARD, "tanh", lambda g, i, y, o: (original(g, i, y, o)[0] * 1.01,))
    report = gradcheck(fn, {"w": w})
    assert not report.passed and report.failures[0].name == "w"


def test_gradcheck_reports_nonfinite_gradient(monkeypatch):
    w = leaf([0.5, -0.5])
    monkeypatch.setitem(T.BACKWARD, "square", lambda g, i, s, o: (g * np.nan,))
    report = gradcheck(lambda: T.square(w).sum(), {"w": w})
    assert not report.passed and not report.entries[0].finite
