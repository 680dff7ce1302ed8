import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mitilab import tensor as T
from mitilab.tensor import GradTape, NumericError, ShapeError, Tensor, finite_diff_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(f, *arrays_):
    """Gradients of scalar ``f`` with respect to every input array."""
    xs = [Tensor(a, requires_grad=True) for a in arrays_]
    with GradTape() as tape:
        out = f(*xs)
    g = tape.backward(out)
    return out.item(), [g[x] for x in xs]


def test_matmul_gradient_matches_closed_form():
    rng = np.random.default_rng(0)
    A, B, W = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    _, (gA, gB) = grad_of(lambda a, b: T.sum_(T.mul(T.matmul(a, b), Tensor(W))), A, B)
    np.testing.assert_allclose(gA, W @ B.T)
    np.testing.assert_allclose(gB, A.T @ W)


def test_batched_parameter_gradient_sums_over_batch():
    rng = np.random.default_rng(1)
    X, W = rng.normal(size=(5, 3, 4)), rng.normal(size=(4, 2))
    _, (gW,) = grad_of(lambda w: T.sum_(T.matmul(Tensor(X), w)), W)
    np.testing.assert_allclose(gW, X.sum(axis=(0, 1))[:, None] * np.ones((1, 2)))


def test_reused_tensor_accumulates():
    _, (g,) = grad_of(lambda x: T.sum_(T.add(T.mul(x, x), x)), np.array([[1.0, -2.0]]))
    np.testing.assert_allclose(g, [[3.0, -3.0]])


def test_softmax_rows_sum_to_one_and_are_shift_invariant():
    x = np.array([[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]])
    p = T.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)
    np.testing.assert_allclose(p[1], 1 / 3)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x - 1000)).data, p)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(2).normal(size=(4, 5))
    np.testing.assert_allclose(T.log_softmax_rows(Tensor(x)).data, np.log(T.softmax_rows(Tensor(x)).data))


def test_layer_norm_rows_standardised():
    x = np.random.default_rng(3).normal(3.0, 2.0, size=(6, 8))
    y = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, rtol=1e-10)
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)).item()


def test_non_finite_input_raises_numeric_error():
    with pytest.raises(NumericError) as info:
        T.softmax_rows(Tensor([[np.nan, 1.0]]))
    assert info.value.stage == "softmax_rows"


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)
    with GradTape() as other:
        pass
    with GradTape() as tape:
        z = T.sum_(y)
    with pytest.raises(ValueError):
        other.backward(z)


def test_no_tape_means_no_records():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        T.mul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
        assert len(tape) == 0
        T.mul(x, x)
        assert len(tape) == 1


def test_tensors_are_read_only():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_unreached_tensor_has_zero_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_(x)
    np.testing.assert_array_equal(tape.backward(loss)[unused], np.zeros(3))


def test_fused_attention_matches_per_head_reference():
    rng = np.random.default_rng(4)
    q, k, v = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 5, 8)), rng.normal(size=(2, 5, 6))
    out = T.attention_heads(Tensor(q), Tensor(k), Tensor(v), heads=2).data
    ref = []
    for h in range(2):
        qs, ks, vs = q[..., 4 * h:4 * h + 4], k[..., 4 * h:4 * h + 4], v[..., 3 * h:3 * h + 3]
        s = qs @ np.swapaxes(ks, -1, -2) / 2.0
        p = np.exp(s - s.max(-1, keepdims=True))
        ref.append((p / p.sum(-1, keepdims=True)) @ vs)
    np.testing.assert_allclose(out, np.concatenate(ref, axis=-1), atol=1e-13)


def test_finite_diff_check_catches_a_wrong_gradient():
    def broken_square(x):
        # forward x**2, backward claims x
        out = T._record(x.data ** 2, (x,), lambda g: (g * x.data,))
        return T.sum_(out)

    x = np.array([[0.5, 1.5, -2.0]])
    assert finite_diff_check(broken_square, x) > 0.1
    assert finite_diff_check(lambda t: T.sum_(T.mul(t, t)), x) < 1e-8


def test_finite_diff_step_range_enforced():
    with pytest.raises(ValueError):
        finite_diff_check(T.sum_, np.ones(2), step=1e-3)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_add_and_mul_gradients(a, b):
    _, (ga, gb) = grad_of(lambda x, y: T.sum_(T.add(T.mul(x, y), x)), a, b)
    np.testing.assert_allclose(ga, b + 1.0)
    np.testing.assert_allclose(gb, a)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_gradient_of_weighted_sum(x):
    w = np.linspace(-1, 1, 5)
    _, (g,) = grad_of(lambda t: T.sum_(T.mul(T.softmax_rows(t), Tensor(w))), x)
    p = np.exp(x - x.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    expected = p * (w - (p * w).sum(-1, keepdims=True))
    np.testing.assert_allclose(g, expected, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite))
def test_transpose_reshape_round_trip(x):
    t = Tensor(x)
    np.testing.assert_array_equal(T.transpose(T.transpose(t)).data, x)
    np.testing.assert_array_equal(T.reshape(T.reshape(t, (6, 4)), (2, 3, 4)).data, x)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), st.integers(0, 3), st.integers(1, 4))
def test_select_cols_gradient_is_a_mask(x, start, width):
    stop = min(4, start + width)
    _, (g,) = grad_of(lambda t: T.sum_(T.select_cols(t, start, stop)), x)
    mask = np.zeros_like(x)
    mask[:, start:stop] = 1.0
    np.testing.assert_array_equal(g, mask)
