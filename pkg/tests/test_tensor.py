"""Unit tests for the tensor substrate: forward oracles and gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelact import tensor as tn
from skelact.tensor import (DimensionError, GradTape, NumericError,
                            StateError, Tensor)

from conftest import check_op_grad, numeric_grad, rel_err


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(tn.matmul(a, b).data, b.data)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    assert tn.matmul(a, b).data.tolist() == [[11.0]]


def _triple_loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    p, q = a.shape
    q2, r = b.shape
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            acc = 0.0
            for k in range(q):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_matches_triple_loop_oracle(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    got = tn.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(got - _triple_loop_matmul(a, b))) <= 1e-12


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8),
       st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_matmul_triple_loop_property(p, q, r, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(p, q)), g.normal(size=(q, r))
    got = tn.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(got - _triple_loop_matmul(a, b))) <= 1e-10


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradients(rng):
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    check_op_grad(lambda a: tn.sum_(tn.mul(tn.matmul(a, Tensor(b0)),
                                           tn.matmul(a, Tensor(b0)))),
                  lambda a: float(((a @ b0) ** 2).sum()), a0)
    check_op_grad(lambda b: tn.sum_(tn.mul(tn.matmul(Tensor(a0), b),
                                           tn.matmul(Tensor(a0), b))),
                  lambda b: float(((a0 @ b) ** 2).sum()), b0)


# -- softmax / log-softmax ---------------------------------------------------

def test_softmax_uniform():
    out = tn.softmax_lastdim(Tensor([0.0, 0.0, 0.0], dtype=np.float64)).data
    assert np.allclose(out, 1.0 / 3.0, atol=1e-15)


def test_softmax_large_logit_is_stable():
    out = tn.softmax_lastdim(Tensor([1000.0, 0.0], dtype=np.float64)).data
    assert abs(out[0] - 1.0) <= 1e-12 and out[1] <= 1e-12


def test_softmax_rows_sum_to_one(rng):
    x32 = rng.normal(size=(5, 9)).astype(np.float32)
    s32 = tn.softmax_lastdim(Tensor(x32)).data.sum(axis=-1)
    assert np.max(np.abs(s32 - 1.0)) <= 1e-6
    x64 = rng.normal(size=(5, 9))
    s64 = tn.softmax_lastdim(Tensor(x64)).data.sum(axis=-1)
    assert np.max(np.abs(s64 - 1.0)) <= 1e-12


def test_softmax_non_finite_raises():
    with pytest.raises(NumericError):
        tn.softmax_lastdim(Tensor([np.inf, 0.0], dtype=np.float64))


def test_softmax_gradient(rng):
    x = rng.normal(size=(2, 6))
    w = rng.normal(size=(2, 6))  # random projection makes the loss generic

    def f_t(xt):
        return tn.sum_(tn.mul(tn.softmax_lastdim(xt), Tensor(w)))

    def f_v(xv):
        e = np.exp(xv - xv.max(axis=-1, keepdims=True))
        return float((e / e.sum(axis=-1, keepdims=True) * w).sum())

    check_op_grad(f_t, f_v, x)


def test_log_softmax_gradient(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))

    def f_t(xt):
        return tn.sum_(tn.mul(tn.log_softmax_lastdim(xt), Tensor(w)))

    def f_v(xv):
        s = xv - xv.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
        return float(((s - lse) * w).sum())

    check_op_grad(f_t, f_v, x)


# -- layer norm --------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    g = Tensor(np.ones(4), requires_grad=False)
    b = Tensor(np.zeros(4))
    out = tn.layer_norm(Tensor(np.full((2, 4), 3.0), dtype=np.float64), g, b)
    assert np.max(np.abs(out.data)) <= 1e-6


def test_layer_norm_two_point_row():
    g = Tensor(np.ones(2))
    b = Tensor(np.zeros(2))
    out = tn.layer_norm(Tensor([[1.0, 3.0]], dtype=np.float64), g, b).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        tn.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)),
                      Tensor(np.zeros(3)))


def test_layer_norm_gradient(rng):
    x = rng.normal(size=(2, 8))
    w = rng.normal(size=(2, 8))
    gamma = rng.normal(size=8)
    beta = rng.normal(size=8)

    def ln_np(xv, gv, bv):
        mu = xv.mean(axis=-1, keepdims=True)
        var = xv.var(axis=-1, keepdims=True)
        return (xv - mu) / np.sqrt(var + 1e-5) * gv + bv

    check_op_grad(
        lambda xt: tn.sum_(tn.mul(tn.layer_norm(xt, Tensor(gamma),
                                                Tensor(beta)), Tensor(w))),
        lambda xv: float((ln_np(xv, gamma, beta) * w).sum()), x)
    check_op_grad(
        lambda gt: tn.sum_(tn.mul(tn.layer_norm(Tensor(x), gt,
                                                Tensor(beta)), Tensor(w))),
        lambda gv: float((ln_np(x, gv, beta) * w).sum()), gamma)


# -- grouped temporal convolution ---------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.normal(size=(5, 3, 4))
    w = np.zeros((1, 1, 4, 4))
    w[0, 0] = np.eye(4)
    out = tn.conv1d_grouped(Tensor(x), Tensor(w), stride=1, pad=0)
    assert np.allclose(out.data, x, atol=1e-6)


def test_conv_hand_case_box_kernel():
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1), dtype=np.float64)
    w = Tensor(np.ones((1, 3, 1, 1)), dtype=np.float64)
    out = tn.conv1d_grouped(x, w, stride=1, pad=1)
    assert out.data.reshape(-1).tolist() == [3.0, 6.0, 5.0]


def test_conv_stride_two_halves_time(rng):
    x = Tensor(rng.normal(size=(2, 64, 4, 8)).astype(np.float32))
    w = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
    out = tn.conv1d_grouped(x, w, stride=2, pad=1)
    assert out.shape == (2, 32, 4, 8)


def test_conv_kernel_longer_than_padded_input():
    with pytest.raises(DimensionError):
        tn.conv1d_grouped(Tensor(np.zeros((2, 1, 1))),
                          Tensor(np.zeros((1, 5, 1, 1))), stride=1, pad=0)


def test_conv_gradients(rng):
    x = rng.normal(size=(1, 6, 2, 4))
    w = rng.normal(size=(2, 3, 2, 2))
    sel = rng.normal(size=(1, 6, 2, 4))

    def conv_np(xv, wv):
        out = tn.conv1d_grouped(Tensor(xv), Tensor(wv), stride=1, pad=1).data
        return float((out * sel).sum())

    check_op_grad(
        lambda xt: tn.sum_(tn.mul(tn.conv1d_grouped(xt, Tensor(w), stride=1,
                                                    pad=1), Tensor(sel))),
        lambda xv: conv_np(xv, w), x)
    check_op_grad(
        lambda wt: tn.sum_(tn.mul(tn.conv1d_grouped(Tensor(x), wt, stride=1,
                                                    pad=1), Tensor(sel))),
        lambda wv: conv_np(x, wv), w)


# -- shape-op identities -------------------------------------------------------

def test_reshape_roundtrip_is_identity(rng):
    x = rng.normal(size=(3, 4, 5))
    t = Tensor(x)
    back = tn.reshape(tn.reshape(t, (12, 5)), (3, 4, 5))
    assert np.array_equal(back.data, x)


@given(st.permutations([0, 1, 2, 3]), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_permute_inverse_roundtrip(perm, seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, 4, 5))
    perm = tuple(perm)
    inv = tuple(int(i) for i in np.argsort(perm))
    back = tn.permute(tn.permute(Tensor(x), perm), inv)
    assert np.array_equal(back.data, x)


def test_take_then_inverse_take(rng):
    x = rng.normal(size=(4, 6, 3))
    order = rng.permutation(6)
    inv = np.argsort(order)
    back = tn.take(tn.take(Tensor(x), order, axis=1), inv, axis=1)
    assert np.array_equal(back.data, x)


def test_split_concat_roundtrip(rng):
    x = rng.normal(size=(2, 3, 8))
    parts = tn.split(Tensor(x), [2, 2, 4], axis=2)
    assert [p.shape[2] for p in parts] == [2, 2, 4]
    assert np.array_equal(tn.concat(parts, axis=2).data, x)


def test_split_bad_sizes():
    with pytest.raises(DimensionError):
        tn.split(Tensor(np.zeros((2, 8))), [3, 3], axis=1)


# -- gelu, exp, misc gradients ---------------------------------------------------

def test_gelu_values():
    out = tn.gelu(Tensor([0.0, 100.0, -100.0], dtype=np.float64)).data
    assert np.allclose(out, [0.0, 100.0, 0.0], atol=1e-12)


def test_gelu_gradient(rng):
    x = rng.normal(size=7)
    from scipy.special import erf
    check_op_grad(lambda xt: tn.sum_(tn.gelu(xt)),
                  lambda xv: float((xv * 0.5 * (1 + erf(xv / np.sqrt(2)))).sum()),
                  x)


def test_elementwise_gradients(rng):
    x = np.abs(rng.normal(size=5)) + 0.5
    check_op_grad(lambda t: tn.sum_(tn.exp(t)),
                  lambda v: float(np.exp(v).sum()), x)
    check_op_grad(lambda t: tn.sum_(tn.log(t)),
                  lambda v: float(np.log(v).sum()), x)
    check_op_grad(lambda t: tn.sum_(tn.sqrt(t)),
                  lambda v: float(np.sqrt(v).sum()), x)
    check_op_grad(lambda t: tn.sum_(tn.div(Tensor(np.ones(5)), t)),
                  lambda v: float((1.0 / v).sum()), x)


def test_broadcast_add_gradient(rng):
    x = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    check_op_grad(lambda t: tn.sum_(tn.mul(tn.add(Tensor(x), t),
                                           tn.add(Tensor(x), t))),
                  lambda v: float(((x + v) ** 2).sum()), b)


# -- tape mechanics ---------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        tape.backward(tn.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 2)))


def test_backward_of_square_sum():
    x = Tensor([1.0, 2.0], dtype=np.float64, requires_grad=True)
    with GradTape() as tape:
        tape.backward(tn.sum_(tn.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0])


def test_unreached_leaf_has_no_gradient():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    with GradTape() as tape:
        tape.backward(tn.sum_(tn.mul(x, x)))
    assert y.grad is None


def test_backward_twice_is_a_state_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = tn.sum_(tn.mul(x, x))
        tape.backward(loss)
        with pytest.raises(StateError):
            tape.backward(loss)


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = tn.mul(x, x)
        with pytest.raises(DimensionError):
            tape.backward(y)


def test_gradient_accumulates_over_shared_subexpression():
    x = Tensor([3.0], dtype=np.float64, requires_grad=True)
    with GradTape() as tape:
        y = tn.mul(x, x)
        loss = tn.sum_(tn.add(y, y))
        tape.backward(loss)
    assert np.allclose(x.grad, [12.0])


def test_numeric_grad_helper_self_check():
    # d/dx sum(x^3) = 3x^2 at x=2 -> 12
    g = numeric_grad(lambda v: float((v ** 3).sum()), np.array([2.0]))
    assert rel_err(g, [12.0]) <= 1e-7
