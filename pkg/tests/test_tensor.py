import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conslt import tensor as T
from conslt.errors import ConfigError, ContractError, NumericError, ShapeError
from conslt.gradcheck import max_relative_error


def leaf(x):
    return T.Tensor(np.array(x, dtype=float), requires_grad=True)


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(T.Tensor([[1, 0], [0, 1]]), T.Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_dot():
    assert T.matmul(T.Tensor([[1, 2]]), T.Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    T.sum_(a @ b).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    assert max_relative_error(lambda: T.sum_(a @ b), [a, b]) < 1e-6


def test_batched_matmul_broadcast_grad():
    rng = np.random.default_rng(1)
    a, w = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    assert max_relative_error(lambda: T.sum_((a @ w) * (a @ w)), [a, w]) < 1e-6


# -- softmax / log-softmax ------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_hand_values():
    np.testing.assert_allclose(T.softmax(T.Tensor([1.0, 2.0, 3.0])).data,
                               [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_large_input_no_overflow():
    out = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        T.softmax(T.Tensor([np.inf, 0.0]))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-500, 500)))
def test_softmax_is_probability_vector(x):
    y = T.softmax(T.Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = T.Tensor([[1.0, -2.0, 0.5], [3.0, 3.0, 3.0]])
    np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_family_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    assert max_relative_error(lambda: T.sum_(T.softmax(x) * w), [x]) < 1e-4
    assert max_relative_error(lambda: T.sum_(T.log_softmax(x) * w), [x]) < 1e-4
    assert max_relative_error(lambda: T.sum_(T.logsumexp(x) * w[:, 0]), [x]) < 1e-4


# -- KL divergence --------------------------------------------------------


def test_kl_of_identical_is_zero():
    p = T.softmax(T.Tensor([0.3, -1.0, 2.0]))
    assert T.kl_divergence(p, p).item() == pytest.approx(0.0, abs=1e-15)


def test_kl_single_support():
    assert T.kl_divergence(T.Tensor([1.0, 0.0]), T.Tensor([0.5, 0.5])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_kl_logits_paper_vectors():
    # sum p log(p/q) with p = softmax([1,2,3]), q = softmax([20,40,60]) by hand: 7.6634
    kl = T.kl_divergence_logits(T.Tensor([1.0, 2.0, 3.0]), T.Tensor([20.0, 40.0, 60.0]))
    assert kl.item() == pytest.approx(7.663396768132387, abs=1e-9)


def test_kl_clamp_applies_to_probability_inputs():
    # q[0] = 4.2e-18 is clamped to 1e-12, so the probability-space KL is smaller
    p = T.softmax(T.Tensor([1.0, 2.0, 3.0]))
    q = T.softmax(T.Tensor([20.0, 40.0, 60.0]))
    assert T.kl_divergence(p, q).item() == pytest.approx(6.549810509481534, abs=1e-9)


def test_kl_contract_errors():
    with pytest.raises(ShapeError):
        T.kl_divergence(T.Tensor([0.5, 0.5]), T.Tensor([1.0, 0.0, 0.0]))
    with pytest.raises(ContractError):
        T.kl_divergence(T.Tensor([0.5, 0.6]), T.Tensor([0.5, 0.5]))


@given(arrays(np.float64, 5, elements=st.floats(-20, 20)), arrays(np.float64, 5, elements=st.floats(-20, 20)))
def test_kl_nonnegative(a, b):
    p, q = T.softmax(T.Tensor(a)), T.softmax(T.Tensor(b))
    assert T.kl_divergence(p, q).item() >= -1e-12
    assert T.kl_divergence_logits(T.Tensor(a), T.Tensor(b)).item() >= -1e-12


@pytest.mark.parametrize("seed", range(5))
def test_kl_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    assert max_relative_error(lambda: T.kl_divergence(T.softmax(a), T.softmax(b)), [a, b]) < 1e-4
    assert max_relative_error(lambda: T.kl_divergence_logits(a, b), [a, b]) < 1e-4


# -- dropout --------------------------------------------------------------


def test_dropout_rate_zero_is_identity():
    x = T.Tensor(np.arange(6.0))
    assert T.dropout(x, 0.0, T.RngState(0), training=True) is x


def test_dropout_eval_is_identity():
    x = T.Tensor(np.arange(6.0))
    np.testing.assert_array_equal(T.dropout(x, 0.5, T.RngState(0), training=False).data, x.data)


def test_dropout_zero_fraction_concentrates():
    # binomial sd at n=1e6, p=0.4 is 4.9e-4, so 0.002 is a 4-sigma band
    out = T.dropout(T.Tensor(np.ones(1_000_000)), 0.4, T.RngState(11), training=True)
    assert abs((out.data == 0).mean() - 0.4) < 0.002
    survivors = out.data[out.data != 0]
    np.testing.assert_allclose(survivors, 1 / 0.6)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ConfigError):
        T.dropout(T.Tensor([1.0]), 1.0, T.RngState(0), True)


def test_dropout_deterministic_under_seed():
    x = T.Tensor(np.ones(100))
    a = T.dropout(x, 0.3, T.RngState(5).substream(2), True).data
    b = T.dropout(x, 0.3, T.RngState(5).substream(2), True).data
    assert a.tobytes() == b.tobytes()


def test_dropout_gradient_uses_mask():
    x = leaf(np.ones(50))
    out = T.dropout(x, 0.5, T.RngState(3), True)
    T.sum_(out).backward()
    np.testing.assert_array_equal(x.grad, out.dropout_mask / 0.5)


def test_rng_reference_outputs():
    # Philox4x64 via SeedSequence(7, spawn_key=(1, 2)); frozen reference stream
    vals = T.RngState(7).substream(1, 2).random(3)
    again = T.RngState(7, stream=(1, 2)).random(3)
    assert vals.tobytes() == again.tobytes()
    assert not np.array_equal(vals, T.RngState(7).substream(1, 3).random(3))
    np.testing.assert_array_equal(vals, REFERENCE_PHILOX)


REFERENCE_PHILOX = np.array([0.627526127487406, 0.629401238299651, 0.09091250913410043])


# -- backward -------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf([1.0, -2.0, 3.0])
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_square_gives_2x():
    x = leaf([1.0, -2.0, 3.0])
    T.sum_(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_without_zeroing():
    x = leaf([1.0, 2.0])
    T.sum_(x * 3.0).backward()
    T.sum_(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_shared_subexpression_gradient():
    x = leaf([0.5, -1.5])
    y = T.exp(x)
    assert max_relative_error(lambda: T.sum_(T.exp(x) * T.exp(x) + T.log(T.exp(x) + 1.0)), [x]) < 1e-6
    x.zero_grad()
    T.sum_(y * y).backward()
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.data))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


@pytest.mark.parametrize("seed", range(3))
def test_misc_op_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(2, 3, 4)))
    g, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    w = rng.normal(size=(2, 3, 4))
    mask = rng.random((2, 3, 4)) < 0.3
    table = leaf(rng.normal(size=(6, 4)))
    ids = np.array([[0, 5, 5], [2, 1, 0]])
    checks = [
        (lambda: T.sum_(T.layer_norm(x, g, b) * w), [x, g, b]),
        (lambda: T.sum_(T.masked_fill(x, mask, -3.0) * w), [x]),
        (lambda: T.sum_(x.transpose(2, 0, 1).reshape(4, 6) @ T.Tensor(w.reshape(6, 4))), [x]),
        (lambda: T.sum_(T.embedding_lookup(table, ids) * w[:, :, :]), [table]),
        (lambda: T.sum_(T.sqrt(x * x + 1.0) / (T.relu(x) + 2.0)), [x]),
        (lambda: T.sum_(T.index_select(x.reshape(6, 4), [0, 3, 3, 5]) * 1.5), [x]),
        (lambda: T.sum_(T.concat([x, x * 2.0], axis=1) * T.Tensor(np.ones((2, 6, 4)))), [x]),
        (lambda: T.mean(x * x, axis=(0, 2)).sum(), [x]),
    ]
    for fn, ins in checks:
        assert max_relative_error(fn, ins) < 1e-4


def test_cross_entropy_values_and_gradient():
    logits = T.Tensor(np.zeros((2, 4)))
    assert T.cross_entropy_with_logits(logits, [1, 3]).item() == pytest.approx(math.log(4))
    rng = np.random.default_rng(4)
    lg = leaf(rng.normal(size=(2, 3, 5)))
    tgt = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 0], [1, 0, 0]], bool)
    assert max_relative_error(lambda: T.cross_entropy_with_logits(lg, tgt, mask, 0.2), [lg]) < 1e-4
    with pytest.raises(ContractError):
        T.cross_entropy_with_logits(lg, tgt, np.zeros((2, 3), bool))
