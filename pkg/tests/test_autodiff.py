import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggd import autodiff as ad
from ggd.autodiff import Tape, Tensor
from gradcheck import numeric_grad, rel_error


def leaf(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    v = np.array([[1.5], [-2.0], [3.0]])
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(v)).data, v)


def test_matmul_hand_example():
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[1], [1]])
    assert np.array_equal(out.data, [[3], [7]])


def test_matmul_zero_annihilates(rng):
    out = Tensor(np.zeros((2, 4))) @ Tensor(rng.normal(size=(4, 3)))
    assert np.array_equal(out.data, np.zeros((2, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradients(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    with Tape() as tape:
        loss = ad.sum_all(ad.tanh(a @ b))
    g = tape.backward(loss)
    f = lambda: float(np.tanh(a.data @ b.data).sum())
    assert rel_error(g[a], numeric_grad(f, a.data)) < 1e-6
    assert rel_error(g[b], numeric_grad(f, b.data)) < 1e-6


# ---------------------------------------------------------------- pointwise


def test_tanh_sigmoid_at_zero():
    assert ad.tanh(Tensor(0.0)).item() == 0.0
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_tanh_derivative_matches_fd():
    x = leaf(1.0)
    with Tape() as tape:
        y = ad.tanh(x)
    g = tape.backward(y)[x]
    h = 1e-5
    fd = (np.tanh(1 + h) - np.tanh(1 - h)) / (2 * h)
    assert abs(float(g) - fd) < 1e-8


def test_sigmoid_is_stable_for_large_inputs():
    y = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == 0.0 and y[1] == 1.0


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_log_domain_error(bad):
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([1.0, bad]))


def test_scalar_broadcast_gradients(rng):
    x, c = leaf(rng.normal(size=(3, 2))), leaf(0.7)
    with Tape() as tape:
        loss = ad.sum_all(ad.exp(x * c + c))
    g = tape.backward(loss)
    f = lambda: float(np.exp(x.data * c.data + c.data).sum())
    assert rel_error(g[c], numeric_grad(f, c.data)) < 1e-6
    assert rel_error(g[x], numeric_grad(f, x.data)) < 1e-6


def test_gradient_accumulates_over_reuse():
    x = leaf(3.0)
    with Tape() as tape:
        y = x * x + x
    assert tape.backward(y)[x] == pytest.approx(7.0)


def test_non_finite_output_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], rtol=0, atol=1e-15)
    assert np.allclose(ad.softmax(Tensor([np.log(4.0), 0.0])).data, [0.8, 0.2], rtol=0, atol=1e-15)


def test_softmax_empty_vector():
    with pytest.raises(ad.DimensionError):
        ad.softmax(Tensor(np.zeros(0)))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance_and_normalisation(a, c):
    a = np.array(a)
    y = ad.softmax(Tensor(a)).data
    assert np.all(y > 0)
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.allclose(ad.softmax(Tensor(a + c)).data, y, rtol=0, atol=1e-12)


def test_softmax_survives_huge_logits():
    y = ad.softmax(Tensor([1e300, 0.0])).data
    assert np.array_equal(y, [1.0, 0.0])


def test_softmax_backward_is_exact_jacobian(rng):
    a = leaf(rng.normal(size=5))
    with Tape() as tape:
        y = ad.softmax(a)
    rows = np.array([tape.vjp([y], [np.eye(5)[i]])[a] for i in range(5)])
    expected = np.diag(y.data) - np.outer(y.data, y.data)
    assert np.allclose(rows, expected, rtol=0, atol=1e-15)


def test_log_softmax_matches_log_of_softmax(rng):
    a = rng.normal(size=(4, 6)) * 10
    assert np.allclose(ad.log_softmax(Tensor(a)).data, np.log(ad.softmax(Tensor(a)).data), atol=1e-12)


def test_masked_softmax_ignores_masked_entries():
    y = ad.masked_softmax(Tensor([[1.0, 2.0, 50.0]]), np.array([[True, True, False]])).data
    assert y[0, 2] == 0.0
    assert np.allclose(y[0, :2], ad.softmax(Tensor([1.0, 2.0])).data)


# ---------------------------------------------------------------- backward


def test_backward_identity():
    x = leaf(2.5)
    with Tape() as tape:
        y = x * 1.0
    assert tape.backward(y)[x] == 1.0


def test_backward_of_constant_function(rng):
    a = leaf(rng.normal(size=7))
    with Tape() as tape:
        loss = ad.sum_all(ad.softmax(a))
    assert np.allclose(tape.backward(loss)[a], 0.0, atol=1e-15)


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ContractError):
        tape.backward(y)


def test_ops_outside_tape_are_not_recorded():
    x = leaf(1.0)
    y = ad.tanh(x)
    assert y.is_leaf and not y.requires_grad


def _three_layer(x, w1, w2, w3):
    h1 = ad.tanh(x @ w1)
    h2 = ad.sigmoid(h1 @ w2)
    return ad.sum_all(ad.log_softmax(h2 @ w3) * ad.softmax(x @ w1 @ w2 @ w3))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composition_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    ts = [leaf(r.uniform(-2, 2, size=s)) for s in [(2, 3), (3, 4), (4, 3), (3, 5)]]
    with Tape() as tape:
        loss = _three_layer(*ts)
    grads = tape.backward(loss)
    f = lambda: _three_layer(*[Tensor(t.data) for t in ts]).item()
    for t in ts:
        assert rel_error(grads[t], numeric_grad(f, t.data)) < 1e-4


def test_replay_is_bit_identical():
    def run():
        r = np.random.default_rng(7)
        ts = [leaf(r.uniform(-2, 2, size=s)) for s in [(2, 3), (3, 4), (4, 3), (3, 5)]]
        with Tape() as tape:
            loss = _three_layer(*ts)
        g = tape.backward(loss)
        return loss.data.tobytes(), [g[t].tobytes() for t in ts]

    assert run() == run()


def test_concat_split_getitem_gradients(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 2)))
    w = rng.normal(size=(2, 5))

    def build(a, b):
        c = ad.concat([a, b], axis=1)
        left, right = ad.split(c, [1, 4], axis=1)
        return ad.sum_all(ad.tanh(left) * 2.0) + ad.sum_all(ad.exp(right[:, 1:] * 0.3)) + ad.sum_all(c * w)

    with Tape() as tape:
        loss = build(a, b)
    g = tape.backward(loss)
    f = lambda: build(Tensor(a.data), Tensor(b.data)).item()
    assert rel_error(g[a], numeric_grad(f, a.data)) < 1e-6
    assert rel_error(g[b], numeric_grad(f, b.data)) < 1e-6


def test_straight_through_value_and_gradient(rng):
    a = leaf(rng.normal(size=4))
    hard = np.eye(4)[2]
    w = rng.normal(size=4)
    with Tape() as tape:
        soft = ad.softmax(a)
        tok = ad.straight_through(hard, soft)
        loss = ad.sum_all(tok * w)
    assert np.array_equal(tok.data, hard)
    y = soft.data
    expected = (np.diag(y) - np.outer(y, y)) @ w
    assert np.allclose(tape.backward(loss)[a], expected, atol=1e-15)


def test_vjp_with_cotangent_and_wrt(rng):
    x = leaf(rng.normal(size=3))
    with Tape() as tape:
        mid = ad.tanh(x)
        out = mid * 2.0
    ct = rng.normal(size=3)
    g = tape.vjp([out], [ct], wrt=[mid])
    assert np.allclose(g[mid], 2 * ct)
    assert np.allclose(g[x], 2 * ct * (1 - np.tanh(x.data) ** 2))


def test_vjp_rejects_wrong_cotangent_shape():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.DimensionError):
        tape.vjp([y], [np.ones(3)])


def test_distinct_tapes_on_threads_are_independent():
    results = {}

    def work(k):
        x = leaf(float(k))
        with Tape() as tape:
            y = x * x * x
        results[k] = (len(tape), float(tape.backward(y)[x]))

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: (2, 3.0 * k * k) for k in range(1, 6)}
