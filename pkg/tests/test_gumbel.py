import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ggd import autodiff as ad
from ggd.autodiff import Tape, Tensor
from ggd.gumbel import (
    GumbelTrajectory,
    check_temperature,
    gumbel_max,
    gumbel_noise,
    gumbel_softmax,
    gumbel_softmax_jacobian,
    infer_noise,
    relaxed_softmax,
    sample_gumbel,
    st_gumbel,
    st_plain,
    truncated_gumbel_noise,
)

# ---------------------------------------------------------------- oracles


def mp_relaxed_jacobian(a, g, tau, dps=40, h="1e-12"):
    """Central differences of softmax((g + a) / tau) in 40-digit arithmetic."""
    with mpmath.workdps(dps):
        h = mpmath.mpf(h)
        x = [mpmath.mpf(float(ai)) + mpmath.mpf(float(gi)) for ai, gi in zip(a, g)]
        tau = mpmath.mpf(float(tau))

        def sm(v):
            e = [mpmath.exp(vi / tau) for vi in v]
            s = mpmath.fsum(e)
            return [ei / s for ei in e]

        K = len(x)
        J = np.zeros((K, K))
        for j in range(K):
            xp, xm = list(x), list(x)
            xp[j] += h
            xm[j] -= h
            fp, fm = sm(xp), sm(xm)
            for i in range(K):
                J[i, j] = float((fp[i] - fm[i]) / (2 * h))
        return J


def rel_err(a, b, floor=1e-12):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# ---------------------------------------------------------------- sample_gumbel


def test_sample_gumbel_examples():
    assert sample_gumbel(math.exp(-1)) == pytest.approx(0.0, abs=1e-15)
    assert sample_gumbel(math.exp(-math.e)) == pytest.approx(-1.0, abs=1e-15)
    with mpmath.workdps(30):
        expected = float(-mpmath.log(-mpmath.log(mpmath.mpf("0.5"))))
    assert sample_gumbel(0.5) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.36651292, abs=1e-8)


def test_sample_gumbel_clamps_endpoints():
    g = sample_gumbel(np.array([0.0, 1.0]))
    assert np.all(np.isfinite(g))
    assert g[0] < g[1]


# ---------------------------------------------------------------- gumbel_max


def test_gumbel_max_examples():
    assert gumbel_max([10.0, 0, 0], [0.0, 0, 0]) == 0
    assert gumbel_max([0.0, 0], [1.0, 2.0]) == 1


def test_gumbel_max_ties_go_to_lowest_index():
    assert gumbel_max([1.0, 2.0, 2.0], [0.0, 0.0, 0.0]) == 1
    assert gumbel_max([0.0, 0.0], [0.0, 0.0]) == 0


def test_gumbel_max_errors():
    with pytest.raises(ad.DimensionError):
        gumbel_max(np.zeros(0), np.zeros(0))
    with pytest.raises(ad.DimensionError):
        gumbel_max([0.0, 1.0], [0.0])


def test_gumbel_max_frequencies_match_softmax():
    rng = np.random.default_rng(11)
    p = np.array([0.5, 0.3, 0.2])
    a = np.log(p)
    N = 100_000
    idx = gumbel_max(np.broadcast_to(a, (N, 3)), gumbel_noise(rng, (N, 3)))
    counts = np.bincount(idx, minlength=3)
    assert stats.chisquare(counts, N * p).pvalue > 0.001


# ---------------------------------------------------------------- gumbel_softmax


def test_gumbel_softmax_examples():
    assert np.allclose(gumbel_softmax([0.0, 0.0], [0.0, 0.0], 1.0).data, [0.5, 0.5], atol=1e-15)
    assert np.allclose(gumbel_softmax([math.log(2), 0.0], [0.0, 0.0], 0.5).data, [0.8, 0.2], atol=1e-15)


@pytest.mark.parametrize("tau", [0.0, -0.5])
def test_gumbel_softmax_rejects_nonpositive_tau(tau):
    with pytest.raises(ad.DomainError):
        gumbel_softmax([0.0, 0.0], [0.0, 0.0], tau)


def test_high_temperature_is_nearly_uniform(rng):
    a, g = rng.uniform(-3, 3, 12), rng.uniform(-3, 3, 12)
    y = gumbel_softmax(a, g, 1000.0).data
    assert np.max(np.abs(y - 1 / 12)) < 1e-3


def test_low_temperature_sharpness(rng):
    tau, K = 0.001, 6
    # mass outside the top entry is at most (K - 1) exp(-gap / tau)
    gap_needed = tau * math.log((K - 1) / 1e-6)
    checked = 0
    for _ in range(400):
        a, g = rng.normal(size=K), gumbel_noise(rng, K)
        top2 = np.sort(a + g)[-2:]
        if top2[1] - top2[0] > gap_needed:
            assert gumbel_softmax(a, g, tau).data.max() > 1 - 1e-6
            checked += 1
    assert checked > 300


def test_gap_of_one_hundredth_is_not_sharp_enough():
    # a gap of 0.0128 at tau = 0.001 leaves exp(-12.8) ~ 2.8e-6 on the runner-up
    y = gumbel_softmax([0.0128, 0.0], [0.0, 0.0], 0.001).data
    assert y[1] == pytest.approx(1 / (1 + math.exp(12.8)), rel=1e-9)
    assert y.max() < 1 - 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0), st.integers(2, 8))
def test_relaxed_jacobian_matches_high_precision_fd(seed, tau, K):
    r = np.random.default_rng(seed)
    a, g = r.uniform(-3, 3, K), gumbel_noise(r, K)
    y = gumbel_softmax(a, g, tau).data
    J = gumbel_softmax_jacobian(y, tau)
    assert rel_err(J, mp_relaxed_jacobian(a, g, tau)) < 1e-6
    assert np.max(np.abs(J.sum(axis=1))) < 1e-12
    # the tape's backward rule reproduces the same matrix row by row
    at = Tensor(a, requires_grad=True)
    with Tape() as tape:
        yt = gumbel_softmax(at, g, tau)
    rows = np.array([tape.vjp([yt], [np.eye(K)[i]])[at] for i in range(K)])
    assert np.allclose(rows, J, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- straight-through


def test_st_gumbel_forward_is_one_hot_and_consistent(rng):
    for _ in range(50):
        a, g = rng.normal(size=7), gumbel_noise(rng, 7)
        hard, soft = st_gumbel(a, g, 0.5)
        assert sorted(hard.data.tolist()) == [0.0] * 6 + [1.0]
        assert np.argmax(hard.data) == np.argmax(soft.data) == gumbel_max(a, g)


def test_st_gumbel_backward_is_relaxed_jacobian(rng):
    a = Tensor(rng.normal(size=5), requires_grad=True)
    g, tau, w = gumbel_noise(rng, 5), 0.7, rng.normal(size=5)
    with Tape() as tape:
        hard, soft = st_gumbel(a, g, tau)
        loss = ad.sum_all(hard * w)
    grad = tape.backward(loss)[a]
    J = mp_relaxed_jacobian(a.data, g, tau)
    assert rel_err(grad, J.T @ w) < 1e-6


def test_st_plain_backward_ignores_sampled_word(rng):
    a_np, w = rng.normal(size=4), rng.normal(size=4)
    grads = []
    for idx in (0, 3):
        a = Tensor(a_np, requires_grad=True)
        with Tape() as tape:
            hard, _ = st_plain(a, 1.0, index=idx)
            loss = ad.sum_all(hard * w)
        assert np.argmax(hard.data) == idx
        grads.append(tape.backward(loss)[a])
    assert np.array_equal(grads[0], grads[1])
    y = np.exp(a_np) / np.exp(a_np).sum()
    assert np.allclose(grads[0], (np.diag(y) - np.outer(y, y)) @ w, atol=1e-15)


def test_st_plain_samples_fair_coin():
    rng = np.random.default_rng(5)
    N = 100_000
    counts = np.zeros(2)
    hard, _ = st_plain(np.zeros((N, 2)), 1.0, rng=rng)
    counts += hard.data.sum(axis=0)
    assert stats.chisquare(counts, [N / 2, N / 2]).pvalue > 0.001


def test_st_and_st_gumbel_coincide_at_zero_noise(rng):
    a_np, w = rng.normal(size=6), rng.normal(size=6)
    out = []
    for est in ("st", "st-gumbel"):
        a = Tensor(a_np, requires_grad=True)
        with Tape() as tape:
            if est == "st":
                hard, _ = st_plain(a, 0.8, index=int(np.argmax(a_np)))
            else:
                hard, _ = st_gumbel(a, np.zeros(6), 0.8)
            loss = ad.sum_all(hard * w)
        out.append((hard.data, tape.backward(loss)[a]))
    assert np.array_equal(out[0][0], out[1][0])
    assert np.array_equal(out[0][1], out[1][1])


def test_check_temperature_warns_when_tiny():
    with pytest.warns(UserWarning):
        check_temperature(0.005)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        check_temperature(0.5)


# ---------------------------------------------------------------- noise inference


def test_truncated_noise_hand_example():
    u = math.exp(-1)
    g = truncated_gumbel_noise(0, np.zeros(2), u, np.array([u, u]))
    assert g == pytest.approx([math.log(2), math.log(2 / 3)], abs=1e-15)
    assert gumbel_max(np.zeros(2), g) == 0


def test_single_word_vocabulary(rng):
    a = np.array([1.7])
    g = infer_noise(0, a, rng)
    assert gumbel_max(a, g) == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.floats(0.1, 20))
def test_inferred_noise_selects_uniquely(seed, K, spread):
    r = np.random.default_rng(seed)
    a = r.normal(size=K) * spread
    sel = int(r.integers(K))
    u_top, u = r.random(), r.random(K)
    g = infer_noise(sel, a, np.random.default_rng(seed))
    x = g + a
    assert gumbel_max(a, g) == sel
    assert np.sum(x == x.max()) == 1
    # the maximum equals the top Gumbel g' = G(u) + logsumexp(a), drawn from the same stream
    r2 = np.random.default_rng(seed)
    top = sample_gumbel(r2.random()) + np.log(np.exp(a - a.max()).sum()) + a.max()
    assert x[sel] == pytest.approx(top, rel=1e-12, abs=1e-12)


def test_inference_handles_adversarial_near_ties():
    # the selected logit sits far below the others, so truncated entries crowd the top
    rng = np.random.default_rng(0)
    for _ in range(2000):
        a = np.array([0.0, 40.0, 40.0 + 1e-13, 39.9999999])
        g = infer_noise(0, a, rng)
        assert gumbel_max(a, g) == 0


def test_inferred_noise_from_samples_is_gumbel():
    rng = np.random.default_rng(21)
    pool = []
    for _ in range(400):
        a = rng.normal(size=10) * 2
        g = gumbel_noise(rng, (25, 10))
        idx = np.argmax(a + g, axis=1)
        pool.append(infer_noise(idx, np.broadcast_to(a, (25, 10)), rng).ravel())
    pool = np.concatenate(pool)
    assert stats.kstest(pool, "gumbel_r").pvalue > 0.001


def test_infer_noise_rejects_bad_index(rng):
    with pytest.raises(IndexError):
        infer_noise(3, np.zeros(3), rng)


def test_trajectory_consistency_flag(rng):
    a = [rng.normal(size=4) for _ in range(3)]
    hard = [1, 0, 3]
    noise = [infer_noise(y, l, rng) for y, l in zip(hard, a)]
    traj = GumbelTrajectory(hard, [], noise, a, 0.5)
    assert traj.consistent()
    traj.hard[1] = 2
    assert not traj.consistent()
