import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from debiaspl.debias import (DebiasState, Margins, adaptive_margins, debias_logits, distribution_alignment,
                             floor_simplex, logit_adjust, marginal_loss, pseudo_label, update_p_hat)
from debiaspl.numkit import argmax_rows, make_rng, softmax_rows


def _state(p, m=0.9, ld=0.5, lm=0.5):
    return DebiasState(np.asarray(p, dtype=float), m, ld, lm)


def _ce(z, y):
    """Scalar cross-entropy oracle via log-sum-exp written out by hand."""
    mx = max(z)
    return -(z[y] - mx - math.log(sum(math.exp(v - mx) for v in z)))


def simplex(C):
    return arrays(np.float64, C, elements=st.floats(0.01, 1.0)).map(lambda v: v / v.sum())


# --- debias_logits -----------------------------------------------------------

def test_debias_lambda_zero_unchanged():
    z = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(debias_logits(z, _state([0.7, 0.2, 0.1], ld=0.0)), z)


def test_debias_uniform_constant_shift():
    lam = 0.7
    out = debias_logits([0.1, 0.4], _state([0.5, 0.5], ld=lam))
    np.testing.assert_allclose(out - [0.1, 0.4], [lam * math.log(2)] * 2, atol=1e-15)
    assert argmax_rows(out)[0] == 1


def test_debias_scalar_oracle():
    expected = [1.0 - 0.5 * math.log(0.7), 1.2 - 0.5 * math.log(0.3)]
    got = debias_logits([1.0, 1.2], _state([0.7, 0.3], ld=0.5))
    np.testing.assert_allclose(got, expected, atol=1e-15)
    np.testing.assert_allclose(got, [1.17834, 1.80199], atol=5e-6)


def test_debias_guard_non_positive():
    with pytest.raises(AssertionError):
        debias_logits([0.0, 0.0], _state([1.0, 0.0]))


@given(arrays(np.float64, 5, elements=st.floats(-20, 20)), simplex(5), st.floats(0, 3), st.integers(0, 4),
       st.integers(0, 4))
def test_pairwise_debias_identity(z, p, lam, a, b):
    f = debias_logits(z, _state(p, ld=lam))
    lhs = (f[a] - f[b]) - (z[a] - z[b])
    assert lhs == pytest.approx(-lam * math.log(p[a] / p[b]), abs=1e-9)


def test_larger_p_hat_penalised_monotone_in_lambda():
    z = np.zeros(2)
    gaps = [np.diff(debias_logits(z, _state([0.8, 0.2], ld=lam)))[0] for lam in (0.0, 0.25, 0.5, 1.0, 2.0)]
    assert all(b > a for a, b in zip(gaps, gaps[1:]))


# --- update_p_hat ------------------------------------------------------------

def test_update_m_zero_is_batch_mean():
    batch = np.array([[0.2, 0.8], [0.6, 0.4]])
    out = update_p_hat(_state([0.5, 0.5], m=0.0), batch)
    np.testing.assert_allclose(out.p_hat, [0.4, 0.6], atol=1e-15)


def test_update_fixed_point():
    p = np.array([0.3, 0.7])
    out = update_p_hat(_state(p, m=0.9), np.tile(p, (4, 1)))
    np.testing.assert_allclose(out.p_hat, p, atol=1e-15)


def test_update_scalar_oracle():
    out = update_p_hat(_state([0.5, 0.5], m=0.9), np.array([[0.9, 0.1]]))
    np.testing.assert_allclose(out.p_hat, [0.9 * 0.5 + 0.1 * 0.9, 0.9 * 0.5 + 0.1 * 0.1], atol=1e-15)
    np.testing.assert_allclose(out.p_hat, [0.54, 0.46], atol=1e-12)


def test_update_empty_batch_noop():
    s = _state([0.5, 0.5])
    assert update_p_hat(s, np.zeros((0, 2))) is s


def test_uniform_initialisation():
    s = DebiasState.uniform(4)
    assert s.p_hat.tolist() == [0.25] * 4
    assert s.momentum == 0.999 and s.lambda_debias == 0.5 and s.lambda_margin == 0.5


@pytest.mark.parametrize("m", [0.0, 0.5, 0.9, 0.999])
@pytest.mark.parametrize("k", [1, 10, 1000])
def test_closed_form_convergence(m, k):
    rng = make_rng(int(1000 * m) + k)
    p0 = rng.dirichlet(np.ones(6))
    q = rng.dirichlet(np.ones(6))
    s = _state(p0, m=m)
    for _ in range(k):
        s = update_p_hat(s, q[None, :])
    expected = m**k * p0 + (1 - m**k) * q
    assert np.max(np.abs(s.p_hat - expected)) < 1e-12


def test_simplex_invariant_random_updates():
    rng = make_rng(0)
    s = _state(np.full(5, 0.2), m=0.9)
    for _ in range(100_000 // 50):
        for _ in range(50):
            batch = softmax_rows(rng.standard_normal((3, 5)) * 30)
            s = update_p_hat(s, batch)
            assert abs(s.p_hat.sum() - 1) <= 1e-9
        assert s.p_hat.min() >= 1e-9


def test_floor_simplex_lifts_tiny_entries():
    q = floor_simplex([1.0, 0.0, 1e-15])
    assert q.min() >= 1e-9
    assert abs(q.sum() - 1) < 1e-15


# --- margins and marginal loss ---------------------------------------------

def test_margins_zero_lambda():
    assert np.all(adaptive_margins(_state([0.7, 0.3], lm=0.0)).delta == 0)


def test_margins_uniform():
    d = adaptive_margins(_state(np.full(10, 0.1), lm=1.0)).delta
    np.testing.assert_allclose(d, [math.log(10)] * 10, atol=1e-15)
    assert d[0] == pytest.approx(2.302585, abs=1e-6)


def test_margins_scalar_oracle():
    d = adaptive_margins(_state([0.7, 0.3], lm=0.5)).delta
    np.testing.assert_allclose(d, [0.5 * math.log(1 / 0.7), 0.5 * math.log(1 / 0.3)], atol=1e-15)
    np.testing.assert_allclose(d, [0.178337, 0.601986], atol=5e-7)


def test_marginal_loss_zero_margins_is_ce():
    z = np.array([0.2, -1.0, 3.0])
    loss, _ = marginal_loss(z, 1, Margins(np.zeros(3)))
    assert loss == pytest.approx(_ce(list(z), 1), abs=1e-12)


def test_marginal_loss_constant_margins_is_ce():
    z = np.array([0.2, -1.0, 3.0])
    loss, _ = marginal_loss(z, 2, Margins(np.full(3, 4.2)))
    assert loss == pytest.approx(_ce(list(z), 2), abs=1e-12)


def test_marginal_loss_scalar_oracle():
    loss, grad = marginal_loss(np.array([2.0, 0.0]), 0, Margins(np.array([0.5, 0.0])))
    assert loss == pytest.approx(math.log(1 + math.exp(-1.5)), abs=1e-15)
    assert loss == pytest.approx(0.201413, abs=1e-6)
    s = 1 / (1 + math.exp(-1.5))
    np.testing.assert_allclose(grad, [s - 1, 1 - s], atol=1e-15)


def test_marginal_loss_batched_matches_rows():
    rng = make_rng(4)
    z = rng.standard_normal((6, 4))
    y = rng.integers(0, 4, 6)
    m = Margins(rng.random(4))
    losses, grads = marginal_loss(z, y, m)
    for i in range(6):
        li, gi = marginal_loss(z[i], y[i], m)
        assert losses[i] == pytest.approx(li, abs=1e-15)
        np.testing.assert_allclose(grads[i], gi, atol=1e-15)


@settings(max_examples=200)
@given(arrays(np.float64, 4, elements=st.floats(-10, 10)), arrays(np.float64, 4, elements=st.floats(0, 5)),
       st.integers(0, 3))
def test_marginal_loss_gradient_finite_differences(z, delta, y):
    m = Margins(delta)
    _, g = marginal_loss(z, y, m)
    h = 1e-6
    for j in range(4):
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        fd = (marginal_loss(zp, y, m)[0] - marginal_loss(zm, y, m)[0]) / (2 * h)
        assert abs(fd - g[j]) <= 1e-6 * max(1.0, abs(fd))


@given(arrays(np.float64, 6, elements=st.floats(-30, 30)), arrays(np.float64, 6, elements=st.floats(0, 20)),
       st.integers(0, 5))
def test_marginal_loss_equals_shifted_ce(z, delta, y):
    loss, _ = marginal_loss(z, y, Margins(delta))
    assert loss == pytest.approx(_ce(list(z - delta), y), abs=1e-12)


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), st.integers(0, 4), st.floats(0, 2))
def test_uniform_p_hat_is_no_op(z, y, lam):
    s = _state(np.full(5, 0.2), ld=lam, lm=lam)
    # a constant shift can round tiny logits into ties, so compare winning values
    assert z[argmax_rows(debias_logits(z, s))[0]] == pytest.approx(z.max(), abs=1e-12)
    loss, _ = marginal_loss(z, y, adaptive_margins(s))
    assert loss == pytest.approx(_ce(list(z), y), abs=1e-9)


# --- pseudo-labels and baselines -------------------------------------------

@pytest.mark.parametrize("probs,label,ok", [([0.99, 0.01], 0, True), ([0.6, 0.4], 0, False),
                                            ([0.95, 0.05], 0, True)])
def test_pseudo_label(probs, label, ok):
    assert pseudo_label(np.array(probs), 0.95) == (label, ok)


def test_pseudo_label_batched():
    labels, acc = pseudo_label(np.array([[0.1, 0.9], [0.5, 0.5]]), 0.9)
    assert labels.tolist() == [1, 0] and acc.tolist() == [True, False]


def test_da_fixed_point_and_uniform():
    p = np.array([0.6, 0.4])
    np.testing.assert_allclose(distribution_alignment(p, [0.3, 0.7], [0.3, 0.7]), p, atol=1e-15)
    np.testing.assert_allclose(distribution_alignment([0.5, 0.5], [0.5, 0.5], [0.5, 0.5]), [0.5, 0.5], atol=1e-15)


def test_da_scalar_oracle():
    a, b = 0.6 * 0.5 / 0.8, 0.4 * 0.5 / 0.2
    got = distribution_alignment([0.6, 0.4], [0.5, 0.5], [0.8, 0.2])
    np.testing.assert_allclose(got, [a / (a + b), b / (a + b)], atol=1e-15)
    np.testing.assert_allclose(got, [0.27273, 0.72727], atol=5e-6)


def test_da_zero_denominator_floored():
    out = distribution_alignment([0.5, 0.5], [0.5, 0.5], [1.0, 0.0])
    assert np.all(np.isfinite(out)) and abs(out.sum() - 1) < 1e-15


def test_la_uniform_and_zero_tau():
    z = np.array([0.5, 2.0, -1.0])
    out = logit_adjust(z, np.full(3, 1 / 3), 1.0)
    assert argmax_rows(out)[0] == argmax_rows(z)[0]
    assert np.array_equal(logit_adjust(z, [0.2, 0.3, 0.5], 0.0), z)


def test_la_scalar_oracle():
    got = logit_adjust([1.0, 1.0], [0.9, 0.1], 1.0)
    np.testing.assert_allclose(got, [1 - math.log(0.9), 1 - math.log(0.1)], atol=1e-15)
    np.testing.assert_allclose(got, [1.10536, 3.30259], atol=5e-6)


def test_la_rejects_zero_prior():
    with pytest.raises(ValueError):
        logit_adjust([0.0, 0.0], [1.0, 0.0])
