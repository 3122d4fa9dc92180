import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debiaspl.nn import (EmaTeacher, MlpParams, OptimState, backward, cosine_lr, ema_update, forward,
                         init_mlp, load_checkpoint, save_checkpoint, sgd_nesterov_step)
from debiaspl.numkit import make_rng


def _naive_forward(params, x):
    """Row-by-row scalar re-implementation used as an oracle."""
    out = []
    for row in x:
        h = list(row)
        for li, (w, b) in enumerate(zip(params.weights, params.biases)):
            nxt = []
            for j in range(w.shape[1]):
                s = b[j]
                for i in range(w.shape[0]):
                    s += h[i] * w[i, j]
                nxt.append(s if li == len(params.weights) - 1 else max(s, 0.0))
            h = nxt
        out.append(h)
    return np.array(out)


def _random_net(rng, dims):
    p = init_mlp(dims, rng)
    for b in p.biases:
        b[:] = rng.standard_normal(b.shape) * 0.3
    return p


def _fd_check(params, x, G, step=1e-5):
    """Max relative error of analytic vs central finite-difference gradients of sum(G * f(x))."""
    grads = backward(params, x, G)
    worst = 0.0
    for p, g in zip(params.arrays(), grads.arrays()):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = float((G * forward(params, x)).sum())
            p[idx] = old - step
            dn = float((G * forward(params, x)).sum())
            p[idx] = old
            fd = (up - dn) / (2 * step)
            worst = max(worst, abs(fd - g[idx]) / max(1.0, abs(fd), abs(g[idx])))
    return worst


def test_forward_zero_params():
    p = init_mlp([3, 4, 2], make_rng(0))
    p = p.zeros_like()
    assert np.all(forward(p, np.ones((2, 3))) == 0)


def test_forward_identity_layer():
    p = MlpParams([np.eye(2)], [np.zeros(2)])
    assert forward(p, [[1.0, 2.0]]).tolist() == [[1.0, 2.0]]


def test_forward_matches_naive_oracle():
    rng = make_rng(11)
    p = _random_net(rng, [5, 7, 3])
    x = rng.standard_normal((6, 5))
    np.testing.assert_allclose(forward(p, x), _naive_forward(p, x), rtol=0, atol=1e-12)


def test_forward_dimension_mismatch():
    p = init_mlp([3, 2], make_rng(0))
    with pytest.raises(ValueError):
        forward(p, np.ones((1, 4)))


def test_backward_zero_upstream():
    rng = make_rng(1)
    p = _random_net(rng, [4, 5, 3])
    g = backward(p, rng.standard_normal((3, 4)), np.zeros((3, 3)))
    assert all(np.all(a == 0) for a in g.arrays())


def test_backward_linear_closed_form():
    rng = make_rng(2)
    p = _random_net(rng, [3, 2])
    x = rng.standard_normal((1, 3))
    g = rng.standard_normal((1, 2))
    grads = backward(p, x, g)
    np.testing.assert_array_equal(grads.weights[0], x.T @ g)
    np.testing.assert_array_equal(grads.biases[0], g[0])


def test_backward_dimension_mismatch():
    p = init_mlp([3, 2], make_rng(0))
    with pytest.raises(ValueError):
        backward(p, np.ones((2, 3)), np.ones((2, 5)))


def test_backward_finite_differences_two_layer():
    rng = make_rng(5)
    p = _random_net(rng, [4, 6, 3])
    x = rng.standard_normal((5, 4))
    G = rng.standard_normal((5, 3))
    assert _fd_check(p, x, G) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 8))
def test_backward_finite_differences_random(seed, depth, n):
    rng = make_rng(seed)
    dims = [int(rng.integers(1, 6))] + [int(rng.integers(1, 12)) for _ in range(depth - 1)] + [int(rng.integers(2, 5))]
    p = _random_net(rng, dims)
    x = rng.standard_normal((n, dims[0]))
    G = rng.standard_normal((n, dims[-1]))
    assert _fd_check(p, x, G) < 1e-4


def _scalar_params(v):
    return MlpParams([np.array([[v]])], [np.array([0.0])])


def test_sgd_zero_lr_identity():
    rng = make_rng(0)
    p = _random_net(rng, [3, 4, 2])
    before = p.copy()
    g = p.copy()
    sgd_nesterov_step(p, g, OptimState.for_params(p), 0.0)
    assert p.max_abs_diff(before) == 0.0


def test_sgd_momentum_zero_is_plain_sgd():
    rng = make_rng(0)
    p = _random_net(rng, [3, 2])
    g = _random_net(rng, [3, 2])
    expect = [a - 0.1 * b for a, b in zip(p.arrays(), g.arrays())]
    sgd_nesterov_step(p, g, OptimState.for_params(p, momentum=0.0, weight_decay=0.0), 0.1)
    for a, e in zip(p.arrays(), expect):
        np.testing.assert_array_equal(a, e)


def test_nesterov_two_step_scalar_recursion():
    # hand-rolled: v1 = g, p1 = p0 - lr(g + mu v1); v2 = mu v1 + g, p2 = p1 - lr(g + mu v2)
    p0, g, lr, mu = 1.0, 1.0, 0.1, 0.9
    v1 = g
    p1 = p0 - lr * (g + mu * v1)
    v2 = mu * v1 + g
    p2 = p1 - lr * (g + mu * v2)
    p = _scalar_params(p0)
    opt = OptimState.for_params(p, momentum=mu, weight_decay=0.0)
    for _ in range(2):
        sgd_nesterov_step(p, _scalar_params(g), opt, lr)
    assert p.weights[0][0, 0] == pytest.approx(p2, abs=1e-15)
    assert p2 == pytest.approx(0.539)


def test_decoupled_weight_decay_scalar():
    p = _scalar_params(2.0)
    opt = OptimState.for_params(p, momentum=0.0, weight_decay=0.5)
    sgd_nesterov_step(p, _scalar_params(0.0), opt, 0.1)
    assert p.weights[0][0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_sgd_rejects_non_finite():
    p = _scalar_params(1.0)
    with pytest.raises(FloatingPointError, match="diverged"):
        sgd_nesterov_step(p, _scalar_params(np.nan), OptimState.for_params(p), 0.1)


def test_cosine_lr_values():
    assert cosine_lr(0, 100, 0.03) == 0.03
    assert cosine_lr(100, 100, 1.0) == pytest.approx(math.cos(7 * math.pi / 16), abs=1e-15)
    assert cosine_lr(100, 100, 1.0) == pytest.approx(0.19509, abs=1e-5)
    lrs = [cosine_lr(k, 100, 1.0) for k in range(101)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) > 0


def test_cosine_lr_past_end():
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1.0)


def test_ema_extremes_and_scalar():
    s = _scalar_params(1.0)
    t = EmaTeacher(_scalar_params(0.0), decay=1.0)
    ema_update(t, s)
    assert t.shadow.weights[0][0, 0] == 0.0
    t = EmaTeacher(_scalar_params(0.0), decay=0.0)
    ema_update(t, s)
    assert t.shadow.weights[0][0, 0] == 1.0
    t = EmaTeacher(_scalar_params(0.0), decay=0.9)
    ema_update(t, s)
    assert t.shadow.weights[0][0, 0] == pytest.approx(0.1, abs=1e-15)


def test_ema_geometric_contraction():
    s = _scalar_params(1.0)
    t = EmaTeacher(_scalar_params(0.0), decay=0.9)
    for k in range(1, 30):
        ema_update(t, s)
        assert abs(t.shadow.weights[0][0, 0] - 1.0) == pytest.approx(0.9**k, rel=1e-12)


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update(EmaTeacher(_scalar_params(0.0)), init_mlp([2, 2], make_rng(0)))


def test_checkpoint_roundtrip(tmp_path):
    p = _random_net(make_rng(3), [4, 5, 3])
    save_checkpoint(p, tmp_path / "m.bin")
    q = load_checkpoint(tmp_path / "m.bin")
    assert p.max_abs_diff(q) == 0.0
    assert (tmp_path / "m.bin.json").exists()
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:8] == b"DPLMLP01"
    assert len(raw) == 8 + 4 + 2 * 8 + 8 * (4 * 5 + 5 + 5 * 3 + 3)


def test_determinism_same_seed():
    a = init_mlp([8, 64, 64, 10], make_rng(9, 1))
    b = init_mlp([8, 64, 64, 10], make_rng(9, 1))
    assert a.max_abs_diff(b) == 0.0
