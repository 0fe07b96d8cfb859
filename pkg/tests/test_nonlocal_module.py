import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlrn.diff_ops import TapeReuseError
from nlrn.gradcheck import numeric_gradients, relative_error
from nlrn.nonlocal_module import (
    DOT_FAMILY,
    METRICS,
    CorrelationState,
    NonLocalWeights,
    correlation_logits,
    correlation_map,
    dense_nonlocal_forward,
    extract_neighborhood,
    nonlocal_backward,
    nonlocal_forward,
    normalize_logits,
)


def random_weights(rng, m, l, metric="embedded_gaussian", h=1.0, scale=0.5):
    return NonLocalWeights(
        rng.normal(size=(m, l)) * scale,
        rng.normal(size=(m, l)) * scale,
        rng.normal(size=(m, m)) * scale,
        metric=metric,
        h=h,
    )


def loop_oracle(x, weights, q, prior=None, order=None):
    """Per-pixel loops with modular indexing; ``order`` permutes the neighbor enumeration."""
    m, h, w = x.shape
    r = q // 2
    offs = [(dy, dx) for dy in range(q) for dx in range(q)]
    order = range(q * q) if order is None else order
    out = x.copy()
    logits = np.zeros((q * q, h, w))
    for y in range(h):
        for xx in range(w):
            xi = x[:, y, xx]
            vals, gs = [], []
            for d in order:
                dy, dx = offs[d]
                xj = x[:, (y + dy - r) % h, (xx + dx - r) % w]
                met = weights.metric
                if met == "euclidean_gaussian":
                    s = -np.sum((xi - xj) ** 2) / weights.h**2
                elif met in ("dot", "gaussian"):
                    s = xi @ xj
                elif met == "sym_embedded_gaussian":
                    s = (xi @ weights.w_theta) @ (xj @ weights.w_theta)
                else:
                    s = (xi @ weights.w_theta) @ (xj @ weights.w_psi)
                if prior is not None:
                    s += prior[d, y, xx]
                logits[d, y, xx] = s
                vals.append(s)
                gs.append(xj @ weights.w_g)
            vals = np.array(vals)
            if weights.metric in DOT_FAMILY:
                a = vals / (q * q)
            else:
                a = np.exp(vals - vals.max())
                a /= a.sum()
            out[:, y, xx] += sum(ai * gi for ai, gi in zip(a, gs))
    return out, logits


# neighborhoods


def test_extract_neighborhood_q1_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    nb = extract_neighborhood(x, 1)
    np.testing.assert_array_equal(nb[:, :, 0, 0, :], x.transpose(1, 2, 0))


def test_extract_neighborhood_single_pixel_wraps():
    x = np.array([[[2.0]], [[-1.0]]])
    nb = extract_neighborhood(x, 5)
    assert nb.shape == (1, 1, 5, 5, 2)
    np.testing.assert_array_equal(nb[0, 0, :, :, 0], 2.0)
    np.testing.assert_array_equal(nb[0, 0, :, :, 1], -1.0)


def test_extract_neighborhood_index_oracle():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    nb = extract_neighborhood(x, 3)
    for y in range(4):
        for xx in range(4):
            for dy in range(3):
                for dx in range(3):
                    assert nb[y, xx, dy, dx, 0] == x[0, (y + dy - 1) % 4, (xx + dx - 1) % 4]


def test_extract_neighborhood_even_q():
    with pytest.raises(ValueError):
        extract_neighborhood(np.zeros((1, 3, 3)), 4)


# logits


def test_euclidean_self_logit_is_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 5))
    st_ = correlation_logits(x, random_weights(rng, 3, 2, "euclidean_gaussian"), 5)
    np.testing.assert_array_equal(st_.logits[0, 12], 0.0)


def test_sym_embedded_zero_theta_gives_uniform():
    rng = np.random.default_rng(2)
    w = random_weights(rng, 3, 2, "sym_embedded_gaussian")
    w.w_theta[:] = 0
    st_ = correlation_logits(rng.normal(size=(3, 4, 4)), w, 3)
    np.testing.assert_array_equal(st_.logits, 0.0)
    np.testing.assert_allclose(normalize_logits(st_.logits, w.metric), 1 / 9, atol=1e-15)


def test_embedded_gaussian_hand_computation():
    # 1x2 image, m=2, l=1, q=3: each row of the window wraps onto the single row
    x = np.array([[[1.0, 2.0]], [[0.5, -1.0]]])
    w = NonLocalWeights(np.array([[1.0], [2.0]]), np.array([[0.5], [-1.0]]), np.zeros((2, 2)))
    st_ = correlation_logits(x, w, 3)
    theta = [1.0 * 1 + 0.5 * 2, 2.0 * 1 + -1.0 * 2]  # [2.0, 0.0]
    psi = [1.0 * 0.5 + 0.5 * -1, 2.0 * 0.5 + -1.0 * -1]  # [0.0, 2.0]
    for xx in range(2):
        for dy in range(3):
            for dx in range(3):
                j = (xx + dx - 1) % 2
                assert abs(st_.logits[0, dy * 3 + dx, 0, xx] - theta[xx] * psi[j]) <= 1e-12


@pytest.mark.parametrize("metric", METRICS)
@pytest.mark.parametrize("q", [1, 3, 5])
def test_forward_matches_loop_oracle(metric, q):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 5, 4)) * 0.7
    w = random_weights(rng, 3, 2, metric, h=1.5)
    prior = rng.normal(size=(q * q, 5, 4))
    out, state, _ = nonlocal_forward(x, w, q, CorrelationState(prior[None].copy(), q))
    ref_out, ref_logits = loop_oracle(x, w, q, prior)
    assert np.abs(out - ref_out).max() <= 1e-12
    assert np.abs(state.logits[0] - ref_logits).max() <= 1e-12


def test_batched_forward_equals_per_sample():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4, 5, 5))
    w = random_weights(rng, 4, 2)
    out, st_, _ = nonlocal_forward(x, w, 3)
    for i in range(3):
        o, s, _ = nonlocal_forward(x[i], w, 3)
        np.testing.assert_allclose(out[i], o, atol=1e-13)
        np.testing.assert_allclose(st_.logits[i], s.logits[0], atol=1e-13)


# identities and invariants


@pytest.mark.parametrize("metric", METRICS)
def test_zero_wg_is_exact_identity(metric):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 6, 6))
    w = random_weights(rng, 4, 2, metric)
    w.w_g[:] = 0
    prior = CorrelationState(rng.normal(size=(1, 25, 6, 6)), 5)
    out, _, _ = nonlocal_forward(x, w, 5, prior)
    assert np.array_equal(out, x)


def test_single_pixel_image():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 1, 1))
    w = random_weights(rng, 3, 2)
    out, _, _ = nonlocal_forward(x, w, 1)
    np.testing.assert_allclose(out[:, 0, 0], x[:, 0, 0] + x[:, 0, 0] @ w.w_g, atol=1e-15)


@pytest.mark.parametrize("metric", METRICS)
@pytest.mark.parametrize("shape", [(4, 4), (5, 3), (3, 6)])
def test_full_coverage_matches_dense_multiplicity_oracle(metric, shape):
    rng = np.random.default_rng(7)
    h, w_ = shape
    x = rng.normal(size=(3, h, w_)) * 0.6
    w = random_weights(rng, 3, 2, metric)
    q = 2 * max(h, w_) + 1
    out, _, _ = nonlocal_forward(x, w, q)
    ref, _ = dense_nonlocal_forward(x, w, q)
    assert np.abs(out - ref).max() <= 1e-10


@pytest.mark.parametrize("metric", METRICS)
def test_window_equal_to_image_matches_plain_dense(metric):
    # an odd q equal to both sides reaches every location exactly once
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 5, 5)) * 0.6
    w = random_weights(rng, 3, 2, metric)
    out, _, _ = nonlocal_forward(x, w, 5)
    ref, _ = dense_nonlocal_forward(x, w, None)
    assert np.abs(out - ref).max() <= 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-5, 5), st.integers(-5, 5), st.sampled_from(METRICS))
def test_cyclic_shift_equivariance(seed, sy, sx, metric):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5, 6))
    w = random_weights(rng, 3, 2, metric)
    prior = rng.normal(size=(1, 9, 5, 6))
    out, st_, _ = nonlocal_forward(x, w, 3, CorrelationState(prior.copy(), 3))
    xs = np.roll(x, (sy, sx), axis=(1, 2))
    ps = np.roll(prior, (sy, sx), axis=(2, 3))
    out_s, st_s, _ = nonlocal_forward(xs, w, 3, CorrelationState(ps, 3))
    assert np.array_equal(out_s, np.roll(out, (sy, sx), axis=(1, 2)))
    assert np.array_equal(st_s.logits, np.roll(st_.logits, (sy, sx), axis=(2, 3)))


def test_neighbor_order_independence():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 4, 4))
    w = random_weights(rng, 3, 2)
    out, _, _ = nonlocal_forward(x, w, 5)
    perm = rng.permutation(25)
    ref, _ = loop_oracle(x, w, 5, order=perm)
    assert np.abs(out - ref).max() <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(sorted(set(METRICS) - DOT_FAMILY)))
def test_softmax_rows_sum_to_one(seed, metric):
    rng = np.random.default_rng(seed)
    st_ = correlation_logits(rng.normal(size=(3, 4, 4)) * 3, random_weights(rng, 3, 2, metric), 5)
    attn = normalize_logits(st_.logits, metric)
    assert np.abs(attn.sum(axis=1) - 1).max() <= 1e-12


def test_correlation_map_and_grid():
    rng = np.random.default_rng(10)
    st_ = correlation_logits(rng.normal(size=(3, 4, 5)), random_weights(rng, 3, 2), 3)
    cmap = correlation_map(st_, 2, 3, "embedded_gaussian")
    assert cmap.shape == (3, 3)
    assert abs(cmap.sum() - 1) <= 1e-12
    np.testing.assert_array_equal(st_.grid()[0, 2, 3], st_.logits[0, :, 2, 3].reshape(3, 3))
    with pytest.raises(IndexError):
        correlation_map(st_, 4, 0, "embedded_gaussian")


def test_forward_errors():
    rng = np.random.default_rng(11)
    w = random_weights(rng, 3, 2)
    with pytest.raises(ValueError, match="channels"):
        nonlocal_forward(np.zeros((4, 3, 3)), w, 3)
    with pytest.raises(ValueError, match="prior"):
        nonlocal_forward(np.zeros((3, 3, 3)), w, 3, CorrelationState.zeros(1, 3, 3, 5))
    with pytest.raises(ValueError):
        NonLocalWeights(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        NonLocalWeights(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 3)), metric="cosine")


# backward


def test_backward_pure_skip():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 4, 4))
    w = random_weights(rng, 3, 2)
    w.w_g[:] = 0
    g = rng.normal(size=x.shape)
    _, _, tape = nonlocal_forward(x, w, 3)
    gx, _, _, _, _ = nonlocal_backward(tape, g, None)
    np.testing.assert_array_equal(gx, g)


def test_backward_prior_passthrough():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(3, 4, 4))
    w = random_weights(rng, 3, 2)
    ge = rng.normal(size=(1, 9, 4, 4))
    _, _, tape = nonlocal_forward(x, w, 3, CorrelationState(rng.normal(size=(1, 9, 4, 4)), 3))
    *_, gprior = nonlocal_backward(tape, np.zeros_like(x), ge)
    np.testing.assert_array_equal(gprior, ge)


@pytest.mark.parametrize("metric", METRICS)
def test_backward_finite_differences_all_groups(metric):
    rng = np.random.default_rng(14)
    x = rng.normal(size=(1, 3, 4, 4)) * 0.6
    w = random_weights(rng, 3, 2, metric, h=1.2)
    prior = rng.normal(size=(1, 9, 4, 4))
    r_out, r_st = rng.normal(size=x.shape), rng.normal(size=prior.shape)

    def f():
        out, s, _ = nonlocal_forward(x, w, 3, CorrelationState(prior, 3))
        return float(np.sum(r_out * out) + np.sum(r_st * s.logits))

    num = numeric_gradients(f, {"x": x, "w_theta": w.w_theta, "w_psi": w.w_psi, "w_g": w.w_g, "prior": prior})
    _, _, tape = nonlocal_forward(x, w, 3, CorrelationState(prior.copy(), 3))
    grads = dict(zip(["x", "w_theta", "w_psi", "w_g", "prior"], nonlocal_backward(tape, r_out, r_st)))
    top = max(np.abs(v).max() for v in num.values())
    for key in num:
        assert relative_error(grads[key], num[key], floor=1e-3 * top) <= 1e-4, key


def test_backward_tape_reuse():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(3, 4, 4))
    _, _, tape = nonlocal_forward(x, random_weights(rng, 3, 2), 3)
    nonlocal_backward(tape, x)
    with pytest.raises(TapeReuseError):
        nonlocal_backward(tape, x)
