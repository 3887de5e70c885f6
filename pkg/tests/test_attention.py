import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from camib.attention import (
    AttentionParams,
    aggregate_instrument,
    attended_values,
    attention_scores,
    attention_trace,
    flatten_tokens,
    instrument,
)
from camib.numeric import RngStream, finite_diff_grad, grad, max_errors, softmax_rows


def random_params(d, seed):
    rng = RngStream(seed)
    return AttentionParams.from_matrices(rng.normal((d, d)), rng.normal((d, d)), rng.normal((d, d)))


def test_zero_query_key_gives_zero_scores():
    z = RngStream(0).normal((5, 3))
    p = AttentionParams.from_matrices(torch.zeros(3, 3), torch.zeros(3, 3), torch.eye(3))
    assert torch.equal(attention_scores(z, p), torch.zeros(5, 5))


def test_identity_projections_orthonormal_tokens():
    p = AttentionParams.from_matrices(torch.eye(2), torch.eye(2), torch.eye(2))
    s = attention_scores(torch.eye(2), p)
    assert torch.allclose(s, torch.eye(2) / math.sqrt(2), atol=1e-15, rtol=0)


def test_scores_match_loop():
    z = RngStream(1).normal((3, 4))
    p = random_params(4, 2)
    s = attention_scores(z, p).detach()
    Wq, Wk = p.W_Q.detach(), p.W_K.detach()
    for i in range(3):
        for j in range(3):
            q = sum(z[i, a] * Wq[a] for a in range(4))
            k = sum(z[j, a] * Wk[a] for a in range(4))
            assert abs(float(s[i, j] - (q * k).sum() / 2.0)) < 1e-12


def test_scores_dimension_mismatch():
    with pytest.raises(ValueError):
        attention_scores(torch.zeros(3, 2), random_params(4, 0))


def test_single_token_attends_to_itself():
    z = RngStream(3).normal((1, 3))
    tr = attention_trace(z, random_params(3, 4))
    assert tr.weights.tolist() == [[1.0]]
    assert torch.equal(tr.attended, tr.values)


def test_equal_scores_average_values():
    v = torch.tensor([[1.0, 2.0], [3.0, -4.0]])
    out = attended_values(torch.full((2, 2), 0.5), v)
    assert torch.equal(out, torch.tensor([[2.0, -1.0], [2.0, -1.0]]))


def test_attended_values_match_loop():
    rng = RngStream(5)
    w = softmax_rows(rng.normal((4, 4)))
    v = rng.normal((4, 3))
    out = attended_values(w, v)
    for i in range(4):
        ref = sum(w[i, j] * v[j] for j in range(4))
        assert float((out[i] - ref).abs().max()) < 1e-12


def test_aggregate_single_modality_is_identity():
    v = RngStream(6).normal((3, 2))
    assert torch.equal(aggregate_instrument(v, 1, 3), v)


def test_aggregate_sums_ones():
    assert torch.equal(aggregate_instrument(torch.ones(6, 4), 2, 3), 2 * torch.ones(3, 4))


def test_aggregate_matches_index_loop():
    v = RngStream(7).normal((6, 3))
    out = aggregate_instrument(v, 3, 2)
    for t in range(2):
        ref = sum(v[m * 2 + t] for m in range(3))
        assert float((out[t] - ref).abs().max()) < 1e-15


def test_aggregate_mean_variant():
    v = RngStream(7).normal((6, 3))
    assert torch.allclose(aggregate_instrument(v, 3, 2, "mean"), aggregate_instrument(v, 3, 2) / 3)


def test_aggregate_count_mismatch():
    with pytest.raises(ValueError):
        aggregate_instrument(torch.zeros(5, 2), 2, 3)


def test_flatten_is_modality_major_and_round_trips():
    z = torch.arange(2 * 3 * 4 * 5, dtype=torch.float64).reshape(2, 3, 4, 5)
    flat = flatten_tokens(z)
    for m in range(3):
        for t in range(4):
            assert torch.equal(flat[:, m * 4 + t], z[:, m, t])
    assert torch.equal(flat.reshape(2, 3, 4, 5), z)


def test_instrument_trivial_case():
    z = RngStream(8).normal((2, 1, 1, 3))
    p = AttentionParams.from_matrices(torch.zeros(3, 3), torch.zeros(3, 3), torch.eye(3))
    assert torch.equal(instrument(z, p), z[:, 0])


def test_instrument_invariant_to_modality_permutation():
    rng = RngStream(9)
    a, b = rng.normal((2, 3, 4)), rng.normal((2, 3, 4))
    p = random_params(4, 10)
    v1 = instrument(torch.stack([a, b, a], dim=1), p)
    v2 = instrument(torch.stack([a, a, b], dim=1), p)
    assert torch.allclose(v1, v2, atol=1e-12, rtol=0)


def test_instrument_is_composition():
    z = RngStream(11).normal((3, 2, 3, 4))
    p = random_params(4, 12)
    out = instrument(z, p)
    for n in range(3):
        flat = flatten_tokens(z[n])
        s = attention_scores(flat, p)
        v_hat = attended_values(softmax_rows(s), flat @ p.W_V)
        assert torch.allclose(out[n], aggregate_instrument(v_hat, 2, 3), atol=1e-14, rtol=0)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4), st.sampled_from([2, 4, 8]))
def test_weights_normalized_and_in_convex_hull(seed, M, L, d):
    rng = RngStream(seed)
    z = rng.normal((M * L, d))
    with torch.no_grad():
        tr = attention_trace(z, random_params(d, seed + 1))
    assert float((tr.weights.sum(dim=1) - 1).abs().max()) < 1e-12
    assert bool(((tr.weights >= 0) & (tr.weights <= 1)).all())
    # Convex-combination residual: the weights themselves certify the hull membership.
    assert float((tr.weights @ tr.values - tr.attended).abs().max()) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_instrument_weight_gradients_match_fd(seed):
    rng = RngStream(seed)
    z = rng.normal((2, 2, 3, 4))
    up = rng.normal((2, 3, 4))
    params = {k: rng.normal((4, 4)) * 0.7 for k in ("W_Q", "W_K", "W_V")}

    def f(p):
        return (instrument(z, AttentionParamsView(p)) * up).sum()

    a, b = grad(f, params), finite_diff_grad(f, params)
    for k in params:
        assert max_errors(a[k], b[k])[1] < 1e-4


class AttentionParamsView:
    def __init__(self, p):
        self.W_Q, self.W_K, self.W_V = p["W_Q"], p["W_K"], p["W_V"]
        self.d = p["W_Q"].shape[0]
