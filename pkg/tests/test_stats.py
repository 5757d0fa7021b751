from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aceprune import container
from aceprune.stats import (
    DampingPolicy,
    StatsError,
    accumulate,
    finalize,
    from_activations,
    from_tensors,
    merge,
    new_stats,
    to_tensors,
    token_ratios,
)
from aceprune.tensor import l2_norm

FIXED2 = DampingPolicy.fixed(2.0)

token_batches = arrays(
    np.float64,
    st.tuples(st.integers(1, 30), st.integers(1, 6)),
    elements=st.floats(-100, 100).filter(lambda x: x == 0 or abs(x) > 1e-30),
)


def test_fixed_policy_lambda():
    assert new_stats(3, FIXED2).lam == 2.0


def test_proportional_lambda_from_preview():
    s = new_stats(2, DampingPolicy(damp_factor=0.01), [[1.0, 1.0], [1.0, 1.0]])
    assert s.lam == pytest.approx(0.02, rel=1e-15)


def test_all_zero_preview_rejected():
    with pytest.raises(StatsError):
        new_stats(2, DampingPolicy(), np.zeros((3, 2)))


def test_policy_validation():
    with pytest.raises(StatsError):
        DampingPolicy(damp_factor=0.0)
    with pytest.raises(StatsError):
        DampingPolicy.fixed(0.0)


def test_single_token_hand_values():
    s = accumulate(new_stats(2, FIXED2), [[1.0, 1.0]])
    assert s.sum_ratio.tolist() == pytest.approx([4 / 3, 4 / 3], rel=1e-15)
    f = finalize(s)
    assert f.rational.tolist() == pytest.approx([4 / 3] * 2, rel=1e-15)
    assert f.moment.tolist() == [1.3125, 1.3125]


def test_zero_token_adds_exactly_one():
    s = accumulate(new_stats(3, FIXED2), np.zeros((1, 3)))
    assert s.sum_ratio.tolist() == [1.0, 1.0, 1.0]


def test_all_zero_stream_finalizes_to_identity():
    f = finalize(accumulate(new_stats(2, FIXED2), np.zeros((5, 2))))
    assert f.col_l2.tolist() == [0.0, 0.0]
    assert f.rational.tolist() == [1.0, 1.0]
    assert f.moment.tolist() == [1.0, 1.0]


def test_variance_of_squares_matches_two_pass():
    x = np.array([[1.0], [2.0], [3.0]])  # x^2 stream {1, 4, 9}
    f = finalize(from_activations(x, FIXED2))
    sq = np.array([1.0, 4.0, 9.0])
    assert f.mean_sq[0] == pytest.approx(14 / 3)
    assert f.var_sq[0] == pytest.approx(np.mean((sq - sq.mean()) ** 2), rel=1e-12)


def test_constant_stream_has_zero_variance():
    for c in (0.3, 5.763002577846041, -1e-4):
        f = finalize(from_activations(np.full((139, 2), c), FIXED2))
        assert f.var_sq.tolist() == [0.0, 0.0]


def test_col_l2_is_column_norm(rng):
    x = rng.normal(size=(20, 5))
    f = finalize(from_activations(x))
    assert f.col_l2.tolist() == pytest.approx([l2_norm(x[:, j]) for j in range(5)], rel=1e-14)


def test_non_finite_activation_names_token():
    s = accumulate(new_stats(2, FIXED2, name="blocks.0.attn.q"), np.ones((3, 2)))
    bad = np.ones((4, 2))
    bad[2, 1] = np.nan
    with pytest.raises(StatsError, match=r"blocks\.0\.attn\.q.*token 5"):
        accumulate(s, bad)


def test_width_mismatch_rejected():
    with pytest.raises(StatsError):
        accumulate(new_stats(3, FIXED2), np.ones((1, 2)))


def test_finalize_needs_tokens():
    with pytest.raises(StatsError):
        finalize(new_stats(2, FIXED2))


def test_merge_with_empty_is_identity(rng):
    s = from_activations(rng.normal(size=(7, 3)), FIXED2)
    m = merge(s, new_stats(3, FIXED2))
    for key in ("sum_sq", "sum_quad", "sum_ratio", "sum_ratio1", "sum_ratio2", "min_sq", "max_sq"):
        assert np.array_equal(getattr(m, key), getattr(s, key))
    assert m.token_count == s.token_count


def test_merge_lambda_mismatch():
    with pytest.raises(StatsError):
        merge(new_stats(2, DampingPolicy.fixed(1.0)), new_stats(2, FIXED2))


@settings(max_examples=60, deadline=None)
@given(token_batches, st.data())
def test_batch_split_is_bit_identical(x, data):
    cut = data.draw(st.integers(0, x.shape[0]))
    whole = from_activations(x, FIXED2)
    split = accumulate(accumulate(new_stats(x.shape[1], FIXED2), x[:cut]), x[cut:])
    for key in ("sum_sq", "sum_quad", "sum_ratio", "sum_ratio1", "sum_ratio2"):
        assert np.array_equal(getattr(whole, key), getattr(split, key))


@settings(max_examples=60, deadline=None)
@given(token_batches, st.data())
def test_merge_matches_one_pass(x, data):
    cut = data.draw(st.integers(0, x.shape[0]))
    d = x.shape[1]
    whole = from_activations(x, FIXED2)
    m = merge(accumulate(new_stats(d, FIXED2), x[:cut]), accumulate(new_stats(d, FIXED2), x[cut:]))
    for key in ("sum_sq", "sum_quad", "sum_ratio", "sum_ratio1", "sum_ratio2"):
        np.testing.assert_allclose(getattr(m, key), getattr(whole, key), rtol=1e-10, atol=0)


@settings(max_examples=80, deadline=None)
@given(token_batches)
def test_invariants(x):
    s = from_activations(x, FIXED2)
    f = finalize(s)
    r = token_ratios(x, s.lam)
    assert np.all((r >= 0) & (r < 1))
    assert np.all(f.rational >= 1.0)
    assert np.all(f.rational >= f.moment) and np.all(f.moment >= 1.0)
    tail = np.mean(r**3 / (1 - r), axis=0)
    assert np.all(f.rational - f.moment <= tail * (1 + 1e-12) + 1e-15)
    assert np.all(f.mean_quad - f.mean_sq**2 >= -1e-12 * np.maximum(1, f.mean_quad))
    sq = x * x
    two_pass = np.mean((sq - sq.mean(axis=0)) ** 2, axis=0)
    assert np.all(np.abs(f.var_sq - two_pass) <= 1e-10 * np.maximum(1, f.mean_quad))


@settings(max_examples=40, deadline=None)
@given(token_batches.filter(lambda x: np.any(x)), st.floats(1e-3, 1e3))
def test_proportional_damping_scale_covariance(x, c):
    a = finalize(from_activations(x))
    b = finalize(from_activations(c * x))
    np.testing.assert_allclose(b.rational, a.rational, rtol=1e-10)
    np.testing.assert_allclose(b.moment, a.moment, rtol=1e-10)
    np.testing.assert_allclose(b.col_l2, c * a.col_l2, rtol=1e-10)


def test_container_round_trip(tmp_path, rng):
    stats = {
        "blocks.0.attn.q": from_activations(rng.normal(size=(9, 4)), name="blocks.0.attn.q"),
        "blocks.0.mlp.down": from_activations(rng.normal(size=(9, 6)), name="blocks.0.mlp.down"),
    }
    container.write_tensors(tmp_path / "stats.acet", to_tensors(stats))
    back = from_tensors(container.read_tensors(tmp_path / "stats.acet"))
    assert set(back) == set(stats)
    for name, s in stats.items():
        b = back[name]
        assert (b.token_count, b.lam, b.d_in) == (s.token_count, s.lam, s.d_in)
        assert np.array_equal(b.sum_ratio, s.sum_ratio)
        assert np.array_equal(finalize(b).moment, finalize(s).moment)
    header = container.read_header(tmp_path / "stats.acet")
    for key in ("count", "sum_sq", "sum_quad", "sum_ratio", "lambda"):
        assert f"blocks.0.attn.q.{key}" in header


def test_missing_reserved_name_reported(rng):
    t = to_tensors({"l": from_activations(rng.normal(size=(3, 2)))})
    del t["l.sum_quad"]
    with pytest.raises(StatsError, match="sum_quad"):
        from_tensors(t)


def test_pooled_expectation_weights_tokens_equally():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
    f = finalize(accumulate(accumulate(new_stats(2, FIXED2), a), b))
    r = 1.0 / (2.0 + 1.0)
    assert math.isclose(f.rational[0], (1 / (1 - r) + 3) / 4, rel_tol=1e-15)
