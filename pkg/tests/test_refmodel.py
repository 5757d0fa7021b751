from __future__ import annotations

import math

import numpy as np
import pytest

from aceprune.refmodel import (
    CalibConfig,
    CaptureBuffer,
    ModelError,
    Reconstruction,
    attention_probs,
    collect_stats,
    default_manifest,
    encode_bytes,
    eval_windows,
    forward,
    init_model,
    init_weight_bound,
    layer_reconstruction_error,
    load_model,
    perplexity,
    sample_calibration,
    save_model,
    toy_corpus,
)
from aceprune.stats import DampingPolicy, finalize


class FixedLogits:
    """Minimal model stand-in: logits from a function of the window ids."""

    def __init__(self, fn, vocab_size=259, context_len=16):
        self.fn = fn
        self.vocab_size = vocab_size
        self.context_len = context_len

    def logits(self, ids):
        return self.fn(np.asarray(ids))


def test_default_manifest_shape():
    m = default_manifest()
    assert (m.vocab_size, m.d_model, m.n_layers, m.n_heads, m.d_ff, m.context_len) == (259, 64, 2, 4, 256, 128)
    assert len(m.layer_names) == 12 and m.layer_names[0] == "blocks.0.attn.q"


def test_init_is_deterministic_and_seeded():
    a, b = init_model(default_manifest(seed=7)), init_model(default_manifest(seed=7))
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    c = init_model(default_manifest(seed=8))
    assert any(not np.array_equal(a.weights[k], c.weights[k]) for k in a.weights)


def test_init_respects_fan_bound():
    model = init_model(default_manifest(seed=1))
    for name, w in model.weights.items():
        if name.endswith(".gain"):
            assert np.all(w == 1.0)
        else:
            b = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            assert b == init_weight_bound(w.shape)
            assert np.max(np.abs(w)) <= b


def test_invalid_manifest_rejected():
    with pytest.raises((ModelError, ValueError)):
        init_model(default_manifest(d_model=10, n_heads=4))


def test_forward_shapes_and_token_checks(small_model):
    logits = forward(small_model, [1, 2, 3])
    assert logits.shape == (3, 259)
    with pytest.raises(ModelError):
        forward(small_model, [300])
    with pytest.raises(ModelError):
        forward(small_model, list(range(33)))


def test_capture_does_not_perturb_logits(small_model, rng):
    ids = rng.integers(0, 256, size=20)
    plain = forward(small_model, ids)
    stats, buf = collect_stats(small_model, [ids], retain=True)
    captured = forward(small_model, ids, CaptureBuffer(stats={k: v.copy() for k, v in stats.items()}, retain=True))
    assert plain.tobytes() == captured.tobytes()
    assert buf.activations("blocks.0.mlp.down").shape == (20, 32)


def test_zero_embeddings_give_zero_logits(small_model):
    zeroed = small_model.with_weights(
        {"embed": np.zeros_like(small_model.weights["embed"]), "pos_embed": np.zeros_like(small_model.weights["pos_embed"])}
    )
    assert not np.any(forward(zeroed, [5, 6, 7, 8]))


def test_attention_rows_sum_to_one(rng):
    p = attention_probs(rng.normal(size=(9, 4)), rng.normal(size=(9, 4)))
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-9
    assert np.all(np.triu(p, k=1) == 0.0)


def test_eval_windows_score_each_target_at_most_once():
    for n, ctx, stride in [(10, 4, 4), (10, 4, 2), (129, 128, 128), (7, 16, 16), (50, 8, 3), (50, 8, 1)]:
        scored = []
        for start, end, first in eval_windows(n, ctx, stride):
            assert end - start <= ctx and start < first < end
            scored.extend(range(first, end))
        assert scored == sorted(set(scored)) and set(scored) <= set(range(1, n))
        if stride == ctx:
            # non-overlapping: a window's first token has no context inside it
            assert set(range(1, n)) - set(scored) == set(range(ctx, n, ctx))
        if stride == 1:
            assert scored == list(range(1, n))
    with pytest.raises(ModelError):
        eval_windows(10, 4, 5)


def test_uniform_logits_give_vocab_perplexity(rng):
    model = FixedLogits(lambda ids: np.zeros((ids.size, 259)))
    ppl = perplexity(model, rng.integers(0, 259, size=100))
    assert abs(ppl - 259) <= 1e-6 * 259


def test_perfect_predictor_gives_one():
    def onehot_next(ids):
        out = np.zeros((ids.size, 259))
        out[np.arange(ids.size), (ids + 1) % 259] = 1e4
        return out

    ids = np.arange(60) % 259
    assert perplexity(FixedLogits(onehot_next), ids) == pytest.approx(1.0, abs=1e-12)


def test_perplexity_needs_two_tokens(small_model):
    with pytest.raises(ModelError):
        perplexity(small_model, [3])


def test_random_init_perplexity_follows_logit_spread():
    # With unit-RMS hidden states and a uniform(-b, b) head the logits are
    # roughly N(0, d b^2 / 3), so the expected NLL is log V + d b^2 / 6.
    m0 = default_manifest()
    b = init_weight_bound((m0.vocab_size, m0.d_model))
    expect = m0.vocab_size * math.exp(m0.d_model * b * b / 6)
    for seed in range(4):
        model = init_model(default_manifest(seed=seed))
        text = np.random.default_rng(100 + seed).integers(0, 256, size=512)
        ppl = perplexity(model, text)
        assert abs(ppl / expect - 1) <= 0.10, (seed, ppl, expect)


def test_sample_calibration_geometry():
    (w,) = sample_calibration(CalibConfig(nsamples=1, seqlen=4, seed=0), b"abcdef")
    assert w.size == 4 and bytes(w.astype(np.uint8)) in (b"abcd", b"bcde", b"cdef")


def test_sample_calibration_determinism_and_bounds():
    data = toy_corpus(0, 4096)
    cfg = CalibConfig(nsamples=32, seqlen=16, seed=5)
    a, b = sample_calibration(cfg, data), sample_calibration(cfg, data)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    ids = encode_bytes(data)
    starts = set()
    for w in a:
        assert w.size == 16
        hits = [o for o in range(ids.size - 15) if np.array_equal(ids[o : o + 16], w)]
        assert hits
        starts.add(hits[0])
    with pytest.raises(ModelError):
        sample_calibration(CalibConfig(nsamples=10, seqlen=16), b"x" * 100)


def test_collect_stats_counts_and_job_independence(small_model):
    samples = sample_calibration(CalibConfig(nsamples=6, seqlen=8, seed=1), toy_corpus(1, 2048))
    s1, _ = collect_stats(small_model, samples, jobs=1)
    s4, _ = collect_stats(small_model, samples, jobs=4)
    for name in small_model.layer_names:
        assert s1[name].token_count == 48
        assert np.array_equal(s1[name].sum_ratio, s4[name].sum_ratio)
        assert s1[name].lam == s4[name].lam


def test_collect_stats_preview_is_first_sample(small_model):
    samples = sample_calibration(CalibConfig(nsamples=3, seqlen=8, seed=2), toy_corpus(1, 2048))
    stats, _ = collect_stats(small_model, samples, DampingPolicy(damp_factor=0.05))
    buf = CaptureBuffer(retain=True)
    forward(small_model, samples[0], buf)
    x0 = buf.activations("blocks.0.attn.q")
    assert stats["blocks.0.attn.q"].lam == pytest.approx(0.05 * np.mean(np.sum(x0 * x0, axis=1)), rel=1e-14)
    assert np.all(finalize(stats["blocks.0.attn.q"]).rational >= 1.0)


def naive_reconstruction(w, wp, x):
    num = den = 0.0
    cos = []
    for t in range(x.shape[0]):
        y = [sum(w[i, j] * x[t, j] for j in range(w.shape[1])) for i in range(w.shape[0])]
        yp = [sum(wp[i, j] * x[t, j] for j in range(w.shape[1])) for i in range(w.shape[0])]
        num += sum((a - b) ** 2 for a, b in zip(y, yp))
        den += sum(a * a for a in y)
        ny, nyp = math.sqrt(sum(a * a for a in y)), math.sqrt(sum(b * b for b in yp))
        if ny:
            cos.append(sum(a * b for a, b in zip(y, yp)) / (ny * nyp) if nyp else 0.0)
    return math.sqrt(num / den), sum(cos) / len(cos)


def test_reconstruction_examples(rng):
    w, x = rng.normal(size=(8, 8)), rng.normal(size=(12, 8))
    assert layer_reconstruction_error(w, w, x) == Reconstruction(0.0, 1.0)
    assert layer_reconstruction_error(w, np.zeros_like(w), x).frob_rel == 1.0
    wp = w * (rng.random(w.shape) > 0.5)
    got = layer_reconstruction_error(w, wp, x)
    frob, cos = naive_reconstruction(w, wp, x)
    assert abs(got.frob_rel - frob) <= 1e-10 and abs(got.mean_cos - cos) <= 1e-10


def test_reconstruction_degenerate_layer():
    with pytest.raises(ModelError):
        layer_reconstruction_error(np.ones((2, 2)), np.ones((2, 2)), np.zeros((3, 2)))


def test_save_load_round_trip(tmp_path, small_model):
    save_model(small_model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.manifest == small_model.manifest
    assert all(np.array_equal(back.weights[k], small_model.weights[k]) for k in small_model.weights)
    save_model(back, tmp_path / "m2")
    assert (tmp_path / "m" / "weights.acet").read_bytes() == (tmp_path / "m2" / "weights.acet").read_bytes()
