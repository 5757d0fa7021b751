"""A small deterministic decoder-only transformer in numpy.

Serves three purposes: real activation distributions for calibration, a set
of prunable linear layers, and a language-modelling loss to evaluate pruned
weights. Pre-norm blocks with RMS normalisation, causal multi-head softmax
attention and a two-layer GELU MLP; learned token and position embeddings;
untied output head. Weights use the ``(d_out, d_in)`` convention.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .container import ModelManifest
from .stats import DampingPolicy, FeatureStats, accumulate, merge, new_stats
from .tensor import ShapeError, as_matrix, cosine_similarity, matmul

BYTE_VOCAB = 256
BOS, EOS, PAD = 256, 257, 258
SPECIAL_TOKENS = 3
DEFAULT_VOCAB = BYTE_VOCAB + SPECIAL_TOKENS
PRUNABLE_SUFFIXES = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")
RMS_EPS = 1e-6
WEIGHTS_FILE = "weights.acet"
MANIFEST_FILE = "manifest.json"


class ModelError(ValueError):
    pass


def encode_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def prunable_layer_names(n_layers: int) -> list[str]:
    return [f"blocks.{i}.{s}" for i in range(n_layers) for s in PRUNABLE_SUFFIXES]


def default_manifest(seed: int = 0, **overrides) -> ModelManifest:
    m = ModelManifest(seed=seed, **overrides)
    m.layer_names = prunable_layer_names(m.n_layers)
    m.validate()
    return m


def weight_shapes(m: ModelManifest) -> dict[str, tuple[int, int]]:
    """Every tensor of the model in initialisation order."""
    d, f = m.d_model, m.d_ff
    shapes: dict[str, tuple[int, int]] = {
        "embed": (m.vocab_size, d),
        "pos_embed": (m.context_len, d),
    }
    for i in range(m.n_layers):
        p = f"blocks.{i}."
        shapes[p + "norm1.gain"] = (1, d)
        shapes[p + "attn.q"] = (d, d)
        shapes[p + "attn.k"] = (d, d)
        shapes[p + "attn.v"] = (d, d)
        shapes[p + "attn.o"] = (d, d)
        shapes[p + "norm2.gain"] = (1, d)
        shapes[p + "mlp.up"] = (f, d)
        shapes[p + "mlp.down"] = (d, f)
    shapes["final_norm.gain"] = (1, d)
    shapes["head"] = (m.vocab_size, d)
    return shapes


@dataclass
class ToyTransformer:
    manifest: ModelManifest
    weights: dict[str, np.ndarray]

    @property
    def context_len(self) -> int:
        return self.manifest.context_len

    @property
    def vocab_size(self) -> int:
        return self.manifest.vocab_size

    @property
    def layer_names(self) -> list[str]:
        return list(self.manifest.layer_names)

    def validate(self) -> None:
        self.manifest.validate()
        for name, shape in weight_shapes(self.manifest).items():
            if name not in self.weights:
                raise ModelError(f"missing tensor {name!r}")
            if tuple(self.weights[name].shape) != shape:
                raise ModelError(f"tensor {name!r} has shape {self.weights[name].shape}, expected {shape}")
        for name in self.manifest.layer_names:
            if name not in self.weights or self.weights[name].ndim != 2:
                raise ModelError(f"prunable layer {name!r} does not resolve to a 2-D tensor")

    def with_weights(self, updates: dict[str, np.ndarray]) -> "ToyTransformer":
        weights = dict(self.weights)
        weights.update(updates)
        return ToyTransformer(self.manifest, weights)


def _f32_bound(b: float) -> float:
    b32 = np.float32(b)
    if float(b32) > b:
        b32 = np.nextafter(b32, np.float32(0))
    return float(b32)


def init_model(manifest: ModelManifest) -> ToyTransformer:
    """Seeded init: norm gains are 1, every other tensor is drawn from
    uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)), in the order of
    :func:`weight_shapes`, from ``numpy.random.default_rng(seed)``.

    Values are rounded to float32 (clipped to the float32 bound) so the
    in-memory model equals its saved copy.
    """
    try:
        manifest.validate()
    except ValueError as exc:
        raise ModelError(str(exc)) from None
    rng = np.random.default_rng(manifest.seed)
    weights = {}
    for name, (rows, cols) in weight_shapes(manifest).items():
        if name.endswith(".gain"):
            weights[name] = np.ones((rows, cols))
            continue
        b = math.sqrt(6.0 / (rows + cols))
        w = rng.uniform(-b, b, size=(rows, cols)).astype(np.float32).astype(np.float64)
        bound = _f32_bound(b)
        weights[name] = np.clip(w, -bound, bound)
    model = ToyTransformer(manifest, weights)
    model.validate()
    return model


def init_weight_bound(shape: tuple[int, int]) -> float:
    return math.sqrt(6.0 / (shape[0] + shape[1]))


@dataclass
class CaptureBuffer:
    """Observer for prunable-layer inputs.

    Streams activation rows into ``stats[name]`` when present and, with
    ``retain``, keeps copies of the raw rows for oracle runs.
    """

    stats: dict[str, FeatureStats] = field(default_factory=dict)
    retain: bool = False
    raw: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def observe(self, name: str, x: np.ndarray) -> None:
        s = self.stats.get(name)
        if s is not None:
            if s.d_in != x.shape[1]:
                raise ShapeError(f"{name}: stats width {s.d_in} != layer input width {x.shape[1]}")
            accumulate(s, x)
        if self.retain:
            self.raw.setdefault(name, []).append(x.copy())

    def activations(self, name: str) -> np.ndarray:
        return np.vstack(self.raw[name])


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _linear(model: ToyTransformer, name: str, x: np.ndarray, capture: CaptureBuffer | None) -> np.ndarray:
    if capture is not None and name in model.manifest.layer_names:
        capture.observe(name, x)
    return matmul(x, model.weights[name].T)


def attention_probs(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    t, dh = q.shape
    scores = matmul(q, k.T) / math.sqrt(dh)
    scores[np.triu(np.ones((t, t), dtype=bool), k=1)] = -np.inf
    return softmax_rows(scores)


def forward(model: ToyTransformer, tokens: Sequence[int], capture: CaptureBuffer | None = None) -> np.ndarray:
    """Logits of shape ``(len(tokens), vocab_size)``."""
    m = model.manifest
    ids = np.asarray(tokens, dtype=np.int64).ravel()
    if ids.size == 0:
        raise ModelError("empty token sequence")
    if ids.size > m.context_len:
        raise ModelError(f"sequence of {ids.size} tokens exceeds context_len {m.context_len}")
    if ids.min() < 0 or ids.max() >= m.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= m.vocab_size)][0])
        raise ModelError(f"token id {bad} outside vocabulary of {m.vocab_size}")
    w = model.weights
    t = ids.size
    dh = m.d_model // m.n_heads
    h = w["embed"][ids] + w["pos_embed"][:t]
    for i in range(m.n_layers):
        p = f"blocks.{i}."
        a = rms_norm(h, w[p + "norm1.gain"])
        q = _linear(model, p + "attn.q", a, capture)
        k = _linear(model, p + "attn.k", a, capture)
        v = _linear(model, p + "attn.v", a, capture)
        ctx = np.empty_like(q)
        for head in range(m.n_heads):
            sl = slice(head * dh, (head + 1) * dh)
            ctx[:, sl] = matmul(attention_probs(q[:, sl], k[:, sl]), v[:, sl])
        h = h + _linear(model, p + "attn.o", ctx, capture)
        u = gelu(_linear(model, p + "mlp.up", rms_norm(h, w[p + "norm2.gain"]), capture))
        h = h + _linear(model, p + "mlp.down", u, capture)
    return matmul(rms_norm(h, w["final_norm.gain"]), w["head"].T)


def eval_windows(n_tokens: int, context_len: int, stride: int) -> list[tuple[int, int, int]]:
    """(start, end, first_scored_target) per window.

    Window k covers ``[k*stride, k*stride + context_len)``; each target
    position is scored once, in the first window where it has context.
    ``stride == context_len`` gives non-overlapping windows.
    """
    if not 1 <= stride <= context_len:
        raise ModelError(f"stride must lie in [1, context_len={context_len}], got {stride}")
    out = []
    scored_to = 1
    start = 0
    while True:
        end = min(start + context_len, n_tokens)
        first = max(scored_to, start + 1)
        if first < end:
            out.append((start, end, first))
            scored_to = end
        if end >= n_tokens:
            break
        start += stride
    return out


def perplexity(model, tokens: Sequence[int], stride: int | None = None) -> float:
    """exp(mean next-token NLL, natural log) over the windows of
    :func:`eval_windows`. ``model`` needs ``context_len`` and ``vocab_size``;
    logits come from ``model.logits(ids)`` when defined, else :func:`forward`."""
    ids = np.asarray(tokens, dtype=np.int64).ravel()
    if ids.size < 2:
        raise ModelError("perplexity needs at least 2 tokens")
    stride = model.context_len if stride is None else stride
    logits_fn = getattr(model, "logits", None) or (lambda x: forward(model, x))
    total, count = 0.0, 0
    for start, end, first in eval_windows(ids.size, model.context_len, stride):
        lp = log_softmax_rows(logits_fn(ids[start:end]))
        targets = ids[first:end]
        rows = np.arange(first - 1, end - 1) - start
        nll = -lp[rows, targets]
        total += float(np.add.accumulate(nll)[-1])
        count += nll.size
    return math.exp(total / count)


_SYLLABLES = ("ka", "lo", "ri", "sen", "ta", "mu", "ve", "no", "dor", "pi", "el", "an", "qu", "ish", "ba", "th")


def toy_corpus(seed: int = 0, n_bytes: int = 32768) -> bytes:
    """Deterministic text-like fixture: Zipf-distributed pseudo-words from a
    seeded lexicon, with punctuation and line breaks, so byte statistics are
    skewed the way real text is."""
    rng = np.random.default_rng(seed)
    lexicon = []
    for _ in range(400):
        n = int(rng.integers(1, 4))
        lexicon.append("".join(_SYLLABLES[i] for i in rng.integers(len(_SYLLABLES), size=n)))
    p = 1.0 / np.arange(1, len(lexicon) + 1)
    p /= p.sum()
    out: list[str] = []
    size = 0
    sentence = 0
    while size < n_bytes:
        word = lexicon[int(rng.choice(len(lexicon), p=p))]
        if sentence == 0:
            word = word.capitalize()
        sentence += 1
        if sentence > 4 and rng.random() < 0.15:
            word += "." if rng.random() < 0.8 else ","
            sentence = 0 if word.endswith(".") else sentence
        sep = "\n" if sentence == 0 and rng.random() < 0.2 else " "
        out.append(word + sep)
        size += len(word) + 1
    return "".join(out).encode("ascii")[:n_bytes]


@dataclass(frozen=True)
class CalibConfig:
    nsamples: int = 128
    seqlen: int = 16
    seed: int = 0
    corpus: str | os.PathLike | None = None

    def validate(self, context_len: int | None = None) -> None:
        if self.nsamples < 1:
            raise ModelError("nsamples must be >= 1")
        if self.seqlen < 1:
            raise ModelError("seqlen must be >= 1")
        if context_len is not None and self.seqlen > context_len:
            raise ModelError(f"seqlen {self.seqlen} exceeds context_len {context_len}")


def sample_calibration(cfg: CalibConfig, data: bytes | None = None) -> list[np.ndarray]:
    """``nsamples`` byte-token windows of exactly ``seqlen``, start offsets
    drawn without replacement by ``default_rng(seed)``."""
    cfg.validate()
    if data is None:
        if cfg.corpus is None:
            raise ModelError("no corpus given")
        data = Path(cfg.corpus).read_bytes()
    ids = encode_bytes(data)
    if ids.size < cfg.nsamples * cfg.seqlen:
        raise ModelError(f"corpus of {ids.size} bytes is smaller than nsamples*seqlen = {cfg.nsamples * cfg.seqlen}")
    n_offsets = ids.size - cfg.seqlen + 1
    rng = np.random.default_rng(cfg.seed)
    offsets = rng.choice(n_offsets, size=cfg.nsamples, replace=False)
    return [ids[o : o + cfg.seqlen].copy() for o in offsets]


def collect_stats(
    model: ToyTransformer,
    samples: Sequence[np.ndarray],
    policy: DampingPolicy = DampingPolicy(),
    retain: bool = False,
    jobs: int = 1,
) -> tuple[dict[str, FeatureStats], CaptureBuffer]:
    """Calibration pass over ``samples``.

    Proportional damping takes its preview from the first sample's
    activations at each layer. Every sample then fills its own shard and the
    shards are merged in sample order, so the result does not depend on
    ``jobs``.
    """
    if not samples:
        raise ModelError("no calibration samples")
    preview = CaptureBuffer(retain=True)
    forward(model, samples[0], preview)
    lams = {}
    for name in model.layer_names:
        x0 = preview.activations(name)
        lams[name] = (x0.shape[1], new_stats(x0.shape[1], policy, x0 if policy.mode == "proportional" else None).lam)

    def shard(sample):
        buf = CaptureBuffer(
            stats={n: new_stats(d, DampingPolicy.fixed(lam), name=n) for n, (d, lam) in lams.items()},
            retain=retain,
        )
        forward(model, sample, buf)
        return buf

    if jobs > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            shards = list(pool.map(shard, samples))
    else:
        shards = [shard(sample) for sample in samples]
    out = CaptureBuffer(stats=dict(shards[0].stats), retain=retain)
    for buf in shards[1:]:
        out.stats = {n: merge(out.stats[n], buf.stats[n]) for n in out.stats}
    if retain:
        for buf in shards:
            for n, rows in buf.raw.items():
                out.raw.setdefault(n, []).extend(rows)
    return out.stats, out


@dataclass(frozen=True)
class Reconstruction:
    frob_rel: float
    mean_cos: float


def layer_reconstruction_error(dense_w, pruned_w, activations) -> Reconstruction:
    """Relative output error of a pruned layer on activation rows ``X``.

    ``frob_rel = ||(W - W') X^T||_F / ||W X^T||_F``; ``mean_cos`` averages
    cos(Wx, W'x) over tokens with nonzero dense output, counting a zero
    pruned output as cosine 0.
    """
    w = as_matrix(dense_w)
    wp = as_matrix(pruned_w)
    x = as_matrix(activations)
    if w.shape != wp.shape or x.shape[1] != w.shape[1]:
        raise ShapeError(f"inconsistent shapes W{w.shape} W'{wp.shape} X{x.shape}")
    y = matmul(x, w.T)
    yp = matmul(x, wp.T)
    dense = float(np.sqrt(np.sum(y * y)))
    if dense == 0.0:
        raise ModelError("degenerate layer: every dense output is zero")
    diff = y - yp
    frob = float(np.sqrt(np.sum(diff * diff))) / dense
    cos = []
    for yt, ypt in zip(y, yp):
        if not np.any(yt):
            continue
        cos.append(cosine_similarity(yt, ypt) if np.any(ypt) else 0.0)
    return Reconstruction(frob, float(np.mean(cos)))


def save_model(model: ToyTransformer, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    model.validate()
    container.write_tensors(d / WEIGHTS_FILE, model.weights, dtype="f32")
    container.write_manifest(d / MANIFEST_FILE, model.manifest)


def load_model(directory: str | os.PathLike) -> ToyTransformer:
    d = Path(directory)
    manifest = container.read_manifest(d / MANIFEST_FILE)
    model = ToyTransformer(manifest, container.read_tensors(d / WEIGHTS_FILE))
    model.validate()
    return model
