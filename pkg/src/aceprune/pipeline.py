"""Calibrate, prune and evaluate a toy model in memory.

The command-line layer is a thin shell over these functions; they never
write to disk and never mutate the model they are given.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .metrics import MetricKind
from .refmodel import (
    CalibConfig,
    CaptureBuffer,
    ModelError,
    ToyTransformer,
    collect_stats,
    encode_bytes,
    forward,
    layer_reconstruction_error,
    perplexity,
    sample_calibration,
)
from .sparsify import PruneMask, SparsityPattern, apply_mask, build_mask, verify_mask
from .stats import DampingPolicy, FeatureStats, finalize

REPORT_FORMATS = ("csv", "markdown", "json")
DEFAULT_EVAL_TOKENS = 1024


@dataclass
class CalibrationResult:
    stats: dict[str, FeatureStats]
    samples: list[np.ndarray]
    seconds: float


@dataclass
class PruneResult:
    model: ToyTransformer
    masks: dict[str, PruneMask]
    layer_seconds: dict[str, float]
    total_seconds: float


@dataclass
class LayerError:
    layer: str
    frob_rel: float
    mean_cos: float


@dataclass
class EvalReport:
    perplexity: float
    dense_perplexity: float | None = None
    layers: list[LayerError] = field(default_factory=list)

    @property
    def ppl_delta(self) -> float | None:
        if self.dense_perplexity is None:
            return None
        return self.perplexity - self.dense_perplexity

    def rows(self) -> list[dict]:
        out = [
            {
                "name": "model",
                "perplexity": self.perplexity,
                "dense_perplexity": self.dense_perplexity,
                "ppl_delta": self.ppl_delta,
                "frob_rel": None,
                "mean_cos": None,
            }
        ]
        for e in self.layers:
            out.append(
                {
                    "name": e.layer,
                    "perplexity": None,
                    "dense_perplexity": None,
                    "ppl_delta": None,
                    "frob_rel": e.frob_rel,
                    "mean_cos": e.mean_cos,
                }
            )
        return out


EVAL_COLUMNS = ("name", "perplexity", "dense_perplexity", "ppl_delta", "frob_rel", "mean_cos")


def calibrate(
    model: ToyTransformer,
    calib: CalibConfig,
    data: bytes,
    policy: DampingPolicy = DampingPolicy(),
    jobs: int = 1,
) -> CalibrationResult:
    calib.validate(model.context_len)
    t0 = time.perf_counter()
    samples = sample_calibration(calib, data)
    stats, _ = collect_stats(model, samples, policy, jobs=jobs)
    return CalibrationResult(stats, samples, time.perf_counter() - t0)


def prune(
    model: ToyTransformer,
    stats: dict[str, FeatureStats] | None,
    metric: MetricKind,
    pattern: SparsityPattern,
    jobs: int = 1,
) -> PruneResult:
    """Score, mask and zero every prunable layer. Embeddings, norms and the
    head are copied through unchanged."""
    if metric.needs_stats:
        if stats is None:
            raise ModelError(f"metric {metric} needs calibration statistics")
        missing = [n for n in model.layer_names if n not in stats]
        if missing:
            raise ModelError(f"statistics are missing layers: {', '.join(missing)}")
    for name in model.layer_names:
        pattern.check_shape(*model.weights[name].shape)

    def one(name: str):
        t0 = time.perf_counter()
        w = model.weights[name]
        fin = finalize(stats[name]) if metric.needs_stats else None
        mask = build_mask(metrics.score(metric, w, fin), pattern)
        return name, apply_mask(w, mask), mask, time.perf_counter() - t0

    t0 = time.perf_counter()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(one, model.layer_names))
    else:
        done = [one(n) for n in model.layer_names]
    total = time.perf_counter() - t0
    updates = {name: w for name, w, _, _ in done}
    return PruneResult(
        model.with_weights(updates),
        {name: mask for name, _, mask, _ in done},
        {name: secs for name, _, _, secs in done},
        total,
    )


def check_masks(masks: dict[str, PruneMask]) -> list[str]:
    """Names of layers whose mask breaks its declared pattern."""
    return [name for name, m in masks.items() if not verify_mask(m).passed]


def eval_tokens(data: bytes, n_tokens: int = DEFAULT_EVAL_TOKENS) -> np.ndarray:
    """The trailing ``n_tokens`` bytes of a corpus as token ids."""
    ids = encode_bytes(data)
    if ids.size < 2:
        raise ModelError("evaluation corpus needs at least 2 bytes")
    return ids[-n_tokens:]


@dataclass
class DenseReference:
    model: ToyTransformer
    perplexity: float
    activations: dict[str, np.ndarray]


def dense_reference(dense: ToyTransformer, tokens: np.ndarray, samples: list[np.ndarray] | None = None) -> DenseReference:
    """Dense perplexity plus the dense inputs of every prunable layer on
    ``samples``, computed once and shared by every pruned variant."""
    return DenseReference(dense, perplexity(dense, tokens), capture_inputs(dense, samples or []))


def capture_inputs(model: ToyTransformer, samples: list[np.ndarray]) -> dict[str, np.ndarray]:
    if not samples:
        return {}
    buf = CaptureBuffer(retain=True)
    for s in samples:
        forward(model, s, buf)
    return {name: buf.activations(name) for name in model.layer_names}


def evaluate(model: ToyTransformer, tokens: np.ndarray, reference: DenseReference | None = None) -> EvalReport:
    """Perplexity of ``model`` and, given a dense reference with captured
    inputs, per-layer reconstruction error against it."""
    report = EvalReport(perplexity(model, tokens))
    if reference is None:
        return report
    report.dense_perplexity = reference.perplexity
    for name, x in reference.activations.items():
        rec = layer_reconstruction_error(reference.model.weights[name], model.weights[name], x)
        report.layers.append(LayerError(name, rec.frob_rel, rec.mean_cos))
    return report


# -- report rendering ---------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(rows: list[dict], columns, fmt: str) -> str:
    if fmt == "json":
        return json.dumps([{c: r.get(c) for c in columns} for r in rows], indent=2, sort_keys=False) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
        for r in rows:
            cells = []
            for c in columns:
                v = r.get(c)
                cells.append(f"{v:.6g}" if isinstance(v, float) else _cell(v))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")
