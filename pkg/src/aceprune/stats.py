"""Streaming per-feature calibration statistics.

Every activation-dependent metric reads from a :class:`FinalizedStats`. The
accumulators hold, per input feature j and over tokens t:

* ``sum_sq``     sum of x_tj^2
* ``sum_quad``   sum of x_tj^4
* ``sum_ratio``  sum of 1 / (1 - r_tj)
* ``sum_ratio1`` sum of r_tj
* ``sum_ratio2`` sum of r_tj^2
* ``min_sq`` / ``max_sq``  range of x_tj^2, which lets a constant feature
  report a variance of exactly zero

with the per-token normalised ratio ``r_tj = x_tj^2 / (lam + ||x_t||^2)``.
Because lam > 0 the ratio is strictly below one, so ``1/(1-r)`` and its
truncated power series ``1 + r + r^2`` are always defined.

All sums are strictly sequential over tokens (``np.add.accumulate``), so
feeding the same tokens in any batch split gives bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .tensor import as_matrix


class StatsError(ValueError):
    pass


_ARRAY_FIELDS = ("sum_sq", "sum_quad", "sum_ratio", "sum_ratio1", "sum_ratio2", "min_sq", "max_sq")


@dataclass(frozen=True)
class DampingPolicy:
    damp_factor: float = 0.01
    mode: Literal["proportional", "fixed"] = "proportional"
    fixed_lambda: float | None = None

    def __post_init__(self):
        if self.mode not in ("proportional", "fixed"):
            raise StatsError(f"unknown damping mode {self.mode!r}")
        if not self.damp_factor > 0:
            raise StatsError("damp_factor must be > 0")
        if self.mode == "fixed" and not (self.fixed_lambda is not None and self.fixed_lambda > 0):
            raise StatsError("fixed damping needs lambda > 0")

    @classmethod
    def fixed(cls, lam: float) -> "DampingPolicy":
        return cls(mode="fixed", fixed_lambda=float(lam))


@dataclass
class FeatureStats:
    d_in: int
    lam: float
    name: str = ""
    token_count: int = 0
    sum_sq: np.ndarray = field(default=None)
    sum_quad: np.ndarray = field(default=None)
    sum_ratio: np.ndarray = field(default=None)
    sum_ratio1: np.ndarray = field(default=None)
    sum_ratio2: np.ndarray = field(default=None)
    sum_token_norm_sq: float = 0.0
    min_sq: np.ndarray = field(default=None)
    max_sq: np.ndarray = field(default=None)

    def __post_init__(self):
        for key in _ARRAY_FIELDS:
            if getattr(self, key) is None:
                setattr(self, key, np.zeros(self.d_in, dtype=np.float64))

    def copy(self) -> "FeatureStats":
        return replace(
            self,
            sum_sq=self.sum_sq.copy(),
            sum_quad=self.sum_quad.copy(),
            sum_ratio=self.sum_ratio.copy(),
            sum_ratio1=self.sum_ratio1.copy(),
            sum_ratio2=self.sum_ratio2.copy(),
            min_sq=self.min_sq.copy(),
            max_sq=self.max_sq.copy(),
        )


@dataclass(frozen=True)
class FinalizedStats:
    token_count: int
    lam: float
    col_l2: np.ndarray
    mean_sq: np.ndarray
    mean_quad: np.ndarray
    var_sq: np.ndarray
    rational: np.ndarray
    moment: np.ndarray
    mean_token_norm_sq: float

    @property
    def d_in(self) -> int:
        return self.col_l2.shape[0]


def _seq_sum(prior, terms: np.ndarray):
    """Add the rows of ``terms`` onto ``prior`` one at a time, in row order."""
    stacked = np.concatenate([np.atleast_1d(np.asarray(prior, dtype=np.float64))[None], terms], axis=0)
    return np.add.accumulate(stacked, axis=0)[-1]


def token_energy(x: np.ndarray) -> np.ndarray:
    """||x_t||^2 per row, features summed in ascending order."""
    if x.shape[1] == 0:
        return np.zeros(x.shape[0])
    return np.add.accumulate(x * x, axis=1)[:, -1]


def new_stats(d_in: int, policy: DampingPolicy = DampingPolicy(), calib_preview=None, name: str = "") -> FeatureStats:
    if d_in < 1:
        raise StatsError("d_in must be >= 1")
    if policy.mode == "fixed":
        lam = float(policy.fixed_lambda)
    else:
        if calib_preview is None:
            raise StatsError("proportional damping needs a calibration preview batch")
        preview = as_matrix(calib_preview)
        if preview.shape[0] == 0:
            raise StatsError("calibration preview is empty")
        if preview.shape[1] != d_in:
            raise StatsError(f"preview width {preview.shape[1]} != d_in {d_in}")
        energy = token_energy(preview)
        lam = policy.damp_factor * float(_seq_sum(0.0, energy[:, None])[0]) / preview.shape[0]
        if not lam > 0:
            raise StatsError("calibration preview is all zeros; proportional lambda would be 0")
    return FeatureStats(d_in=d_in, lam=lam, name=name)


def token_ratios(x: np.ndarray, lam: float) -> np.ndarray:
    """r_tj = x_tj^2 / (lam + ||x_t||^2) for every token row."""
    x = np.asarray(x, dtype=np.float64)
    return (x * x) / (lam + token_energy(x))[:, None]


def accumulate(s: FeatureStats, token_batch) -> FeatureStats:
    """Fold a batch of token rows into ``s`` in place and return it."""
    x = as_matrix(token_batch)
    if x.shape[1] != s.d_in:
        raise StatsError(f"{s.name or 'layer'}: batch width {x.shape[1]} != d_in {s.d_in}")
    if x.shape[0] == 0:
        return s
    bad = ~np.isfinite(x)
    if bad.any():
        t = int(np.argwhere(bad)[0][0])
        raise StatsError(f"{s.name or 'layer'}: non-finite activation at token {s.token_count + t}")
    sq = x * x
    energy = token_energy(x)
    r = sq / (s.lam + energy)[:, None]
    s.sum_sq = _seq_sum(s.sum_sq, sq)
    s.sum_quad = _seq_sum(s.sum_quad, sq * sq)
    s.sum_ratio = _seq_sum(s.sum_ratio, 1.0 / (1.0 - r))
    s.sum_ratio1 = _seq_sum(s.sum_ratio1, r)
    s.sum_ratio2 = _seq_sum(s.sum_ratio2, r * r)
    s.sum_token_norm_sq = float(_seq_sum(s.sum_token_norm_sq, energy[:, None])[0])
    lo, hi = sq.min(axis=0), sq.max(axis=0)
    if s.token_count:
        lo, hi = np.minimum(s.min_sq, lo), np.maximum(s.max_sq, hi)
    s.min_sq, s.max_sq = lo, hi
    s.token_count += x.shape[0]
    return s


def merge(a: FeatureStats, b: FeatureStats) -> FeatureStats:
    """Element-wise sum of two shards; ``a`` is the earlier shard."""
    if a.d_in != b.d_in:
        raise StatsError(f"d_in mismatch: {a.d_in} vs {b.d_in}")
    if a.lam != b.lam:
        raise StatsError(f"lambda mismatch: {a.lam!r} vs {b.lam!r}; ratios are not mergeable")
    return FeatureStats(
        d_in=a.d_in,
        lam=a.lam,
        name=a.name or b.name,
        token_count=a.token_count + b.token_count,
        sum_sq=a.sum_sq + b.sum_sq,
        sum_quad=a.sum_quad + b.sum_quad,
        sum_ratio=a.sum_ratio + b.sum_ratio,
        sum_ratio1=a.sum_ratio1 + b.sum_ratio1,
        sum_ratio2=a.sum_ratio2 + b.sum_ratio2,
        sum_token_norm_sq=a.sum_token_norm_sq + b.sum_token_norm_sq,
        min_sq=_range_merge(np.minimum, a, b, "min_sq"),
        max_sq=_range_merge(np.maximum, a, b, "max_sq"),
    )


def _range_merge(op, a: FeatureStats, b: FeatureStats, key: str) -> np.ndarray:
    if not a.token_count:
        return getattr(b, key).copy()
    if not b.token_count:
        return getattr(a, key).copy()
    return op(getattr(a, key), getattr(b, key))


def finalize(s: FeatureStats) -> FinalizedStats:
    n = s.token_count
    if n < 1:
        raise StatsError(f"{s.name or 'layer'}: cannot finalize statistics over zero tokens")
    mean_sq = s.sum_sq / n
    mean_quad = s.sum_quad / n
    var_sq = np.maximum(mean_quad - mean_sq * mean_sq, 0.0)
    # a constant feature has zero variance; the moment difference only gets
    # there up to rounding. The range also caps the variance at (hi - lo)^2 / 4.
    spread = s.max_sq - s.min_sq
    var_sq = np.minimum(var_sq, spread * spread / 4.0)
    return FinalizedStats(
        token_count=n,
        lam=s.lam,
        col_l2=np.sqrt(s.sum_sq),
        mean_sq=mean_sq,
        mean_quad=mean_quad,
        var_sq=var_sq,
        rational=s.sum_ratio / n,
        moment=1.0 + s.sum_ratio1 / n + s.sum_ratio2 / n,
        mean_token_norm_sq=s.sum_token_norm_sq / n,
    )


def from_activations(x, policy: DampingPolicy = DampingPolicy(), name: str = "") -> FeatureStats:
    """Convenience: stats over one batch, using that batch as the damping preview."""
    x = as_matrix(x)
    s = new_stats(x.shape[1], policy, x if policy.mode == "proportional" else None, name=name)
    return accumulate(s, x)


# -- container round-trip ---------------------------------------------------


def to_tensors(stats: dict[str, FeatureStats]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for layer, s in stats.items():
        out[f"{layer}.count"] = np.array([float(s.token_count)])
        out[f"{layer}.lambda"] = np.array([s.lam])
        out[f"{layer}.sum_token_norm_sq"] = np.array([s.sum_token_norm_sq])
        for key in _ARRAY_FIELDS:
            out[f"{layer}.{key}"] = getattr(s, key)
    return out


def from_tensors(tensors: dict[str, np.ndarray]) -> dict[str, FeatureStats]:
    layers = sorted(name[: -len(".count")] for name in tensors if name.endswith(".count"))
    out: dict[str, FeatureStats] = {}
    for layer in layers:
        try:
            arrays = {key: np.asarray(tensors[f"{layer}.{key}"], dtype=np.float64).ravel() for key in _ARRAY_FIELDS}
            lam = float(tensors[f"{layer}.lambda"].ravel()[0])
            count = int(tensors[f"{layer}.count"].ravel()[0])
            energy = float(tensors[f"{layer}.sum_token_norm_sq"].ravel()[0])
        except KeyError as exc:
            raise StatsError(f"stats file is missing {exc.args[0]}") from None
        out[layer] = FeatureStats(
            d_in=arrays["sum_sq"].shape[0], lam=lam, name=layer, token_count=count, sum_token_norm_sq=energy, **arrays
        )
    return out
