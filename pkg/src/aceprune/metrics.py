"""Per-weight importance scores.

Weights follow the ``(d_out, d_in)`` convention, so column j of ``w`` pairs
with input feature j of the calibration statistics. Every scorer computes
its per-column and per-row factors once and broadcasts them, so a score
depends only on its own weight and those factors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .stats import FinalizedStats
from .tensor import ShapeError, as_matrix


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricKind:
    tag: Literal["magnitude", "wanda", "ria", "sgptdiag", "cosp", "varp", "cosp+varp"]
    ria_exponent: float = 0.5
    varp_form: Literal["rational", "moment"] = "rational"
    # 2 scores with |W|^2 instead of |W|, the squared-weight form of VarP
    varp_weight_power: int = 1

    def __post_init__(self):
        if self.tag not in ("magnitude", "wanda", "ria", "sgptdiag", "cosp", "varp", "cosp+varp"):
            raise MetricError(f"unknown metric {self.tag!r}")
        if not 0 < self.ria_exponent <= 1:
            raise MetricError("RIA exponent must lie in (0, 1]")
        if self.varp_form not in ("rational", "moment"):
            raise MetricError(f"unknown VarP form {self.varp_form!r}")
        if self.varp_weight_power not in (1, 2):
            raise MetricError("VarP weight power must be 1 or 2")

    @property
    def needs_stats(self) -> bool:
        return self.tag != "magnitude"

    def __str__(self) -> str:
        if self.tag == "ria":
            return f"ria:{self.ria_exponent:g}"
        if self.tag == "varp":
            return f"varp:{self.varp_form}" + (":w2" if self.varp_weight_power == 2 else "")
        return self.tag


def parse_metric(text: str) -> MetricKind:
    """Parse ``magnitude``, ``wanda``, ``ria[:a]``, ``sgptdiag``, ``cosp``,
    ``varp[:rational|moment][:w2]`` or ``cosp+varp``."""
    head, _, rest = text.strip().lower().partition(":")
    if head == "ria":
        if not rest:
            return MetricKind("ria")
        try:
            return MetricKind("ria", ria_exponent=float(rest))
        except ValueError:
            raise MetricError(f"bad RIA exponent in {text!r}") from None
    if head == "varp":
        parts = [p for p in rest.split(":") if p]
        form, power = "rational", 1
        for p in parts:
            if p in ("rational", "moment"):
                form = p
            elif p == "w2":
                power = 2
            else:
                raise MetricError(f"bad VarP option {p!r} in {text!r}")
        return MetricKind("varp", varp_form=form, varp_weight_power=power)
    if rest:
        raise MetricError(f"metric {head!r} takes no options")
    return MetricKind(head)


def _check(w, stats: FinalizedStats | None) -> np.ndarray:
    w = as_matrix(w)
    if not np.all(np.isfinite(w)):
        raise MetricError("weight matrix has non-finite entries")
    if stats is not None and stats.d_in != w.shape[1]:
        raise ShapeError(f"stats cover {stats.d_in} features but the weight has {w.shape[1]} columns")
    return w


def _guarded_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    np.divide(num, den, out=out, where=np.broadcast_to(den != 0, out.shape))
    return out


def cosine_geometry(w: np.ndarray) -> np.ndarray:
    """|w_ij| / RMS of column j times the l2 norm of row i.

    The relative angular-deviation factor shared by CosP and CosP+VarP.
    All-zero columns get factor 0.
    """
    a = np.abs(w)
    col_rms = np.sqrt(np.sum(w * w, axis=0) / w.shape[0])
    row_norm = np.sqrt(np.sum(w * w, axis=1))
    return _guarded_div(a, col_rms[None, :]) * row_norm[:, None]


def score_magnitude(w) -> np.ndarray:
    return np.abs(_check(w, None))


def score_wanda(w, stats: FinalizedStats) -> np.ndarray:
    w = _check(w, stats)
    return np.abs(w) * stats.col_l2[None, :]


def score_ria(w, stats: FinalizedStats, a: float = 0.5) -> np.ndarray:
    """Relative importance plus activation: column- and row-relative |w|
    scaled by ``col_l2 ** a``. Zero-sum rows or columns contribute 0."""
    if not 0 < a <= 1:
        raise MetricError("RIA exponent must lie in (0, 1]")
    w = _check(w, stats)
    aw = np.abs(w)
    rel = _guarded_div(aw, np.sum(aw, axis=0)[None, :]) + _guarded_div(aw, np.sum(aw, axis=1)[:, None])
    return rel * (stats.col_l2 ** a)[None, :]


def score_sparsegpt_diag(w, stats: FinalizedStats) -> np.ndarray:
    """w^2 divided by the diagonal of the damped inverse Hessian.

    Uses the per-token rank-one closed form averaged over tokens,
    ``1 / diag_j = lam / (1 - r_tj)``, which the stats already carry.
    """
    w = _check(w, stats)
    return (w * w) * (stats.lam * stats.rational)[None, :]


def score_cosp(w, stats: FinalizedStats) -> np.ndarray:
    w = _check(w, stats)
    return np.abs(w) * stats.col_l2[None, :] * cosine_geometry(w)


def score_varp(w, stats: FinalizedStats, form: str = "rational", weight_power: int = 1) -> np.ndarray:
    w = _check(w, stats)
    if form == "rational":
        factor = stats.rational
    elif form == "moment":
        factor = stats.moment
    else:
        raise MetricError(f"unknown VarP form {form!r}")
    aw = np.abs(w)
    if weight_power == 2:
        aw = aw * aw
    return aw * factor[None, :]


def score_cosp_varp(w, stats: FinalizedStats) -> np.ndarray:
    w = _check(w, stats)
    return np.abs(w) * stats.rational[None, :] * cosine_geometry(w)


def score(kind: MetricKind, w, stats: FinalizedStats | None) -> np.ndarray:
    if kind.needs_stats and stats is None:
        raise MetricError(f"metric {kind} needs calibration statistics")
    if kind.tag == "magnitude":
        return score_magnitude(w)
    if kind.tag == "wanda":
        return score_wanda(w, stats)
    if kind.tag == "ria":
        return score_ria(w, stats, kind.ria_exponent)
    if kind.tag == "sgptdiag":
        return score_sparsegpt_diag(w, stats)
    if kind.tag == "cosp":
        return score_cosp(w, stats)
    if kind.tag == "varp":
        return score_varp(w, stats, kind.varp_form, kind.varp_weight_power)
    return score_cosp_varp(w, stats)
