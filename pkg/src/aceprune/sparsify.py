"""Masks from score matrices.

Within every comparison group the lowest-scoring entries are dropped. Ties
are broken positionally: the smaller column index is dropped first, then the
smaller row index. All sorts are stable sorts over that positional order, so
the result is a pure function of the scores.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .tensor import ShapeError, as_matrix


class PatternError(ValueError):
    pass


@dataclass(frozen=True)
class SparsityPattern:
    kind: Literal["unstructured", "semi"] = "unstructured"
    ratio: float = 0.0
    n: int = 0
    m: int = 0
    group: Literal["per_row", "per_layer"] = "per_row"

    def __post_init__(self):
        if self.kind == "unstructured":
            if not 0.0 <= self.ratio <= 1.0:
                raise PatternError(f"sparsity ratio {self.ratio} outside [0, 1]")
            if self.group not in ("per_row", "per_layer"):
                raise PatternError(f"unknown comparison group {self.group!r}")
        elif self.kind == "semi":
            if not 1 <= self.n <= self.m:
                raise PatternError(f"N:M pattern needs 1 <= n <= m, got {self.n}:{self.m}")
        else:
            raise PatternError(f"unknown pattern kind {self.kind!r}")

    @classmethod
    def unstructured(cls, ratio: float, group: str = "per_row") -> "SparsityPattern":
        return cls("unstructured", ratio=float(ratio), group=group)

    @classmethod
    def semi(cls, n: int, m: int) -> "SparsityPattern":
        return cls("semi", n=int(n), m=int(m))

    @property
    def is_dense(self) -> bool:
        return self.kind == "unstructured" and self.ratio == 0.0

    def check_shape(self, rows: int, cols: int) -> None:
        if self.kind == "semi" and cols % self.m:
            raise PatternError(f"{cols} columns are not divisible by m={self.m}")

    def __str__(self) -> str:
        if self.kind == "semi":
            return f"{self.n}:{self.m}"
        if self.ratio == 0.0:
            return "dense"
        return f"u:{self.ratio:g}" + (":layer" if self.group == "per_layer" else "")


def parse_pattern(text: str) -> SparsityPattern:
    """``dense``, ``u:<ratio>[:layer]`` or ``<n>:<m>``."""
    t = text.strip().lower()
    if t == "dense":
        return SparsityPattern.unstructured(0.0)
    parts = t.split(":")
    try:
        if parts[0] == "u" and len(parts) in (2, 3):
            group = "per_row"
            if len(parts) == 3:
                if parts[2] not in ("row", "layer"):
                    raise PatternError(f"bad comparison group in {text!r}")
                group = "per_layer" if parts[2] == "layer" else "per_row"
            return SparsityPattern.unstructured(float(parts[1]), group)
        if len(parts) == 2:
            return SparsityPattern.semi(int(parts[0]), int(parts[1]))
    except ValueError as exc:
        if isinstance(exc, PatternError):
            raise
        raise PatternError(f"cannot parse sparsity pattern {text!r}") from None
    raise PatternError(f"cannot parse sparsity pattern {text!r}")


@dataclass
class PruneMask:
    bits: np.ndarray
    pattern: SparsityPattern

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def to_u8(self) -> np.ndarray:
        return self.bits.astype(np.uint8)


@dataclass
class MaskReport:
    passed: bool
    group_counts: np.ndarray
    expected: int
    failures: list[tuple[int, int]] = field(default_factory=list)


def _drop_lowest_rows(scores: np.ndarray, n_drop: int) -> np.ndarray:
    keep = np.ones(scores.shape, dtype=bool)
    if n_drop:
        order = np.argsort(scores, axis=-1, kind="stable")
        np.put_along_axis(keep, order[..., :n_drop], False, axis=-1)
    return keep


def _build_rows(scores: np.ndarray, pattern: SparsityPattern) -> np.ndarray:
    rows, cols = scores.shape
    if pattern.kind == "semi":
        blocks = scores.reshape(rows, cols // pattern.m, pattern.m)
        return _drop_lowest_rows(blocks, pattern.m - pattern.n).reshape(rows, cols)
    return _drop_lowest_rows(scores, int(np.floor(pattern.ratio * cols)))


def build_mask(scores, pattern: SparsityPattern, jobs: int = 1) -> PruneMask:
    """Keep/drop decision for every entry of ``scores`` (True = keep).

    Row-grouped patterns may be split into row blocks across ``jobs``
    threads; the output does not depend on the split.
    """
    s = as_matrix(scores)
    if not np.all(np.isfinite(s)):
        raise PatternError("scores contain non-finite values")
    rows, cols = s.shape
    pattern.check_shape(rows, cols)

    if pattern.kind == "unstructured" and pattern.group == "per_layer":
        n_drop = int(np.floor(pattern.ratio * rows * cols))
        # column-major flattening makes the stable sort break ties by (col, row)
        flat = s.T.ravel()
        keep = np.ones(flat.shape, dtype=bool)
        if n_drop:
            keep[np.argsort(flat, kind="stable")[:n_drop]] = False
        return PruneMask(keep.reshape(cols, rows).T.copy(), pattern)

    if jobs <= 1 or rows < 2:
        return PruneMask(_build_rows(s, pattern), pattern)
    bounds = np.linspace(0, rows, min(jobs, rows) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(lambda b: _build_rows(s[b[0] : b[1]], pattern), zip(bounds[:-1], bounds[1:])))
    return PruneMask(np.vstack(parts), pattern)


def apply_mask(w, mask: PruneMask) -> np.ndarray:
    w = np.asarray(w)
    if w.shape != mask.bits.shape:
        raise ShapeError(f"weight {w.shape} and mask {mask.bits.shape} differ in shape")
    out = w.copy()
    out[~mask.bits] = 0.0
    return out


def verify_mask(mask: PruneMask) -> MaskReport:
    """Count kept entries per comparison group and check them against the
    declared pattern. Failures list ``(row, group)`` coordinates; for
    per-layer patterns the whole layer is group ``(0, 0)``."""
    bits = np.asarray(mask.bits, dtype=bool)
    p = mask.pattern
    rows, cols = bits.shape
    if p.kind == "semi":
        if cols % p.m:
            return MaskReport(False, np.zeros((rows, 0), dtype=int), p.n, [(r, -1) for r in range(rows)])
        counts = bits.reshape(rows, cols // p.m, p.m).sum(axis=-1)
        expected = p.n
    elif p.group == "per_layer":
        counts = np.array([[int(bits.sum())]])
        expected = rows * cols - int(np.floor(p.ratio * rows * cols))
    else:
        counts = bits.sum(axis=1, keepdims=True)
        expected = cols - int(np.floor(p.ratio * cols))
    bad = [(int(r), int(g)) for r, g in np.argwhere(counts != expected)]
    return MaskReport(not bad, counts, expected, bad)
