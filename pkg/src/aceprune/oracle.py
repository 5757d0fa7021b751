"""Brute-force checks of the derivations behind CosP, VarP and the
calibration-efficiency argument.

Each function evaluates one side of a claimed identity or inequality
directly (exact cosines, exact inverses, exact differences) so it can be
compared against the closed forms used on the scoring path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DegenerateVectorError, as_matrix, cosine_similarity, invert_spd, l2_norm


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class LemmaProbe:
    a: np.ndarray
    k: int
    delta: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if l2_norm(a) == 0.0:
            raise OracleError("lemma probe needs a nonzero vector")
        if not abs(self.delta) < abs(a[self.k]) and self.delta != 0.0:
            raise OracleError("lemma probe needs |delta| < |a_k|")


@dataclass(frozen=True)
class DiffProbe:
    x: np.ndarray
    lam: float
    j: int

    def __post_init__(self):
        if not self.lam > 0:
            raise OracleError("lambda must be > 0")


@dataclass(frozen=True)
class LemmaResult:
    exact: float
    approx: float
    err: float


def exact_cosine_loss(w, x, i: int, j: int) -> float:
    """1 - cos(Wx, W'x) where W' zeroes entry (i, j)."""
    w = as_matrix(w)
    x = np.asarray(x, dtype=np.float64).ravel()
    a = w @ x
    pruned = w.copy()
    pruned[i, j] = 0.0
    ap = pruned @ x
    if w[i, j] == 0.0 or x[j] == 0.0:
        if not np.any(a):
            raise DegenerateVectorError("dense output is zero")
        return 0.0
    try:
        return 1.0 - cosine_similarity(a, ap)
    except DegenerateVectorError:
        raise DegenerateVectorError(f"zero output vector when pruning ({i}, {j})") from None


def lemma_check(probe: LemmaProbe) -> LemmaResult:
    """Exact cosine loss of perturbing a_k by delta against the first-order
    estimate ``-a_k * delta / ||a||^2``."""
    a = np.asarray(probe.a, dtype=np.float64)
    if probe.delta == 0.0:
        return LemmaResult(0.0, 0.0, 0.0)
    b = a.copy()
    b[probe.k] += probe.delta
    exact = 1.0 - cosine_similarity(a, b)
    approx = -a[probe.k] * probe.delta / float(a @ a)
    return LemmaResult(exact, approx, abs(exact - approx))


def holder_check(a, b) -> bool:
    a = np.abs(np.asarray(a, dtype=np.float64).ravel())
    b = np.abs(np.asarray(b, dtype=np.float64).ravel())
    if a.shape != b.shape:
        raise OracleError("vectors differ in length")
    if a.size == 0:
        return True
    return float(np.sum(a * b)) <= float(np.sum(a)) * float(np.max(b)) + 1e-12


def relative_cos_score_exact(w, x, t: int, j: int = 0) -> float:
    """Relative cosine-loss score of entry (t, j), evaluated literally:
    ``sqrt(m) |w_tj| |row_t . x| / sqrt(sum_i w_ij^2 (row_i . x)^2)``."""
    w = as_matrix(w)
    y = w @ np.asarray(x, dtype=np.float64).ravel()
    den = float(np.sqrt(np.sum(w[:, j] ** 2 * y**2)))
    if den == 0.0:
        raise OracleError(f"degenerate column {j}: denominator is zero")
    return float(np.sqrt(w.shape[0]) * abs(w[t, j]) * abs(y[t]) / den)


def relative_cos_lower_bound(w, x, t: int, j: int = 0) -> float:
    """The Hoelder lower bound on :func:`relative_cos_score_exact`:
    ``|w_tj| / RMS(column j) * |row_t . x| / max_i |row_i . x|``."""
    w = as_matrix(w)
    y = np.abs(w @ np.asarray(x, dtype=np.float64).ravel())
    rms = float(np.sqrt(np.sum(w[:, j] ** 2) / w.shape[0]))
    if rms == 0.0 or y.max() == 0.0:
        raise OracleError(f"degenerate column {j}")
    return float(abs(w[t, j]) / rms * y[t] / y.max())


def sherman_morrison_diag(probe: DiffProbe) -> float:
    """1 / diag_j((x^T x + lam I)^-1) via the rank-one closed form."""
    x = np.asarray(probe.x, dtype=np.float64).ravel()
    k = float(x @ x)
    lam = probe.lam
    return lam * (lam + k) / (lam + k - x[probe.j] ** 2)


def exact_inverse_diag(x, lam: float) -> np.ndarray:
    """1 / diag((x^T x + lam I)^-1) by explicit elimination, all features."""
    x = np.asarray(x, dtype=np.float64).ravel()
    h = np.outer(x, x) + lam * np.eye(x.size)
    return 1.0 / np.diag(invert_spd(h))


def wanda_approx_diag(probe: DiffProbe) -> float:
    x = np.asarray(probe.x, dtype=np.float64).ravel()
    return x[probe.j] ** 2 + probe.lam


def diff_exact(probe: DiffProbe) -> float:
    """|closed form - x_j^2 - lam|, simplified without cancellation to
    ``x_j^2 (k - x_j^2) / (lam + k - x_j^2)`` with k = ||x||^2."""
    x = np.asarray(probe.x, dtype=np.float64).ravel()
    xj2 = x[probe.j] ** 2
    others = np.delete(x, probe.j)
    rest = float(others @ others)
    if rest == 0.0:
        return 0.0
    return xj2 * rest / (probe.lam + rest)


def diff_first_order(probe: DiffProbe) -> float:
    """The linearised difference ``k x_j^2 / (lam + k)``."""
    x = np.asarray(probe.x, dtype=np.float64).ravel()
    k = float(x @ x)
    return k * x[probe.j] ** 2 / (probe.lam + k)


def series_remainder(probe: DiffProbe) -> float:
    """Tail dropped by truncating lam / (1 - r) after the linear term:
    ``lam r^2 / (1 - r)`` with r = x_j^2 / (lam + k). Bounds
    ``|diff_exact - diff_first_order|``."""
    x = np.asarray(probe.x, dtype=np.float64).ravel()
    r = x[probe.j] ** 2 / (probe.lam + float(x @ x))
    return probe.lam * r * r / (1.0 - r)


def mean_diff(tokens, lam: float) -> float:
    """Mean of :func:`diff_exact` over every token row and feature."""
    x = as_matrix(tokens)
    xj2 = x * x
    # energy of the other features; clamp the cancellation noise of the subtraction
    rest = np.maximum(np.sum(xj2, axis=1, keepdims=True) - xj2, 0.0)
    return float(np.mean(xj2 * rest / (lam + rest)))


@dataclass(frozen=True)
class EfficiencyPoint:
    n: int
    lam: float
    mean_diff: float
    mean_sq: float


def efficiency_curve(stream, lengths, lam: float | None = None) -> list[EfficiencyPoint]:
    """Mean exact diff over the first N tokens of ``stream`` for each N.

    With ``lam=None`` the damping follows the ``lam = N * k`` convention of
    the efficiency argument, k being the mean token energy of those N tokens;
    the linearised diff is then ``E[x_j^2] / (N + 1)``. Pass a number to hold
    lam fixed instead.
    """
    x = as_matrix(stream)
    out = []
    for n in lengths:
        n = int(n)
        if n < 1:
            raise OracleError("sequence length must be >= 1")
        if n > x.shape[0]:
            raise OracleError(f"stream exhausted: need {n} tokens, have {x.shape[0]}")
        head = x[:n]
        k = float(np.mean(np.sum(head * head, axis=1)))
        lam_n = n * k if lam is None else float(lam)
        if not lam_n > 0:
            raise OracleError("lambda must be > 0 (all-zero stream?)")
        out.append(EfficiencyPoint(n, lam_n, mean_diff(head, lam_n), float(np.mean(head * head))))
    return out


def naive_proportional_lambda(x, damp: float = 0.01) -> float:
    """damp * mean token energy, summed in plain Python loops."""
    x = as_matrix(x)
    total = 0.0
    for row in x:
        e = 0.0
        for v in row:
            e += float(v) * float(v)
        total += e
    return damp * total / x.shape[0]


def naive_scores(tag: str, w, x, lam: float, ria_exponent: float = 0.5, varp_form: str = "rational") -> np.ndarray:
    """Scores recomputed entry by entry from raw activations ``x`` (tokens x
    d_in), sharing no code with the vectorised scorers."""
    w = as_matrix(w)
    x = as_matrix(x)
    rows, cols = w.shape
    n_tok = x.shape[0]
    col_l2, rational, moment, inv_diag = [], [], [], []
    for j in range(cols):
        sq = rat = m1 = m2 = sm = 0.0
        for t in range(n_tok):
            energy = 0.0
            for v in x[t]:
                energy += float(v) * float(v)
            xj2 = float(x[t, j]) ** 2
            r = xj2 / (lam + energy)
            sq += xj2
            rat += 1.0 / (1.0 - r)
            m1 += r
            m2 += r * r
            sm += lam * (lam + energy) / (lam + energy - xj2)
        inv_diag.append(sm / n_tok)
        col_l2.append(sq**0.5)
        rational.append(rat / n_tok)
        moment.append(1.0 + m1 / n_tok + m2 / n_tok)
    col_abs = [sum(abs(float(w[i, j])) for i in range(rows)) for j in range(cols)]
    row_abs = [sum(abs(float(w[i, j])) for j in range(cols)) for i in range(rows)]
    col_rms = [(sum(float(w[i, j]) ** 2 for i in range(rows)) / rows) ** 0.5 for j in range(cols)]
    row_norm = [sum(float(w[i, j]) ** 2 for j in range(cols)) ** 0.5 for i in range(rows)]

    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            a = abs(float(w[i, j]))
            geom = a / col_rms[j] * row_norm[i] if col_rms[j] else 0.0
            if tag == "magnitude":
                v = a
            elif tag == "wanda":
                v = a * col_l2[j]
            elif tag == "ria":
                rel = (a / col_abs[j] if col_abs[j] else 0.0) + (a / row_abs[i] if row_abs[i] else 0.0)
                v = rel * col_l2[j] ** ria_exponent
            elif tag == "sgptdiag":
                v = a * a * inv_diag[j]
            elif tag == "cosp":
                v = a * col_l2[j] * geom
            elif tag == "varp":
                v = a * (rational[j] if varp_form == "rational" else moment[j])
            elif tag == "cosp+varp":
                v = a * rational[j] * geom
            else:
                raise OracleError(f"no naive scorer for {tag!r}")
            out[i, j] = v
    return out
