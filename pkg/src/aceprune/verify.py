"""The self-verification battery behind ``ace-prune verify``.

Every check draws its own generator from a child of one master seed, runs a
fixed number of fuzz trials against an independent oracle and reports the
worst error it saw. ``fault="sign-flip"`` negates every score on the
scoring path so the battery can be shown to catch a broken build.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import metrics, oracle
from .metrics import MetricKind
from .sparsify import SparsityPattern, build_mask, verify_mask
from .stats import DampingPolicy, accumulate, finalize, from_activations, merge, new_stats, token_ratios

Scorer = Callable[[MetricKind, np.ndarray, object], np.ndarray]
FAULTS = ("sign-flip",)


@dataclass
class CheckResult:
    name: str
    samples: int
    max_error: float
    tolerance: float
    passed: bool
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.max_error = float(self.max_error)

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no inf/nan
        if not math.isfinite(d["max_error"]):
            d["max_error"] = str(d["max_error"])
        return d


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = np.maximum(np.abs(b), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


# -- oracle-level checks ------------------------------------------------------


def check_sherman_morrison(rng, trials: int = 200) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 65))
        lam = float(10 ** rng.uniform(-3, 1))
        x = rng.normal(size=d) * 10 ** rng.uniform(-1, 1)
        exact = oracle.exact_inverse_diag(x, lam)
        closed = [oracle.sherman_morrison_diag(oracle.DiffProbe(x, lam, j)) for j in range(d)]
        worst = max(worst, _rel(closed, exact))
    return CheckResult("sherman_morrison_vs_inverse", trials, worst, 1e-8, worst <= 1e-8)


def check_diff_example(rng) -> CheckResult:
    probe = oracle.DiffProbe(np.array([1.0, 1.0]), 2.0, 0)
    literal = abs(oracle.sherman_morrison_diag(probe) - oracle.wanda_approx_diag(probe))
    err = max(abs(oracle.diff_exact(probe) - 1 / 3), abs(literal - 1 / 3))
    return CheckResult("diff_exact_worked_example", 1, err, 1e-12, err <= 1e-12)


def check_diff_single_feature(rng, trials: int = 100) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 17))
        x = np.zeros(d)
        j = int(rng.integers(d))
        x[j] = rng.normal() * 10 ** rng.uniform(-2, 2)
        worst = max(worst, oracle.diff_exact(oracle.DiffProbe(x, float(10 ** rng.uniform(-3, 1)), j)))
    return CheckResult("diff_exact_single_feature_is_zero", trials, worst, 0.0, worst == 0.0)


def check_diff_series(rng, trials: int = 500) -> CheckResult:
    """Where r <= 0.1 the linearised difference sits above the exact one, and
    the gap is the series tail (the two agree up to rounding)."""
    worst, n = 0.0, 0
    below = True
    while n < trials:
        d = int(rng.integers(2, 33))
        x = rng.normal(size=d)
        lam = float(10 ** rng.uniform(-1, 2))
        j = int(rng.integers(d))
        p = oracle.DiffProbe(x, lam, j)
        if x[j] ** 2 / (lam + x @ x) > 0.1:
            continue
        n += 1
        first, exact = oracle.diff_first_order(p), oracle.diff_exact(p)
        below &= exact <= first
        worst = max(worst, abs((first - exact) - oracle.series_remainder(p)) / first)
    return CheckResult("diff_first_order_within_tail", trials, worst, 1e-12, below and worst <= 1e-12)


def _efficiency_reps(rng, lengths, reps: int = 16, d: int = 64):
    return [oracle.efficiency_curve(rng.normal(size=(max(lengths), d)), lengths) for _ in range(reps)]


def check_efficiency_law(rng) -> CheckResult:
    lengths = [64, 128, 256]
    worst = 0.0
    reps = _efficiency_reps(rng, lengths)
    for curve in reps:
        for pt in curve:
            worst = max(worst, abs(pt.mean_diff * (pt.n + 1) / pt.mean_sq - 1.0))
    return CheckResult("efficiency_inverse_length_law", len(reps) * len(lengths), worst, 0.10, worst <= 0.10)


def check_efficiency_monotone(rng) -> CheckResult:
    lengths = [4, 16, 64, 256]
    vals = np.array([[pt.mean_diff for pt in c] for c in _efficiency_reps(rng, lengths)])
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(vals.shape[0])
    worst = -math.inf
    for a in range(len(lengths) - 1):
        slack = 2.0 * math.hypot(se[a], se[a + 1])
        worst = max(worst, (mean[a + 1] - mean[a]) - slack)
    detail = " ".join(f"N={n}:{m:.4g}" for n, m in zip(lengths, mean))
    return CheckResult("efficiency_monotone_in_length", vals.size, max(worst, 0.0), 0.0, worst <= 0.0, detail)


def check_lemma_quadratic(rng, probes: int = 64, delta: float = 1e-3) -> CheckResult:
    ratios = []
    while len(ratios) < probes:
        a = rng.normal(size=8)
        k = int(rng.integers(8))
        if abs(a[k]) <= 2 * delta:
            continue
        e1 = oracle.lemma_check(oracle.LemmaProbe(a, k, delta)).err
        e2 = oracle.lemma_check(oracle.LemmaProbe(a, k, delta / 2)).err
        ratios.append(e2 / e1)
    med = float(np.median(ratios))
    ok = 0.22 <= med <= 0.28
    return CheckResult(
        "lemma_quadratic_convergence", probes, abs(med - 0.25), 0.03, ok, f"median err(d/2)/err(d) = {med:.4f}"
    )


def check_holder(rng, trials: int = 1000) -> CheckResult:
    fails = 0
    for _ in range(trials):
        n = int(rng.integers(1, 33))
        if not oracle.holder_check(rng.normal(size=n), rng.normal(size=n) * 10 ** rng.uniform(-3, 3)):
            fails += 1
    a = rng.normal(size=9)
    b = np.full(9, 1.7)
    tight = abs(np.sum(np.abs(a * b)) - np.sum(np.abs(a)) * 1.7)
    return CheckResult("holder_step", trials, float(fails) + tight, 1e-12, fails == 0 and tight <= 1e-12)


def check_cos_score_ordering(rng, trials: int = 1000) -> CheckResult:
    fails, n = 0, 0
    while n < trials:
        m, d = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        w, x = rng.normal(size=(m, d)), rng.normal(size=d)
        t, j = int(rng.integers(m)), int(rng.integers(d))
        try:
            exact = oracle.relative_cos_score_exact(w, x, t, j)
            bound = oracle.relative_cos_lower_bound(w, x, t, j)
        except oracle.OracleError:
            continue
        n += 1
        fails += exact < bound * (1 - 1e-12)
    return CheckResult("cos_score_above_holder_bound", trials, float(fails), 0.0, fails == 0)


# -- stats / metrics / sparsify invariants -----------------------------------


def check_variance_identity(rng, streams: int = 100) -> CheckResult:
    worst = 0.0
    zero_ok = True
    for i in range(streams):
        n, d = int(rng.integers(1, 200)), int(rng.integers(1, 9))
        if i % 5 == 0:
            x = np.tile(rng.normal(size=d) * 10 ** rng.uniform(-2, 2), (n, 1))
        else:
            x = rng.normal(size=(n, d)) * 10 ** rng.uniform(-2, 2, size=d)
        f = finalize(from_activations(x, DampingPolicy.fixed(1.0)))
        sq = x * x
        two_pass = np.mean((sq - sq.mean(axis=0)) ** 2, axis=0)
        scale = np.maximum(1.0, f.mean_quad)
        worst = max(worst, float(np.max(np.abs(f.var_sq - two_pass) / scale)))
        if i % 5 == 0:
            zero_ok &= bool(np.all(f.var_sq == 0.0))
    return CheckResult("variance_identity", streams, worst, 1e-10, worst <= 1e-10 and zero_ok)


def check_power_series(rng, batches: int = 100) -> CheckResult:
    worst = -math.inf
    for _ in range(batches):
        x = rng.normal(size=(int(rng.integers(1, 64)), int(rng.integers(1, 17)))) * 10 ** rng.uniform(-2, 2)
        s = from_activations(x)
        f = finalize(s)
        r = token_ratios(x, s.lam)
        tail = np.mean(r**3 / (1 - r), axis=0)
        gap = f.rational - f.moment
        slack = 1e-12 * f.rational
        worst = max(
            worst,
            float(np.max(f.moment - f.rational - slack)),
            float(np.max(1.0 - f.moment - slack)),
            float(np.max(gap - tail - slack)),
        )
    return CheckResult("power_series_bracket", batches, max(worst, 0.0), 0.0, worst <= 0.0)


def check_stats_sharding(rng, trials: int = 50) -> CheckResult:
    """Any batch split gives identical sums; merged shards agree to 1e-10."""
    worst = 0.0
    exact = True
    for _ in range(trials):
        x = rng.normal(size=(int(rng.integers(2, 80)), 6))
        policy = DampingPolicy.fixed(float(10 ** rng.uniform(-2, 1)))
        whole = from_activations(x, policy)
        cut = int(rng.integers(1, x.shape[0]))
        split = accumulate(accumulate(new_stats(6, policy), x[:cut]), x[cut:])
        exact &= bool(np.array_equal(whole.sum_ratio, split.sum_ratio) and np.array_equal(whole.sum_quad, split.sum_quad))
        merged = merge(accumulate(new_stats(6, policy), x[:cut]), accumulate(new_stats(6, policy), x[cut:]))
        for key in ("sum_sq", "sum_quad", "sum_ratio", "sum_ratio1", "sum_ratio2"):
            worst = max(worst, _rel(getattr(merged, key), getattr(whole, key)))
    return CheckResult("stats_sharding", trials, worst, 1e-10, exact and worst <= 1e-10)


_ORACLE_METRICS = ("wanda", "ria", "sgptdiag", "cosp", "varp", "varp:moment", "cosp+varp")


def check_metric_oracles(rng, scorer: Scorer, layers: int = 50) -> CheckResult:
    worst = 0.0
    for _ in range(layers):
        rows, cols = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        w = rng.normal(size=(rows, cols))
        x = rng.normal(size=(int(rng.integers(2, 16)), cols)) * 10 ** rng.uniform(-1, 1, size=cols)
        lam = oracle.naive_proportional_lambda(x)
        fin = finalize(from_activations(x))
        for text in _ORACLE_METRICS:
            kind = metrics.parse_metric(text)
            got = scorer(kind, w, fin)
            want = oracle.naive_scores(kind.tag, w, x, lam, kind.ria_exponent, kind.varp_form)
            worst = max(worst, _rel(got, want))
    return CheckResult("metrics_vs_naive_loops", layers * len(_ORACLE_METRICS), worst, 1e-12, worst <= 1e-12)


def check_argsort_invariance(rng, scorer: Scorer, trials: int = 20) -> CheckResult:
    pattern = SparsityPattern.semi(2, 4)
    flips = 0
    for _ in range(trials):
        w = rng.normal(size=(8, 16))
        x = rng.normal(size=(12, 16)) * 10 ** rng.uniform(-1, 1, size=16)
        fin = finalize(from_activations(x))
        for text in ("cosp", "cosp+varp"):
            kind = metrics.parse_metric(text)
            base = build_mask(scorer(kind, w, fin), pattern).bits
            for c in (0.1, 3.0, 100.0):
                flips += not np.array_equal(base, build_mask(scorer(kind, c * w, fin), pattern).bits)
        for text in ("wanda", "ria", "varp"):
            kind = metrics.parse_metric(text)
            base = build_mask(scorer(kind, w, fin), pattern).bits
            for c in (0.1, 3.0, 100.0):
                scaled = finalize(from_activations(c * x))
                flips += not np.array_equal(base, build_mask(scorer(kind, w, scaled), pattern).bits)
    return CheckResult("mask_scale_invariance", trials * 15, float(flips), 0.0, flips == 0)


def check_mask_contracts(rng, trials: int = 500) -> CheckResult:
    patterns = [
        SparsityPattern.semi(2, 4),
        SparsityPattern.semi(4, 8),
        SparsityPattern.unstructured(0.5),
        SparsityPattern.unstructured(0.5, "per_layer"),
    ]
    fails = 0
    for i in range(trials):
        p = patterns[i % len(patterns)]
        rows = int(rng.integers(1, 24))
        cols = 8 * int(rng.integers(1, 6))
        s = rng.normal(size=(rows, cols))
        if i % 3 == 0:
            s = np.round(s)  # heavy ties
        m1 = build_mask(s, p, jobs=1)
        m4 = build_mask(s, p, jobs=4)
        fails += (not verify_mask(m1).passed) or not np.array_equal(m1.bits, m4.bits)
    return CheckResult("mask_contracts", trials, float(fails), 0.0, fails == 0)


def check_score_drops_lowest(rng, scorer: Scorer, trials: int = 50) -> CheckResult:
    """Dropped weights are the lowest-|w| ones of each group under magnitude."""
    fails = 0
    kind = metrics.parse_metric("magnitude")
    for _ in range(trials):
        w = rng.normal(size=(6, 16))
        keep = build_mask(scorer(kind, w, None), SparsityPattern.semi(2, 4)).bits
        a = np.abs(w).reshape(6, 4, 4)
        kept = np.where(keep.reshape(6, 4, 4), a, np.inf).min(axis=-1)
        dropped = np.where(keep.reshape(6, 4, 4), -np.inf, a).max(axis=-1)
        fails += bool(np.any(dropped > kept))
    return CheckResult("masks_drop_lowest_scores", trials, float(fails), 0.0, fails == 0)


def run_battery(seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    scorer: Scorer = metrics.score
    if fault == "sign-flip":
        scorer = lambda kind, w, s: -metrics.score(kind, w, s)  # noqa: E731

    plain = [
        check_sherman_morrison,
        check_diff_example,
        check_diff_single_feature,
        check_diff_series,
        check_efficiency_law,
        check_efficiency_monotone,
        check_lemma_quadratic,
        check_holder,
        check_cos_score_ordering,
        check_variance_identity,
        check_power_series,
        check_stats_sharding,
        check_mask_contracts,
    ]
    scored = [check_metric_oracles, check_argsort_invariance, check_score_drops_lowest]
    children = np.random.SeedSequence(seed).spawn(len(plain) + len(scored))
    out = [fn(np.random.default_rng(ss)) for fn, ss in zip(plain, children)]
    out += [fn(np.random.default_rng(ss), scorer) for fn, ss in zip(scored, children[len(plain) :])]
    return out
