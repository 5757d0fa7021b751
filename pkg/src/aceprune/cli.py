"""``ace-prune``: calibration, pruning, evaluation and self-verification.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 a
verification check failed. Timings go to stderr and ``timing.json`` so that
every other output is reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import container, pipeline, verify
from .container import ContainerError
from .metrics import MetricError, parse_metric
from .refmodel import (
    CalibConfig,
    ModelError,
    default_manifest,
    init_model,
    load_model,
    sample_calibration,
    save_model,
    toy_corpus,
)
from .sparsify import PatternError, parse_pattern
from .stats import DampingPolicy, StatsError, from_tensors, to_tensors
from .tensor import ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4
STATS_FILE = "stats.acet"
MASKS_FILE = "masks.acet"
PRUNED_DIR = "model_pruned"
CORPUS_FILE = "corpus.txt"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _env_seed() -> int:
    raw = os.environ.get("ACE_SEED")
    if raw is None:
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"ACE_SEED must be an unsigned integer, got {raw!r}") from None
    if not 0 <= seed < 2**64:
        raise ConfigError("ACE_SEED must be an unsigned 64-bit integer")
    return seed


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _need_path(path: str | None, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{flag} {path!r} does not exist")
    return p


def _out_dir(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_model(path: str | None, flag: str = "--model"):
    p = _need_path(path, flag)
    try:
        return load_model(p)
    except (ContainerError, ModelError, ValueError, OSError) as exc:
        raise DataError(f"cannot load model from {p}: {exc}") from None


def _read_corpus(path: str | None) -> bytes:
    return _need_path(path, "--corpus").read_bytes()


def _calib(args) -> CalibConfig:
    cfg = CalibConfig(nsamples=args.nsamples, seqlen=args.seqlen, seed=args.seed, corpus=args.corpus)
    try:
        cfg.validate()
    except ModelError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _write_timing(out: Path, timing: dict) -> None:
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")


def _stats_metadata(args) -> dict:
    return {"calibration": {"nsamples": args.nsamples, "seqlen": args.seqlen, "seed": args.seed}}


# -- subcommands --------------------------------------------------------------


def cmd_init_toy(args) -> int:
    out = _out_dir(args)
    model = init_model(default_manifest(seed=args.seed))
    save_model(model, out / "model")
    (out / CORPUS_FILE).write_bytes(toy_corpus(args.seed))
    print(f"wrote {out / 'model'} and {out / CORPUS_FILE}")
    return EXIT_OK


def _run_stats(args, model, data: bytes):
    calib = _calib(args)
    try:
        return pipeline.calibrate(model, calib, data, DampingPolicy(damp_factor=args.damp), jobs=args.jobs)
    except ModelError as exc:
        raise DataError(str(exc)) from None


def cmd_stats(args) -> int:
    model = _load_model(args.model)
    data = _read_corpus(args.corpus)
    out = _out_dir(args)
    res = _run_stats(args, model, data)
    container.write_tensors(out / STATS_FILE, to_tensors(res.stats), "f64", _stats_metadata(args))
    _write_timing(out, {"calibration_seconds": res.seconds})
    _log(f"calibration: {res.seconds:.3f} s")
    print(f"wrote {out / STATS_FILE} ({len(res.stats)} layers, {args.nsamples * args.seqlen} tokens each)")
    return EXIT_OK


def cmd_prune(args) -> int:
    model = _load_model(args.model)
    metric = args.metric
    out = _out_dir(args)
    timing = {}
    stats = None
    if metric.needs_stats:
        stats_path = Path(args.stats) if args.stats else out / STATS_FILE
        if stats_path.exists():
            try:
                stats = from_tensors(container.read_tensors(stats_path))
            except (ContainerError, StatsError) as exc:
                raise DataError(f"cannot read statistics {stats_path}: {exc}") from None
        elif args.stats:
            raise ConfigError(f"--stats {args.stats!r} does not exist")
        else:
            res = _run_stats(args, model, _read_corpus(args.corpus))
            stats = res.stats
            container.write_tensors(out / STATS_FILE, to_tensors(stats), "f64", _stats_metadata(args))
            timing["calibration_seconds"] = res.seconds
            _log(f"calibration: {res.seconds:.3f} s")
    try:
        res = pipeline.prune(model, stats, metric, args.pattern, jobs=args.jobs)
    except PatternError as exc:
        raise ConfigError(str(exc)) from None
    except (ModelError, ShapeError) as exc:
        raise DataError(str(exc)) from None
    bad = pipeline.check_masks(res.masks)
    if bad:
        raise DataError(f"masks violate {args.pattern}: {', '.join(bad)}")
    save_model(res.model, out / PRUNED_DIR)
    container.write_tensors(
        out / PRUNED_DIR / MASKS_FILE,
        {name: m.to_u8() for name, m in res.masks.items()},
        "u8",
        {"pattern": str(args.pattern), "metric": str(metric)},
    )
    for name, secs in res.layer_seconds.items():
        _log(f"  {name}: {secs * 1e3:.2f} ms")
    _log(f"pruning: {res.total_seconds:.3f} s")
    timing.update({"pruning_seconds": res.total_seconds, "layer_seconds": res.layer_seconds})
    _write_timing(out, timing)
    print(f"wrote {out / PRUNED_DIR} ({metric}, {args.pattern})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    data = _read_corpus(args.corpus)
    dense = None
    if args.dense:
        dense = _load_model(args.dense, "--dense")
        if dense.manifest != model.manifest:
            raise DataError("dense reference and evaluated model have different manifests")
    else:
        _log("warning: no --dense reference given; reporting perplexity only")
    try:
        tokens = pipeline.eval_tokens(data, args.eval_tokens)
        ref = None
        if dense is not None:
            ref = pipeline.dense_reference(dense, tokens, sample_calibration(_calib(args), data))
        report = pipeline.evaluate(model, tokens, ref)
    except ModelError as exc:
        raise DataError(str(exc)) from None
    text = pipeline.render(report.rows(), pipeline.EVAL_COLUMNS, args.format)
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args)
        (out / f"report.{_ext(args.format)}").write_text(text)
    return EXIT_OK


def _ext(fmt: str) -> str:
    return {"csv": "csv", "json": "json", "markdown": "md"}[fmt]


COMPARE_COLUMNS = ("metric", "pattern", "seqlen", "perplexity", "frob_rel_mean", "calib_seconds", "prune_seconds", "error")


def cmd_compare(args) -> int:
    model = _load_model(args.model)
    data = _read_corpus(args.corpus)
    try:
        metrics_ = sorted({str(parse_metric(m)): parse_metric(m) for m in args.metrics.split(",")}.items())
        patterns = sorted({str(parse_pattern(p)): parse_pattern(p) for p in args.patterns.split(",")}.items())
        seqlens = sorted({int(s) for s in args.seqlens.split(",")})
    except (MetricError, PatternError, ValueError) as exc:
        raise ConfigError(f"bad grid: {exc}") from None
    try:
        tokens = pipeline.eval_tokens(data, args.eval_tokens)
        dense_ppl = pipeline.perplexity(model, tokens)
    except ModelError as exc:
        raise DataError(str(exc)) from None

    calibs, refs = {}, {}
    for seqlen in seqlens:
        cfg = CalibConfig(nsamples=args.nsamples, seqlen=seqlen, seed=args.seed)
        try:
            calibs[seqlen] = pipeline.calibrate(model, cfg, data, DampingPolicy(damp_factor=args.damp), args.jobs)
            acts = pipeline.capture_inputs(model, calibs[seqlen].samples)
            refs[seqlen] = pipeline.DenseReference(model, dense_ppl, acts)
        except ModelError as exc:
            calibs[seqlen] = exc
    rows = []
    for mname, metric in metrics_:
        for pname, pattern in patterns:
            for seqlen in seqlens:
                row = {"metric": mname, "pattern": pname, "seqlen": seqlen}
                cal = calibs[seqlen]
                try:
                    if isinstance(cal, Exception):
                        raise cal
                    res = pipeline.prune(model, cal.stats, metric, pattern, jobs=args.jobs)
                    rep = pipeline.evaluate(res.model, tokens, refs[seqlen])
                    row.update(
                        perplexity=rep.perplexity,
                        frob_rel_mean=sum(e.frob_rel for e in rep.layers) / len(rep.layers),
                        calib_seconds=cal.seconds,
                        prune_seconds=res.total_seconds,
                    )
                except (ModelError, PatternError, StatsError, ShapeError, ValueError) as exc:
                    row["error"] = f"{type(exc).__name__}: {exc}"
                rows.append(row)
    text = pipeline.render(rows, COMPARE_COLUMNS, args.format)
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args)
        (out / f"compare.{_ext(args.format)}").write_text(text)
    return EXIT_OK


VERIFY_COLUMNS = ("name", "passed", "samples", "max_error", "tolerance", "detail")


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    results = verify.run_battery(args.seed, fault=args.inject_fault)
    _log(f"verify: {time.perf_counter() - t0:.2f} s")
    rows = [r.to_dict() for r in results]
    report = {"seed": args.seed, "passed": all(r.passed for r in results), "checks": rows}
    if args.format == "json":
        sys.stdout.write(json.dumps(report, indent=2) + "\n")
    else:
        sys.stdout.write(pipeline.render(rows, VERIFY_COLUMNS, args.format))
        failed = [r.name for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    if args.out:
        out = _out_dir(args)
        (out / "verify.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _typed(parse):
    def conv(text):
        try:
            return parse(text)
        except (MetricError, PatternError) as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    conv.__name__ = parse.__name__
    return conv


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser(default_seed: int = 0) -> argparse.ArgumentParser:
    p = _Parser(prog="ace-prune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True, corpus=True, calib=True):
        if model:
            sp.add_argument("--model", help="model directory (manifest.json + weights.acet)")
        if corpus:
            sp.add_argument("--corpus", help="raw byte corpus")
        if calib:
            sp.add_argument("--nsamples", type=_positive, default=128)
            sp.add_argument("--seqlen", type=_positive, default=16)
            sp.add_argument("--damp", type=float, default=0.01, help="proportional damping factor")
        sp.add_argument("--seed", type=int, default=default_seed, help="default: $ACE_SEED or 0")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=_positive, default=1)

    sp = sub.add_parser("init-toy", help="write the default toy model and corpus fixture")
    common(sp, model=False, corpus=False, calib=False)
    sp.set_defaults(func=cmd_init_toy)

    sp = sub.add_parser("stats", help="collect calibration statistics")
    common(sp)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("prune", help="prune every linear layer of a model")
    common(sp)
    sp.add_argument("--metric", type=_typed(parse_metric), default=parse_metric("cosp+varp"))
    sp.add_argument("--pattern", type=_typed(parse_pattern), default=parse_pattern("2:4"))
    sp.add_argument("--stats", help="statistics file (default: <out>/stats.acet, else computed)")
    sp.set_defaults(func=cmd_prune)

    formats = {"choices": pipeline.REPORT_FORMATS, "default": "csv"}
    sp = sub.add_parser("eval", help="perplexity and reconstruction error")
    common(sp)
    sp.add_argument("--dense", help="dense reference model directory")
    sp.add_argument("--eval-tokens", type=_positive, default=pipeline.DEFAULT_EVAL_TOKENS)
    sp.add_argument("--format", **formats)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="metric x pattern x seqlen grid")
    common(sp)
    sp.add_argument("--metric", dest="metrics", default="wanda,cosp+varp", help="comma-separated metrics")
    sp.add_argument("--pattern", dest="patterns", default="2:4,u:0.5", help="comma-separated patterns")
    sp.add_argument("--seqlens", default=None, help="comma-separated calibration lengths (default: --seqlen)")
    sp.add_argument("--eval-tokens", type=_positive, default=pipeline.DEFAULT_EVAL_TOKENS)
    sp.add_argument("--format", **formats)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("verify", help="run the self-verification battery")
    common(sp, model=False, corpus=False, calib=False)
    sp.add_argument("--format", **formats)
    sp.add_argument("--inject-fault", choices=verify.FAULTS, default=None, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        seed = _env_seed()
    except ConfigError as exc:
        print(f"ace-prune: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = build_parser(seed).parse_args(argv)
    if not 0 <= args.seed < 2**64:
        print("ace-prune: error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "seqlens", "") is None:
        args.seqlens = str(args.seqlen)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ace-prune: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContainerError, StatsError, ModelError) as exc:
        print(f"ace-prune: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
