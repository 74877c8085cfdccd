"""Command-line front end.

Exit codes: 0 success, 1 validation failure, 2 argument error, 3 I/O error,
4 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .beam_sim import CORRECTIONS, MAX_BEAM_WIDTH, estimate_sigma_online, sweep_beam_width
from .diagnostics import (
    DEFAULT_MARGIN_THRESHOLD,
    DISPERSION_CAVEAT,
    detect_inversions,
    estimate_snr,
    labeled_scores,
    margin_distribution,
    recommend_beam_width,
)
from .evt_bias import PoolGeometry, TwoClassScorerModel, bias_report, max_useful_beam_width
from .stats_core import RandomStream
from .trace_io import (
    TraceFormatError,
    aggregate_macro,
    macro_rows,
    parse_beam_select_text,
    read_results_table,
    read_selection_jsonl,
    read_text,
    write_selection_jsonl,
)
from .validation import SUITES, run_suite

EXIT_OK, EXIT_VALIDATION, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 1, 2, 3, 4
WORKERS_ENV = "BEAMCAL_WORKERS"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest(subcommand: str, args: argparse.Namespace, started: str) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("func", "config") and not callable(v)}
    return {
        "subcommand": subcommand,
        "parameters": json.loads(json.dumps(params, default=str)),
        "seed": params.get("seed"),
        "tool_version": __version__,
        "started_at": started,
        "finished_at": _now(),
    }


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return "" if value is None else str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _finite(obj):
    """Replace infinities by strings so the output stays strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_IO) from None
    return out


def _model(args) -> TwoClassScorerModel:
    try:
        return TwoClassScorerModel(delta=args.delta, sigma=args.sigma, mu_w=getattr(args, "mu_w", 0.0))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None


# ---------------------------------------------------------------- khat


def cmd_khat(args) -> int:
    model = _model(args)
    if args.n is not None:
        if args.n < 1:
            raise CliError("--n must be >= 1", EXIT_USAGE)
        geometry = PoolGeometry(beam_width=args.k or 1, pool_size=args.n)
    else:
        k = args.k if args.k is not None else min(max_useful_beam_width(model), MAX_BEAM_WIDTH)
        if k < 1:
            raise CliError("--k must be >= 1", EXIT_USAGE)
        geometry = PoolGeometry(beam_width=k)
    report = bias_report(model, geometry)
    payload = {
        "delta": model.delta,
        "sigma": model.sigma,
        "beam_width": geometry.beam_width,
        "pool_size": geometry.pool_size,
        **report.as_dict(),
    }
    if args.format == "json":
        print(json.dumps(_finite(payload), indent=2))
    else:
        width = max(map(len, payload))
        for key, value in payload.items():
            print(f"{key:<{width}}  {_fmt(value)}")
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def _parse_ks(text) -> list[int]:
    if isinstance(text, list):
        return [int(k) for k in text]
    try:
        ks = [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise CliError(f"invalid beam widths: {text!r}", EXIT_USAGE) from None
    return ks


def cmd_simulate(args) -> int:
    started = _now()
    model = _model(args)
    ks = _parse_ks(args.ks)
    if not ks or min(ks) < 1 or max(ks) > MAX_BEAM_WIDTH:
        raise CliError(f"beam widths must lie in [1, {MAX_BEAM_WIDTH}]", EXIT_USAGE)
    if args.trials < 1 or args.depth < 1:
        raise CliError("--trials and --depth must be >= 1", EXIT_USAGE)
    if not 0.0 <= args.policy_accuracy <= 1.0:
        raise CliError("--policy-accuracy must lie in [0, 1]", EXIT_USAGE)
    out = _out_dir(args.out)
    result = sweep_beam_width(
        model, ks, args.depth, args.trials, RandomStream(args.seed),
        correction=args.correction, policy_accuracy=args.policy_accuracy,
        margin_log_enabled=args.log_selections, workers=args.workers,
    )
    header = ["beam_width", "success_rate", "standard_error", "trials", "seed"]
    corrected = args.correction == "bias_corrected"
    if corrected:
        header.append("fell_back_rate")
    rows = []
    for c in result.cells:
        row = [c.beam_width, c.success_rate, c.standard_error, c.trials, c.seed]
        if corrected:
            row.append(c.fell_back_rate)
        rows.append(row)
    try:
        _write_csv(out / "sweep.csv", header, rows)
        if args.log_selections:
            write_selection_jsonl(result.records, out / "selections.jsonl")
        _write_json(out / "manifest.json", _manifest("simulate", args, started))
    except OSError as exc:
        raise CliError(f"write failed: {exc}", EXIT_IO) from None
    print(json.dumps({"sweep": str(out / "sweep.csv"),
                      "cells": [dict(zip(header, r)) for r in rows]}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    if args.suite not in (*SUITES, "all"):
        raise CliError(f"unknown suite {args.suite!r}", EXIT_USAGE)
    if args.trials < 2:
        raise CliError("--trials must be >= 2", EXIT_USAGE)
    checks = run_suite(args.suite, args.trials, args.seed)
    ok = all(c.passed for c in checks)
    if args.format == "json":
        print(json.dumps({"passed": ok, "checks": [c.as_dict() for c in checks]}, indent=2))
    else:
        for c in checks:
            status = "PASS" if c.passed else "FAIL"
            print(f"{status}  {c.suite:<9} {c.name:<16} value={c.value:.6g} limit={c.limit:.6g} margin={c.margin:+.3g}")
        print(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return EXIT_OK if ok else EXIT_VALIDATION


# ---------------------------------------------------------------- diagnose


def _load_records(paths: list[str], fmt: str):
    records = []
    for path in paths:
        try:
            if fmt == "jsonl":
                records.extend(read_selection_jsonl(path))
            else:
                records.extend(parse_beam_select_text(read_text(path)))
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
        except TraceFormatError as exc:
            raise CliError(f"{path}: {exc}", EXIT_DATA) from None
    return records


def _load_results(path: str):
    try:
        return read_results_table(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except TraceFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from None


def cmd_diagnose(args) -> int:
    started = _now()
    if not args.inputs and not args.results:
        raise CliError("give trace inputs, --results, or both", EXIT_USAGE)
    if not args.threshold > 0:
        raise CliError("--threshold must be positive", EXIT_USAGE)
    records = _load_records(args.inputs, args.format) if args.inputs else []
    if args.inputs and not records:
        raise CliError("no selection records could be parsed", EXIT_DATA)
    results = _load_results(args.results) if args.results else None
    out = _out_dir(args.out)
    summary = {}
    try:
        if records:
            report = margin_distribution(records, args.threshold)
            _write_json(out / "margin_report.json", report.as_dict())
            _write_csv(out / "margin_histogram.csv", ["bin_lower", "bin_upper", "count"],
                       [list(b) for b in report.histogram])
            summary["margin"] = {
                "total_selections": report.total_selections,
                "fraction_below": report.fraction_below,
                "margins": report.margins[:20],
            }
            pairs = labeled_scores(records)
            if sum(c for _, c in pairs) >= 2 and sum(not c for _, c in pairs) >= 2:
                est = estimate_snr(pairs)
                rec = recommend_beam_width(est)
                snr = {"delta_hat": est.delta_hat, "sigma_hat": est.sigma_hat,
                       "n_correct": est.n_correct, "n_incorrect": est.n_incorrect,
                       "k_hat": rec.k_hat, "n_hat": rec.n_hat, "caveats": rec.caveats}
            else:
                spreads = [estimate_sigma_online(r.rewards) for r in records if len(r.rewards) >= 2]
                snr = {"dispersion_proxy": float(np.mean(spreads)) if spreads else None,
                       "caveats": ["no correctness labels: beam-width recommendation omitted",
                                   DISPERSION_CAVEAT]}
            _write_json(out / "snr.json", _finite(snr))
            summary["snr"] = _finite(snr)
        if results is not None:
            table = detect_inversions(results, args.low_k, args.high_k)
            _write_csv(out / "inversions.csv",
                       ["problem_id", "low_k_reward", "low_k_correct", "high_k_reward", "high_k_correct"],
                       [[r.problem_id, r.low_k_reward, r.low_k_correct, r.high_k_reward, r.high_k_correct]
                        for r in table.rows])
            summary["inversions"] = {"rows": len(table.rows), "unmatched": table.unmatched}
        _write_json(out / "manifest.json", _manifest("diagnose", args, started))
    except OSError as exc:
        raise CliError(f"write failed: {exc}", EXIT_IO) from None
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- aggregate


def cmd_aggregate(args) -> int:
    started = _now()
    results = _load_results(args.results)
    if not results:
        raise CliError("results table has no rows", EXIT_DATA)
    summary = aggregate_macro(results)
    out = _out_dir(args.out)
    rows = macro_rows(summary)
    header = ["model_name", "scorer", "beam_width", "mean_percent", "se_percent", "count"]
    deltas = [{"model_name": m, "scorer": s, "delta_percent": d} for (m, s), d in sorted(summary.deltas.items())]
    try:
        _write_csv(out / "macro.csv", header, [[r[h] for h in header] for r in rows])
        _write_json(out / "macro.json", {"cells": rows, "deltas": deltas, "warnings": summary.warnings})
        _write_json(out / "manifest.json", _manifest("aggregate", args, started))
    except OSError as exc:
        raise CliError(f"write failed: {exc}", EXIT_IO) from None
    print(json.dumps({"deltas": deltas}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beamcal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file whose keys mirror the flags; flags win")

    p = sub.add_parser("khat", help="bias, bound and maximum useful beam width for one scorer")
    common(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--mu-w", type=float, default=0.0)
    p.add_argument("--k", type=int, help="beam width to evaluate (pool k*k); defaults to the predicted width")
    p.add_argument("--n", type=int, help="explicit candidate pool size")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_khat)

    p = sub.add_parser("simulate", help="Monte Carlo sweep of success rate over beam widths")
    common(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--mu-w", type=float, default=0.0)
    p.add_argument("--ks", default="1,2,3,4", help="comma-separated beam widths")
    p.add_argument("--depth", type=int, default=24)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--correction", choices=CORRECTIONS, default="none")
    p.add_argument("--policy-accuracy", type=float, default=1.0,
                   help="probability that one policy sample continues a correct path correctly")
    p.add_argument("--log-selections", action="store_true", help="also write selections.jsonl")
    p.add_argument("--workers", type=int, default=int(os.environ.get(WORKERS_ENV, "1")))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check the closed forms against brute force")
    common(p)
    p.add_argument("--suite", default="all", help=f"one of {', '.join(SUITES)}, all")
    p.add_argument("--trials", type=int, default=10**6)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("diagnose", help="margin, inversion and SNR diagnostics for traces")
    common(p)
    p.add_argument("inputs", nargs="*", help="trace files")
    p.add_argument("--format", choices=("text-log", "jsonl"), default="text-log")
    p.add_argument("--threshold", type=float, default=DEFAULT_MARGIN_THRESHOLD)
    p.add_argument("--results", help="results table for inversion detection")
    p.add_argument("--low-k", type=int, default=1)
    p.add_argument("--high-k", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("aggregate", help="macro success rates and deltas from a results table")
    common(p)
    p.add_argument("results")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    try:
        with open(known.config, encoding="utf-8") as fh:
            config = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {known.config}: {exc}", EXIT_IO) from None
    except ValueError as exc:
        raise CliError(f"invalid config {known.config}: {exc}", EXIT_USAGE) from None
    if not isinstance(config, dict):
        raise CliError("config must be a JSON object", EXIT_USAGE)
    subparser = subparsers[command]
    known_dests = {a.dest for a in subparser._actions}
    defaults = {}
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest not in known_dests:
            raise CliError(f"unknown config key {key!r}", EXIT_USAGE)
        defaults[dest] = value
    # config values become defaults, so explicit flags still win
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except CliError as exc:
        print(f"beamcal: error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
