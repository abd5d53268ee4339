"""``faultfs`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
Workload crashes inside a campaign are results, not tool failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from . import __version__
from .campaign import (CampaignConfig, CampaignResult, WORKDIR_ENV, default_workdir,
                       generate_signature, load_profile, pick_target, profile, read_records,
                       run_campaign, run_one, target_rng, toy_config)
from .classify import OUTCOME_ORDER
from .errors import ConfigError, FaultFSError
from .hdf5meta.fieldmap import build_field_map
from .hdf5meta.parser import parse_file
from .hdf5meta.repair import repair
from .hdf5meta.sweep import format_summary, records_csv, summarize, sweep_metadata
from .toy import MIN_CELLS, THRESHOLD_FACTOR, make_halo_classifier


def _load_config(args) -> CampaignConfig:
    cfg = CampaignConfig.load(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "n_runs", None) is not None:
        overrides["n_runs"] = args.n_runs
    if getattr(args, "parallelism", None) is not None:
        overrides["parallelism"] = args.parallelism
    if overrides:
        doc = {**cfg.to_dict(), **overrides}
        cfg = CampaignConfig.from_dict(doc, cfg.base_dir)
    return cfg


def _out_dir(args, cfg: CampaignConfig) -> Path:
    if args.out:
        return Path(args.out)
    base = Path(args.workdir) if args.workdir else default_workdir()
    return base / cfg.name


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_profile(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    prof = profile(cfg, out)
    _print_json({"primitive": cfg.signature.primitive, **prof.to_dict(), "out": str(out)})
    return 0


def cmd_inject(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    prof = load_profile(out) or profile(cfg, out)
    sig = generate_signature(cfg, args.run_id)
    index = args.index if args.index is not None else pick_target(prof.count, target_rng(sig))
    if not 0 <= index < prof.count:
        raise ConfigError(f"--index must be in [0, {prof.count})")
    rec = run_one(cfg, sig, index, prof, out / "inject" / f"{args.run_id:06d}", args.run_id)
    _print_json(rec.to_dict())
    return 0


def cmd_campaign(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)

    def progress(done, total):
        if args.verbose:
            print(f"\r{done}/{total}", end="", file=sys.stderr, flush=True)

    result = run_campaign(cfg, out, resume=args.resume, progress=progress)
    if args.verbose:
        print(file=sys.stderr)
    print(_format_result(result))
    print(f"results in {out}")
    return 0


def _format_result(result: CampaignResult) -> str:
    lines = [f"{'class':<9} {'count':>6} {'rate':>8}   95% CI"]
    for row in result.rows():
        lines.append(f"{row['class']:<9} {row['count']:>6} {100 * row['rate']:>7.2f}%"
                     f"   [{100 * row['ci_lo']:.2f}%, {100 * row['ci_hi']:.2f}%]")
    lines.append(f"{'total':<9} {result.n_runs:>6}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    """Aggregate one or more campaign directories."""
    summary, bars = {}, []
    for d in args.results:
        path = Path(d) / "runs.ndjson"
        if not path.exists():
            raise FaultFSError(f"{d}: no runs.ndjson")
        result = CampaignResult.from_records(read_records(path))
        name = Path(d).resolve().name
        summary[name] = result.to_dict()
        bars.append({"campaign": name, **{c.value: result.rate(c) for c in OUTCOME_ORDER}})
        print(f"== {name}")
        print(_format_result(result))
    out = Path(args.out) if args.out else Path(args.results[0])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["campaign", "class", "count", "rate", "ci_lo", "ci_hi"])
    for name, doc in summary.items():
        for row in doc["classes"]:
            w.writerow([name, row["class"], row["count"], row["rate"], row["ci_lo"],
                        row["ci_hi"]])
    (out / "report.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["campaign", *(c.value for c in OUTCOME_ORDER)],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(bars)
    (out / "bars.csv").write_text(buf.getvalue())
    print(f"report written to {out}")
    return 0


def cmd_h5_inspect(args) -> int:
    data = Path(args.file).read_bytes()
    model = parse_file(data, args.dataset)
    fmap = build_field_map(model)
    if args.json:
        _print_json({"metadata_size": fmap.size, "address_of_raw_data": model.layout.address,
                     "dims": list(model.dims), "bytes_by_role": fmap.bytes_by_role(),
                     "fields": [{"name": f.name, "start": f.start, "end": f.end,
                                 "role": f.role} for f in fmap]})
        return 0
    p = model.datatype
    print(f"dataset {model.dataset_name!r} dims={model.dims} element={p.size} bytes")
    print(f"address of raw data {model.layout.address}, metadata size {model.metadata_size}")
    print(f"exponent bias {p.exponent_bias:#010x}, exponent {p.exponent_location}+"
          f"{p.exponent_size}, mantissa {p.mantissa_location}+{p.mantissa_size}")
    print(f"{'start':>6} {'end':>6}  {'role':<12} field")
    for f in fmap:
        print(f"{f.start:>6} {f.end:>6}  {f.role:<12} {f.name}")
    roles = fmap.bytes_by_role()
    print("bytes by role: " + ", ".join(f"{k}={v}" for k, v in roles.items() if v))
    return 0


def cmd_h5_sweep(args) -> int:
    data = Path(args.file).read_bytes()
    classify = make_halo_classifier(data, args.threshold, args.min_cells)
    records = sweep_metadata(data, classify, per_bit=args.per_bit, workers=args.workers)
    text = records_csv(records)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    summary = summarize(records)
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=2) + "\n")
    print(format_summary(summary), file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_h5_fix(args) -> int:
    path = Path(args.file)
    report = repair(path.read_bytes())
    print(f"diagnosis: {report.before}")
    for action in report.actions:
        print(f"repair: {action}")
    if not report.actions:
        print("nothing to repair")
        return 0
    print(f"after repair: {report.after}")
    if args.dry_run:
        print("dry run: file left unchanged")
    else:
        tmp = path.with_name(path.name + ".fixing")
        tmp.write_bytes(report.data)
        os.replace(tmp, path)
        print(f"wrote {path}")
    return 0


def cmd_toy_config(args) -> int:
    doc = toy_config(args.model, n_runs=args.n_runs, seed=args.seed,
                     dims=tuple(args.dims), precision=args.precision)
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faultfs", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workdir", help=f"workspace root (default ${WORKDIR_ENV} or ./faultfs-work)")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="campaign config (JSON)")
        s.add_argument("--out", help="results directory (default <workdir>/<name>)")
        s.add_argument("--seed", type=int)
        s.set_defaults(func=fn)
        return s

    with_config("profile", cmd_profile, "count target invocations and cache golden outputs")
    s = with_config("inject", cmd_inject, "run a single injection")
    s.add_argument("--index", type=int, help="target invocation (default: sampled)")
    s.add_argument("--run-id", type=int, default=0)
    s = with_config("campaign", cmd_campaign, "run a full campaign")
    s.add_argument("--resume", action="store_true", help="continue from runs.ndjson")
    s.add_argument("--n-runs", type=int)
    s.add_argument("--parallelism", type=int)

    s = sub.add_parser("report", help="aggregate campaign result directories")
    s.add_argument("results", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("h5-inspect", help="print the metadata field map of an HDF5 file")
    s.add_argument("file")
    s.add_argument("--dataset", default="density")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_h5_inspect)

    s = sub.add_parser("h5-sweep", help="flip every metadata byte and classify the halo analysis")
    s.add_argument("file")
    s.add_argument("--per-bit", action="store_true", help="flip all 8 bits of each byte")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--threshold", type=float, default=THRESHOLD_FACTOR)
    s.add_argument("--min-cells", type=int, default=MIN_CELLS)
    s.add_argument("--out", help="per-flip CSV (default stdout)")
    s.add_argument("--summary", help="write the summary as JSON")
    s.set_defaults(func=cmd_h5_sweep)

    s = sub.add_parser("h5-fix", help="diagnose and repair metadata in place")
    s.add_argument("file")
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_h5_fix)

    s = sub.add_parser("toy-config", help="emit a campaign config for the bundled workload")
    s.add_argument("model", choices=["BitFlip", "ShornWrite", "DroppedWrite"])
    s.add_argument("--n-runs", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    s.add_argument("--precision", choices=["f32", "f64"], default="f64")
    s.add_argument("--out")
    s.set_defaults(func=cmd_toy_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"faultfs: {exc}", file=sys.stderr)
        return 2
    except (FaultFSError, OSError) as exc:
        print(f"faultfs: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
