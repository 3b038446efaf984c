"""Command-line entry point.

Subcommands: run (one scenario -> CSV + summary), compare (paired
learning-assisted vs baseline runs), verify (the property suite), sweep
(seeds in parallel). Exit codes: 0 ok, 1 verify failure, 2 config error,
3 numeric abort, 4 gain-freeze timeout.
"""

from __future__ import annotations

import argparse
import multiprocessing
import sys
from pathlib import Path

from . import config as cfgmod
from . import metrics
from .checks import verify_suite
from .config import ConfigError
from .sim_engine import run, NumericAbort, GainFreezeTimeout, MODE_BASELINE

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GAIN_FREEZE = 4


def _build_parser():
    ap = argparse.ArgumentParser(prog="floatarm")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="YAML config overriding the packaged defaults")
        p.add_argument("--output-dir", type=Path, default=Path("out"))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--log-every", type=int, default=None)

    pr = sub.add_parser("run", help="execute one scenario")
    add_common(pr)
    pr.add_argument("--mode", choices=["dac", "baseline"], default=None)

    pc = sub.add_parser("compare", help="paired dac vs baseline runs")
    add_common(pc)

    pv = sub.add_parser("verify", help="run the property suite")
    pv.add_argument("--config", type=Path, default=None)

    ps = sub.add_parser("sweep", help="independent runs over seeds")
    add_common(ps)
    ps.add_argument("--seeds", type=int, nargs="+", required=True)
    ps.add_argument("--jobs", type=int, default=None)
    return ap


def _overrides(args) -> dict:
    sc = {}
    if getattr(args, "seed", None) is not None:
        sc["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        sc["mode"] = args.mode
    if getattr(args, "log_every", None) is not None:
        sc["log_every"] = args.log_every
    return {"scenario": sc} if sc else {}


def _execute(cfg, outdir: Path, tag: str = "run"):
    outdir.mkdir(parents=True, exist_ok=True)
    cfgmod.echo(cfg, outdir / f"{tag}_config.yaml")
    runlog = run(cfg)
    runlog.to_csv(outdir / f"{tag}.csv")
    metrics.write_summary(runlog.summary, outdir / f"{tag}_summary.txt")
    return runlog


def cmd_run(args) -> int:
    cfg = cfgmod.load(args.config, _overrides(args))
    log = _execute(cfg, args.output_dir)
    print(f"run complete: {log.rows} rows, "
          f"wall {log.summary['wall_clock_s']:.1f}s -> {args.output_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg_dac = cfgmod.load(args.config, _overrides(args))
    if cfg_dac.mode == MODE_BASELINE:
        raise ConfigError("compare drives both modes; do not set baseline")
    log_dac = _execute(cfg_dac, args.output_dir, "dac")
    over = _overrides(args)
    over.setdefault("scenario", {})["mode"] = MODE_BASELINE
    cfg_base = cfgmod.load(args.config, over)
    log_base = _execute(cfg_base, args.output_dir, "baseline")
    summary = metrics.compare(log_dac, log_base)
    metrics.write_summary(summary.to_dict(),
                          args.output_dir / "compare_summary.txt")
    print(f"tracking error reduction: {summary.tracking_reduction_pct:.1f}%")
    print(f"control effort increase:  {summary.effort_increase_pct:.1f}%")
    print(f"estimation ratios:        B {summary.est_ratio_B:.2f}, "
          f"D {summary.est_ratio_D:.2f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = cfgmod.load(args.config) if args.config else None
    results = verify_suite(cfg.params if cfg else None)
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY_FAIL


def _sweep_one(payload):
    cfg_dict, seed, outdir = payload
    cfg = cfgmod.from_dict(cfg_dict)
    cfg.seed = seed
    _execute(cfg, Path(outdir) / f"seed_{seed}")
    return seed


def cmd_sweep(args) -> int:
    cfg = cfgmod.load(args.config, _overrides(args))
    payloads = [(cfgmod.to_dict(cfg), s, str(args.output_dir))
                for s in args.seeds]
    jobs = args.jobs or min(len(args.seeds), multiprocessing.cpu_count())
    if jobs <= 1 or len(payloads) == 1:
        done = [_sweep_one(p) for p in payloads]
    else:
        with multiprocessing.Pool(jobs) as pool:
            done = pool.map(_sweep_one, payloads)
    print(f"sweep complete: seeds {sorted(done)}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "compare": cmd_compare,
                "verify": cmd_verify, "sweep": cmd_sweep}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GainFreezeTimeout as exc:
        print(f"gain freeze timeout: {exc}", file=sys.stderr)
        return EXIT_GAIN_FREEZE


if __name__ == "__main__":
    sys.exit(main())
