"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .cohort import load_cohort, read_config_file
from .errors import ConfigError, InvalidSpec, MatchdrError, StageError
from .pipeline import OUTPUT_ENV, load_pipeline_config, render_report, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# subcommand -> last stage to run
STOP_AFTER = {
    "propensity": "support",
    "match": "match",
    "balance": "balance",
    "estimate": "estimate",
    "sensitivity": "sensitivity",
    "pipeline": "sensitivity",
}


def _parser():
    p = argparse.ArgumentParser(prog="matchdr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", type=Path, required=config_required, help="pipeline config (JSON or TOML)")
        sp.add_argument("--seed", type=int, default=None, help="root seed; overrides the config")
        sp.add_argument("--jobs", type=int, default=None, help="worker threads for bootstrap replicates")
        sp.add_argument("--out", type=Path, default=None, help=f"output directory (default: config, then ${OUTPUT_ENV})")
        return sp

    common(sub.add_parser("validate", help="check a pipeline config and its inputs"))
    g = common(sub.add_parser("generate", help="write a synthetic cohort from a DGP spec"))
    g.add_argument("--daily", action="store_true", help="also emit daily PoS and intervention dates")
    for name, text in (
        ("propensity", "load through common-support trimming"),
        ("match", "run through matching"),
        ("balance", "run through balance diagnostics"),
        ("estimate", "run through DR estimation"),
        ("sensitivity", "run every stage including Rosenbaum bounds"),
        ("pipeline", "run every stage and render report.md"),
    ):
        common(sub.add_parser(name, help=text))
    r = sub.add_parser("report", help="render report.md from a finished run")
    r.add_argument("--out", type=Path, default=None, help="run directory")
    r.add_argument("--config", type=Path, default=None, help="config whose output directory to use")
    return p


def _err(msg):
    print(f"matchdr: {msg}", file=sys.stderr)


def _generate(args):
    from .synth import DgpSpec, write_synthetic

    d = read_config_file(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    spec = DgpSpec.from_dict(d)
    out = args.out or os.environ.get(OUTPUT_ENV) or "synthcohort"
    info = write_synthetic(spec, out, with_daily=args.daily)
    print(json.dumps({"output_dir": str(out), "files": info["files"], "true_ate": info["truth"].true_ate}, indent=1))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "generate":
            return _generate(args)
        if args.command == "report":
            out = args.out
            if out is None and args.config is not None:
                out = load_pipeline_config(args.config).output_dir
            out = out or os.environ.get(OUTPUT_ENV)
            if out is None:
                raise ConfigError("report needs --out, --config or $" + OUTPUT_ENV)
            print(render_report(out))
            return EXIT_OK
        cfg = load_pipeline_config(args.config, seed=args.seed, output_dir=args.out, jobs=args.jobs)
        if args.command == "validate":
            table = load_cohort(cfg.cohort, cfg.schema)
            print(json.dumps({"valid": True, "n_rows": table.report["n_rows"], "n_treated": table.report["n_treated"]}))
            return EXIT_OK
        res = run_pipeline(cfg, stop_after=STOP_AFTER[args.command])
        if args.command == "pipeline":
            render_report(res.output_dir)
        print(json.dumps({"output_dir": str(res.output_dir), "stages": [s["name"] for s in res.manifest["stages"]]}))
        return EXIT_OK
    except StageError as exc:
        _err(f"stage '{exc.stage}' failed: {type(exc.error).__name__}: {exc.error}")
        return EXIT_STAGE
    except (ConfigError, InvalidSpec) as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except MatchdrError as exc:
        # validate surfaces load errors without the stage wrapper
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_STAGE if args.command != "validate" else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
