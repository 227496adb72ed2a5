"""Command-line entry point.

Subcommands: synth, run, report, and one per pipeline stage (ingest, mixing,
access, exposure, regress, embed, predict). Exit codes: 0 success,
2 validation failure, 3 stage failure. The CITYMIX_THREADS environment
variable caps BLAS thread pools (set it to 1 for bit-reproducible runs).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys


def _apply_thread_env():
    threads = os.environ.get("CITYMIX_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="citymix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--out", required=needs_out, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--resume", action="store_true", default=True,
                       help="skip stages whose inputs are unchanged (default)")
        p.add_argument("--no-resume", dest="resume", action="store_false")
        p.add_argument("-v", "--verbose", action="store_true")

    p_synth = sub.add_parser("synth", help="generate a synthetic city from the [synth] section")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("-v", "--verbose", action="store_true")

    p_run = sub.add_parser("run", help="run the full pipeline")
    common(p_run)
    p_run.add_argument("--stage", default=None, help="run a single stage only")

    for name in ("ingest", "mixing", "access", "exposure", "regress", "embed", "predict", "report"):
        common(sub.add_parser(name, help=f"run the {name} stage"))
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    from .pipeline import PipelineConfig, run_pipeline, synth_params_from_ini
    from .synth import generate_city, write_city
    from .validation import ParameterError, SchemaError, StageError

    try:
        if args.command == "synth":
            params = synth_params_from_ini(args.config, seed=args.seed)
            bundle = generate_city(params)
            write_city(bundle, args.out)
            print(f"synthetic city written to {args.out}")
            return 0

        config = PipelineConfig.from_ini(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.command == "run":
            stages = [args.stage] if args.stage else None
        else:
            stages = [args.command]
        status = run_pipeline(config, args.out, resume=args.resume, stages=stages)
        for name, state in status.items():
            print(f"{name}: {state}")
        return 0
    except (ParameterError, SchemaError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
