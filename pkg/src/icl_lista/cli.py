"""``icl-lista run <config.json> [--seed S] [--out DIR] [--desk-scale F]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .errors import ConfigError, NumericError, ParseError, TrainingError
from .experiments import ExperimentConfig, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icl-lista", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", help="path to a JSON experiment config")
    run.add_argument("--seed", type=int, help="base seed; replaces the config seeds with "
                     "seed, seed+1, ... (same count)")
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--desk-scale", type=float, help="workload multiplier")
    run.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_json(fh.read())
        overrides = {}
        if args.seed is not None:
            overrides["seeds"] = [args.seed + i for i in range(len(cfg.seeds))]
        if args.out is not None:
            overrides["output_dir"] = args.out
        if args.desk_scale is not None:
            overrides["desk_scale"] = args.desk_scale
        if overrides:
            cfg = replace(cfg, **overrides)
        manifest = run_experiment(cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for f in manifest["files"]:
        print(f"{f['sha256']}  {f['path']}")
    print(f"manifest: {manifest['manifest_path']}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
