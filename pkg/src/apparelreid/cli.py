"""Command-line entry point: one verb per pipeline stage plus ``ablation``.

    apparelreid train-ea --config run.yaml --out runs/a --set ea_steps=500
"""

import argparse
import json
import logging
import sys

from .config import STAGES, SUITES, ExperimentConfig, desk_config
from .exceptions import ApparelReidError, ConfigurationError, DependencyError
from .pipeline import run_ablation, run_stage

EXIT_CODES = {ConfigurationError: 2, DependencyError: 3}


def build_parser():
    parser = argparse.ArgumentParser(prog="apparelreid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    for verb in STAGES:
        p = sub.add_parser(verb, help=f"run the {verb} stage")
        p.add_argument("--config", help="YAML config file (defaults apply otherwise)")
        p.add_argument("--desk", action="store_true",
                       help="start from the small single-core settings instead of full size")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if verb == "ablation":
            p.add_argument("--suite", choices=SUITES)
    return parser


def _read_keys(path):
    import yaml

    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def resolve_config(args):
    explicit = {}
    if args.config:
        explicit = ExperimentConfig.load(args.config).to_dict()
        explicit = {k: v for k, v in _read_keys(args.config).items() if k in explicit}
    cfg = desk_config(**explicit) if args.desk else ExperimentConfig.from_dict(explicit)
    changes = {"stage": args.verb}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    if getattr(args, "suite", None):
        changes["suite"] = args.suite
    return cfg.replace(**changes).with_overrides(args.set)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = run_ablation(cfg) if cfg.stage == "ablation" else run_stage(cfg)
    except ApparelReidError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return next((code for cls, code in EXIT_CODES.items() if isinstance(exc, cls)), 1)
    print(json.dumps({"stage": result.stage, "artifacts": result.artifacts}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
