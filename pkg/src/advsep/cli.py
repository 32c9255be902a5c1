"""Command line entry point: ``advsep <command> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
COMMANDS = ("prepare", "train", "attack", "eval", "export-reps", "report")

log = logging.getLogger("advsep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advsep", description="Adversarial attacks and the cluster-separation detector.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the run directory")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for the attack matrix")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("advsep: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    from . import pipeline
    from .config import ConfigError, load_config
    from .datasets import DataError

    pipeline.set_threads(args.threads)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        log.info("config %s hash %s", args.config, cfg.config_hash()[:12])
        if args.command == "prepare":
            m = pipeline.cmd_prepare(cfg)
            print(f"prepared {sum(s['n'] for s in m['splits'].values())} examples in {cfg.out}/data")
        elif args.command == "train":
            det = pipeline.cmd_train(cfg)
            print(f"trained {det.mode} detector; final loss {det.history[-1]:.4f}" if det.history else "trained")
        elif args.command == "attack":
            index = pipeline.cmd_attack(cfg, args.threads)
            print(f"ran {len(index['cells'])} attack cell(s)")
        elif args.command == "eval":
            body = pipeline.cmd_eval(cfg)
            print(f"evaluated {len(body['reports'])} attack(s); wrote {pipeline.Run(cfg).report_csv}")
        elif args.command == "export-reps":
            print(f"wrote {pipeline.cmd_export_reps(cfg)}")
        else:
            sys.stdout.write(pipeline.cmd_report(cfg))
    except ConfigError as exc:
        print(f"advsep: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"advsep: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
