"""``segattack`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from . import experiment as ex
from .training import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment JSON file")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="override output_dir")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = _Parser(prog="segattack", description="Phantom segmentation training and FGSM attack experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write the phantom dataset and split")
    for name, text in (("train", "train configured models"), ("attack", "run FGSM attacks and sweeps")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--model", help="only this model (default: all)")
    sub.add_parser("report", parents=[common], help="write the comparison table and report")
    sub.add_parser("check", parents=[common], help="verify adversarial images stay within epsilon")
    sub.add_parser("run", parents=[common], help="generate, train, attack and report in one go")
    return p


def _dispatch(args) -> int:
    cfg = ex.load_config(args.config, seed=args.seed, out=args.out)
    if args.command == "generate":
        print(ex.cmd_generate(cfg))
    elif args.command == "train":
        for name, hist in ex.cmd_train(cfg, args.model).items():
            print(f"{name}: best epoch {hist.best_epoch}, validation DSC {hist.best_dsc:.4f}")
    elif args.command == "attack":
        for name, s in ex.cmd_attack(cfg, args.model).items():
            parts = ", ".join(f"{k} {v['attack_success']:.4f}" for k, v in s["losses"].items())
            print(f"{name}: clean DSC {s['dsc_clean']:.4f}; AS {parts}")
    elif args.command == "report":
        ex.cmd_report(cfg)
        print(cfg.root / "report" / "report.md")
    elif args.command == "check":
        res = ex.check_perturbations(cfg)
        for v in res.violations:
            print(v, file=sys.stderr)
        print(f"checked {res.checked} adversarial images, {len(res.violations)} violations")
        if not res.ok:
            return EXIT_RUNTIME
    elif args.command == "run":
        ex.run_all(cfg)
        print(cfg.root / "report" / "report.md")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ex.PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - anything else is still a runtime failure
        logging.getLogger(__name__).debug("unexpected failure", exc_info=True)
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
