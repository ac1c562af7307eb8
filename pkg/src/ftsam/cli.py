"""``ftsam`` command line: attack, defend, eval, sweep, diagnose."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext

from . import harness
from .autodiff import NonFiniteError, ShapeError
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .model import CheckpointError
from .poisoning import DatasetError

log = logging.getLogger("ftsam")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftsam", description="Backdoor removal by fine-tuning with adaptive SAM.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON experiment config (defaults apply when omitted)")
        sp.add_argument("--out", help="output directory (overrides config.output)")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
        return sp

    common(sub.add_parser("attack", help="poison the training set and train the backdoored model"))

    sp = common(sub.add_parser("defend", help="fine-tune the backdoored checkpoint on the benign subset"))
    sp.add_argument("--pipeline", default="ft-sam", choices=harness.PIPELINES)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--checkpoint", help="start checkpoint (default <out>/attack/model.ckpt)")
    sp.add_argument("--name", help="output subdirectory (default defend-<pipeline>)")

    sp = common(sub.add_parser("eval", help="score baseline and defended checkpoints"))
    sp.add_argument("checkpoints", nargs="*", help="defended checkpoints (default <out>/defend-*/model.ckpt)")
    sp.add_argument("--baseline", help="backdoored checkpoint (default <out>/attack/model.ckpt)")

    sp = common(sub.add_parser("sweep", help="FT-SAM once per rho"))
    sp.add_argument("--rho", type=float, nargs="+", help="rho values (default defense.rho_list)")
    sp.add_argument("--checkpoint")

    sp = common(sub.add_parser("diagnose", help="per-unit norms, TAC and first-batch gradient norms"))
    sp.add_argument("--layer")
    sp.add_argument("--rho", type=float)
    sp.add_argument("--baseline")
    sp.add_argument("--checkpoint", help="defended checkpoint (default <out>/defend-ft-sam/model.ckpt)")
    return p


def _thread_limit():
    n = os.environ.get("FTSAM_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _error(kind: str, message: str, field=None, code: int = 2) -> int:
    payload = {"error": kind, "message": message}
    if field:
        payload["field"] = field
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def run(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = with_overrides(cfg, seed=args.seed)
    figures = not args.no_figures
    if args.command == "attack":
        result = harness.cmd_attack(cfg, args.out, figures=figures)
    elif args.command == "defend":
        result = harness.cmd_defend(cfg, args.out, args.pipeline, args.checkpoint, args.rho, args.gamma, figures,
                                    args.name)
    elif args.command == "eval":
        rows = harness.cmd_eval(cfg, args.out, args.checkpoints, args.baseline, figures)
        print(harness.format_table(rows))
        return 0
    elif args.command == "sweep":
        result = harness.cmd_sweep(cfg, args.out, args.rho, args.checkpoint, figures)
    else:
        result = harness.cmd_diagnose(cfg, args.out, args.baseline, args.checkpoint, args.layer, args.rho, figures)
    print(json.dumps(result, sort_keys=True, indent=2))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return run(args)
    except ConfigError as exc:
        return _error("config", str(exc), exc.field)
    except CheckpointError as exc:
        return _error(type(exc).__name__, str(exc))
    except (harness.StageError, DatasetError, ShapeError) as exc:
        return _error(type(exc).__name__, str(exc))
    except NonFiniteError as exc:
        return _error("divergence", str(exc), code=3)


if __name__ == "__main__":
    sys.exit(main())
