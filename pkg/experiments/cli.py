# experiments/cli.py
"""zfuse command line: gen-scenes, gradcheck, train, evaluate, ablate, render.

Exit codes: 0 success, 1 verification failure (gradcheck failure, non-finite
loss), 2 usage or configuration error.
"""
import argparse
import sys
from pathlib import Path

import yaml

from experiments.ablation_runner import AXES, cmd_ablate
from experiments.gradcheck_suite import run_suite
from experiments.render import cmd_render
from experiments.train_runner import SPLITS, cmd_evaluate, cmd_gen_scenes, cmd_train, write_json
from utils.config import dump_yaml, load_config
from utils.errors import NumericError, ZFusionError
from utils.logger import get_logger

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2


def parse_override(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got '{text}'")
    return key.strip(), yaml.safe_load(value)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file merged over config/params.yaml")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", dest="overrides", action="append", type=parse_override, default=[],
                        metavar="KEY=VALUE", help="override one dotted config key (repeatable)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--print-effective-config", action="store_true",
                        help="print the merged config as YAML and exit")

    parser = argparse.ArgumentParser(prog="zfuse", description="Radar-camera BEV fusion experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="write synthetic scene directories")
    p.add_argument("--count", type=int)
    p.add_argument("--first-seed", type=int)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--max-entries", type=int, default=3)

    sub.add_parser("train", parents=[common], help="train the toy detector")

    p = sub.add_parser("evaluate", parents=[common], help="EA/RoI AP of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes-dir", type=Path)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--bypass", action="store_true", help="score the ground truth as detections")

    p = sub.add_parser("ablate", parents=[common], help="train/evaluate every setting of one axis")
    p.add_argument("--axis", required=True, help=f"one of {', '.join(sorted(AXES))}")

    p = sub.add_parser("render", parents=[common], help="write feature-map images for one scene")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--conv-checkpoint", type=Path)
    p.add_argument("--scene-dir", type=Path)
    p.add_argument("--scene-seed", type=int)
    return parser


def effective_config(args):
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def run(args):
    logger = get_logger("cli", args.log_level)
    config = effective_config(args)
    if args.print_effective_config:
        sys.stdout.write(dump_yaml(config))
        return EXIT_OK
    out = args.out or Path("runs") / args.command

    if args.command == "gen-scenes":
        cmd_gen_scenes(config, out, args.count, args.first_seed)
    elif args.command == "gradcheck":
        report = run_suite(instances=args.instances, seed=config.seed, max_entries=args.max_entries)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "gradcheck.json", report)
        if not report["passed"]:
            logger.error("gradcheck failed for %s", ", ".join(report["failed"]))
            return EXIT_VERIFICATION
    elif args.command == "train":
        cmd_train(config, out, args.log_level)
    elif args.command == "evaluate":
        cmd_evaluate(args.checkpoint, out, args.scenes_dir, args.split, args.bypass, args.log_level)
    elif args.command == "ablate":
        cmd_ablate(args.axis, config, out, args.log_level)
    elif args.command == "render":
        cmd_render(args.checkpoint, out, args.scene_dir, args.scene_seed, args.conv_checkpoint, args.log_level)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logger = get_logger("cli")
    try:
        return run(args)
    except NumericError as exc:
        logger.error("%s", exc)
        return EXIT_VERIFICATION
    except (ZFusionError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
