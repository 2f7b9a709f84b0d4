"""Command line entry point: train, eval, gen-scenes, render."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from . import critic, harness
from .sim import io as scene_io
from .sim import test_case
from .trainer import TrainConfig, load_models, run_training


def _add_channels(p):
    p.add_argument("--channels", default=None,
                   help="comma list of input channel groups: color,depth,mask "
                        "(default: all; 'depth,mask' gives the depth+mask ablation)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pushgrasp",
                                     description="Push-grasp lab: training, evaluation and map rendering.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run two-stage self-supervised training")
    p.add_argument("--config", required=True, help="JSON file with TrainConfig fields")
    p.add_argument("--resume", default=None,
                   help="trainer state (.pkl) to continue exactly, or a checkpoint (.ckpt) to warm start")
    p.add_argument("--out", default="runs/train", help="output directory for checkpoints and log")
    _add_channels(p)

    p = sub.add_parser("eval", help="evaluate a policy on a test suite")
    p.add_argument("--suite", required=True, choices=harness.SUITES, help="test suite to run")
    p.add_argument("--policy", required=True, choices=harness.POLICIES,
                   help="explorer variants apply to exploration, the rest to coordination; "
                        "in the full suite the named coordination policy takes over once "
                        "the full-bayesian explorer has found the target")
    p.add_argument("--runs", type=int, default=None, help="runs per case (suite default if omitted)")
    p.add_argument("--seed", type=int, default=0, help="base seed; each run derives its own")
    p.add_argument("--ckpt", default=None, help="checkpoint file (required by learned policies)")
    p.add_argument("--out", default=None, help="directory for the per-run CSV and summary")
    _add_channels(p)

    p = sub.add_parser("gen-scenes", help="write the test-case scenes as JSON files")
    p.add_argument("--suite", required=True, choices=harness.SUITES, help="test suite to write")
    p.add_argument("--seed", type=int, default=0, help="base seed for the per-run jitter")
    p.add_argument("--runs", type=int, default=1, help="jittered variants per case")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("render", help="write Q / exploration maps for a scene as PGM/PPM")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--out", required=True, help="output directory for the images")
    _add_channels(p)
    return parser


def _models(ckpt, channels) -> harness.Models:
    model, clf, cm = load_models(ckpt)
    if channels is not None:
        cm = critic.parse_channels(channels)
    return harness.Models(model, clf, cm)


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.channels is not None:
        cfg = dataclasses.replace(cfg, channels=args.channels)
    tr = run_training(cfg, args.out, args.resume)
    print(f"trained {tr.iteration} iterations -> {Path(args.out) / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    needs_model = args.policy not in ("rand", "clutter-prior") or args.suite == "full"
    if needs_model and args.ckpt is None:
        raise SystemExit(f"policy {args.policy!r} on suite {args.suite!r} needs --ckpt")
    if args.ckpt is not None:
        models = _models(args.ckpt, args.channels)
    else:
        models = harness.Models(channel_mask=critic.parse_channels(args.channels))
    reports, summary = harness.evaluate(args.suite, args.policy, models, args.runs, args.seed,
                                        args.out)
    print(harness.format_summary(summary, f"{args.suite} / {args.policy}"))
    return 0


def cmd_gen_scenes(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for case in range(harness.N_CASES[args.suite]):
        for run in range(args.runs):
            seed = harness.run_seed(args.seed, args.suite, case, run)
            scene_io.save_scene(test_case(args.suite, case, seed),
                                out / f"{args.suite}_{case}_{run}.json")
            n += 1
    print(f"wrote {n} scenes to {out}")
    return 0


def cmd_render(args) -> int:
    models = _models(args.ckpt, args.channels)
    world = scene_io.load_scene(args.scene)
    maps = harness.scene_maps(models, world)
    color = harness.observe(world).color
    for p in harness.render_maps(maps, color, args.out):
        print(p)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gen-scenes": cmd_gen_scenes, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
