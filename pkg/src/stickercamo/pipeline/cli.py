"""``stickercamo`` command line: bake, train, render, eval, report.

Exit status is 0 on success; any package error is printed to stderr as
``[module] message`` with status 2.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import CamoError, ConfigError
from ..render import ScenePose
from .config import PRESETS, RunConfig, preset_config
from .run import (SWEEPS, cmd_bake, cmd_eval, cmd_render, cmd_report, cmd_train, parse_textures,
                  resolve_mesh)


def _common(p):
    p.add_argument("--config", help="JSON run config (defaults to the chosen preset)")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, help="override optimizer.seed")
    p.add_argument("--out", help="output directory (overrides the config's out)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set loss.tau=0 (value parsed as JSON if possible)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="stickercamo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bake", help="bake the selection mask and sticker cutout")
    _common(p)

    p = sub.add_parser("train", help="optimize a camouflage texture")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    p = sub.add_parser("render", help="render the target with a texture")
    _common(p)
    p.add_argument("--texture", help="texture .npy or image (default: base texture)")
    p.add_argument("--background", help="background image (default: plain gray)")
    p.add_argument("--pose", action="append", default=[], metavar="EL,AZ,DIST")

    p = sub.add_parser("eval", help="run an evaluation sweep")
    _common(p)
    p.add_argument("--texture", action="append", default=[], metavar="NAME=PATH",
                   help='texture to evaluate; PATH "raw" means the uncamouflaged base texture')
    p.add_argument("--sweep", required=True, help=f"one of {', '.join(SWEEPS)}")
    p.add_argument("--grid", default="desk", choices=["desk", "full"])
    p.add_argument("--scenes", help="comma-separated scene labels for the concealment sweep")

    p = sub.add_parser("report", help="summarize a run directory as Markdown")
    _common(p)
    return parser


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else preset_config(args.preset)
    changes = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        changes[key] = _value(value)
    if args.seed is not None:
        changes["optimizer.seed"] = args.seed
    if args.out:
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _pose(text):
    try:
        el, az, d = (float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--pose expects EL,AZ,DIST, got {text!r}") from None
    return ScenePose(el, az, d)


def run(args):
    cfg = load_config(args)
    out = Path(cfg.out)
    if args.command == "bake":
        for p in cmd_bake(cfg, out):
            print(p)
    elif args.command == "train":
        manifest = cmd_train(cfg, out, resume=args.resume)
        print(out / manifest["texture"])
    elif args.command == "render":
        poses = [_pose(p) for p in args.pose] or None
        for p in cmd_render(cfg, out, args.texture, poses, args.background):
            print(p)
    elif args.command == "eval":
        if args.sweep not in SWEEPS:
            raise ConfigError(f"unknown sweep {args.sweep!r}; valid sweeps: {', '.join(SWEEPS)}")
        textures = parse_textures(args.texture or ["raw=raw"], cfg, resolve_mesh(cfg))
        scenes = args.scenes.split(",") if args.scenes else None
        rep = cmd_eval(cfg, out, textures, args.sweep, args.grid, scenes)
        print(f"{len(rep.rows)} rows -> {out / 'reports' / (args.sweep + '.csv')}")
    else:
        print(cmd_report(out))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except CamoError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
