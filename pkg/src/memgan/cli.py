"""Command-line entry point: ``memgan train | eval | interpolate | ablate``.

Configuration comes from an optional preset, an optional ``key=value`` file and
``--set key=value`` overrides, in that order of precedence. Relative output
directories resolve under ``$MEMGAN_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .config import PRESETS, load_config
from .errors import MemGanError
from .gan import Mode


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--dataset", help="ring, shapes or idx:<images>[,<labels>]")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")


def _config(args):
    extra = {k: getattr(args, k, None) for k in ("dataset", "iterations", "seed", "output_dir", "mode")}
    return load_config(args.config, args.preset, args.overrides, extra)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_config_args(p)
    p.add_argument("--mode", choices=[m.value for m in Mode])

    p = sub.add_parser("eval", help="run probes on a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--probes", default="mode_coverage,avg_biased_loglik,prior_entropy",
                   help=f"comma-separated subset of {','.join(runner.PROBES)} (empty for none)")
    p.add_argument("--dataset", help="evaluate on a different dataset of the same dimension")
    p.add_argument("--out", type=Path, default=Path("eval.jsonl"))

    p = sub.add_parser("interpolate", help="interpolate between four real memory slots")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--slots", type=lambda s: [int(x) for x in s.split(",")],
                   help="four comma-separated slot indices (default: random self-maximal slots)")
    p.add_argument("--seed", type=int)
    p.add_argument("--z-policy", dest="z_policy", choices=["frozen", "corners"], default="frozen")
    p.add_argument("--out", type=Path, default=Path("interpolation"))

    p = sub.add_parser("ablate", help="train every ablation mode over several seeds")
    _add_config_args(p)
    p.add_argument("--modes", default=",".join(m.value for m in Mode))
    p.add_argument("--seeds", default="0,1,2,3,4")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            cfg = _config(args)
            result = runner.run_train(cfg)
            last = result.records[-1]
            print(f"trained {cfg.iterations} iterations -> {result.run_dir} "
                  f"(d_loss={last.d_loss:.4f}, g_loss={last.g_loss:.4f}, "
                  f"mode_coverage={last.mode_coverage})")
        elif args.command == "eval":
            probes = [p for p in args.probes.split(",") if p]
            results = runner.run_eval(args.checkpoint, probes, args.out, args.dataset)
            for name, value in results.items():
                print(f"{name}: {value}")
        elif args.command == "interpolate":
            if args.slots is not None and len(args.slots) != 4:
                parser.error("--slots needs exactly four indices")
            grid = runner.run_interpolate(args.checkpoint, args.grid, args.out, args.slots,
                                          args.seed, args.z_policy)
            print(f"corners {grid.corners.tolist()} snapped to {grid.corner_cells().tolist()}; "
                  f"wrote {args.out}")
        else:
            cfg = _config(args)
            modes = [m for m in args.modes.split(",") if m]
            for m in modes:
                Mode(m)
            seeds = [int(s) for s in args.seeds.split(",") if s]
            finals = runner.run_ablation(cfg, modes, seeds)
            for (mode, seed), rec in finals.items():
                print(f"{mode} seed={seed} mode_coverage={rec.mode_coverage}")
    except (MemGanError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
