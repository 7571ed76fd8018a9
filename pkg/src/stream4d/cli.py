"""Command-line entry point.

Subcommands::

    synth        render the synthetic scene into a dataset directory
    reconstruct  stream a dataset and write world grids, clouds and stats
    masks        stream a dataset and write only the dynamic masks
    eval         score a reconstruction against a dataset
    bench        time repeated reconstructions

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, ReconstructionError
from .io import RunConfig, load_manifest, write_json
from . import pipeline

log = logging.getLogger("stream4d")


def _config(args, manifest=None) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: config not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    if "stage" not in raw and manifest is not None:
        raw["stage"] = manifest.stage
    for name in ("stage", "seed", "tau", "gamma"):
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    return RunConfig.from_dict(raw)


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"--{name} is required for '{args.command}'")


def cmd_synth(args) -> int:
    _require(args, "out")
    scene_cfg = None
    if args.config:
        path = Path(args.config)
        try:
            scene_cfg = json.loads(path.read_text())
        except (FileNotFoundError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: cannot read scene config ({e})") from None
    manifest = pipeline.run_synth(args.out, scene_cfg, args.seed)
    log.info("wrote %s", manifest)
    return 0


def cmd_reconstruct(args, masks_only: bool = False) -> int:
    _require(args, "manifest", "out")
    m = load_manifest(args.manifest)
    cfg = _config(args, m)
    r = pipeline.run_reconstruct(m, cfg, args.out, masks_only=masks_only)
    for f in r.summary["frames"]:
        log.debug("t=%d sensor=%d selected=%d sensors_hit=%s", f["time_index"], f["sensor"], f["selected"],
                  f["sensors_hit"])
    log.info("pool entries %s, dynamic pixels %d",
             [p["entries"] for p in r.summary["pools"]], r.summary["dynamic_pixels"])
    return 0


def cmd_eval(args) -> int:
    _require(args, "manifest", "pred")
    m = load_manifest(args.manifest)
    gamma = args.gamma if args.gamma is not None else _config(args, m).gamma
    report = pipeline.evaluate(args.pred, m, gamma)
    out = Path(args.out) if args.out else Path(args.pred) / "eval.json"
    write_json(out, report)
    print(json.dumps({"gamma": report["gamma"], **report["reconstruction"], **report["depth"]},
                     ensure_ascii=False))
    return 0


def cmd_bench(args) -> int:
    _require(args, "manifest")
    m = load_manifest(args.manifest)
    cfg = _config(args, m)
    report = pipeline.bench(m, cfg, args.repeats)
    if args.out:
        write_json(Path(args.out) / "bench.json", report)
    print(json.dumps(report["timing"] | {"frames": report["frames"], "warning": report["warning"],
                                         "note": report["note"]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stream4d", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, manifest=True, stage=True):
        if manifest:
            p.add_argument("--manifest", help="dataset manifest.json")
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if stage:
            p.add_argument("--stage", choices=("temporal", "spatial"))
            p.add_argument("--tau", type=float, help="flow-residual threshold in pixels")
            p.add_argument("--gamma", type=float, help="confidence filter")

    common(sub.add_parser("synth", help="render a synthetic dataset"), manifest=False, stage=False)
    common(sub.add_parser("reconstruct", help="streaming reconstruction"))
    common(sub.add_parser("masks", help="dynamic masks only"))
    p = sub.add_parser("eval", help="evaluate a reconstruction")
    common(p)
    p.add_argument("--pred", help="reconstruction output directory")
    p = sub.add_parser("bench", help="throughput benchmark")
    common(p)
    p.add_argument("--repeats", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    handlers = {
        "synth": cmd_synth,
        "reconstruct": cmd_reconstruct,
        "masks": lambda a: cmd_reconstruct(a, masks_only=True),
        "eval": cmd_eval,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.command](args)
    except ReconstructionError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
