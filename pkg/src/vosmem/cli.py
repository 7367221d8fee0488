"""Command-line interface.

Subcommands: ``synth`` writes a synthetic long video; ``run`` streams
one video through a memory discipline and writes a per-frame report;
``compare`` reproduces the constant-cost scaling table across repeat
factors; ``ablate`` sweeps bank compositions.  Report paths get a
rendered PNG figure next to the delimited output.
"""

from __future__ import annotations

import argparse
import pathlib
import sys

from . import figures, harness
from .config import EngineConfig, load_config
from .readout import write_mask
from .tensor import ConfigError, DomainError

DEFAULT_SEED = 7
DEFAULT_BASE_LEN = 8
DEFAULT_SIZE = 64
DEFAULT_OBJECTS = 2


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def _add_synth_args(p, with_repeat=True):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--base-len", type=int, default=DEFAULT_BASE_LEN)
    if with_repeat:
        p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--size", type=int, default=DEFAULT_SIZE,
                   help="square frame side, divisible by 16")
    p.add_argument("--objects", type=int, default=DEFAULT_OBJECTS)


def _config_from(args, extra: dict | None = None) -> EngineConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if extra:
        overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(args.config, overrides)


def _video_from(args) -> harness.SyntheticVideo:
    if getattr(args, "video", None):
        return harness.load_video(args.video)
    unit = harness.synth_base_clip(args.seed, args.base_len, args.size,
                                   args.size, args.objects)
    return harness.synth_long_video(unit, args.repeat)




def cmd_synth(args) -> int:
    unit = harness.synth_base_clip(args.seed, args.base_len, args.size,
                                   args.size, args.objects)
    video = harness.synth_long_video(unit, args.repeat)
    harness.save_video(args.out, video)
    print(f"wrote {len(video)} frames ({args.size}x{args.size}, "
          f"{video.num_objects} objects) to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config_from(args, {
        "memory.pattern": args.pattern,
        "memory.theta": args.theta,
        "readout.topk": args.topk,
        "memory.strategy": args.strategy,
    })
    video = _video_from(args)
    masks = [] if args.masks_out else None
    report = harness.run_stream(video, cfg.pattern, cfg, reps=args.reps,
                                collect_masks=masks)

    if args.report:
        path = pathlib.Path(args.report)
        fmt = path.suffix.lstrip(".").lower() or "csv"
        harness.emit_report(report, fmt, path)
        figures.render_run(report, path.with_suffix(".png"))
        print(f"report: {path}  figure: {path.with_suffix('.png')}")
    if masks is not None:
        out = pathlib.Path(args.masks_out)
        out.mkdir(parents=True, exist_ok=True)
        ext = "png" if cfg.mask_format == "png" else "txt"
        for t, labels in enumerate(masks):
            write_mask(out / f"mask_{t:05d}.{ext}", labels, cfg.mask_format)
        print(f"wrote {len(masks)} masks to {out}")
    print(f"pattern={report.pattern} frames={len(report.records)} "
          f"mean_iou={report.mean_iou():.4f} "
          f"mean_latency={report.mean_latency_s() * 1e3:.2f}ms "
          f"peak_floats={report.peak_floats()}")
    return 0


def cmd_compare(args) -> int:
    cfg = _config_from(args)
    unit = harness.synth_base_clip(args.seed, args.base_len, args.size,
                                   args.size, args.objects)
    patterns = [p.strip() for p in args.patterns.split(",") if p.strip()]
    repeats = [int(r) for r in args.repeats.split(",")]
    rows = harness.compare_patterns(unit, patterns, repeats, cfg,
                                    reps=args.reps)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.emit_rows(rows, harness.COMPARE_COLUMNS, "csv", out / "compare.csv")
    harness.emit_rows(rows, harness.COMPARE_COLUMNS, "json", out / "compare.json")
    figures.render_compare(rows, out / "compare.png")
    header = f"{'pattern':8s} {'R':>3s} {'frames':>6s} {'ms/frame':>9s} " \
             f"{'peak_floats':>12s} {'mean_iou':>9s}"
    print(header)
    for r in rows:
        print(f"{r.pattern:8s} {r.repeat:3d} {r.frames:6d} "
              f"{r.mean_latency_s * 1e3:9.2f} {r.peak_floats:12d} "
              f"{r.mean_iou:9.4f}")
    print(f"wrote compare.csv / compare.json / compare.png to {out}")
    return 0


def cmd_train(args) -> int:
    from .losses import (LossWeights, TrainClip, TrainState, train_loop,
                         write_loss_curve)
    cfg = _config_from(args, {
        "train.lr": args.lr,
        "train.steps": args.steps,
        "train.seed": args.train_seed,
    })
    unit = harness.synth_base_clip(args.seed, 5, args.size, args.size,
                                   args.objects)
    clip = TrainClip(unit.frames, unit.gt_masks)
    state = TrainState.create(cfg.train_seed, ck=cfg.ck, cv=cfg.cv,
                              hidden=cfg.decoder_hidden)
    weights = LossWeights(mu=cfg.mu, gamma=cfg.gamma,
                          bootstrap_ratio=cfg.bootstrap_ratio)
    pool = 1 if args.size // 16 < cfg.sam_pool else cfg.sam_pool
    history = train_loop(clip, state, weights, cfg.lr, cfg.steps,
                         cfg.train_seed, topk=cfg.topk, pool=pool,
                         radius_max=cfg.radius_max, strategy=cfg.strategy)
    path = pathlib.Path(args.out)
    write_loss_curve(history, path)
    figures.render_loss_curve(history, path.with_suffix(".png"))
    first, last = history[0]["total"], history[-1]["total"]
    print(f"steps={len(history)} initial={first:.4f} final={last:.4f} "
          f"ratio={last / first:.3f}")
    print(f"curve: {path}  figure: {path.with_suffix('.png')}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    video = _video_from(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rows = harness.ablate_strategies(video, strategies, cfg, reps=args.reps)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.emit_rows(rows, harness.ABLATE_COLUMNS, "csv", out / "ablate.csv")
    harness.emit_rows(rows, harness.ABLATE_COLUMNS, "json", out / "ablate.json")
    figures.render_ablation(rows, out / "ablate.png")
    for r in rows:
        print(f"{r.strategy:14s} slots={r.slots} mean_iou={r.mean_iou:.4f}")
    print(f"wrote ablate.csv / ablate.json / ablate.png to {out}")
    return 0


DEFAULT_STRATEGIES = ("F,L,RDE,F&RDE,L&RDE,F&L,F&L&RDE,2F&L,F&2L,2F&L&RDE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vosmem",
        description="streaming memory-bank engine for video object "
                    "segmentation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic long video")
    _add_synth_args(p)
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="stream one video through a bank pattern")
    p.add_argument("--pattern", choices=("stm", "ema", "sam"), default=None)
    p.add_argument("--theta", type=int, default=None,
                   help="bank sampling interval")
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--strategy", default=None,
                   help="bank composition, e.g. '2F & L & RDE'")
    p.add_argument("--video", help="input video .npz (else synthesized)")
    p.add_argument("--report", help="output report path (.csv or .json)")
    p.add_argument("--masks-out", help="directory for predicted masks")
    p.add_argument("--reps", type=int, default=3,
                   help="timing repetitions per frame")
    _add_synth_args(p)
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="pattern scaling comparison")
    p.add_argument("--patterns", default="stm,sam")
    p.add_argument("--repeats", default="1,10,15,20")
    p.add_argument("--out", default="compare_out")
    p.add_argument("--reps", type=int, default=3)
    _add_synth_args(p, with_repeat=False)
    _add_config_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("train", help="toy training run with loss curve")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--train-seed", type=int, default=None)
    p.add_argument("--seed", type=int, default=11, help="clip seed")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--out", default="loss_curve.csv")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="bank composition ablation")
    p.add_argument("--strategies", default=DEFAULT_STRATEGIES)
    p.add_argument("--video", help="input video .npz (else synthesized)")
    p.add_argument("--out", default="ablate_out")
    p.add_argument("--reps", type=int, default=1)
    _add_synth_args(p)
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
