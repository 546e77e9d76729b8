#!/usr/bin/env python3
"""
Disparity Refiner

Classical stereo matching plus a continuous-coordinate refinement network
that re-samples the noisy disparity map at any output resolution.

Usage:
    python disparity_refiner.py [--config refiner.toml] [--set section.key=value ...] <command> ...

Commands:
    match       run the SGM / AD-Census blackbox and write a raw disparity PFM
    refine      refine a raw disparity PFM with a trained checkpoint
    train       train a refinement model on synthetic scenes
    eval        compare raw and refined maps against ground truth
    synth       write a synthetic stereo scene (PNG images + GT PFM)
    export-ply  back-project a disparity PFM into a coloured point cloud

Exit codes: 0 success, 2 input error, 3 config/contract error, 4 numeric divergence.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import find_dotenv, load_dotenv
from pydantic import ValidationError

from blackbox import blackbox_summary, run_blackbox
from errors import ConfigError, RefinerError
from evaluation import compare_report, export_html_report, export_pointcloud, write_report
from refine_net import RefinementModel, load_checkpoint, refine_grid
from settings import LoggingSettings, RunConfig, load_run_config
from stereo_core import StereoPair, resize_bilinear
from stereo_io import read_disparity, read_image, write_pfm, write_png
from train import synth_scene, train_epochs

logger = logging.getLogger("disparity_refiner")


def configure_logging() -> None:
    level = LoggingSettings().log_level.upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disparity_refiner.py",
        description="Continuous neural disparity refinement",
    )
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config key (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="raw disparity from a classical matcher")
    p.add_argument("--left", type=Path, required=True)
    p.add_argument("--right", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output PFM")
    p.add_argument("--dmax", type=int, help="search range in left-image pixels")
    p.add_argument("--mode", choices=["sgm", "ad_census"])
    p.add_argument("--kappa-aware", action="store_true", help="accept a right image smaller than the left")

    p = sub.add_parser("refine", help="refine a raw disparity map")
    p.add_argument("--left", type=Path, required=True)
    p.add_argument("--right", type=Path, required=True)
    p.add_argument("--raw", type=Path, required=True, help="raw disparity PFM at left resolution")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output PFM")
    p.add_argument("--out-w", type=int)
    p.add_argument("--out-h", type=int)

    p = sub.add_parser("train", help="train on synthetic scenes")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--head", choices=["classification", "l1"])

    p = sub.add_parser("eval", help="raw vs refined metrics")
    p.add_argument("--raw", type=Path, required=True)
    p.add_argument("--refined", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, default=Path("reports"))
    p.add_argument("--html", action="store_true", help="also write an HTML report")

    p = sub.add_parser("synth", help="write a synthetic stereo scene")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--dmax", type=float, default=12.0)
    p.add_argument("--kappa", type=int, default=1, help="also write the right view downsampled by kappa")

    p = sub.add_parser("export-ply", help="disparity + image to PLY")
    p.add_argument("--disparity", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--binary", action="store_true")
    p.add_argument("--focal", type=float)
    p.add_argument("--baseline", type=float)
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    """Dedicated flags expressed as config overrides"""
    pairs = {
        "match": [("dmax", "blackbox.d_max"), ("mode", "blackbox.method")],
        "train": [("steps", "train.steps"), ("seed", "train.seed"), ("head", "net.head")],
        "export-ply": [("focal", "camera.focal"), ("baseline", "camera.baseline")],
    }
    overrides = []
    for attr, key in pairs.get(args.command, []):
        value = getattr(args, attr)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return overrides


def cmd_match(args: argparse.Namespace, run: RunConfig) -> None:
    pair = StereoPair(read_image(args.left), read_image(args.right))
    if not pair.balanced and not args.kappa_aware:
        raise ConfigError(
            f"left {pair.left.width}px and right {pair.right.width}px differ; pass --kappa-aware for unbalanced pairs"
        )
    disparity = run_blackbox(pair, run.blackbox)
    write_pfm(disparity, args.out)
    summary = blackbox_summary(disparity)
    print(f"✓ {run.blackbox.method} disparity ({disparity.width}x{disparity.height}, kappa={pair.kappa:.2f}) -> {args.out}")
    print(f"  valid: {100.0 * summary['valid_fraction']:.1f}%")


def cmd_refine(args: argparse.Namespace, run: RunConfig) -> None:
    pair = StereoPair(read_image(args.left), read_image(args.right))
    raw = read_disparity(args.raw)
    expected = run.net if "net" in run.model_fields_set else None
    model = load_checkpoint(args.ckpt, expected)
    out_w = args.out_w or pair.left.width
    out_h = args.out_h or pair.left.height
    refined = refine_grid(pair, raw, model, out_w, out_h)
    write_pfm(refined, args.out)
    print(f"✓ refined disparity {out_w}x{out_h} -> {args.out}")


def cmd_train(args: argparse.Namespace, run: RunConfig) -> None:
    model = RefinementModel(run.net, seed=run.train.seed)
    print("\n" + "=" * 60)
    print(f"🧠 TRAINING {run.net.head.upper()} HEAD ({run.train.steps} steps)")
    print("=" * 60)
    result = train_epochs(model, run.train, run.blackbox, args.out_dir)
    final = result.metrics.iloc[-1] if len(result.metrics) else None
    if final is not None:
        print(f"📊 final loss {final['total']:.4f} (ce {final['ce']:.4f}, offset {final['offset']:.4f})")
    print(f"✓ checkpoint: {result.checkpoint}")
    print(f"✓ metrics: {Path(args.out_dir) / 'metrics.csv'}")


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> None:
    raw = read_disparity(args.raw)
    refined = read_disparity(args.refined)
    gt = read_disparity(args.gt)
    cfg = run.eval
    report = compare_report(raw, refined, gt, cfg.thresholds, cfg.see_patch, cfg.edge_range_th, cfg.fill_raw_holes)
    print(report.to_text())
    paths = write_report(report, args.out_dir)
    if args.html:
        paths["html"] = export_html_report(
            report, Path(args.out_dir) / "report.html", {"raw": raw, "refined": refined, "gt": gt}
        )
    for kind, path in paths.items():
        print(f"✓ {kind}: {path}")


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> None:
    scene = synth_scene(args.seed, args.width, args.height, args.dmax)
    out = Path(args.out_dir)
    write_png(scene.left, out / "left.png")
    write_png(scene.right, out / "right.png")
    write_pfm(scene.d_gt, out / "gt.pfm")
    print(f"✓ scene seed={args.seed} {args.width}x{args.height} -> {out}")
    if args.kappa > 1:
        if args.width % args.kappa or args.height % args.kappa:
            raise ConfigError(f"kappa={args.kappa} must divide {args.width}x{args.height}")
        small = resize_bilinear(scene.right, args.width // args.kappa, args.height // args.kappa)
        write_png(small, out / f"right_k{args.kappa}.png")
        print(f"✓ right view at 1/{args.kappa} -> {out / f'right_k{args.kappa}.png'}")


def cmd_export_ply(args: argparse.Namespace, run: RunConfig) -> None:
    count = export_pointcloud(
        read_disparity(args.disparity), read_image(args.image), run.camera, args.out, binary=args.binary
    )
    print(f"✓ {count} points -> {args.out}")


COMMANDS = {
    "match": cmd_match,
    "refine": cmd_refine,
    "train": cmd_train,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "export-ply": cmd_export_ply,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    load_dotenv(find_dotenv(usecwd=True))
    configure_logging()
    try:
        run = load_run_config(args.config, list(args.overrides) + _flag_overrides(args))
        logger.info("command %s, config: %s", args.command, run.model_dump_json())
        seed = args.seed if getattr(args, "seed", None) is not None else run.train.seed
        logger.info("seed: %d", seed)
        COMMANDS[args.command](args, run)
    except RefinerError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"❌ invalid configuration: {e}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
