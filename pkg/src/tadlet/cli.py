"""Command line entry point: `tadlet <command> ...`."""

from __future__ import annotations

import argparse
import logging
import sys

from pathlib import Path
from typing import Callable, Optional, Sequence

import yaml

from . import __version__, threads
from .ablation import ablate_augment, ablation_means, write_ablation
from .anchors import assignment_histogram
from .augment import AnnotatedClip
from .bootstrap import Bootstrap
from .config import AnchorConfig, AugmentPolicy, InferConfig, LossConfig, SynthSpec, TrainConfig
from .data import (
    SPLITS,
    annotated_fps,
    annotations_path,
    load_annotations,
    load_dataset,
    save_annotations,
    save_features,
    synth_dataset,
    write_dataset,
)
from .errors import TadError
from .evaluator import evaluate
from .gradcheck import run_suite
from .helpers import atomic_write_text
from .inference import detect_dataset, extract_features, read_detections, write_detections
from .trainer import fit


logger = logging.getLogger("tadlet")

LOG_FORMAT = "%(asctime)s [%(levelname)8s] %(name)s: %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def configure_logging(verbose: int = 0, quiet: bool = False) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT, force=True)


def _bootstrap(args: argparse.Namespace, path: str) -> Bootstrap:
    boot = Bootstrap.from_file(path)
    if args.deterministic:
        boot.override("train", deterministic=True)
    if boot.deterministic and not threads.pinned_at_import:
        logger.warning("deterministic run without %s or %s=1: BLAS thread pools were sized before the "
                       "configuration was read", threads.DETERMINISTIC_FLAG, threads.DETERMINISTIC_ENV)
    logger.debug("%s", boot.summary())
    return boot


# == Commands ==================================================================


def cmd_synth(args: argparse.Namespace) -> int:
    boot = _bootstrap(args, args.spec)
    dataset = synth_dataset(boot.section(SynthSpec))
    write_dataset(dataset, args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    boot = _bootstrap(args, args.config)
    out = Path(args.out)
    atomic_write_text(out / "config.yaml", yaml.safe_dump(boot.to_document(), sort_keys=True))
    dataset = load_dataset(args.data, "train")
    result = fit(
        dataset,
        boot.detector().model,
        boot.section(TrainConfig),
        boot.section(AugmentPolicy),
        anchor_cfg=boot.section(AnchorConfig),
        loss_cfg=boot.section(LossConfig),
        out_dir=out,
    )
    logger.info("trained %d iterations, final loss %.5f, checkpoint %s",
                result.iterations, result.final_loss, result.checkpoint_path)
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    boot = _bootstrap(args, args.config)
    model = boot.detector(args.checkpoint).model
    videos = load_dataset(args.data, args.split)
    detections = detect_dataset(videos, model, boot.section(InferConfig), boot.section(AnchorConfig),
                                boot.section(AugmentPolicy))
    write_detections(args.out, detections, annotated_fps(videos))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    annotations = load_annotations(args.annotations)
    detections = read_detections(args.detections)
    report = evaluate(detections, annotations.ground_truth(), annotations.num_classes, args.thresholds)
    report.write_csv(args.out)
    print(report.summary())
    return 0


def cmd_analyze_anchors(args: argparse.Namespace) -> int:
    boot = _bootstrap(args, args.config)
    cfg = boot.section(AnchorConfig)
    if args.num_scales:
        cfg = cfg.with_num_scales(args.num_scales)
    synth = boot.section(SynthSpec)
    annotations = load_annotations(args.annotations)
    clips = [AnnotatedClip(v.video_id, v.num_frames, v.fps, v.instances, num_classes=annotations.num_classes)
             for v in annotations.videos]
    histogram = assignment_histogram(clips, cfg, synth.small_max_sec, synth.medium_max_sec)
    histogram.write_csv(args.out)
    if args.plot:
        histogram.plot(args.plot, title=f"{cfg.num_scales} anchors per position")
    print(" ".join(f"{bucket}={histogram.mean(bucket):.3f}" for bucket in histogram.counts) +
          f" all={histogram.mean():.3f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    boot = _bootstrap(args, args.config)
    reports = run_suite(boot.section(LossConfig), seed=boot.seed)
    for report in reports:
        print(report)
    return 0 if all(r.passed for r in reports) else 1


def cmd_extract(args: argparse.Namespace) -> int:
    boot = _bootstrap(args, args.config)
    model = boot.detector(args.checkpoint).model
    policy = boot.section(AugmentPolicy)
    window = boot.section(InferConfig).window
    out = Path(args.out)
    for split in SPLITS:
        source = annotations_path(args.data, split)
        if not source.exists():
            continue
        save_annotations(annotations_path(out, split), load_annotations(source))
        for video in load_dataset(args.data, split):
            save_features(out / "features" / f"{video.video_id}.tadf", extract_features(video, model, policy, window))
    logger.info("features written to %s", out)
    return 0


def cmd_ablate_augment(args: argparse.Namespace) -> int:
    boot = _bootstrap(args, args.config)
    train, test = load_dataset(args.data, "train"), load_dataset(args.data, "test")
    rows = ablate_augment(boot, train, test, Path(args.out).parent / "ablation_runs", args.seeds)
    write_ablation(args.out, rows)
    for setting, mean in ablation_means(rows).items():
        print(f"{setting}: mean average mAP {mean:.4f}")
    return 0


# == Parser ====================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tadlet", description="Desk-scale one-stage temporal action detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, handler: Callable[[argparse.Namespace], int], summary: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=summary)
        sub.set_defaults(handler=handler)
        return sub

    sub = add("synth", cmd_synth, "generate a synthetic dataset")
    sub.add_argument("--spec", required=True, help="run configuration with a synth section")
    sub.add_argument("--out", required=True, help="dataset directory")

    sub = add("train", cmd_train, "train a detector")
    sub.add_argument("--config", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True, help="directory for metrics.csv and checkpoints")

    sub = add("infer", cmd_infer, "detect actions in every video of a split")
    sub.add_argument("--config", required=True)
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--split", choices=SPLITS, default="test")
    sub.add_argument("--out", required=True, help="detections JSON")

    sub = add("eval", cmd_eval, "mAP report of a detections file")
    sub.add_argument("--detections", required=True)
    sub.add_argument("--annotations", required=True)
    sub.add_argument("--out", required=True, help="report CSV")
    sub.add_argument("--thresholds", type=float, nargs="+", default=[0.3, 0.4, 0.5, 0.6, 0.7])

    sub = add("analyze-anchors", cmd_analyze_anchors, "positives per ground truth by scale bucket")
    sub.add_argument("--config", required=True)
    sub.add_argument("--annotations", required=True)
    sub.add_argument("--out", required=True, help="histogram CSV")
    sub.add_argument("--plot", help="also render the PDF/CDF curves to this image")
    sub.add_argument("--num-scales", type=int, help="use {2^(i/n)} anchor scales instead of the configured ones")

    sub = add("gradcheck", cmd_gradcheck, "finite-difference check of every reverse pass")
    sub.add_argument("--config", required=True)

    sub = add("extract", cmd_extract, "convert a frame dataset into feature sequences")
    sub.add_argument("--config", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--checkpoint", help="detector weights; the seeded initialization otherwise")

    sub = add("ablate-augment", cmd_ablate_augment, "held-out mAP with and without image-level augmentation")
    sub.add_argument("--config", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True, help="comparison CSV")
    sub.add_argument("--seeds", type=int, nargs="+", default=[1, 2])

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return int(args.handler(args))
    except TadError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
