"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attacks import AttackSpec, build_hook
from .data import load_dataset, load_video
from .evaluation import ProtocolConfig, emit_report, evaluate, load_reports, markdown_table
from .gan import FanTrainingError, load_generator, save_generator
from .pipeline import PipelineConfig, fit_generator, fit_tracker, load_splits, write_splits
from .tracker import TrackerTrainingError, load_tracker, save_tracker, track_video

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("fanbench")


def _cmd_make_data(args) -> int:
    cfg = PipelineConfig.load(args.config)
    write_splits(load_splits(cfg), args.out)
    return EXIT_OK


def _cmd_train_tracker(args) -> int:
    cfg = PipelineConfig.load(args.config)
    model = fit_tracker(cfg, load_splits(cfg), args.variant)
    save_tracker(model, args.out, {"seed": cfg.seed})
    return EXIT_OK


def _cmd_train_fan(args) -> int:
    cfg = PipelineConfig.load(args.config)
    tracker = load_tracker(args.tracker)
    gen = fit_generator(cfg, tracker, load_splits(cfg), args.preset)
    save_generator(gen, args.out, cfg.weights(args.preset),
                   {"preset": args.preset, "tracker": str(args.tracker),
                    "validation": gen.history["val"]})
    return EXIT_OK


def _attack_spec(arg: str | None) -> AttackSpec:
    if arg is None or arg == "none":
        return AttackSpec()
    return AttackSpec.from_json(arg)


def _cmd_attack(args) -> int:
    tracker = load_tracker(args.tracker)
    video = load_video(args.video)
    spec = _attack_spec(args.attack)
    hook = build_hook(spec, tracker, video.gt)
    traj = track_video(tracker, video, perturb_hook=hook)
    traj.to_csv(args.out)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    tracker = load_tracker(args.tracker)
    videos = load_dataset(args.videos)
    if not videos:
        raise ValueError(f"no clips found under {args.videos}")
    cfg = ProtocolConfig(protocol=args.protocol, restart_skip=args.restart_skip,
                         workers=args.workers)
    spec = _attack_spec(args.attack)
    reports = [evaluate(tracker, videos, AttackSpec(), cfg)]
    if spec.kind != "none":
        reports.append(evaluate(tracker, videos, spec, cfg).with_drop_rates(reports[0]))
    emit_report(reports, args.out, plots=not args.no_plots)
    print(markdown_table(reports), end="")
    return EXIT_OK


def _cmd_report(args) -> int:
    reports = load_reports(args.input)
    if args.format == "json":
        print(json.dumps([r.to_dict() for r in reports], indent=1))
    else:
        print(markdown_table(reports), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fanbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="generate and save the synthetic splits")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_make_data)

    s = sub.add_parser("train-tracker", help="train a Siamese tracker")
    s.add_argument("--config")
    s.add_argument("--variant", choices=("A", "B"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_train_tracker)

    s = sub.add_parser("train-fan", help="train a perturbation generator against a tracker")
    s.add_argument("--tracker", required=True)
    s.add_argument("--preset", choices=("untargeted", "targeted"), required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_train_fan)

    s = sub.add_parser("attack", help="track one clip under attack and write the trajectory")
    s.add_argument("--tracker", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--attack", required=True, help="attack spec JSON or 'none'")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_attack)

    s = sub.add_parser("evaluate", help="clean and attacked evaluation with report files")
    s.add_argument("--tracker", required=True)
    s.add_argument("--videos", required=True)
    s.add_argument("--attack", default="none")
    s.add_argument("--protocol", choices=("ope", "restart"), default="ope")
    s.add_argument("--restart-skip", type=int, default=5)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("report", help="print a saved report")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", choices=("md", "json"), default="md")
    s.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FanTrainingError, TrackerTrainingError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
