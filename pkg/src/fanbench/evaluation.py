"""One-pass and restart evaluation, transfer runs, hook timing and report files."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackSpec, build_hook
from .data import spec_trajectory
from .gan import Generator, load_generator
from .geometry import BBox, Trajectory
from .metrics import (HIGHER_IS_WORSE, METRICS, EvalReport, aggregate, drop_rate, iou, ssim)
from .tracker import (WINDOW_WEIGHT, FrameRecord, SiamFCTracker, TrackerModel,
                      apply_frame_perturbations)
from .video import VideoClip

log = logging.getLogger(__name__)

PROTOCOLS = ("OPE", "RESTART")


@dataclass
class ProtocolConfig:
    protocol: str = "OPE"
    restart_skip: int = 5
    precision_threshold: float = 20.0
    success_threshold: float = 0.5
    window_weight: float = WINDOW_WEIGHT
    workers: int = 1

    def __post_init__(self):
        self.protocol = self.protocol.upper()
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.restart_skip < 1:
            raise ValueError("restart_skip must be >= 1")
        if self.precision_threshold <= 0:
            raise ValueError("precision_threshold must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def _session(tracker, cfg: ProtocolConfig):
    """A fresh tracking session: SiamFC around a model, or the stub object itself."""
    if isinstance(tracker, TrackerModel):
        return SiamFCTracker(tracker, cfg.window_weight)
    if hasattr(tracker, "init") and hasattr(tracker, "update"):
        return tracker
    raise TypeError("tracker must be a TrackerModel or provide init()/update()")


def _video_ssim(video: VideoClip, records: list[FrameRecord]) -> float:
    """Mean SSIM over all frames after writing patch perturbations back."""
    per_frame: dict[int, list] = {}
    for r in records:
        if r.search_delta is not None:
            per_frame.setdefault(r.frame_index, []).append((r.search_delta, r.search_box))
        if r.exemplar_delta is not None:
            # the exemplar is cut from the frame its session was initialised on
            per_frame.setdefault(r.init_frame, []).append((r.exemplar_delta, r.exemplar_box))
    values = []
    for i in range(len(video)):
        patches = per_frame.get(i)
        if not patches:
            values.append(1.0)
            continue
        clean = video.frame(i)
        values.append(ssim(clean, apply_frame_perturbations(clean, patches)))
    return float(np.mean(values))


def _track_ope(tracker, video: VideoClip, hook, cfg: ProtocolConfig):
    session = _session(tracker, cfg)
    records: list = []
    session.init(video.frame(0), video.gt[0])
    boxes = [video.gt[0]]
    for i in range(1, len(video)):
        boxes.append(session.update(video.frame(i), i, hook, records))
    return Trajectory(boxes), records


def _per_video(video: VideoClip, pred: Trajectory, ious: np.ndarray, errors: np.ndarray,
               cfg: ProtocolConfig, mean_ssim: float, **extra) -> dict:
    spec = spec_trajectory(video.gt)
    spec_err = np.linalg.norm(pred.centers()[1:] - spec.centers()[1:], axis=1)
    out = {
        "name": video.name,
        "success_score": float(ious.mean()) if ious.size else 0.0,
        "precision_score": float((errors < cfg.precision_threshold).mean()) if errors.size else 0.0,
        "success_rate": float((ious > cfg.success_threshold).mean()) if ious.size else 0.0,
        "iou_zero_fraction": float((ious == 0).mean()) if ious.size else 0.0,
        "spec_precision": float((spec_err < cfg.precision_threshold).mean()),
        "mean_ssim": mean_ssim,
        "ious": [float(v) for v in ious],
        "center_errors": [float(v) for v in errors],
        "spec_center_errors": [float(v) for v in spec_err],
        "trajectory": pred.as_array().tolist(),
    }
    out.update(extra)
    return out


def _evaluate_video_ope(tracker, video, attack, cfg, attacker, generator) -> dict:
    hook = build_hook(attack, attacker, video.gt, generator)
    pred, records = _track_ope(tracker, video, hook, cfg)
    gt = video.gt.as_array()[1:]
    ious = np.array([iou(BBox(*p), BBox(*g)) for p, g in zip(pred.as_array()[1:], gt)])
    errors = np.linalg.norm(pred.centers()[1:] - video.gt.centers()[1:], axis=1)
    extra = {"misses": list(getattr(hook, "misses", []))}
    return _per_video(video, pred, ious, errors, cfg, _video_ssim(video, records), **extra)


def _evaluate_video_restart(tracker, video, attack, cfg, attacker, generator) -> dict:
    """VOT-style run: a zero-IoU frame is a failure; re-init ``restart_skip`` frames later."""
    hook = build_hook(attack, attacker, video.gt, generator)
    n = len(video)
    session = _session(tracker, cfg)
    records: list = []
    boxes: list[BBox] = [video.gt[0]] * n
    status = ["init"] + ["skip"] * (n - 1)
    failures = 0
    start = 0
    while start < n:
        session.init(video.frame(start), video.gt[start])
        boxes[start] = video.gt[start]
        status[start] = "init"
        i = start + 1
        restarted = False
        while i < n:
            box = session.update(video.frame(i), i, hook, records)
            boxes[i] = box
            if iou(box, video.gt[i]) == 0.0:
                status[i] = "fail"
                failures += 1
                start = i + cfg.restart_skip
                restarted = True
                break
            status[i] = "track"
            i += 1
        if not restarted:
            break
    _fix_init_frames(records, status)

    idx = [i for i in range(1, n) if status[i] in ("track", "fail")]
    ious = np.array([iou(boxes[i], video.gt[i]) for i in idx])
    errors = np.array([np.hypot(*(np.subtract(boxes[i].center(), video.gt[i].center())))
                       for i in idx])
    incl = np.array([1.0 if status[i] == "init" else
                     0.0 if status[i] == "skip" else iou(boxes[i], video.gt[i])
                     for i in range(1, n)])
    pred = Trajectory(boxes)
    return _per_video(video, pred, ious, errors, cfg, _video_ssim(video, records),
                      failures=failures, success_score_incl=float(incl.mean()),
                      status=status)


def _fix_init_frames(records: list, status: list) -> None:
    """Tag each record with the frame its session's exemplar was cut from."""
    last_init = 0
    by_frame = {}
    for i, s in enumerate(status):
        if s == "init":
            last_init = i
        by_frame[i] = last_init
    for r in records:
        r.init_frame = by_frame[r.frame_index]


def _run(tracker, videos: Sequence[VideoClip], attack: AttackSpec | None,
         cfg: ProtocolConfig, attacker=None, generator: Generator | None = None) -> list[dict]:
    attack = attack or AttackSpec()
    for v in videos:
        if v.gt is None:
            raise ValueError(f"{v.name}: evaluation needs annotated clips")
    if attack.kind.startswith("fan") and generator is None:
        generator = load_generator(attack.generator)
    if attacker is None:
        attacker = tracker
    worker = _evaluate_video_restart if cfg.protocol == "RESTART" else _evaluate_video_ope

    def one(v):
        return worker(tracker, v, attack, cfg, attacker, generator)

    if cfg.workers > 1 and isinstance(tracker, TrackerModel):
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(one, videos))
    return [one(v) for v in videos]


def _reduce(per_video: list[dict], attack: AttackSpec | None, cfg: ProtocolConfig) -> EvalReport:
    def mean(key):
        return aggregate([p[key] for p in per_video])

    restart = cfg.protocol == "RESTART"
    return EvalReport(
        success_score=mean("success_score"),
        precision_score=mean("precision_score"),
        success_rate=mean("success_rate"),
        mean_ssim=mean("mean_ssim"),
        mean_failures=mean("failures") if restart else None,
        iou_zero_fraction=mean("iou_zero_fraction"),
        success_score_incl=mean("success_score_incl") if restart else None,
        protocol=cfg.protocol,
        attack=(attack or AttackSpec()).kind,
        per_video=per_video,
    )


def run_ope(tracker, videos: Sequence[VideoClip], attack: AttackSpec | None = None,
            cfg: ProtocolConfig | None = None, generator: Generator | None = None,
            attacker: TrackerModel | None = None) -> EvalReport:
    """Single initialisation at frame 0, no re-initialisation; metrics averaged over videos."""
    cfg = ProtocolConfig() if cfg is None else cfg
    if cfg.protocol != "OPE":
        cfg = ProtocolConfig(**{**cfg.__dict__, "protocol": "OPE"})
    return _reduce(_run(tracker, videos, attack, cfg, attacker, generator), attack, cfg)


def run_restart(tracker, videos: Sequence[VideoClip], attack: AttackSpec | None = None,
                cfg: ProtocolConfig | None = None, generator: Generator | None = None,
                attacker: TrackerModel | None = None) -> EvalReport:
    """Restart protocol; ``mean_failures`` is total failures over the video count.

    ``success_score`` covers tracked frames (failure frames included, skipped
    and re-initialisation frames excluded); ``success_score_incl`` scores
    skipped frames as 0 and re-initialisation frames as 1.
    """
    cfg = ProtocolConfig(**{**(cfg or ProtocolConfig()).__dict__, "protocol": "RESTART"})
    return _reduce(_run(tracker, videos, attack, cfg, attacker, generator), attack, cfg)


def evaluate(tracker, videos, attack=None, cfg: ProtocolConfig | None = None, **kw) -> EvalReport:
    cfg = cfg or ProtocolConfig()
    run = run_restart if cfg.protocol == "RESTART" else run_ope
    return run(tracker, videos, attack, cfg, **kw)


def run_transfer(attack: AttackSpec, victim: TrackerModel, videos: Sequence[VideoClip],
                 cfg: ProtocolConfig | None = None, generator: Generator | None = None,
                 attacker: TrackerModel | None = None, clean: EvalReport | None = None) -> EvalReport:
    """Attack crafted against ``attacker`` (gradient kinds) or a fixed generator,
    scored on ``victim``; drop rates are relative to the victim's clean run."""
    cfg = cfg or ProtocolConfig()
    adv = evaluate(victim, videos, attack, cfg, generator=generator,
                   attacker=attacker if attacker is not None else victim)
    if clean is None:
        clean = evaluate(victim, videos, AttackSpec(), cfg)
    return adv.with_drop_rates(clean)


# --------------------------------------------------------------------------- timing


@dataclass
class Latency:
    median: float
    p95: float
    samples: list = field(default_factory=list, repr=False)


def timing_benchmark(hooks: dict, patches: Sequence, repeats: int = 10) -> dict[str, Latency]:
    """Per-call latency (seconds) of each hook on the given PatchPairs.

    ``None`` stands for the unattacked pass-through. Each hook gets one
    untimed warm-up call.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = {}
    for name, hook in hooks.items():
        call = hook if hook is not None else (lambda p, i: (p.exemplar, p.search))
        call(patches[0], 1)
        samples = []
        for r in range(repeats):
            for k, pair in enumerate(patches):
                t0 = time.perf_counter()
                call(pair, k + 1)
                samples.append(time.perf_counter() - t0)
        out[name] = Latency(float(np.median(samples)), float(np.percentile(samples, 95)), samples)
    return out


# --------------------------------------------------------------------------- reports


def _label(report: EvalReport, used: set) -> str:
    base = report.attack if report.protocol == "OPE" else f"{report.attack} ({report.protocol})"
    label, k = base, 2
    while label in used:
        label, k = f"{base} #{k}", k + 1
    used.add(label)
    return label


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def markdown_table(reports: Sequence[EvalReport]) -> str:
    """Metric rows; one column per report plus a drop-rate column after each
    adversarial report (measured against the first unattacked report)."""
    clean = next((r for r in reports if r.attack == "none"), None)
    used: set = set()
    labels = [_label(r, used) for r in reports]
    header, sep = ["metric"], ["---"]
    for r, lab in zip(reports, labels):
        header.append(lab)
        sep.append("---:")
        if clean is not None and r is not clean:
            header.append(f"drop ({lab})")
            sep.append("---:")
    lines = ["| " + " | ".join(header) + " |", "| " + " | ".join(sep) + " |"]
    metrics = [m for m in METRICS if any(getattr(r, m) is not None for r in reports)]
    for m in metrics:
        row = [m]
        for r in reports:
            v = getattr(r, m)
            row.append(_fmt(v))
            if clean is not None and r is not clean:
                ref = getattr(clean, m)
                ok = v is not None and ref not in (None, 0)
                row.append(_fmt(drop_rate(ref, v, m in HIGHER_IS_WORSE) if ok else None))
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(reports: Sequence[EvalReport], path, plots: bool = True) -> dict:
    """Write reports.json, report.md and per-video IoU / centre-error plots."""
    reports = list(reports)
    if not reports:
        raise ValueError("emit_report needs at least one report")
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1))
        (root / "report.md").write_text(markdown_table(reports))
    except OSError as exc:
        raise OSError(f"cannot write report to {root}: {exc}") from exc
    written = {"json": root / "reports.json", "markdown": root / "report.md", "plots": []}
    if plots:
        written["plots"] = _plot_curves(reports, root / "plots")
    return written


def _plot_curves(reports: Sequence[EvalReport], out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    used: set = set()
    labels = [_label(r, used) for r in reports]
    names = [p["name"] for p in reports[0].per_video]
    paths = []
    for k, name in enumerate(names):
        fig, (ax_iou, ax_err) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
        for r, lab in zip(reports, labels):
            if k >= len(r.per_video) or r.per_video[k]["name"] != name:
                continue
            pv = r.per_video[k]
            frames = np.arange(1, len(pv["ious"]) + 1)
            ax_iou.plot(frames, pv["ious"], label=lab, lw=1)
            ax_err.plot(frames, pv["center_errors"], label=lab, lw=1)
        ax_iou.set_ylabel("IoU")
        ax_err.set_ylabel("centre error (px)")
        ax_err.set_xlabel("evaluated frame")
        ax_iou.legend(fontsize=7)
        ax_iou.set_title(name)
        fig.tight_layout()
        p = out / f"{name}.png"
        fig.savefig(p, dpi=80)
        plt.close(fig)
        paths.append(p)
    return paths


def load_reports(path) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads((Path(path) / "reports.json").read_text())]
