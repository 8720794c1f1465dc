"""Box overlap, center distance, image quality and benchmark scores."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import cv2
import numpy as np

from .geometry import BBox, Trajectory

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (n, 4) arrays in (x, y, w, h) format."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a[:, 2:] <= 0) or np.any(b[:, 2:] <= 0):
        raise ValueError("box size must be positive")
    iw = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.clip(inter / union, 0.0, 1.0)


def center_error(a: BBox, b: BBox) -> float:
    (ax, ay), (bx, by) = a.center(), b.center()
    return math.hypot(ax - bx, ay - by)


def _check_pair(pred: Trajectory, gt: Trajectory) -> None:
    if len(pred) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(pred)} vs {len(gt)}")
    if len(gt) < 2:
        raise ValueError("trajectories need at least one frame after the initial one")


def frame_ious(pred: Trajectory, gt: Trajectory) -> np.ndarray:
    """IoU for frames 1..n-1 (frame 0 is the supplied initialization)."""
    _check_pair(pred, gt)
    return iou_many(pred.as_array()[1:], gt.as_array()[1:])


def frame_center_errors(pred: Trajectory, gt: Trajectory) -> np.ndarray:
    _check_pair(pred, gt)
    return np.linalg.norm(pred.centers()[1:] - gt.centers()[1:], axis=1)


def success_score(pred: Trajectory, gt: Trajectory) -> float:
    return float(frame_ious(pred, gt).mean())


def precision_score(pred: Trajectory, gt: Trajectory, threshold: float = 20.0) -> float:
    if threshold <= 0:
        raise ValueError(f"precision threshold must be positive, got {threshold}")
    return float((frame_center_errors(pred, gt) < threshold).mean())


def success_rate(pred: Trajectory, gt: Trajectory, iou_threshold: float = 0.5) -> float:
    return float((frame_ious(pred, gt) > iou_threshold).mean())


def _gaussian_window() -> np.ndarray:
    g = cv2.getGaussianKernel(SSIM_WINDOW, SSIM_SIGMA, cv2.CV_64F)
    return g @ g.T


_WINDOW = _gaussian_window()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    out = cv2.filter2D(img, cv2.CV_64F, _WINDOW, borderType=cv2.BORDER_REFLECT)
    r = SSIM_WINDOW // 2
    return out[r:-r, r:-r]


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a * mu_a
    var_b = _filter_valid(b * b) - mu_b * mu_b
    cov = _filter_valid(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) for images in [0, 1].

    Colour images are scored per channel and the channel scores averaged.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3 or min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be HxW or HxWxC with sides >= {SSIM_WINDOW}, got {a.shape}")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[2])]))


def _frames(video) -> list:
    if hasattr(video, "frame") and hasattr(video, "__len__"):
        return [video.frame(i) for i in range(len(video))]
    return list(video)


def mean_ssim(video, adv_video) -> float:
    """Average per-frame SSIM between a clip and its adversarial counterpart."""
    frames = _frames(video)
    adv = _frames(adv_video)
    if len(frames) != len(adv):
        raise ValueError(f"frame count mismatch: {len(frames)} vs {len(adv)}")
    if not frames:
        raise ValueError("empty video")
    return float(np.mean([ssim(a, b) for a, b in zip(frames, adv)]))


def drop_rate(clean: float, adversarial: float, higher_is_worse: bool = False) -> float:
    """Relative degradation from clean to adversarial.

    For scores (higher is better) this is (clean - adv) / clean; for counts such
    as failures, where larger is worse, the increase (adv - clean) / clean.
    """
    if clean == 0:
        raise ValueError("drop rate undefined for a clean value of 0")
    if higher_is_worse:
        return (adversarial - clean) / clean
    return (clean - adversarial) / clean


METRICS = ("success_score", "precision_score", "success_rate", "mean_failures", "mean_ssim")
HIGHER_IS_WORSE = {"mean_failures"}


@dataclass
class EvalReport:
    success_score: float
    precision_score: float
    success_rate: float
    mean_ssim: float
    mean_failures: float | None = None
    drop_rates: dict = field(default_factory=dict)
    iou_zero_fraction: float | None = None
    # restart protocol: success score with re-init and skipped frames counted
    success_score_incl: float | None = None
    protocol: str = "OPE"
    attack: str = "none"
    per_video: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("success_score", "precision_score", "success_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not -1.0 <= self.mean_ssim <= 1.0:
            raise ValueError(f"mean_ssim must lie in [-1, 1], got {self.mean_ssim}")
        if self.mean_failures is not None and self.mean_failures < 0:
            raise ValueError("mean_failures must be nonnegative")

    def metric_values(self) -> dict:
        out = {}
        for name in METRICS:
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    def with_drop_rates(self, clean: "EvalReport") -> "EvalReport":
        """Copy of this report with drop rates measured against ``clean``."""
        rates = {}
        for name, adv in self.metric_values().items():
            ref = getattr(clean, name)
            if ref is None:
                continue
            rates[name] = drop_rate(ref, adv, name in HIGHER_IS_WORSE) if ref != 0 else None
        d = self.to_dict()
        d["drop_rates"] = rates
        return EvalReport.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def aggregate(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0
