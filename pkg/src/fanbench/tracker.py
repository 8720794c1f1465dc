"""SiamFC-style fully-convolutional Siamese tracker.

Exemplar crops are 127x127, search crops 255x255, the backbone has total
stride 8 and the cross-correlation response is 17x17.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import BBox, Trajectory
from .video import VideoClip

log = logging.getLogger(__name__)

EXEMPLAR_SIZE = 127
SEARCH_SIZE = 255
TOTAL_STRIDE = 8
RESPONSE_SIZE = 17
RESPONSE_UPSCALE = 16
CONTEXT_MARGIN = 0.5
WINDOW_WEIGHT = 0.3
POSITIVE_RADIUS = 2
RECEPTIVE_FIELD = 87

VARIANTS = {
    # ~1/4 of the AlexNet widths used by SiamFC
    "A": {"widths": (24, 64, 96, 96, 64), "activation": "relu"},
    "B": {"widths": (16, 48, 72, 72, 48), "activation": "leaky_relu"},
}


class TrackerTrainingError(RuntimeError):
    def __init__(self, message: str, loss_curve: list[float]):
        super().__init__(message)
        self.loss_curve = loss_curve


# --------------------------------------------------------------------------- patches


def context_side(box: BBox, context_margin: float = CONTEXT_MARGIN) -> float:
    m = context_margin * (box.w + box.h)
    return math.sqrt((box.w + m) * (box.h + m))


def crop_patch(frame: np.ndarray, box: BBox, context_margin: float = CONTEXT_MARGIN,
               out_size: int = EXEMPLAR_SIZE, side_scale: float = 1.0,
               pad_color=None) -> tuple[np.ndarray, float]:
    """Square crop centred on ``box`` resized to ``out_size``.

    The crop side is sqrt((w + m)(h + m)) with m = context_margin * (w + h),
    multiplied by ``side_scale`` (255/127 for search regions). Area outside the
    frame is filled with the frame's mean colour.

    Returns the patch and the scale factor in frame pixels per patch pixel.
    """
    frame = np.asarray(frame, dtype=np.float32)
    h, w = frame.shape[:2]
    cx, cy = box.center()
    if not (0 <= cx <= w and 0 <= cy <= h):
        raise ValueError(f"box center ({cx:.1f}, {cy:.1f}) outside {w}x{h} frame")
    side = context_side(box, context_margin) * side_scale
    if side <= 0:
        raise ValueError("degenerate crop")
    scale = side / out_size
    if pad_color is None:
        pad_color = frame.reshape(-1, frame.shape[-1]).mean(axis=0)
    # pixel centres sit at integer + 0.5 in continuous coordinates
    m = np.array([[scale, 0.0, cx - scale * out_size / 2.0 + scale * 0.5 - 0.5],
                  [0.0, scale, cy - scale * out_size / 2.0 + scale * 0.5 - 0.5]])
    patch = cv2.warpAffine(frame, m, (out_size, out_size),
                           flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                           borderMode=cv2.BORDER_CONSTANT,
                           borderValue=tuple(float(c) for c in pad_color))
    return patch, scale


def frame_to_patch(point, center, scale: float, out_size: int) -> tuple[float, float]:
    return ((point[0] - center[0]) / scale + out_size / 2.0,
            (point[1] - center[1]) / scale + out_size / 2.0)


def patch_to_frame(point, center, scale: float, out_size: int) -> tuple[float, float]:
    return ((point[0] - out_size / 2.0) * scale + center[0],
            (point[1] - out_size / 2.0) * scale + center[1])


def box_to_patch(box: BBox, region: BBox, out_size: int) -> BBox:
    """Express a frame box in the coordinates of a square crop ``region``."""
    scale = region.w / out_size
    x, y = frame_to_patch((box.x, box.y), region.center(), scale, out_size)
    return BBox(x, y, box.w / scale, box.h / scale)


def paste_patch_delta(frame_shape, delta: np.ndarray, region: BBox):
    """Map a patch-space perturbation back into frame space.

    Returns the warped perturbation and its coverage weights so several
    patches on the same frame can be overlap-averaged.
    """
    h, w = frame_shape[:2]
    out_size = delta.shape[0]
    scale = region.w / out_size
    cx, cy = region.center()
    m = np.array([[scale, 0.0, cx - scale * out_size / 2.0 + scale * 0.5 - 0.5],
                  [0.0, scale, cy - scale * out_size / 2.0 + scale * 0.5 - 0.5]])
    # forward map: patch -> frame
    warped = cv2.warpAffine(delta.astype(np.float32), m, (w, h), flags=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    weight = cv2.warpAffine(np.ones(delta.shape[:2], np.float32), m, (w, h),
                            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    return warped, weight


def apply_frame_perturbations(frame: np.ndarray, patches) -> np.ndarray:
    """Write patch perturbations ``[(delta, region), ...]`` into a frame.

    Overlapping contributions are averaged; the result is clipped to [0, 1].
    """
    frame = np.asarray(frame, dtype=np.float32)
    acc = np.zeros_like(frame)
    wsum = np.zeros(frame.shape[:2], np.float32)
    for delta, region in patches:
        warped, weight = paste_patch_delta(frame.shape, delta, region)
        # warped is already coverage-weighted at the patch border
        acc += warped
        wsum += weight
    covered = wsum > 1e-6
    out = frame.copy()
    out[covered] += acc[covered] / wsum[covered][:, None]
    return np.clip(out, 0.0, 1.0)


@dataclass
class PatchPair:
    exemplar: np.ndarray
    search: np.ndarray
    search_box: BBox
    scale_factor: float
    exemplar_box: BBox | None = None


# --------------------------------------------------------------------------- labels


def make_labels(size: int = RESPONSE_SIZE, radius: float = POSITIVE_RADIUS,
                offset: tuple = (0.0, 0.0)) -> np.ndarray:
    """+1 within Euclidean ``radius`` cells of the grid centre, -1 elsewhere.

    ``offset`` moves the disc centre by (dx, dy) cells.
    """
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - c - offset[1]) ** 2 + (xx - c - offset[0]) ** 2)
    labels = np.where(dist <= radius, 1.0, -1.0).astype(np.float32)
    if labels.min() == labels.max():
        raise ValueError("label partition must have both regions")
    return labels


@dataclass
class ResponseMap:
    scores: np.ndarray
    labels: np.ndarray = field(default_factory=make_labels)
    positive_radius: float = POSITIVE_RADIUS

    def positive_mask(self) -> np.ndarray:
        return self.labels > 0

    def argmax(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.scores)), self.scores.shape)
        return int(r), int(c)


# --------------------------------------------------------------------------- model


def _activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU(inplace=True)
    if name == "leaky_relu":
        return nn.LeakyReLU(0.1, inplace=True)
    raise ValueError(f"unknown activation {name}")


class TrackerModel(nn.Module):
    """Siamese network: shared AlexNet-geometry backbone plus scaled cross-correlation."""

    def __init__(self, variant: str = "A", seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown tracker variant {variant!r}")
        self.variant = variant
        self.seed = seed
        c1, c2, c3, c4, c5 = VARIANTS[variant]["widths"]
        act = VARIANTS[variant]["activation"]
        gen = torch.Generator().manual_seed(seed)
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, 11, 2), nn.BatchNorm2d(c1), _activation(act), nn.MaxPool2d(3, 2),
            nn.Conv2d(c1, c2, 5), nn.BatchNorm2d(c2), _activation(act), nn.MaxPool2d(3, 2),
            nn.Conv2d(c2, c3, 3), nn.BatchNorm2d(c3), _activation(act),
            nn.Conv2d(c3, c4, 3), nn.BatchNorm2d(c4), _activation(act),
            nn.Conv2d(c4, c5, 3),
        )
        self.response_scale = nn.Parameter(torch.tensor(1e-3))
        self.response_bias = nn.Parameter(torch.tensor(0.0))
        for m in self.features.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    m.bias.zero_()

    def forward_features(self, patch: torch.Tensor) -> torch.Tensor:
        size = patch.shape[-1]
        if patch.dim() != 4 or patch.shape[1] != 3 or patch.shape[-2] != size:
            raise ValueError(f"expected (B, 3, S, S) patches, got {tuple(patch.shape)}")
        if size < RECEPTIVE_FIELD or (size - RECEPTIVE_FIELD) % TOTAL_STRIDE:
            raise ValueError(f"patch side {size} incompatible with stride {TOTAL_STRIDE}")
        return self.features(patch)

    def correlate(self, z_feat: torch.Tensor, x_feat: torch.Tensor) -> torch.Tensor:
        """Per-sample cross-correlation of exemplar over search features -> (B, 1, R, R)."""
        if z_feat.shape[:2] != x_feat.shape[:2] and z_feat.shape[0] != 1:
            raise ValueError(f"feature mismatch {tuple(z_feat.shape)} vs {tuple(x_feat.shape)}")
        b, c, h, w = x_feat.shape
        if z_feat.shape[0] == 1 and b > 1:
            z_feat = z_feat.expand(b, -1, -1, -1)
        out = F.conv2d(x_feat.reshape(1, b * c, h, w), z_feat, groups=b)
        out = out.reshape(b, 1, out.shape[-2], out.shape[-1])
        return out * self.response_scale + self.response_bias

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.correlate(self.forward_features(z), self.forward_features(x))

    def config(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "stride": TOTAL_STRIDE,
                "exemplar_size": EXEMPLAR_SIZE, "search_size": SEARCH_SIZE,
                "response_size": RESPONSE_SIZE, "widths": list(VARIANTS[self.variant]["widths"]),
                "activation": VARIANTS[self.variant]["activation"]}


def to_tensor(patch) -> torch.Tensor:
    """HxWx3 / BxHxWx3 numpy patches (or BxCxHxW tensors) to float32 NCHW."""
    if isinstance(patch, torch.Tensor):
        return patch if patch.dim() == 4 else patch.unsqueeze(0)
    arr = np.asarray(patch, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected HxWx3 patches, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return arr[0] if arr.shape[0] == 1 else arr


def extract_features(model: TrackerModel, patch) -> torch.Tensor:
    return model.forward_features(to_tensor(patch).to(next(model.parameters()).dtype))


def response(model: TrackerModel, z, x) -> ResponseMap:
    zt, xt = to_tensor(z), to_tensor(x)
    if zt.shape[-1] >= xt.shape[-1]:
        raise ValueError(f"exemplar ({zt.shape[-1]}) must be smaller than search ({xt.shape[-1]})")
    with torch.no_grad():
        s = model(zt, xt)
    return ResponseMap(s[0, 0].numpy().astype(np.float64), make_labels(s.shape[-1]))


def save_tracker(model: TrackerModel, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = model.config()
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_tracker(path) -> TrackerModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    model = TrackerModel(meta["variant"], meta.get("seed", 0))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model


# --------------------------------------------------------------------------- inference

_HANN = np.outer(np.hanning((RESPONSE_SIZE - 1) * RESPONSE_UPSCALE + 1),
                 np.hanning((RESPONSE_SIZE - 1) * RESPONSE_UPSCALE + 1))


def upsample_response(scores: np.ndarray) -> np.ndarray:
    """Bicubic x16 upsampling with grid cells landing exactly on output samples."""
    n = scores.shape[-1]
    t = torch.from_numpy(np.asarray(scores, dtype=np.float64))[None, None]
    up = F.interpolate(t, size=((n - 1) * RESPONSE_UPSCALE + 1,) * 2, mode="bicubic",
                       align_corners=True)
    return up[0, 0].numpy()


def cosine_window_penalty(scores, prev_box: BBox, scale_factor: float,
                          window_weight: float = WINDOW_WEIGHT) -> BBox:
    """Cosine-window-penalised argmax of a response mapped back to a frame box.

    ``scale_factor`` is frame pixels per search-patch pixel. The box size is
    carried over from ``prev_box``.
    """
    if not 0.0 <= window_weight <= 1.0:
        raise ValueError(f"window weight must be in [0, 1], got {window_weight}")
    if isinstance(scores, ResponseMap):
        scores = scores.scores
    up = upsample_response(scores)
    if up.shape != _HANN.shape:
        raise ValueError(f"expected a {RESPONSE_SIZE}x{RESPONSE_SIZE} response")
    up = up - up.min()
    total = up.sum()
    if total > 0:
        up = up / total
    blended = (1.0 - window_weight) * up + window_weight * _HANN / _HANN.sum()
    r, c = np.unravel_index(int(np.argmax(blended)), blended.shape)
    mid = (blended.shape[0] - 1) / 2.0
    step = TOTAL_STRIDE / RESPONSE_UPSCALE
    dx = (c - mid) * step * scale_factor
    dy = (r - mid) * step * scale_factor
    return prev_box.shifted(dx, dy)


PerturbHook = Callable[[PatchPair, int], tuple]


@dataclass
class FrameRecord:
    frame_index: int
    search_box: BBox
    scores: np.ndarray
    search_delta: np.ndarray | None = None
    exemplar_delta: np.ndarray | None = None
    exemplar_box: BBox | None = None
    # frame the exemplar was cropped from (set by the evaluation protocol)
    init_frame: int = 0


class SiamFCTracker:
    """Single-scale SiamFC tracking loop around a (frozen) TrackerModel."""

    def __init__(self, model: TrackerModel, window_weight: float = WINDOW_WEIGHT,
                 context_margin: float = CONTEXT_MARGIN):
        self.model = model.eval()
        self.window_weight = window_weight
        self.context_margin = context_margin

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def init(self, frame: np.ndarray, box: BBox) -> None:
        self.box = box
        self.frame_size = frame.shape[:2]
        self.z, scale = crop_patch(frame, box, self.context_margin, EXEMPLAR_SIZE)
        side = scale * EXEMPLAR_SIZE
        self.exemplar_box = BBox.from_center(*box.center(), side, side)
        self._z_used = self.z
        self._z_feat = self._features(self.z)
        self._exemplar_reported = False

    def _features(self, patch: np.ndarray) -> torch.Tensor:
        with torch.no_grad():
            return self.model.forward_features(to_tensor(patch).to(self.dtype))

    def update(self, frame: np.ndarray, frame_index: int, hook: PerturbHook | None = None,
               records: list | None = None) -> BBox:
        x, scale = crop_patch(frame, self.box, self.context_margin, SEARCH_SIZE,
                              side_scale=SEARCH_SIZE / EXEMPLAR_SIZE)
        side = scale * SEARCH_SIZE
        search_box = BBox.from_center(*self.box.center(), side, side)
        z_in, x_in = self.z, x
        if hook is not None:
            pair = PatchPair(self.z, x, search_box, scale, self.exemplar_box)
            z_in, x_in = hook(pair, frame_index)
            _check_patch(z_in, self.z.shape, "exemplar")
            _check_patch(x_in, x.shape, "search")
        if z_in is not self._z_used and not np.array_equal(z_in, self._z_used):
            self._z_feat = self._features(z_in)
            self._z_used = z_in
        with torch.no_grad():
            x_feat = self.model.forward_features(to_tensor(x_in).to(self.dtype))
            s = self.model.correlate(self._z_feat, x_feat)[0, 0].double().numpy()
        box = cosine_window_penalty(s, self.box, scale, self.window_weight)
        # keep the search centre on the frame so the next crop stays valid
        h, w = self.frame_size
        cx, cy = box.center()
        box = BBox.from_center(min(max(cx, 0.0), float(w)), min(max(cy, 0.0), float(h)),
                               box.w, box.h)
        if records is not None:
            rec = FrameRecord(frame_index, search_box, s)
            if x_in is not x:
                d = np.asarray(x_in, np.float32) - x
                rec.search_delta = d if np.any(d) else None
            if not self._exemplar_reported and z_in is not self.z:
                d = np.asarray(z_in, np.float32) - self.z
                if np.any(d):
                    rec.exemplar_delta = d
                    rec.exemplar_box = self.exemplar_box
                    self._exemplar_reported = True
            records.append(rec)
        self.box = box
        return box


def _check_patch(p, shape, what: str) -> None:
    p = np.asarray(p)
    if p.shape != shape:
        raise ValueError(f"hook returned {what} of shape {p.shape}, expected {shape}")


def track_video(model: TrackerModel, video: VideoClip, init: BBox | None = None,
                perturb_hook: PerturbHook | None = None, records: list | None = None,
                window_weight: float = WINDOW_WEIGHT) -> Trajectory:
    """Track ``video`` from ``init`` (default: its frame-0 annotation).

    The exemplar is taken from frame 0 and never updated. A ``perturb_hook``
    receives the frame's PatchPair and index and returns the (exemplar, search)
    patches to score instead.
    """
    if init is None:
        if video.gt is None:
            raise ValueError("an initial box is required for unannotated clips")
        init = video.gt[0]
    tracker = SiamFCTracker(model, window_weight)
    tracker.init(video.frame(0), init)
    boxes = [init]
    for i in range(1, len(video)):
        boxes.append(tracker.update(video.frame(i), i, perturb_hook, records))
    return Trajectory(boxes)


# --------------------------------------------------------------------------- training


def balanced_logistic_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Class-balanced mean of log(1 + exp(-y s)) over the response grid."""
    pos = (labels > 0).to(scores.dtype)
    neg = 1.0 - pos
    w = pos / pos.sum() * 0.5 + neg / neg.sum() * 0.5
    per_cell = F.softplus(-labels * scores)
    return (per_cell * w).sum() / scores.shape[0]


@dataclass
class TrackerConfig:
    variant: str = "A"
    seed: int = 0
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 5e-4

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def train_tracker(dataset, config: TrackerConfig) -> TrackerModel:
    """Fit a TrackerModel on exemplar/search pairs with centred label maps.

    ``dataset`` yields (z, x, labels) as float32 arrays. The per-step loss
    curve is stored on the returned model as ``loss_history``.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = TrackerModel(config.variant, config.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, config.epochs * math.ceil(len(dataset) / config.batch_size)))
    labels = torch.from_numpy(make_labels())[None, None]
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            zs, xs = zip(*[dataset[int(i)][:2] for i in idx])
            z = to_tensor(np.stack(zs))
            x = to_tensor(np.stack(xs))
            scores = model(z, x)
            loss = balanced_logistic_loss(scores, labels.expand_as(scores))
            if not torch.isfinite(loss):
                raise TrackerTrainingError(f"non-finite loss at epoch {epoch}", history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            history.append(float(loss.detach()))
        recent = history[-max(1, len(history) // 10):]
        log.info("tracker %s epoch %d loss %.4f", config.variant, epoch, float(np.mean(recent)))
    if len(history) >= 20 and np.mean(history[-10:]) >= np.mean(history[:10]):
        raise TrackerTrainingError("tracker loss did not decrease", history)
    model.eval()
    model.loss_history = history
    return model
