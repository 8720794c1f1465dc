"""Synthetic tracking clips, dataset I/O and specified-trajectory construction."""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .geometry import BBox, Trajectory, TrajectoryFormatError
from .tracker import (EXEMPLAR_SIZE, SEARCH_SIZE, TOTAL_STRIDE, box_to_patch, context_side,
                      crop_patch, make_labels)
from .video import VideoClip

SHAPES = ("rect", "ellipse", "textured-sprite")
MOTIONS = ("linear", "sinusoidal", "random-walk")
BACKGROUNDS = ("uniform", "gradient", "noise-texture")


class DatasetError(ValueError):
    pass


@dataclass
class SceneSpec:
    """Recipe for one synthetic clip.

    ``speed`` is the constant velocity for linear motion and the peak velocity
    per axis for sinusoidal motion, whose two axes run a quarter period apart
    (an elliptical orbit, so the speed never drops below the smaller peak). A random walk moves ``|speed|`` pixels per
    frame along a heading that starts at the direction of ``speed`` and
    diffuses by ``heading_jitter`` radians per frame, reflecting at the bounds.
    """

    frame_size: tuple = (240, 320)
    shape: str = "textured-sprite"
    object_size: tuple = (32.0, 32.0)
    motion: str = "linear"
    speed: tuple = (0.0, 0.0)
    period: float = 40.0
    heading_jitter: float = 0.3
    background: str = "noise-texture"
    distractors: int = 0
    start: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if min(self.object_size) <= 0 or min(self.frame_size) <= 0:
            raise ValueError("sizes must be positive")
        if self.period <= 0:
            raise ValueError("period must be positive")
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.object_size = tuple(float(v) for v in self.object_size)
        self.speed = tuple(float(v) for v in self.speed)
        if self.start is not None:
            self.start = tuple(float(v) for v in self.start)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# --------------------------------------------------------------------------- rendering


def _smooth_noise(rng, shape, sigmas=(1.5, 4.0, 10.0)) -> np.ndarray:
    """Zero-mean multi-octave noise with unit-ish standard deviation."""
    h, w = shape
    out = np.zeros((h, w), np.float32)
    for s in sigmas:
        f = cv2.GaussianBlur(rng.standard_normal((h, w)).astype(np.float32), (0, 0), s)
        out += f / (f.std() + 1e-8)
    return out / (out.std() + 1e-8)


def _texture(rng, shape, contrast: float) -> np.ndarray:
    h, w = shape
    base = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
    tint = rng.uniform(-1, 1, size=3).astype(np.float32)
    tint /= np.linalg.norm(tint) + 1e-8
    n1 = _smooth_noise(rng, (h, w))
    n2 = _smooth_noise(rng, (h, w), sigmas=(1.0, 3.0))
    img = base + contrast * (n1[..., None] * tint * 0.8 + n2[..., None] * 0.5)
    return np.clip(img, 0.0, 1.0)


def _background(rng, kind: str, shape) -> np.ndarray:
    h, w = shape
    if kind == "uniform":
        return np.broadcast_to(rng.uniform(0.15, 0.85, size=3).astype(np.float32), (h, w, 3)).copy()
    if kind == "gradient":
        c0 = rng.uniform(0.1, 0.9, size=3)
        c1 = rng.uniform(0.1, 0.9, size=3)
        ang = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        t = (xx * np.cos(ang) + yy * np.sin(ang))
        t = (t - t.min()) / (t.max() - t.min() + 1e-8)
        return (c0[None, None] * (1 - t[..., None]) + c1[None, None] * t[..., None]).astype(np.float32)
    return _texture(rng, (h, w), contrast=rng.uniform(0.12, 0.2))


def _sprite(rng, shape: str, size) -> tuple[np.ndarray, np.ndarray]:
    """Texture and alpha mask for an object of ``size`` = (w, h) pixels."""
    w, h = int(math.ceil(size[0])), int(math.ceil(size[1]))
    tex = _texture(rng, (h, w), contrast=rng.uniform(0.2, 0.3))
    # a bold two-tone pattern makes objects distinct from background texture
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    freq = rng.uniform(0.15, 0.35)
    ang = rng.uniform(0, np.pi)
    stripes = (np.sin((xx * np.cos(ang) + yy * np.sin(ang)) * freq * 2 * np.pi) > 0)
    accent = rng.uniform(0, 1, size=3).astype(np.float32)
    tex = np.where(stripes[..., None], 0.55 * tex + 0.45 * accent, tex).astype(np.float32)
    if shape == "rect":
        alpha = np.ones((h, w), np.float32)
    else:
        cy, cx = (size[1]) / 2.0, (size[0]) / 2.0
        r = ((xx + 0.5 - cx) / (size[0] / 2.0)) ** 2 + ((yy + 0.5 - cy) / (size[1] / 2.0)) ** 2
        alpha = (r <= 1.0).astype(np.float32)
        if shape == "textured-sprite":
            # ellipse with a notched silhouette; keep full extent along both axes
            notch = _smooth_noise(rng, (h, w), sigmas=(3.0,)) > 1.0
            alpha[notch & (r > 0.35)] = 0.0
            alpha[h // 2, :] = np.maximum(alpha[h // 2, :], (np.abs(xx[h // 2] + 0.5 - cx) < cx))
            alpha[:, w // 2] = np.maximum(alpha[:, w // 2], (np.abs(yy[:, w // 2] + 0.5 - cy) < cy))
    return tex, alpha


def _paste(canvas: np.ndarray, tex: np.ndarray, alpha: np.ndarray, x: float, y: float) -> None:
    h, w = canvas.shape[:2]
    m = np.array([[1.0, 0.0, x], [0.0, 1.0, y]])
    t = cv2.warpAffine(tex, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    a = cv2.warpAffine(alpha, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    canvas *= 1.0 - a[..., None]
    canvas += t * a[..., None]


# --------------------------------------------------------------------------- motion


def _bounds(spec: SceneSpec, size) -> tuple[np.ndarray, np.ndarray]:
    """Allowed range of object centres (one object-width/height from the border)."""
    h, w = spec.frame_size
    lo = np.array([1.5 * size[0], 1.5 * size[1]])
    hi = np.array([w - 1.5 * size[0], h - 1.5 * size[1]])
    if np.any(hi < lo):
        raise ValueError(f"object {size} too large for frame {spec.frame_size}")
    return lo, hi


def _centers(spec: SceneSpec, size, n: int, rng) -> np.ndarray:
    lo, hi = _bounds(spec, size)
    v = np.array(spec.speed)
    t = np.arange(n, dtype=np.float64)[:, None]
    if spec.motion == "linear":
        travel = v * (n - 1)
        lo_s = np.maximum(lo, lo - travel)
        hi_s = np.minimum(hi, hi - travel)
        if np.any(hi_s < lo_s):
            raise ValueError(f"linear motion {spec.speed} px/frame leaves the frame within {n} frames")
        start = np.array(spec.start) if spec.start is not None else rng.uniform(lo_s, hi_s)
        path = start + v * t
    elif spec.motion == "sinusoidal":
        omega = 2 * np.pi / spec.period
        amp = np.abs(v) / omega
        lo_s, hi_s = lo + amp, hi - amp
        if np.any(hi_s < lo_s):
            raise ValueError(f"sinusoidal amplitude {amp} does not fit the frame")
        # ``start`` is the oscillation centre here
        mid = np.array(spec.start) if spec.start is not None else rng.uniform(lo_s, hi_s)
        phase = rng.uniform(0, 2 * np.pi) + np.array([0.0, np.pi / 2])
        path = mid + amp * np.sin(omega * t + phase)
    else:
        start = np.array(spec.start) if spec.start is not None else rng.uniform(lo, hi)
        step = float(np.hypot(*v))
        heading = float(np.arctan2(v[1], v[0]))
        turns = rng.normal(0.0, spec.heading_jitter, size=n - 1)
        path = [start]
        for dtheta in turns:
            heading += dtheta
            d = step * np.array([np.cos(heading), np.sin(heading)])
            p = path[-1] + d
            # reflect position and heading at the allowed bounds
            low, high = p < lo, p > hi
            p = np.where(low, 2 * lo - p, np.where(high, 2 * hi - p, p))
            if low[0] or high[0]:
                heading = np.pi - heading
            if low[1] or high[1]:
                heading = -heading
            path.append(np.clip(p, lo, hi))
        path = np.array(path)
    if np.any(path < lo - 1e-9) or np.any(path > hi + 1e-9):
        raise ValueError("object path leaves the allowed region")
    return path


def make_video(spec: SceneSpec, n_frames: int, name: str | None = None) -> VideoClip:
    """Render a deterministic clip with a tight ground-truth box per frame."""
    if n_frames < 1:
        raise ValueError("n_frames must be positive")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.frame_size
    ow, oh = spec.object_size
    bg = _background(rng, spec.background, (h, w))
    tex, alpha = _sprite(rng, spec.shape, (ow, oh))
    centers = _centers(spec, (ow, oh), n_frames, rng)

    distractors = []
    for _ in range(spec.distractors):
        dsize = (float(rng.uniform(0.7, 1.3) * ow), float(rng.uniform(0.7, 1.3) * oh))
        # start clear of the object so the initial exemplar shows the object alone
        lo, hi = _bounds(spec, dsize)
        start = rng.uniform(lo, hi)
        for _ in range(50):
            if np.hypot(*(start - centers[0])) >= 2.0 * np.hypot(ow, oh):
                break
            start = rng.uniform(lo, hi)
        dspec = SceneSpec(frame_size=spec.frame_size, shape=str(rng.choice(SHAPES)),
                          object_size=dsize, motion="random-walk", speed=(1.5, 1.5),
                          start=tuple(start), seed=int(rng.integers(2 ** 31)))
        dtex, dalpha = _sprite(rng, dspec.shape, dsize)
        distractors.append((dsize, dtex, dalpha, _centers(dspec, dsize, n_frames, rng)))

    frames = np.empty((n_frames, h, w, 3), np.uint8)
    boxes = []
    for i in range(n_frames):
        canvas = bg.copy()
        for dsize, dtex, dalpha, dc in distractors:
            _paste(canvas, dtex, dalpha, dc[i, 0] - dsize[0] / 2, dc[i, 1] - dsize[1] / 2)
        x0, y0 = centers[i, 0] - ow / 2, centers[i, 1] - oh / 2
        _paste(canvas, tex, alpha, x0, y0)
        frames[i] = np.round(np.clip(canvas, 0, 1) * 255.0).astype(np.uint8)
        boxes.append(BBox(float(x0), float(y0), ow, oh))
    meta = {"scene": asdict(spec), "n_frames": n_frames}
    return VideoClip(frames, Trajectory(boxes), name or f"clip_{spec.seed}", meta)


# --------------------------------------------------------------------------- trajectories


def spec_trajectory(gt: Trajectory) -> Trajectory:
    """Specified trajectory reflected about the previous ground-truth box.

    spec[1] = gt[0] and spec[t] = 2 * gt[t-1] - gt[t] for t >= 2, applied to
    all four box components. Frame 0 keeps the initial box.
    """
    if len(gt) < 2:
        raise ValueError("specified trajectory needs at least two ground-truth boxes")
    arr = gt.as_array()
    out = np.empty_like(arr)
    out[0] = arr[0]
    out[1] = arr[0]
    out[2:] = 2 * arr[1:-1] - arr[2:]
    return Trajectory.from_array(out)


# --------------------------------------------------------------------------- datasets


@dataclass
class DatasetConfig:
    """Desk-scale split sizes and per-clip scene sampling ranges."""

    n_train: int = 40
    n_val: int = 10
    n_test: int = 10
    frames: tuple = (60, 120)
    frame_size: tuple = (240, 320)
    object_size: tuple = (26.0, 40.0)
    shapes: tuple = SHAPES
    # fast enough that the reflected trajectory sits > 20 px from the object
    motions: tuple = ("sinusoidal", "random-walk")
    backgrounds: tuple = ("noise-texture",)
    speed: tuple = (12.0, 16.0)
    period: tuple = (18.0, 30.0)
    max_distractors: int = 2
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v)
                      for k, v in d.items() if k in cls.__dataclass_fields__})


def _sample_spec(rng, cfg: DatasetConfig, n_frames: int) -> SceneSpec:
    for _ in range(100):
        size = tuple(float(v) for v in rng.uniform(*cfg.object_size, size=2))
        motion = str(rng.choice(cfg.motions))
        mag = rng.uniform(*cfg.speed)
        ang = rng.uniform(0, 2 * np.pi)
        if motion == "sinusoidal":
            speed = tuple(rng.uniform(*cfg.speed, size=2) * rng.choice([-1.0, 1.0], size=2))
        else:
            speed = (mag * np.cos(ang), mag * np.sin(ang))
        spec = SceneSpec(frame_size=cfg.frame_size, shape=str(rng.choice(cfg.shapes)),
                         object_size=size, motion=motion, speed=speed,
                         period=float(rng.uniform(*cfg.period)),
                         background=str(rng.choice(cfg.backgrounds)),
                         distractors=int(rng.integers(0, cfg.max_distractors + 1)),
                         seed=int(rng.integers(2 ** 31)))
        try:
            _centers(spec, size, n_frames, np.random.default_rng(spec.seed))
        except ValueError:
            continue
        return spec
    raise ValueError("could not sample a feasible scene; widen the configuration")


def make_dataset(cfg: DatasetConfig) -> dict[str, list[VideoClip]]:
    """Generate the train/val/test splits (each split has its own seed stream)."""
    out = {}
    for k, (split, n) in enumerate((("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test))):
        rng = np.random.default_rng([cfg.seed, k])
        clips = []
        for i in range(n):
            n_frames = int(rng.integers(cfg.frames[0], cfg.frames[1] + 1))
            spec = _sample_spec(rng, cfg, n_frames)
            clips.append(make_video(spec, n_frames, f"{split}_{i:03d}"))
        out[split] = clips
    return out


def save_dataset(videos: Sequence[VideoClip], path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for clip in videos:
        d = root / clip.name
        (d / "frames").mkdir(parents=True, exist_ok=True)
        for i in range(len(clip)):
            # frames are RGB; cv2 writes BGR
            ok = cv2.imwrite(str(d / "frames" / f"{i:06d}.png"), clip.frames[i][..., ::-1])
            if not ok:
                raise OSError(f"could not write frame {i} of {clip.name}")
        if clip.gt is not None:
            clip.gt.to_csv(d / "gt.csv")
        meta = dict(clip.meta)
        meta.setdefault("n_frames", len(clip))
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


_FRAME_RE = re.compile(r"^(\d{6})\.png$")


def load_video(clip_dir) -> VideoClip:
    d = Path(clip_dir)
    frame_dir = d / "frames"
    if not frame_dir.is_dir():
        raise DatasetError(f"{d.name}: missing frames/ directory")
    indices = []
    for p in frame_dir.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indices.append(int(m.group(1)))
    indices.sort()
    for expect, got in enumerate(indices):
        if expect != got:
            raise DatasetError(f"{d.name}: missing frame {expect}")
    if not indices:
        raise DatasetError(f"{d.name}: no frames")
    frames = []
    for i in indices:
        img = cv2.imread(str(frame_dir / f"{i:06d}.png"), cv2.IMREAD_COLOR)
        if img is None:
            raise DatasetError(f"{d.name}: unreadable frame {i}")
        frames.append(img[..., ::-1])
    gt = None
    if (d / "gt.csv").exists():
        try:
            gt = Trajectory.from_csv(d / "gt.csv", expected_frames=len(frames))
        except TrajectoryFormatError as exc:
            raise DatasetError(f"{d.name}: {exc}") from None
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    return VideoClip(np.stack(frames), gt, d.name, meta)


def load_dataset(path) -> list[VideoClip]:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    return [load_video(d) for d in sorted(root.iterdir()) if d.is_dir()]


# --------------------------------------------------------------------------- training pairs


@dataclass
class PairConfig:
    """``search_centre="previous"`` crops the search patch around the box of
    the frame before the search frame, as during tracking, and moves the
    label disc onto the object; ``"object"`` centres both on the object."""

    n_pairs: int = 2000
    max_gap: int = 30
    noise_sigma: float = 0.1
    search_centre: str = "object"
    seed: int = 0

    def __post_init__(self):
        if self.search_centre not in ("object", "previous"):
            raise ValueError("search_centre must be 'object' or 'previous'")

    @classmethod
    def from_dict(cls, d: dict) -> "PairConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class PairDataset:
    """Exemplar/search pairs from annotated clips, cropped lazily.

    Items are (z, x, labels): z is a 127 crop around the exemplar frame's box,
    x a 255 crop centred on the search frame's box (or the previous frame's
    box), labels the +/-1 map with its disc on the object.
    """

    def __init__(self, videos: Sequence[VideoClip], index: np.ndarray,
                 search_centre: str = "object"):
        self.videos = list(videos)
        self.index = index
        self.search_centre = search_centre
        self.labels = make_labels()

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, k: int):
        c, i, j = (int(v) for v in self.index[k])
        clip = self.videos[c]
        z, _ = crop_patch(clip.frame(i), clip.gt[i], out_size=EXEMPLAR_SIZE)
        if self.search_centre == "object" or j == 0:
            x, _ = crop_patch(clip.frame(j), clip.gt[j], out_size=SEARCH_SIZE,
                              side_scale=SEARCH_SIZE / EXEMPLAR_SIZE)
            return z, x, self.labels
        prev = BBox.from_center(*clip.gt[j - 1].center(), clip.gt[j].w, clip.gt[j].h)
        x, scale = crop_patch(clip.frame(j), prev, out_size=SEARCH_SIZE,
                              side_scale=SEARCH_SIZE / EXEMPLAR_SIZE)
        dx, dy = np.subtract(clip.gt[j].center(), prev.center()) / (scale * TOTAL_STRIDE)
        return z, x, make_labels(offset=(dx, dy))


@dataclass
class EmbeddingTriple:
    z: np.ndarray
    x: np.ndarray
    e_z: np.ndarray
    e_x: np.ndarray


class TripleDataset:
    """Targeted training items: exemplar z, a window x centred on the specified
    box, and embedding images for both (object area replaced by noise)."""

    def __init__(self, videos: Sequence[VideoClip], index: np.ndarray, noise_sigma: float,
                 seed: int):
        self.videos = list(videos)
        self.index = index
        self.noise_sigma = noise_sigma
        self.seed = seed
        self._specs = [spec_trajectory(v.gt) for v in self.videos]

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, k: int) -> EmbeddingTriple:
        from .losses import make_embedding_image

        c, i, j = (int(v) for v in self.index[k])
        clip = self.videos[c]
        rng = np.random.default_rng([self.seed, k])
        z, _ = crop_patch(clip.frame(i), clip.gt[i], out_size=EXEMPLAR_SIZE)
        spec_box = self._specs[c][j]
        x, _ = crop_patch(clip.frame(j), spec_box, out_size=EXEMPLAR_SIZE)
        e_z = make_embedding_image(z, centred_object_box(clip.gt[i]), self.noise_sigma, rng)
        e_x = make_embedding_image(x, centred_object_box(spec_box), self.noise_sigma, rng)
        return EmbeddingTriple(z, x, e_z.image, e_x.image)


def centred_object_box(box: BBox, out_size: int = EXEMPLAR_SIZE) -> BBox:
    """The object's own box inside a context crop centred on it."""
    side = context_side(box)
    region = BBox.from_center(*box.center(), side, side)
    return box_to_patch(box, region, out_size)


def make_training_pairs(videos: Sequence[VideoClip], config: PairConfig, targeted: bool = False):
    """Sample exactly ``config.n_pairs`` (exemplar frame, search frame) pairs.

    The search frame lies within ``max_gap`` frames of the exemplar frame.
    With ``targeted`` the items are embedding triples along each clip's
    specified trajectory instead.
    """
    videos = [v for v in videos]
    if not videos:
        raise ValueError("no clips to sample from")
    for v in videos:
        if v.gt is None:
            raise ValueError(f"{v.name}: clip has no annotation")
        if len(v) <= config.max_gap or len(v) < 3:
            raise ValueError(f"{v.name}: clip ({len(v)} frames) shorter than the temporal gap "
                             f"{config.max_gap}")
    rng = np.random.default_rng(config.seed)
    rows = []
    while len(rows) < config.n_pairs:
        c = int(rng.integers(len(videos)))
        n = len(videos[c])
        gap = config.max_gap
        i = int(rng.integers(n))
        j = int(np.clip(i + rng.integers(-gap, gap + 1), 0, n - 1))
        if targeted:
            j = max(j, 2)
            cx, cy = spec_trajectory(videos[c].gt[: j + 1])[j].center()
            h, w = videos[c].frame_size
            if not (0 <= cx <= w and 0 <= cy <= h):
                continue
        rows.append((c, i, j))
    index = np.array(rows, dtype=np.int64)
    if targeted:
        return TripleDataset(videos, index, config.noise_sigma, config.seed)
    return PairDataset(videos, index, config.search_centre)
