from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Trajectory


@dataclass
class VideoClip:
    """A clip of RGB frames with optional ground truth.

    Frames are kept as an (n, H, W, 3) uint8 stack to bound memory; ``frame(i)``
    yields the float32 view in [0, 1] that every consumer works with.
    """

    frames: np.ndarray
    gt: Trajectory | None = None
    name: str = "clip"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be (n, H, W, 3), got {frames.shape}")
        if frames.dtype != np.uint8:
            if frames.size and (frames.min() < 0 or frames.max() > 1):
                raise ValueError("float frames must lie in [0, 1]")
            frames = np.round(frames.astype(np.float64) * 255.0).astype(np.uint8)
        self.frames = frames
        if self.gt is not None and len(self.gt) != len(frames):
            raise ValueError(f"{self.name}: {len(self.gt)} annotations for {len(frames)} frames")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def frame(self, i: int) -> np.ndarray:
        return self.frames[i].astype(np.float32) / np.float32(255.0)
