"""Axis-aligned boxes, per-frame trajectories and the trajectory CSV format."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

CSV_HEADER = ("frame", "x", "y", "w", "h")


@dataclass(frozen=True)
class BBox:
    """Box stored as (left, top, width, height) in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"box {name} must be finite, got {value}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


class Trajectory(Sequence[BBox]):
    """Ordered per-frame boxes; index 0 is the initial annotated frame."""

    def __init__(self, boxes: Iterable[BBox]):
        self._boxes = tuple(boxes)
        for b in self._boxes:
            if not isinstance(b, BBox):
                raise TypeError(f"expected BBox, got {type(b).__name__}")

    def __len__(self) -> int:
        return len(self._boxes)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Trajectory(self._boxes[idx])
        return self._boxes[idx]

    def __iter__(self) -> Iterator[BBox]:
        return iter(self._boxes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self._boxes == other._boxes

    def __repr__(self) -> str:
        return f"Trajectory(n={len(self)})"

    @classmethod
    def from_array(cls, arr) -> "Trajectory":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"expected (n, 4) array, got shape {arr.shape}")
        return cls(BBox(*map(float, row)) for row in arr)

    def as_array(self) -> np.ndarray:
        if not self._boxes:
            return np.zeros((0, 4))
        return np.stack([b.as_array() for b in self._boxes])

    def centers(self) -> np.ndarray:
        arr = self.as_array()
        return arr[:, :2] + arr[:, 2:] / 2.0

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for i, b in enumerate(self._boxes):
                # repr keeps the float round-trip exact
                writer.writerow([i, repr(b.x), repr(b.y), repr(b.w), repr(b.h)])

    @classmethod
    def from_csv(cls, path, expected_frames: int | None = None) -> "Trajectory":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise TrajectoryFormatError(f"{path}: empty file") from None
            if tuple(h.strip() for h in header) != CSV_HEADER:
                raise TrajectoryFormatError(
                    f"{path}: header must be {','.join(CSV_HEADER)}, got {','.join(header)}")
            boxes = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 5:
                    raise TrajectoryFormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                try:
                    frame = int(row[0])
                    vals = [float(v) for v in row[1:]]
                except ValueError as exc:
                    raise TrajectoryFormatError(f"{path}:{lineno}: {exc}") from None
                if frame != len(boxes):
                    raise TrajectoryFormatError(
                        f"{path}:{lineno}: missing annotation for frame {len(boxes)} "
                        f"(found frame {frame})", frame=len(boxes))
                try:
                    boxes.append(BBox(*vals))
                except ValueError as exc:
                    raise TrajectoryFormatError(f"{path}:{lineno}: frame {frame}: {exc}",
                                                frame=frame) from None
        if expected_frames is not None and len(boxes) != expected_frames:
            raise TrajectoryFormatError(
                f"{path}: missing annotation for frame {len(boxes)} "
                f"({len(boxes)} rows for {expected_frames} frames)"
                if len(boxes) < expected_frames else
                f"{path}: {len(boxes)} rows for {expected_frames} frames",
                frame=len(boxes) if len(boxes) < expected_frames else None)
        return cls(boxes)


class TrajectoryFormatError(ValueError):
    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message)
        self.frame = frame
