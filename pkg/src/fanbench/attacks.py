"""Inference-time attacks as tracker perturbation hooks.

A hook receives the frame's PatchPair and index and returns the (exemplar,
search) patches the tracker should score. Hooks never modify their inputs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .gan import Generator, load_generator
from .geometry import BBox, Trajectory
from .losses import inverted_target_loss, make_embedding_image
from .metrics import frame_center_errors, frame_ious
from .tracker import (EXEMPLAR_SIZE, SEARCH_SIZE, PatchPair, TrackerModel, frame_to_patch,
                      make_labels, to_image, to_tensor)

ATTACK_KINDS = ("none", "fan_untargeted", "fan_targeted", "fgsm", "pgd")
TARGET_RADIUS = 20.0


@dataclass
class AttackSpec:
    kind: str = "none"
    generator: str | None = None
    epsilon: float = 8.0 / 255.0
    steps: int = 50
    step_size: float | None = None
    spec_trajectory: Trajectory | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; use one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind.startswith("fan") and self.generator is None:
            raise ValueError(f"{self.kind} needs a generator checkpoint")

    @property
    def targeted(self) -> bool:
        return self.kind == "fan_targeted"

    @property
    def resolved_step_size(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else self.step_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec_trajectory"] = (None if self.spec_trajectory is None
                                else self.spec_trajectory.as_array().tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if d.get("spec_trajectory") is not None:
            d["spec_trajectory"] = Trajectory.from_array(d["spec_trajectory"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "AttackSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- FAN hooks


def _run_generator(gen: Generator, patch: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        q = to_tensor(patch)
        return to_image(torch.clamp(q + gen(q), 0.0, 1.0))


class FanUntargetedHook:
    """Perturb the search patch with the generator; the exemplar passes through."""

    def __init__(self, gen: Generator):
        self.gen = gen.eval()

    def __call__(self, pair: PatchPair, frame_index: int):
        return pair.exemplar, _run_generator(self.gen, pair.search)


def fan_untargeted_hook(gen: Generator) -> FanUntargetedHook:
    return FanUntargetedHook(gen)


class FanTargetedHook:
    """Perturb the exemplar once and, every frame, a 127 window of the search
    patch centred on that frame's specified box.

    Frames whose specified centre falls outside the search region are listed
    in ``misses``; the window is then clamped to the patch border.
    """

    def __init__(self, gen: Generator, spec: Trajectory, window: int = EXEMPLAR_SIZE):
        self.gen = gen.eval()
        self.spec = spec
        self.window = window
        self.misses: list[int] = []
        self.targets: dict[int, BBox] = {}
        self._z_src = None
        self._z_adv = None

    def target_box(self, pair: PatchPair, frame_index: int) -> BBox:
        """The specified box in search-patch pixel coordinates."""
        if frame_index >= len(self.spec):
            raise IndexError(f"specified trajectory has no box for frame {frame_index}")
        b = self.spec[frame_index]
        size = pair.search.shape[0]
        cx, cy = frame_to_patch(b.center(), pair.search_box.center(), pair.scale_factor, size)
        return BBox.from_center(cx, cy, b.w / pair.scale_factor, b.h / pair.scale_factor)

    def window_origin(self, target: BBox, size: int) -> tuple[int, int]:
        cx, cy = target.center()
        half = self.window / 2.0
        x0 = int(np.clip(round(cx - half), 0, size - self.window))
        y0 = int(np.clip(round(cy - half), 0, size - self.window))
        return x0, y0

    def embedding_image(self, pair: PatchPair, frame_index: int, noise_sigma: float = 0.1,
                        rng=None) -> np.ndarray:
        """Search patch with the specified box's interior replaced by noise."""
        t = self.target_box(pair, frame_index)
        size = pair.search.shape[0]
        x0, y0, x1, y1 = t.corners()
        inside = BBox(max(x0, 0.0), max(y0, 0.0), min(x1, size) - max(x0, 0.0),
                      min(y1, size) - max(y0, 0.0))
        return make_embedding_image(pair.search, inside, noise_sigma, rng).image

    def __call__(self, pair: PatchPair, frame_index: int):
        if self._z_src is None or not np.array_equal(self._z_src, pair.exemplar):
            self._z_src = pair.exemplar
            self._z_adv = _run_generator(self.gen, pair.exemplar)
        size = pair.search.shape[0]
        target = self.target_box(pair, frame_index)
        self.targets[frame_index] = target
        cx, cy = target.center()
        if not (0 <= cx <= size and 0 <= cy <= size):
            self.misses.append(frame_index)
        x0, y0 = self.window_origin(target, size)
        w = self.window
        out = pair.search.copy()
        out[y0:y0 + w, x0:x0 + w] = _run_generator(self.gen, pair.search[y0:y0 + w, x0:x0 + w])
        return self._z_adv, out


def fan_targeted_hook(gen: Generator, spec: Trajectory) -> FanTargetedHook:
    return FanTargetedHook(gen, spec)


# --------------------------------------------------------------------------- gradient baselines


class GradientHook:
    """Projected sign-gradient descent toward an all-negative response map.

    Every +1 label is inverted to -1 and the mean logistic loss against that
    target is descended, so the object response is suppressed. One step of
    size epsilon is FGSM.
    """

    def __init__(self, tracker: TrackerModel, epsilon: float, steps: int = 1,
                 step_size: float | None = None):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        self.tracker = tracker.eval()
        self.epsilon = float(epsilon)
        self.steps = steps
        self.step_size = self.epsilon if step_size is None else float(step_size)
        self.labels = torch.from_numpy(make_labels())
        self.iterates: list[np.ndarray] | None = None  # set to [] to record every step
        self._z_src = None

    def _exemplar_features(self, z: np.ndarray) -> torch.Tensor:
        if self._z_src is None or not np.array_equal(self._z_src, z):
            with torch.no_grad():
                self._z_feat = self.tracker.forward_features(to_tensor(z))
            self._z_src = z
        return self._z_feat

    def perturb(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        z_feat = self._exemplar_features(z)
        x0 = to_tensor(x)
        adv = x0.clone()
        params = [p for p in self.tracker.parameters()]
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad_(False)
        try:
            for _ in range(self.steps):
                adv.requires_grad_(True)
                scores = self.tracker.correlate(z_feat, self.tracker.forward_features(adv))
                loss = inverted_target_loss(scores[:, 0], self.labels)
                (grad,) = torch.autograd.grad(loss, adv)
                with torch.no_grad():
                    adv = adv - self.step_size * grad.sign()
                    adv = torch.min(torch.max(adv, x0 - self.epsilon), x0 + self.epsilon)
                    adv = adv.clamp(0.0, 1.0)
                if self.iterates is not None:
                    self.iterates.append(to_image(adv))
        finally:
            for p, f in zip(params, flags):
                p.requires_grad_(f)
        return to_image(adv.detach())

    def __call__(self, pair: PatchPair, frame_index: int):
        return pair.exemplar, self.perturb(pair.exemplar, pair.search)


def fgsm_hook(tracker: TrackerModel, epsilon: float = 8.0 / 255.0) -> GradientHook:
    return GradientHook(tracker, epsilon, steps=1, step_size=epsilon)


def pgd_hook(tracker: TrackerModel, epsilon: float = 8.0 / 255.0, steps: int = 50,
             step_size: float | None = None) -> GradientHook:
    return GradientHook(tracker, epsilon, steps,
                        epsilon / 10.0 if step_size is None else step_size)


def identity_hook(pair: PatchPair, frame_index: int):
    return pair.exemplar, pair.search


def build_hook(spec: AttackSpec, tracker: TrackerModel, gt: Trajectory | None = None,
               generator: Generator | None = None):
    """Hook for one tracking run (None for ``kind="none"``).

    Targeted attacks use ``spec.spec_trajectory`` when set, otherwise the
    reflection of ``gt``.
    """
    if spec.kind == "none":
        return None
    if spec.kind in ("fgsm", "pgd"):
        if spec.kind == "fgsm":
            return fgsm_hook(tracker, spec.epsilon)
        return pgd_hook(tracker, spec.epsilon, spec.steps, spec.resolved_step_size)
    gen = generator if generator is not None else load_generator(spec.generator)
    if spec.kind == "fan_untargeted":
        return fan_untargeted_hook(gen)
    traj = spec.spec_trajectory
    if traj is None:
        if gt is None:
            raise ValueError("targeted attack needs a specified trajectory or ground truth")
        from .data import spec_trajectory
        traj = spec_trajectory(gt)
    return fan_targeted_hook(gen, traj)


# --------------------------------------------------------------------------- success criteria


@dataclass
class AttackOutcome:
    flags: np.ndarray
    values: np.ndarray = field(repr=False)

    @property
    def fraction(self) -> float:
        return float(self.flags.mean()) if self.flags.size else 0.0


def attack_success_untargeted(attacked: Trajectory, gt: Trajectory) -> AttackOutcome:
    """Per-frame success where the attacked box no longer overlaps ground truth."""
    ious = frame_ious(attacked, gt)
    return AttackOutcome(ious == 0.0, ious)


def attack_success_targeted(attacked: Trajectory, spec: Trajectory,
                            epsilon: float = TARGET_RADIUS) -> AttackOutcome:
    """Per-frame success where the attacked centre is within ``epsilon`` px of the spec."""
    d = frame_center_errors(attacked, spec)
    return AttackOutcome(d <= epsilon, d)
