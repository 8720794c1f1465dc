"""Configuration and end-to-end orchestration: data, tracker, generator, evaluation."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackSpec, build_hook
from .data import (DatasetConfig, PairConfig, load_dataset, make_dataset, make_training_pairs,
                   save_dataset, spec_trajectory)
from .evaluation import ProtocolConfig, run_ope
from .gan import FanConfig, Generator, train_fan
from .losses import LossWeights
from .metrics import EvalReport
from .tracker import TrackerConfig, TrackerModel, train_tracker
from .video import VideoClip

log = logging.getLogger(__name__)

SEED_ENV = "FANBENCH_SEED"


@dataclass
class ValidationConfig:
    """Validation run used to pick the generator checkpoint."""

    clips: int = 10
    max_frames: int = 60


@dataclass
class PipelineConfig:
    seed: int = 0
    data: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pairs: PairConfig = field(default_factory=PairConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    fan: FanConfig = field(default_factory=FanConfig)
    fan_pairs: PairConfig = field(
        default_factory=lambda: PairConfig(n_pairs=1000, search_centre="previous"))
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    loss_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.reseed(self.seed)

    def reseed(self, seed: int) -> "PipelineConfig":
        """Propagate one global seed into every randomized stage."""
        self.seed = int(seed)
        self.dataset = replace(self.dataset, seed=self.seed)
        self.pairs = replace(self.pairs, seed=self.seed)
        self.fan_pairs = replace(self.fan_pairs, seed=self.seed + 1)
        self.tracker = replace(self.tracker, seed=self.seed)
        self.fan = replace(self.fan, seed=self.seed)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        sub = {"dataset": DatasetConfig, "pairs": PairConfig, "tracker": TrackerConfig,
               "fan": FanConfig, "fan_pairs": PairConfig}
        kw = {k: sub[k].from_dict(v) for k, v in d.items() if k in sub}
        if "validation" in d:
            kw["validation"] = ValidationConfig(**d["validation"])
        for k in ("seed", "data", "loss_weights"):
            if k in d:
                kw[k] = d[k]
        return cls(**kw)

    @classmethod
    def load(cls, path=None, env=None) -> "PipelineConfig":
        """Read a JSON config (defaults if ``path`` is None); FANBENCH_SEED wins over its seed."""
        cfg = cls.from_dict(json.loads(Path(path).read_text())) if path else cls()
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                cfg.reseed(int(env[SEED_ENV]))
            except ValueError:
                raise ValueError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def weights(self, preset: str) -> LossWeights:
        return LossWeights.from_config({"preset": preset, **self.loss_weights})


def seed_everything(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


def load_splits(cfg: PipelineConfig) -> dict[str, list[VideoClip]]:
    """Splits from ``cfg.data`` (``<root>/{train,val,test}``) or generated in memory."""
    if cfg.data:
        root = Path(cfg.data)
        return {s: load_dataset(root / s) for s in ("train", "val", "test")}
    return make_dataset(cfg.dataset)


def write_splits(splits: dict, root) -> None:
    for name, videos in splits.items():
        save_dataset(videos, Path(root) / name)


def fit_tracker(cfg: PipelineConfig, splits: dict, variant: str | None = None) -> TrackerModel:
    seed_everything(cfg.seed)
    tcfg = cfg.tracker if variant is None else replace(cfg.tracker, variant=variant)
    pairs = make_training_pairs(splits["train"], cfg.pairs)
    return train_tracker(pairs, tcfg)


def _truncate(v: VideoClip, n: int) -> VideoClip:
    if len(v) <= n:
        return v
    return VideoClip(v.frames[:n], type(v.gt)(list(v.gt)[:n]), v.name, v.meta)


def validation_metric(tracker: TrackerModel, videos, targeted: bool):
    """Closure scoring a generator on validation clips (higher = stronger attack).

    Untargeted: zero-IoU frame fraction. Targeted: precision w.r.t. the
    reflected trajectory.
    """
    kind = "fan_targeted" if targeted else "fan_untargeted"
    spec = AttackSpec(kind=kind, generator="<in-memory>")

    def score(gen: Generator) -> float:
        rep = run_ope(tracker, videos, spec, generator=gen)
        if targeted:
            return float(np.mean([p["spec_precision"] for p in rep.per_video]))
        return float(rep.iou_zero_fraction)

    return score


def fit_generator(cfg: PipelineConfig, tracker: TrackerModel, splits: dict,
                  preset: str) -> Generator:
    seed_everything(cfg.seed)
    weights = cfg.weights(preset)
    targeted = weights.alpha3 == 0
    data = make_training_pairs(splits["train"], cfg.fan_pairs, targeted=targeted)
    val = [_truncate(v, cfg.validation.max_frames) for v in splits["val"][: cfg.validation.clips]]
    validate = validation_metric(tracker, val, targeted) if val else None
    return train_fan(tracker, data, weights, cfg.fan, validate)


def run_pipeline(cfg: PipelineConfig, preset: str = "untargeted",
                 splits: dict | None = None) -> dict[str, EvalReport]:
    """train-tracker, train-fan and OPE evaluation (clean and attacked) in one call."""
    splits = load_splits(cfg) if splits is None else splits
    tracker = fit_tracker(cfg, splits)
    gen = fit_generator(cfg, tracker, splits, preset)
    kind = "fan_targeted" if cfg.weights(preset).alpha3 == 0 else "fan_untargeted"
    clean = run_ope(tracker, splits["test"], AttackSpec())
    adv = run_ope(tracker, splits["test"], AttackSpec(kind=kind, generator="<in-memory>"),
                  generator=gen)
    return {"clean": clean, kind: adv.with_drop_rates(clean)}
