"""Differentiable attack losses on response maps and tracker features.

Score maps are (B, R, R) or (R, R) tensors; label maps hold +1 on the central
disc and -1 elsewhere. Batched losses return the batch mean.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import BBox

SCORE_LOSS_SIGNS = ("paper", "flipped")
# region soft-min / soft-max and soft-argmax temperature used during training
DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.0016
    alpha2: float = 0.0
    alpha3: float = 10.0
    beta1: float = 1.0
    beta2: float = 10.0
    delta: float = 1e-10
    xi: float = 0.7

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        try:
            return PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown loss-weight preset {name!r}; use one of {sorted(PRESETS)}") from None

    @classmethod
    def from_config(cls, value) -> "LossWeights":
        """Accept a preset name or a dict (optionally with a ``preset`` base)."""
        if isinstance(value, LossWeights):
            return value
        if isinstance(value, str):
            return cls.preset(value)
        value = dict(value)
        base = cls.preset(value.pop("preset")) if "preset" in value else cls()
        return replace(base, **value)

    def to_dict(self) -> dict:
        return asdict(self)


UNTARGETED = LossWeights(alpha1=0.0016, alpha2=0.0, alpha3=10.0)
TARGETED = LossWeights(alpha1=0.0024, alpha2=0.1, alpha3=0.0)
PRESETS = {"untargeted": UNTARGETED, "targeted": TARGETED}


def _as_tensor(v, dtype=torch.float64) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(np.asarray(v), dtype=dtype)


def logistic_loss(y, s):
    """log(1 + exp(-y s)), stable for large |s|."""
    if isinstance(s, torch.Tensor) or isinstance(y, torch.Tensor):
        return F.softplus(-_as_tensor(y) * _as_tensor(s))
    return np.logaddexp(0.0, -np.asarray(y, dtype=np.float64) * np.asarray(s, dtype=np.float64))


def _batched(scores, labels):
    scores = _as_tensor(scores)
    labels = _as_tensor(labels, scores.dtype).to(scores.dtype)
    if scores.dim() == 4:
        scores = scores[:, 0]
    if scores.dim() == 2:
        scores = scores[None]
    if labels.dim() == 4:
        labels = labels[:, 0]
    if labels.dim() == 2:
        labels = labels[None].expand_as(scores)
    if labels.shape != scores.shape:
        raise ValueError(f"label shape {tuple(labels.shape)} vs scores {tuple(scores.shape)}")
    pos = labels > 0
    if not pos.flatten(1).any(1).all() or pos.flatten(1).all(1).any():
        raise ValueError("each response needs non-empty +1 and -1 regions")
    return scores, labels, pos


def _region_softmax(v: torch.Tensor, mask: torch.Tensor, temperature: float) -> torch.Tensor:
    """T * logsumexp(v / T) over the cells in ``mask`` (per batch row)."""
    masked = torch.where(mask, v / temperature, torch.full_like(v, float("-inf")))
    return temperature * torch.logsumexp(masked.flatten(1), dim=1)


def _region_max(v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    masked = torch.where(mask, v, torch.full_like(v, float("-inf")))
    return masked.flatten(1).max(dim=1).values


def score_loss(scores, labels, temperature: float | None = DEFAULT_TEMPERATURE,
               sign: str = "paper") -> torch.Tensor:
    """min over +1 cells of l(y, s) minus max over -1 cells of l(y, s).

    ``temperature=None`` (or 0) gives the hard min/max; otherwise both are
    smoothed with a log-sum-exp at that temperature. ``sign="flipped"`` negates
    the result.
    """
    if sign not in SCORE_LOSS_SIGNS:
        raise ValueError(f"sign must be one of {SCORE_LOSS_SIGNS}")
    s, y, pos = _batched(scores, labels)
    per_cell = F.softplus(-y * s)
    if not temperature:
        best_pos = -_region_max(-per_cell, pos)
        worst_neg = _region_max(per_cell, ~pos)
    else:
        best_pos = -_region_softmax(-per_cell, pos, temperature)
        worst_neg = _region_softmax(per_cell, ~pos, temperature)
    out = (best_pos - worst_neg).mean()
    return -out if sign == "flipped" else out


def _grid(n: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    r = torch.arange(n, dtype=dtype)
    return r[:, None].expand(n, n), r[None, :].expand(n, n)


def region_peaks(scores, labels, temperature: float | None = DEFAULT_TEMPERATURE):
    """(row, col) of the peak inside the +1 and the -1 regions, in grid cells.

    Soft-argmax (softmax-weighted expectation) when ``temperature`` is set,
    hard argmax otherwise.
    """
    s, _, pos = _batched(scores, labels)
    rows, cols = _grid(s.shape[-1], s.dtype)
    coords = torch.stack([rows, cols], -1).reshape(-1, 2)
    peaks = []
    for mask in (pos, ~pos):
        flat_mask = mask.flatten(1)
        flat = s.flatten(1)
        if temperature:
            logits = torch.where(flat_mask, flat / temperature, torch.full_like(flat, float("-inf")))
            w = torch.softmax(logits, dim=1)
            peaks.append(w @ coords)
        else:
            idx = torch.where(flat_mask, flat, torch.full_like(flat, float("-inf"))).argmax(1)
            peaks.append(coords[idx])
    return peaks[0], peaks[1]


def _safe_norm(d: torch.Tensor) -> torch.Tensor:
    sq = (d * d).sum(-1)
    nz = sq > 0
    # zero gradient (instead of NaN) at exactly coincident peaks
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def distance_loss(scores, labels, weights: LossWeights = UNTARGETED,
                  temperature: float | None = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """beta1 / (delta + |p+ - p-|) - xi with peak positions in grid cells."""
    p_pos, p_neg = region_peaks(scores, labels, temperature)
    return distance_from_peaks(p_pos, p_neg, weights)


def distance_from_peaks(p_pos, p_neg, weights: LossWeights = UNTARGETED) -> torch.Tensor:
    d = _safe_norm(_as_tensor(p_pos) - _as_tensor(p_neg))
    return (weights.beta1 / (weights.delta + d) - weights.xi).mean()


def drift_loss(scores, labels, weights: LossWeights = UNTARGETED,
               temperature: float | None = DEFAULT_TEMPERATURE, sign: str = "paper") -> torch.Tensor:
    return (distance_loss(scores, labels, weights, temperature)
            + weights.beta2 * score_loss(scores, labels, temperature, sign))


def embedded_feature_loss(model, q: torch.Tensor, perturbation: torch.Tensor,
                          e: torch.Tensor) -> torch.Tensor:
    """|phi(clip(q + perturbation)) - phi(e)|_2 over the full feature map, batch mean."""
    if q.shape != perturbation.shape or q.shape != e.shape:
        raise ValueError(f"shape mismatch: q {tuple(q.shape)}, perturbation "
                         f"{tuple(perturbation.shape)}, e {tuple(e.shape)}")
    adv = torch.clamp(q + perturbation, 0.0, 1.0)
    fa = model.forward_features(adv)
    with torch.no_grad():
        fe = model.forward_features(e)
    return _safe_norm((fa - fe).flatten(1)).mean()


def similarity_loss(clean: torch.Tensor, adversarial: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample L2 distance between clean and adversarial patches."""
    if clean.shape != adversarial.shape:
        raise ValueError(f"shape mismatch {tuple(clean.shape)} vs {tuple(adversarial.shape)}")
    if clean.dim() == 3:
        clean, adversarial = clean[None], adversarial[None]
    return _safe_norm((clean - adversarial).flatten(1)).mean()


def inverted_target_loss(scores, labels) -> torch.Tensor:
    """Mean logistic loss over every cell against the inverted target map.

    The +1 cells are relabelled -1, so the target says "no object anywhere".
    Descending this loss is the adapted FGSM/PGD objective.
    """
    s, y, _ = _batched(scores, labels)
    target = torch.where(y > 0, -y, y)
    return F.softplus(-target * s).mean()


@dataclass
class EmbeddingImage:
    image: np.ndarray
    trajectory_box: BBox


def make_embedding_image(search_patch: np.ndarray, spec_box: BBox, noise_sigma: float = 0.1,
                         rng=None) -> EmbeddingImage:
    """Copy of the patch whose ``spec_box`` interior is Gaussian noise.

    The noise has the patch's per-channel mean and standard deviation
    ``noise_sigma``; it is clipped to [0, 1]. Pixels are inside the box when
    their centres are.
    """
    patch = np.asarray(search_patch, dtype=np.float32)
    h, w = patch.shape[:2]
    x0, y0, x1, y1 = spec_box.corners()
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"box {spec_box} outside the {w}x{h} patch")
    rng = np.random.default_rng() if rng is None else rng
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    cmask = (cols >= x0) & (cols < x1)
    rmask = (rows >= y0) & (rows < y1)
    mask = rmask[:, None] & cmask[None, :]
    out = patch.copy()
    n = int(mask.sum())
    if n:
        mean = patch.reshape(-1, patch.shape[-1]).mean(axis=0)
        noise = mean + noise_sigma * rng.standard_normal((n, patch.shape[-1]))
        out[mask] = np.clip(noise, 0.0, 1.0).astype(np.float32)
    return EmbeddingImage(out, spec_box)
