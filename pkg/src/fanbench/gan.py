"""Perturbation generator, PatchGAN discriminator and the alternating GAN training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import (DEFAULT_TEMPERATURE, LossWeights, drift_loss, embedded_feature_loss,
                     similarity_loss)
from .tracker import TrackerModel, to_tensor

log = logging.getLogger(__name__)

KAPPA = 16.0 / 255.0


class FanTrainingError(RuntimeError):
    """Raised when generator training diverges (non-finite loss)."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1), nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1), nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Image-to-perturbation ResNet: three stride-2 encoders, residual blocks, three decoders.

    Output is ``kappa * tanh(.)`` so every perturbation lies in [-kappa, kappa].
    Inputs of any side >= 16 are reflect-padded to a multiple of 8 and the
    output cropped back, so the perturbation always matches the input shape.
    """

    def __init__(self, base_channels: int = 16, n_blocks: int = 4, kappa: float = KAPPA,
                 seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        b = base_channels
        self.kappa = float(kappa)
        self.base_channels = base_channels
        self.n_blocks = n_blocks
        self.seed = seed
        self.encoder = nn.Sequential(
            nn.Conv2d(3, b, 4, 2, 1), nn.InstanceNorm2d(b, affine=True), nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 4, 2, 1), nn.InstanceNorm2d(2 * b, affine=True), nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, 4 * b, 4, 2, 1), nn.InstanceNorm2d(4 * b, affine=True), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(4 * b) for _ in range(n_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * b, 2 * b, 4, 2, 1), nn.InstanceNorm2d(2 * b, affine=True),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * b, b, 4, 2, 1), nn.InstanceNorm2d(b, affine=True), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(b, 3, 4, 2, 1),
        )

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        if q.dim() != 4 or q.shape[1] != 3 or min(q.shape[-2:]) < 16:
            raise ValueError(f"expected (B, 3, H, W) patches with sides >= 16, got {tuple(q.shape)}")
        h, w = q.shape[-2:]
        ph, pw = (-h) % 8, (-w) % 8
        x = F.pad(q, (0, pw, 0, ph), mode="reflect") if (ph or pw) else q
        out = self.decoder(self.blocks(self.encoder(x)))
        return self.kappa * torch.tanh(out[..., :h, :w])

    def config(self) -> dict:
        return {"base_channels": self.base_channels, "n_blocks": self.n_blocks,
                "kappa": self.kappa, "seed": self.seed}


class Discriminator(nn.Module):
    """PatchGAN: a grid of real-valued scores, one per overlapping receptive patch."""

    def __init__(self, base_channels: int = 16, n_layers: int = 3, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed + 1)
        b = base_channels
        layers = [nn.Conv2d(3, b, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
        mult = 1
        for i in range(1, n_layers + 1):
            prev, mult = mult, min(2 ** i, 8)
            layers += [nn.Conv2d(b * prev, b * mult, 4, 2 if i < n_layers else 1, 1),
                       nn.InstanceNorm2d(b * mult, affine=True), nn.LeakyReLU(0.2, inplace=True)]
        layers.append(nn.Conv2d(b * mult, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def generate_perturbation(gen: Generator, q) -> torch.Tensor:
    """Perturbation for patch(es) ``q``; the adversarial patch is clip(q + G(q), 0, 1)."""
    qt = to_tensor(q)
    return gen(qt)


def adversarial_patch(gen: Generator, q: torch.Tensor) -> torch.Tensor:
    return torch.clamp(q + gen(q), 0.0, 1.0)


# --------------------------------------------------------------------------- GAN losses


def lsgan_discriminator_loss(d_fake: torch.Tensor, d_real: torch.Tensor) -> torch.Tensor:
    return (d_fake ** 2).mean() + ((d_real - 1.0) ** 2).mean()


def lsgan_generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return ((d_fake - 1.0) ** 2).mean()


def discriminator_loss(disc: Discriminator, gen: Generator, batch: torch.Tensor) -> torch.Tensor:
    """E[D(G(x)+x)^2] + E[(D(x)-1)^2]; the generator is not differentiated."""
    with torch.no_grad():
        adv = adversarial_patch(gen, batch)
    return lsgan_discriminator_loss(disc(adv), disc(batch))


def generator_adversarial_loss(disc: Discriminator, gen: Generator,
                               batch: torch.Tensor) -> torch.Tensor:
    return lsgan_generator_loss(disc(adversarial_patch(gen, batch)))


OBJECTIVE_PARTS = ("gan", "sim", "embed", "drift")


def full_objective(weights: LossWeights, parts: dict):
    """L_G + alpha1 * L_sim + alpha2 * L_embed + alpha3 * L_drift."""
    missing = [k for k in OBJECTIVE_PARTS if k not in parts]
    if missing:
        raise ValueError(f"missing objective parts: {missing}")
    return (parts["gan"] + weights.alpha1 * parts["sim"] + weights.alpha2 * parts["embed"]
            + weights.alpha3 * parts["drift"])


def discriminator_step(disc: Discriminator, opt_d, gen: Generator, q: torch.Tensor) -> torch.Tensor:
    """One minimisation step of the discriminator loss; the generator is untouched."""
    d_loss = discriminator_loss(disc, gen, q)
    opt_d.zero_grad()
    d_loss.backward()
    opt_d.step()
    return d_loss.detach()


def generator_step(gen: Generator, opt_g, disc: Discriminator, tracker: TrackerModel,
                   weights: LossWeights, config: "FanConfig", q: torch.Tensor,
                   z: torch.Tensor | None = None, labels: torch.Tensor | None = None,
                   e: torch.Tensor | None = None) -> dict:
    """One minimisation step of the full generator objective.

    Untargeted batches pass exemplars ``z`` (drift loss on the search patches
    ``q``); targeted batches pass embedding images ``e``. Only generator
    parameters are updated; the step is skipped when the loss is not finite.
    """
    pert = gen(q)
    adv = torch.clamp(q + pert, 0.0, 1.0)
    parts = {"gan": lsgan_generator_loss(disc(adv)), "sim": similarity_loss(q, adv)}
    zero = torch.zeros((), dtype=q.dtype)
    if e is not None:
        parts["embed"] = embedded_feature_loss(tracker, q, pert, e)
        parts["drift"] = zero
    else:
        with torch.no_grad():
            z_feat = tracker.forward_features(z)
        scores = tracker.correlate(z_feat, tracker.forward_features(adv))
        parts["drift"] = drift_loss(scores, labels, weights, config.temperature,
                                    config.score_loss_sign)
        parts["embed"] = zero
    total = full_objective(weights, parts)
    record = {k: float(v.detach()) for k, v in parts.items()}
    record["total"] = float(total.detach())
    if not math.isfinite(record["total"]):
        return record
    opt_g.zero_grad()
    total.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(gen.parameters(), config.grad_clip)
    opt_g.step()
    # the discriminator only accumulates gradients here; drop them
    disc.zero_grad(set_to_none=True)
    return record


# --------------------------------------------------------------------------- training


@dataclass
class FanConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple = (0.5, 0.999)
    base_channels: int = 16
    n_blocks: int = 4
    kappa: float = KAPPA
    disc_channels: int = 16
    temperature: float = DEFAULT_TEMPERATURE
    # the flipped score term gave the larger validation drop for untargeted training
    score_loss_sign: str = "flipped"
    grad_clip: float = 10.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "FanConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _untargeted_batch(dataset, idx):
    zs, xs, labels = zip(*[dataset[int(i)] for i in idx])
    return to_tensor(np.stack(zs)), to_tensor(np.stack(xs)), torch.from_numpy(np.stack(labels))


def _targeted_batch(dataset, idx):
    items = [dataset[int(i)] for i in idx]
    q = to_tensor(np.stack([t.z for t in items] + [t.x for t in items]))
    e = to_tensor(np.stack([t.e_z for t in items] + [t.e_x for t in items]))
    return q, e


def train_fan(tracker: TrackerModel, dataset, weights: LossWeights, config: FanConfig,
              validate: Callable[[Generator], float] | None = None) -> Generator:
    """Alternate one discriminator step and one generator step per batch.

    The attack mode follows the weights: a non-zero ``alpha3`` trains on search
    patches with the drift loss, otherwise items are embedding triples and the
    embedded feature loss is used. ``validate`` scores a generator (higher is a
    stronger attack); it runs before training and after every epoch and the
    best-scoring weights are returned. Curves are kept on ``gen.history``.
    """
    targeted = weights.alpha3 == 0
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    tracker = freeze(tracker)
    gen = Generator(config.base_channels, config.n_blocks, config.kappa, config.seed)
    disc = Discriminator(config.disc_channels, seed=config.seed)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr, betas=tuple(config.betas))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=tuple(config.betas))
    history = {"steps": [], "val": []}

    best_score, best_state = -math.inf, None
    if validate is not None:
        gen.eval()
        best_score = validate(gen)
        best_state = copy.deepcopy(gen.state_dict())
        history["val"].append(best_score)
        log.info("fan epoch 0 validation %.4f", best_score)

    step = 0
    for epoch in range(config.epochs):
        gen.train()
        disc.train()
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if targeted:
                q, e = _targeted_batch(dataset, idx)
            else:
                z, q, labels = _untargeted_batch(dataset, idx)

            d_loss = discriminator_step(disc, opt_d, gen, q)
            if targeted:
                record = generator_step(gen, opt_g, disc, tracker, weights, config, q, e=e)
            else:
                record = generator_step(gen, opt_g, disc, tracker, weights, config, q, z=z,
                                        labels=labels)
            record.update(d=float(d_loss), epoch=epoch, step=step)
            if not (math.isfinite(record["total"]) and math.isfinite(record["d"])):
                raise FanTrainingError(f"non-finite loss at epoch {epoch} step {step}", record)
            history["steps"].append(record)
            step += 1
        gen.eval()
        recent = history["steps"][-10:]
        log.info("fan epoch %d loss %.4f", epoch + 1, float(np.mean([r["total"] for r in recent])))
        if validate is not None:
            score = validate(gen)
            history["val"].append(score)
            log.info("fan epoch %d validation %.4f", epoch + 1, score)
            if score > best_score:
                best_score, best_state = score, copy.deepcopy(gen.state_dict())
    if best_state is not None:
        gen.load_state_dict(best_state)
    gen.eval()
    gen.history = history
    gen.best_score = best_score
    return gen


def save_generator(gen: Generator, path, weights: LossWeights | None = None,
                   extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(gen.state_dict(), path)
    meta = gen.config()
    if weights is not None:
        meta["loss_weights"] = weights.to_dict()
        meta["mode"] = "targeted" if weights.alpha3 == 0 else "untargeted"
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_generator(path) -> Generator:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    gen = Generator(meta["base_channels"], meta["n_blocks"], meta["kappa"], meta.get("seed", 0))
    gen.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    gen.eval()
    gen.meta = meta
    return gen
