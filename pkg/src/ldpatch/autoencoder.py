"""Convolutional autoencoder used as the perceptual-compression stage."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (RandomSource, arrays_to_state, expect_kind, save_artifact, seeded_init,
                   state_to_arrays)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AEConfig:
    image_size: int = 64
    downsample_factor: int = 8
    latent_depth: int = 8
    epochs: int = 40
    learning_rate: float = 1e-3
    batch_size: int = 16

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or f & (f - 1):
            raise ValueError("downsample_factor must be a power of two >= 2")
        if self.image_size % f:
            raise ValueError("image_size must be divisible by downsample_factor")
        if self.image_size // f < 4:
            raise ValueError("latent side (image_size / downsample_factor) must be at least 4")
        if self.latent_depth < 1:
            raise ValueError("latent_depth must be >= 1")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_depth, self.latent_size, self.latent_size)


class Autoencoder(nn.Module):
    """Strided-conv encoder / transposed-conv decoder pair.

    Images are (N, 3, H, W) in [0, 1]; latents are (N, d, H/f, W/f).
    """

    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        stages = int(math.log2(cfg.downsample_factor))
        widths = [16 * 2 ** i for i in range(stages)]
        enc, ch = [], 3
        for w in widths:
            enc += [nn.Conv2d(ch, w, 4, stride=2, padding=1), nn.GroupNorm(4, w), nn.SiLU(),
                    nn.Conv2d(w, w, 3, padding=1), nn.GroupNorm(4, w), nn.SiLU()]
            ch = w
        enc.append(nn.Conv2d(ch, cfg.latent_depth, 1))
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(cfg.latent_depth, ch, 3, padding=1), nn.GroupNorm(4, ch), nn.SiLU()]
        for w in reversed(widths[:-1]):
            dec += [nn.ConvTranspose2d(ch, w, 4, stride=2, padding=1), nn.GroupNorm(4, w), nn.SiLU(),
                    nn.Conv2d(w, w, 3, padding=1), nn.GroupNorm(4, w), nn.SiLU()]
            ch = w
        dec.append(nn.ConvTranspose2d(ch, 3, 4, stride=2, padding=1))
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))

    def forward(self, x):
        return self.decode(self.encode(x))


def _batched(fn, t: torch.Tensor, expected: tuple[int, ...], what: str) -> torch.Tensor:
    single = t.dim() == len(expected)
    if single:
        t = t.unsqueeze(0)
    if tuple(t.shape[1:]) != tuple(expected):
        raise ValueError(f"{what} shape {tuple(t.shape[1:])} does not match expected {expected}")
    out = fn(t)
    return out[0] if single else out


def encode(params: Autoencoder, x: torch.Tensor) -> torch.Tensor:
    s = params.cfg.image_size
    return _batched(params.encode, x, (3, s, s), "image")


def decode(params: Autoencoder, z: torch.Tensor) -> torch.Tensor:
    return _batched(params.decode, z, params.cfg.latent_shape, "latent")


def reconstruction_mse(params: Autoencoder, images: list[torch.Tensor]) -> float:
    with torch.no_grad():
        x = torch.stack(images)
        return F.mse_loss(params(x), x).item()


def train_autoencoder(dataset: list[torch.Tensor], cfg: AEConfig, rng: RandomSource,
                      history: list | None = None) -> Autoencoder:
    """Fit the autoencoder by minimizing per-pixel MSE. Appends epoch losses to ``history``."""
    if not dataset:
        raise ValueError("empty dataset")
    s = cfg.image_size
    for i, x in enumerate(dataset):
        if tuple(x.shape) != (3, s, s):
            raise ValueError(f"image {i} has shape {tuple(x.shape)}, expected {(3, s, s)}")
    model = seeded_init(Autoencoder, cfg, seed=rng.seed)
    data = torch.stack(dataset)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(data), generator=rng.torch)
        total = 0.0
        for start in range(0, len(data), cfg.batch_size):
            batch = data[perm[start:start + cfg.batch_size]]
            loss = F.mse_loss(model(batch), batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"autoencoder loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        sched.step()
        epoch_loss = total / len(data)
        log.info("autoencoder epoch %d  mse %.5f", epoch, epoch_loss)
        if history is not None:
            history.append(epoch_loss)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_autoencoder(model: Autoencoder, path, meta: dict | None = None) -> None:
    save_artifact(path, "autoencoder", state_to_arrays(model),
                  {"config": asdict(model.cfg), **(meta or {})})


def load_autoencoder(path) -> Autoencoder:
    arrays, meta = expect_kind(path, "autoencoder")
    model = Autoencoder(AEConfig(**meta["config"]))
    arrays_to_state(model, arrays)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
