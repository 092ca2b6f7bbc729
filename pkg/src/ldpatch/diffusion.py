"""Latent-space DDPM: noise schedule, epsilon-prediction network, training and sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (RandomSource, arrays_to_state, expect_kind, save_artifact, seeded_init,
                   state_to_arrays)

log = logging.getLogger(__name__)

NOISE_MODES = ("frozen", "fresh", "zero")


class DiffusionError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas plus the original step index each entry corresponds to.

    ``timesteps`` is 1..T for a full schedule; a strided schedule keeps every
    k-th step and re-derives its betas from the cumulative products.
    """

    beta: torch.Tensor
    timesteps: torch.Tensor

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> torch.Tensor:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> torch.Tensor:
        return torch.cumprod(self.alpha, 0)


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    sched = NoiseSchedule(beta, torch.arange(1, T + 1))
    abar = sched.alpha_bar
    if not bool(torch.all(abar[1:] < abar[:-1])):
        raise ValueError("alpha_bar must be strictly decreasing")
    return sched


def strided(sched: NoiseSchedule, k: int) -> NoiseSchedule:
    """Keep steps T, T-k, T-2k, ... (at least 1) with betas matching the kept alpha_bar."""
    if k < 1:
        raise ValueError("stride must be >= 1")
    if k == 1:
        return sched
    keep = torch.arange(sched.T, 0, -k).flip(0) - 1
    abar = sched.alpha_bar[keep]
    prev = torch.cat([abar.new_ones(1), abar[:-1]])
    return NoiseSchedule(1.0 - abar / prev, sched.timesteps[keep])


def forward_sample(sched: NoiseSchedule, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    """Closed-form q(z_t | z_0) draw for a 1-based step ``t``."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside 1..{sched.T}")
    abar = sched.alpha_bar[t - 1].to(z0.dtype)
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


def _broadcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))


# --------------------------------------------------------------------------
# network

def sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    """Rows 0..T of the standard sin/cos step embedding."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    t = torch.arange(T + 1, dtype=torch.float64)[:, None] * freqs[None]
    return torch.cat([t.sin(), t.cos()], dim=1).float()


class _Block(nn.Module):
    def __init__(self, cin, cout, emb_dim, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.time = nn.Linear(emb_dim, cout)

    def forward(self, h, emb):
        return F.silu(self.conv(h) + self.time(emb)[:, :, None, None])


class Denoiser(nn.Module):
    """Small U-shaped epsilon predictor with two downsampling stages.

    The sinusoidal step embedding enters every block as a per-channel bias.
    ``latent_scale`` maps autoencoder latents to the unit-variance space the
    network is trained in. ``train_config`` holds the DiffusionConfig the
    weights came from (set by training and loading).
    """

    def __init__(self, channels: int, T: int, width: int = 32, emb_dim: int = 32):
        super().__init__()
        self.channels, self.num_steps, self.width, self.emb_dim = channels, T, width, emb_dim
        self.train_config: DiffusionConfig | None = None
        self.register_buffer("time_table", sinusoidal_table(T, emb_dim))
        self.register_buffer("latent_scale", torch.ones(()))
        self.emb = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU())
        w = width
        self.inp = _Block(channels, w, emb_dim)
        self.down1 = _Block(w, 2 * w, emb_dim, stride=2)
        self.down2 = _Block(2 * w, 2 * w, emb_dim, stride=2)
        self.mid = _Block(2 * w, 2 * w, emb_dim)
        self.up2 = _Block(4 * w, 2 * w, emb_dim)
        self.up1 = _Block(3 * w, w, emb_dim)
        self.out = nn.Conv2d(w, channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.emb(self.time_table[t].to(z.dtype))
        h0 = self.inp(z, emb)
        h1 = self.down1(h0, emb)
        h2 = self.down2(h1, emb)
        h = self.mid(h2, emb)
        h = F.interpolate(h, size=h1.shape[-2:], mode="nearest")
        h = self.up2(torch.cat([h, h1], 1), emb)
        h = F.interpolate(h, size=h0.shape[-2:], mode="nearest")
        h = self.up1(torch.cat([h, h0], 1), emb)
        return self.out(h)

    def config(self) -> dict:
        return {"channels": self.channels, "T": self.num_steps, "width": self.width,
                "emb_dim": self.emb_dim}


def train_step(model: Denoiser, optimizer: torch.optim.Optimizer, sched: NoiseSchedule,
               z0: torch.Tensor, rng: RandomSource) -> float:
    """One epsilon-matching update on a batch of (scaled) latents; returns the loss."""
    if len(z0) == 0:
        raise ValueError("empty batch")
    t = torch.randint(1, sched.T + 1, (len(z0),), generator=rng.torch)
    eps = torch.randn(z0.shape, generator=rng.torch, dtype=z0.dtype)
    abar = _broadcast(sched.alpha_bar[t - 1], z0)
    zt = abar.sqrt() * z0 + (1 - abar).sqrt() * eps
    loss = F.mse_loss(model(zt, sched.timesteps[t - 1]), eps)
    if not torch.isfinite(loss):
        raise DiffusionError(f"diffusion loss became {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    width: int = 32
    emb_dim: int = 32
    steps: int = 4000
    batch_size: int = 64
    learning_rate: float = 1e-3
    attack_stride: int = 4

    def __post_init__(self):
        make_schedule(self.T, self.beta_start, self.beta_end)
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 1 <= self.attack_stride <= self.T:
            raise ValueError("attack_stride must lie in 1..T")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


def train_diffusion(latents: torch.Tensor, cfg: DiffusionConfig, rng: RandomSource,
                    history: list | None = None, rescale: bool = True) -> Denoiser:
    """Train a denoiser on raw latents ``(N, d, h, w)``.

    With ``rescale`` the latents are divided by their global standard
    deviation first; the factor is kept on the model as ``latent_scale``.
    """
    latents = latents.detach().float()
    if not torch.all(torch.isfinite(latents)):
        raise DiffusionError("non-finite training latents")
    sched = cfg.schedule()
    model = seeded_init(Denoiser, latents.shape[1], cfg.T, cfg.width, cfg.emb_dim, seed=rng.seed)
    model.train_config = cfg
    if rescale:
        model.latent_scale.fill_(1.0 / latents.std().clamp_min(1e-6).item())
    data = latents * model.latent_scale
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
    for step in range(cfg.steps):
        idx = torch.randint(0, len(data), (min(cfg.batch_size, len(data)),), generator=rng.torch)
        try:
            loss = train_step(model, opt, sched, data[idx], rng)
        except DiffusionError as exc:
            raise DiffusionError(f"{exc} at step {step}") from None
        lr_sched.step()
        if history is not None:
            history.append(loss)
        if step % 500 == 0:
            log.info("diffusion step %d  loss %.4f", step, loss)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def frozen_noise(seed: int, n_steps: int, shape, dtype=torch.float32) -> list[torch.Tensor]:
    gen = torch.Generator().manual_seed(seed & 0xFFFF_FFFF_FFFF_FFFF)
    return [torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) for _ in range(n_steps)]


def sample_chain(model: Denoiser, sched: NoiseSchedule, zT: torch.Tensor,
                 noise_mode: str = "frozen", rng: RandomSource | int | None = None) -> torch.Tensor:
    """Run the ancestral reverse chain from ``zT`` down to z_0.

    ``noise_mode`` selects the per-step noise: ``"frozen"`` regenerates the
    same draws from ``rng``'s seed on every call (deterministic and
    differentiable in ``zT``), ``"fresh"`` draws from ``rng``, ``"zero"`` adds
    none. The last step never adds noise. ``zT`` may be batched.
    """
    if noise_mode not in NOISE_MODES:
        raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
    single = zT.dim() == 3
    z = zT.unsqueeze(0) if single else zT
    if noise_mode == "frozen":
        seed = rng if isinstance(rng, int) else (rng.seed if rng is not None else 0)
        noises = frozen_noise(seed, sched.T, z.shape, z.dtype)
    alpha, abar, beta = sched.alpha, sched.alpha_bar, sched.beta
    for i in reversed(range(sched.T)):
        t = sched.timesteps[i].expand(len(z))
        eps = model(z, t)
        coef = (beta[i] / (1 - abar[i]).sqrt()).item()
        z = (z - coef * eps) / math.sqrt(alpha[i].item())
        if i > 0:
            if noise_mode == "frozen":
                w = noises[i]
            elif noise_mode == "fresh":
                w = torch.randn(z.shape, generator=rng.torch, dtype=z.dtype)
            else:
                w = None
            if w is not None:
                z = z + math.sqrt(beta[i].item()) * w
        if not bool(torch.isfinite(z).all()):
            raise DiffusionError(f"non-finite latent in reverse chain at step index {i + 1}")
    return z[0] if single else z


def save_diffusion(model: Denoiser, cfg: DiffusionConfig, path, meta: dict | None = None) -> None:
    save_artifact(path, "diffusion", state_to_arrays(model),
                  {"config": asdict(cfg), "network": model.config(), **(meta or {})})


def load_diffusion(path) -> tuple[Denoiser, DiffusionConfig, dict]:
    arrays, meta = expect_kind(path, "diffusion")
    cfg = DiffusionConfig(**meta["config"])
    net = meta["network"]
    model = Denoiser(net["channels"], net["T"], net["width"], net["emb_dim"])
    arrays_to_state(model, arrays)
    model.train_config = cfg
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, cfg, meta


def attack_schedule(model: Denoiser) -> NoiseSchedule:
    """Strided schedule used when differentiating through the chain."""
    cfg = model.train_config
    if cfg is None:
        raise DiffusionError("denoiser carries no training config")
    return strided(cfg.schedule(), cfg.attack_stride)


def mixture_means_from_samples(samples: np.ndarray, direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split 2-D samples by the sign of their projection on ``direction`` and average each side."""
    proj = samples @ direction
    return samples[proj > 0].mean(0), samples[proj <= 0].mean(0)
