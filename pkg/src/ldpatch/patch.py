"""Latent-space patch search: reparameterized seed noise, patch losses, compositing, Adam loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import Autoencoder, decode
from .core import BBox, RandomSource, expect_kind, save_artifact
from .detector import GridDetector, detection_loss
from .diffusion import Denoiser, NoiseSchedule, sample_chain

log = logging.getLogger(__name__)

TV_DELTA = 1e-8


class PatchOptimizationError(RuntimeError):
    pass


@dataclass
class PatchLatentParams:
    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma must have the same shape")

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()

    @classmethod
    def standard(cls, shape, dtype=torch.float32) -> "PatchLatentParams":
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))


@dataclass(frozen=True)
class LossWeights:
    """Weights of the KL, TV and NPS terms.

    With ``per_pixel`` the TV and NPS sums enter the objective divided by
    their number of terms, which keeps them on the same scale as the
    detection loss for any patch resolution.
    """

    alpha: float = 0.5
    beta: float = 0.1
    gamma: float = 0.01
    per_pixel: bool = True

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TransformConfig:
    patch_scale: float = 0.3
    rotation_deg: float = 20.0
    scale_jitter: float = 0.1
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.9, 1.1)
    noise_std: float = 0.01

    def __post_init__(self):
        self.contrast = tuple(self.contrast)
        if not 0.0 < self.patch_scale <= 1.0:
            raise ValueError("patch_scale must lie in (0, 1]")
        if min(self.rotation_deg, self.scale_jitter, self.brightness, self.noise_std) < 0:
            raise ValueError("transform ranges must be non-negative")
        if self.scale_jitter >= 1.0:
            raise ValueError("scale_jitter must be below 1")
        lo, hi = self.contrast
        if not 0.0 < lo <= hi:
            raise ValueError("contrast range must satisfy 0 < low <= high")

    def fixed(self) -> "TransformConfig":
        """Same placement scale with every random nuisance disabled."""
        return TransformConfig(self.patch_scale, 0.0, 0.0, 0.0, (1.0, 1.0), 0.0)


def load_print_colors(path=None) -> torch.Tensor:
    """Read "r g b" lines (``#`` comments allowed); defaults to the bundled 30-color set."""
    if path is None:
        text = resources.files("ldpatch").joinpath("data/print_colors.txt").read_text()
    else:
        text = Path(path).read_text()
    rows = [line.split() for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")]
    colors = torch.tensor([[float(v) for v in r] for r in rows], dtype=torch.float64)
    if colors.numel() == 0 or colors.shape[1] != 3:
        raise ValueError("print color set must be a non-empty list of RGB triplets")
    if colors.min() < 0 or colors.max() > 1:
        raise ValueError("print colors must lie in [0, 1]")
    return colors


# --------------------------------------------------------------------------
# losses

def reparameterize(p: PatchLatentParams, eps: torch.Tensor) -> torch.Tensor:
    if eps.shape != p.mu.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match {tuple(p.mu.shape)}")
    return p.mu + eps * p.sigma


def tv_loss(P: torch.Tensor) -> torch.Tensor:
    """Isotropic total variation with forward differences, summed over channels.

    ``P`` is (C, H, W) or (H, W); the last row and column only enter as
    neighbours.
    """
    if P.dim() == 2:
        P = P.unsqueeze(0)
    if P.shape[-1] < 2 or P.shape[-2] < 2:
        raise ValueError("total variation needs at least a 2x2 patch")
    base = P[:, :-1, :-1]
    down = P[:, 1:, :-1] - base
    right = P[:, :-1, 1:] - base
    return torch.sqrt(down ** 2 + right ** 2 + TV_DELTA).sum()


def nps_loss(P: torch.Tensor, colors: torch.Tensor) -> torch.Tensor:
    """Sum over pixels of the distance to the nearest printable color."""
    if colors.numel() == 0:
        raise ValueError("empty print color set")
    pixels = P.reshape(3, -1).T
    dist = torch.linalg.vector_norm(pixels[:, None, :] - colors.to(P.dtype)[None], dim=-1)
    return dist.min(dim=1).values.sum()


def kl_loss(p: PatchLatentParams) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) averaged over latent elements."""
    return 0.5 * (p.mu ** 2 + torch.exp(2 * p.log_sigma) - 2 * p.log_sigma - 1).mean()


def total_loss(l_det, l_kl, l_tv, l_nps, w: LossWeights):
    return l_det + w.alpha * l_kl + w.beta * l_tv + w.gamma * l_nps


def smoothness_terms(P: torch.Tensor, colors: torch.Tensor, per_pixel: bool):
    """TV and NPS of a (3, H, W) patch, optionally as per-term means."""
    l_tv, l_nps = tv_loss(P), nps_loss(P, colors)
    if per_pixel:
        _, h, w = P.shape
        l_tv = l_tv / (3 * (h - 1) * (w - 1))
        l_nps = l_nps / (h * w)
    return l_tv, l_nps


# --------------------------------------------------------------------------
# generation and compositing

def generate_patch(ae: Autoencoder, diff: Denoiser, sched: NoiseSchedule, zT: torch.Tensor,
                   noise_seed: int = 0) -> torch.Tensor:
    """Decode the latent reached by the frozen-noise reverse chain from ``zT``."""
    z0 = sample_chain(diff, sched, zT, "frozen", noise_seed) / diff.latent_scale
    return decode(ae, z0)


class TransformDraw(NamedTuple):
    angle: torch.Tensor       # radians, (K,)
    scale: torch.Tensor       # multiplicative, (K,)
    brightness: torch.Tensor  # (K,)
    contrast: torch.Tensor    # (K,)
    noise: torch.Tensor | None  # (K, 3, H, W) or None


def sample_transforms(k: int, t: TransformConfig, rng: RandomSource, image_size: int,
                      dtype=torch.float32) -> TransformDraw:
    u = torch.rand(4, k, generator=rng.torch, dtype=torch.float64)
    angle = math.radians(t.rotation_deg) * (2 * u[0] - 1)
    scale = 1 + t.scale_jitter * (2 * u[1] - 1)
    bright = t.brightness * (2 * u[2] - 1)
    lo, hi = t.contrast
    contrast = lo + (hi - lo) * u[3]
    noise = None
    if t.noise_std > 0:
        noise = t.noise_std * torch.randn(k, 3, image_size, image_size, generator=rng.torch,
                                          dtype=torch.float64).to(dtype)
    return TransformDraw(angle.to(dtype), scale.to(dtype), bright.to(dtype), contrast.to(dtype),
                         noise)


def _place(P: torch.Tensor, box: BBox, angle, scale, size: int, dtype):
    """Resample ``P`` into a size x size canvas centered on ``box``; returns (layer, alpha)."""
    side = box.h * scale  # fraction of the image side
    side_px = max(int(round(float(side) * size)), 2)
    small = F.interpolate(P.unsqueeze(0), size=(side_px, side_px), mode="bilinear",
                          align_corners=False, antialias=True)
    rgba = torch.cat([small, torch.ones_like(small[:, :1])], dim=1)
    c, s = torch.cos(angle), torch.sin(angle)
    half = side  # half side in [-1, 1] units
    cx, cy = 2 * box.cx - 1, 2 * box.cy - 1
    # output coords u -> patch coords R(-angle)(u - center) / half
    r00, r01, r10, r11 = c / half, s / half, -s / half, c / half
    theta = torch.stack([
        torch.stack([r00, r01, -(r00 * cx + r01 * cy)]),
        torch.stack([r10, r11, -(r10 * cx + r11 * cy)]),
    ]).unsqueeze(0).to(dtype)
    grid = F.affine_grid(theta, [1, 4, size, size], align_corners=False)
    out = F.grid_sample(rgba, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0, :3], out[0, 3:]


def apply_patch_batch(images: torch.Tensor, boxes: Sequence[Sequence[BBox]], P: torch.Tensor,
                      t: TransformConfig, rng: RandomSource | None = None,
                      draw: TransformDraw | None = None) -> torch.Tensor:
    """Composite ``P`` onto every box of every image; differentiable in images and ``P``.

    Each box receives a square patch of side ``patch_scale * box height``
    (times scale jitter), rotated and color-jittered per ``t``. Pixels outside
    every footprint are returned unchanged.
    """
    if P.dim() != 3 or P.shape[0] != 3 or P.shape[1] != P.shape[2]:
        raise ValueError("patch must be a square (3, s, s) tensor")
    images = images if isinstance(images, torch.Tensor) else torch.stack(list(images))
    n, _, size, width = images.shape
    if size != width:
        raise ValueError("images must be square")
    k = sum(len(b) for b in boxes)
    if k == 0:
        return images
    if draw is None:
        if rng is None:
            raise ValueError("either rng or draw is required")
        draw = sample_transforms(k, t, rng, size, P.dtype)
    out = []
    j = 0
    for i in range(n):
        x = images[i]
        for box in boxes[i]:
            scale = t.patch_scale * draw.scale[j]
            layer, alpha = _place(P, box, draw.angle[j], scale, size, P.dtype)
            if not bool((alpha > 0).any()):
                log.warning("patch footprint for box %s falls outside the image; skipped", box)
                j += 1
                continue
            layer = layer * draw.contrast[j] + draw.brightness[j]
            if draw.noise is not None:
                layer = layer + draw.noise[j]
            x = x * (1 - alpha) + layer * alpha
            j += 1
        out.append(x.clamp(0.0, 1.0))
    return torch.stack(out)


def apply_patch(x: torch.Tensor, boxes: Sequence[BBox], P: torch.Tensor, t: TransformConfig,
                rng: RandomSource | None = None, draw: TransformDraw | None = None) -> torch.Tensor:
    if not boxes:
        return x
    return apply_patch_batch(x.unsqueeze(0), [list(boxes)], P, t, rng, draw)[0]


# --------------------------------------------------------------------------
# optimization

@dataclass
class OptimizerConfig:
    steps: int = 300
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 12
    candidates: int = 16
    noise_seed: int = 0
    init_sigma: float = 1.0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.candidates < 1:
            raise ValueError("steps, batch_size and candidates must be positive")
        if self.init_sigma <= 0:
            raise ValueError("init_sigma must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


HISTORY_COLUMNS = ("step", "l_det", "l_kl", "l_tv", "l_nps", "l_total")


@dataclass
class PatchResult:
    params: PatchLatentParams
    patch: torch.Tensor
    eps: torch.Tensor
    history: list[dict] = field(default_factory=list)


def optimize_patch(ae: Autoencoder, diff: Denoiser, sched: NoiseSchedule, det: GridDetector,
                   images, gt: Sequence[Sequence[BBox]], w: LossWeights, t: TransformConfig,
                   opt: OptimizerConfig, rng: RandomSource,
                   colors: torch.Tensor | None = None) -> PatchResult:
    """Search (mu, log sigma) so decoded samples suppress person detections.

    Every step draws fresh seed noise, composites the decoded patch onto a
    random batch of box-bearing images and takes one Adam step on the
    weighted loss. Afterwards ``opt.candidates`` samples are drawn from the
    optimized distribution and the one with the lowest total loss on a
    held batch is returned as the final patch.
    """
    images = images if isinstance(images, torch.Tensor) else torch.stack(list(images))
    colors = load_print_colors() if colors is None else colors
    usable = [i for i, b in enumerate(gt) if b]
    if not usable:
        raise PatchOptimizationError("no image carries a box to patch")
    shape = ae.cfg.latent_shape
    params = PatchLatentParams.standard(shape)
    params.log_sigma.fill_(math.log(opt.init_sigma))
    params.mu.requires_grad_(True)
    params.log_sigma.requires_grad_(True)
    adam = torch.optim.Adam([params.mu, params.log_sigma], lr=opt.learning_rate,
                            betas=(opt.beta1, opt.beta2))
    batch_rng, noise_rng, tf_rng = rng.child(0), rng.child(1), rng.child(2)

    def losses(zT, idx, tf):
        P = generate_patch(ae, diff, sched, zT, opt.noise_seed)
        batch = images[idx]
        patched = apply_patch_batch(batch, [gt[i] for i in idx], P, t, tf)
        l_det = detection_loss(det, patched)
        l_tv, l_nps = smoothness_terms(P, colors, w.per_pixel)
        return P, l_det, l_tv, l_nps

    history = []
    for step in range(opt.steps):
        idx = [usable[i] for i in batch_rng.np.choice(len(usable), min(opt.batch_size, len(usable)),
                                                       replace=False)]
        eps = noise_rng.normal(*shape)
        zT = reparameterize(params, eps)
        _, l_det, l_tv, l_nps = losses(zT, idx, tf_rng)
        l_kl = kl_loss(params)
        loss = total_loss(l_det, l_kl, l_tv, l_nps, w)
        if not torch.isfinite(loss):
            raise PatchOptimizationError(
                f"non-finite loss at step {step}: det={l_det.item()} kl={l_kl.item()} "
                f"tv={l_tv.item()} nps={l_nps.item()}")
        adam.zero_grad()
        loss.backward()
        adam.step()
        row = dict(zip(HISTORY_COLUMNS, (step, l_det.item(), l_kl.item(), l_tv.item(),
                                          l_nps.item(), loss.item())))
        history.append(row)
        if step % 25 == 0:
            log.info("patch step %d  det %.4f  kl %.4f  tv %.2f  nps %.2f  total %.4f",
                     step, *[row[c] for c in HISTORY_COLUMNS[1:]])

    params = PatchLatentParams(params.mu.detach(), params.log_sigma.detach())
    pick_rng = rng.child(3)
    idx = [usable[i] for i in pick_rng.np.choice(len(usable), min(4 * opt.batch_size, len(usable)),
                                                  replace=False)]
    draw_seed = pick_rng.child(0).seed
    best = None
    with torch.no_grad():
        for c in range(opt.candidates):
            # candidate 0 is the distribution mean itself
            eps = pick_rng.normal(*shape) if c else torch.zeros(shape)
            zT = reparameterize(params, eps)
            P, l_det, l_tv, l_nps = losses(zT, idx, RandomSource(draw_seed))
            score = total_loss(l_det, kl_loss(params), l_tv, l_nps, w).item()
            if best is None or score < best[0]:
                best = (score, P, eps)
    return PatchResult(params, best[1], best[2], history)


def history_rows(history: list[dict]) -> list[list[str]]:
    return [[str(r["step"])] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]] for r in history]


def save_patch_artifact(result: PatchResult, path, meta: dict | None = None) -> None:
    arrays = {"mu": result.params.mu, "log_sigma": result.params.log_sigma, "eps": result.eps,
              "patch": result.patch}
    save_artifact(path, "patch", arrays, dict(meta or {}))


def load_patch_artifact(path) -> tuple[PatchResult, dict]:
    arrays, meta = expect_kind(path, "patch")
    t = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    result = PatchResult(PatchLatentParams(t["mu"], t["log_sigma"]), t["patch"], t["eps"])
    return result, meta


def weights_dict(w: LossWeights) -> dict:
    return asdict(w)
