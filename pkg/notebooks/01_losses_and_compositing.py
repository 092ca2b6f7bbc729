# %% [markdown]
# # Patch losses and compositing
#
# This walk-through builds a few patches by hand and looks at the three
# regularizers the attack uses: total variation (smoothness), the
# non-printability score (distance to a printable palette) and the KL term
# that keeps the latent distribution close to a standard normal. It then
# pastes a patch onto synthetic scenes the way the optimizer does.
#
# Run it as a script: `python3 notebooks/01_losses_and_compositing.py [outdir]`.

# %%
import math
import sys
from pathlib import Path

import torch

from ldpatch.core import RandomSource, save_png
from ldpatch.detector import GridConfig
from ldpatch.patch import (PatchLatentParams, TransformConfig, apply_patch_batch, kl_loss,
                           load_print_colors, nps_loss, tv_loss)
from ldpatch.synthetic import PERSON, generate_synthetic_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(parents=True, exist_ok=True)
torch.manual_seed(0)

# %% [markdown]
# ## Total variation
#
# A flat patch only pays the small stabilizer inside the square root, one
# `sqrt(1e-8)` per neighbour pair. Noise is expensive, a smooth gradient is
# cheap.

# %%
flat = torch.full((3, 32, 32), 0.5)
ramp = torch.linspace(0, 1, 32).expand(3, 32, 32).clone()
noise = torch.rand(3, 32, 32)
for name, P in [("flat", flat), ("ramp", ramp), ("noise", noise)]:
    print(f"TV {name:>5}: {tv_loss(P).item():9.3f}")

# %% [markdown]
# ## Non-printability
#
# The bundled palette holds 30 RGB triplets. A patch made only of palette
# colors scores exactly zero; random colors sit a little away from the
# nearest entry.

# %%
colors = load_print_colors()
print("palette size", len(colors))
printable = colors[torch.randint(0, len(colors), (32, 32))].permute(2, 0, 1).float()
print(f"NPS printable: {nps_loss(printable, colors).item():.4f}")
print(f"NPS noise:     {nps_loss(noise, colors).item():.4f}  "
      f"({nps_loss(noise, colors).item() / (32 * 32):.4f} per pixel)")

# %% [markdown]
# ## KL to the standard normal
#
# The term is zero at mu = 0, sigma = 1 and grows quadratically in mu. For a
# single coordinate with mu = 1 it is exactly 0.5.

# %%
shape = (8, 8, 8)
for mu, sigma in [(0.0, 1.0), (1.0, 1.0), (0.0, 0.5), (0.5, 0.8)]:
    p = PatchLatentParams(torch.full(shape, mu), torch.full(shape, math.log(sigma)))
    print(f"KL mu={mu:.1f} sigma={sigma:.1f}: {kl_loss(p).item():.4f} (mean per coordinate)")

# %% [markdown]
# ## Compositing onto scenes
#
# Synthetic scenes hold up to three shapes. Tall rounded "person" proxies are
# the ones an attack targets. Every person box gets a square patch whose side
# is a fraction of the box height, with random rotation, scale, brightness,
# contrast and pixel noise.

# %%
scenes = generate_synthetic_dataset(8, GridConfig(), RandomSource(1))
images = torch.stack([s.image for s in scenes])
boxes = [s.boxes(PERSON) for s in scenes]
print("person boxes per scene:", [len(b) for b in boxes])

patch = ramp.clone()
patch[1] = patch[1].T.clone()
patched = apply_patch_batch(images, boxes, patch, TransformConfig(patch_scale=0.45), RandomSource(2))
changed = (patched != images).any(dim=1).float().mean(dim=(1, 2))
print("fraction of pixels changed:", [round(v, 3) for v in changed.tolist()])

grid = torch.cat([torch.cat(list(images), 2), torch.cat(list(patched), 2)], 1)
save_png(grid, out / "compositing.png")
print("wrote", out / "compositing.png")
