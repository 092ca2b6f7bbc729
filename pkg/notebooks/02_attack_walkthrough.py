# %% [markdown]
# # A small end-to-end attack
#
# The full default pipeline takes several minutes on one core. This script
# runs the same stages with smaller budgets so every step can be watched:
#
# 1. train the autoencoder on the synthetic natural-image corpus,
# 2. train the latent denoiser on its encodings,
# 3. train the grid detector on labelled scenes,
# 4. optimize the patch's latent distribution against that detector,
# 5. evaluate the patch on held-out scenes next to a gray control.
#
# `python3 notebooks/02_attack_walkthrough.py [outdir]`

# %%
import sys
from pathlib import Path

import numpy as np
import torch

from ldpatch import pipeline
from ldpatch.config import config_from_dict
from ldpatch.core import save_png
from ldpatch.diffusion import attack_schedule, sample_chain
from ldpatch.autoencoder import decode

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(parents=True, exist_ok=True)

cfg = config_from_dict({
    "seed": 1,
    "data": {"n_images": 200, "holdout": 40},
    "autoencoder": {"epochs": 15},
    "diffusion": {"steps": 1500},
    "detector": {"n_scenes": 800, "epochs": 8},
    "attack": {"n_scenes": 150, "optimizer": {"steps": 80, "candidates": 8}},
    "eval": {"n_scenes": 100},
})
cfg.dump(out / "walkthrough_config.json")

# %% [markdown]
# ## Autoencoder
#
# Images are 64x64 and latents 8x8x8, a 24-fold compression. The held-out
# reconstruction error tells how much detail the decoder can express.

# %%
ae, mse, ae_history = pipeline.run_train_ae(cfg)
print(f"autoencoder: final epoch loss {ae_history[-1]:.5f}, held-out MSE {mse:.5f}")

# %% [markdown]
# ## Latent denoiser
#
# Latents are rescaled to unit variance before training. Samples from the
# reverse chain, decoded, should look like the corpus: soft blobs, rims and
# stripes rather than noise.

# %%
diffusion, diff_history = pipeline.run_train_diffusion(cfg, ae)
print(f"denoiser: mean loss over the last 200 steps {np.mean(diff_history[-200:]):.4f}")

with torch.no_grad():
    zT = torch.randn(8, *cfg.autoencoder.latent_shape, generator=torch.Generator().manual_seed(0))
    z0 = sample_chain(diffusion, attack_schedule(diffusion), zT, "frozen", 0)
    samples = decode(ae, z0 / diffusion.latent_scale)
save_png(torch.cat(list(samples), 2), out / "diffusion_samples.png")

# %% [markdown]
# ## Detector
#
# A single-scale grid detector with one box per cell and three classes. The
# attack only looks at the "person" class.

# %%
det, det_history = pipeline.run_train_detector(cfg)
print(f"detector: first batch loss {det_history[0]:.3f}, last {det_history[-1]:.3f}")

# %% [markdown]
# ## Patch optimization
#
# Each step draws seed noise, runs the frozen-noise reverse chain from
# `mu + sigma * eps`, decodes the patch, pastes it onto a batch of attack
# scenes and backpropagates the summed objective into `mu` and `log sigma`.

# %%
result = pipeline.run_optimize_patch(cfg, ae, diffusion, det)
first, last = result.history[0], result.history[-1]
for key in ("l_det", "l_kl", "l_tv", "l_nps", "l_total"):
    print(f"{key:>8}: {first[key]:.4f} -> {last[key]:.4f}")
pipeline.write_patch_outputs(result, out / "walkthrough_patch.art", {"detector": "walkthrough"})

# %% [markdown]
# ## Evaluation
#
# Pseudo ground truth comes from the clean predictions of the same detector,
# so clean mAP is 100 by construction. The gray control has the patch's size
# and mean color; it separates the effect of covering part of a person from
# the effect of the adversarial pattern.

# %%
images = pipeline.eval_images(cfg, det)
report = pipeline.run_evaluate(cfg, det, result.patch, images)
print(f"clean mAP {report.clean_map:.1f}")
print(f"patched mAP {report.patched_map:.1f}, ASR {report.asr:.1f}%")
print(f"gray control mAP {report.control_map:.1f}")
print(f"mean max person confidence drop {100 * report.confidence_drop:.1f}%")
report.to_json(out / "walkthrough_report.json")
