"""Naturalistic adversarial patches from a latent diffusion model.

The pipeline trains a small autoencoder on natural-looking images, a DDPM in
its latent space, and a grid detector on synthetic scenes, then searches the
diffusion model's seed distribution for patches that hide the detector's
person class.
"""

from .autoencoder import AEConfig, Autoencoder, decode, encode, train_autoencoder
from .config import PipelineConfig, load_config
from .core import BBox, Detection, RandomSource, iou, load_artifact, save_artifact
from .detector import GridConfig, GridDetector, detect, detection_loss, train_detector
from .diffusion import (Denoiser, DiffusionConfig, NoiseSchedule, make_schedule, sample_chain,
                        strided, train_diffusion)
from .evaluation import (EvalReport, compute_ap, compute_asr, compute_map, cross_model_matrix,
                         evaluate_patch, pseudo_ground_truth)
from .patch import (LossWeights, OptimizerConfig, PatchLatentParams, TransformConfig,
                    apply_patch, generate_patch, kl_loss, nps_loss, optimize_patch,
                    reparameterize, total_loss, tv_loss)

__version__ = "0.1.0"
