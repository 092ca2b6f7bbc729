"""Stage functions shared by the command line and the example scripts.

Each stage derives its own random stream from the global seed, so stages can
be rerun independently and still produce identical outputs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict
from pathlib import Path

import torch

from .autoencoder import encode, reconstruction_mse, save_autoencoder, train_autoencoder
from .config import PipelineConfig
from .core import RandomSource, load_image_dir, save_png
from .detector import save_detector, train_detector
from .diffusion import attack_schedule, save_diffusion, train_diffusion
from .evaluation import (EvalReport, cross_model_matrix, evaluate_patch, gray_patch,
                         pseudo_ground_truth, write_matrix_csv)
from .patch import (HISTORY_COLUMNS, PatchResult, history_rows, load_patch_artifact,
                    optimize_patch, save_patch_artifact)
from .synthetic import generate_synthetic_dataset, natural_corpus

log = logging.getLogger(__name__)

# child stream index per stage
STREAMS = {"corpus": 0, "autoencoder": 1, "diffusion": 2, "scenes": 3, "detector": 4,
           "attack_scenes": 5, "attack": 6, "eval_scenes": 7, "eval": 8}


class StageInputError(ValueError):
    """Inputs are inconsistent with the config (stale artifact, wrong shapes)."""


class NoBoxes(StageInputError):
    """The detector finds no person to patch or to evaluate against."""


def stream(cfg: PipelineConfig, name: str) -> RandomSource:
    return RandomSource(cfg.seed).child(STREAMS[name])


def natural_images(cfg: PipelineConfig) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """(train, held-out) natural images for the autoencoder and the diffusion model."""
    size = cfg.autoencoder.image_size
    if cfg.data.synthetic:
        images = natural_corpus(cfg.data.n_images + cfg.data.holdout, size, stream(cfg, "corpus"))
    else:
        images = load_image_dir(cfg.data.corpus_path, size)
    if len(images) <= cfg.data.holdout:
        raise StageInputError(f"corpus has {len(images)} images, need more than the "
                              f"{cfg.data.holdout} held out")
    cut = len(images) - cfg.data.holdout
    return images[:cut], images[cut:]


def run_train_ae(cfg: PipelineConfig, out=None):
    train, held = natural_images(cfg)
    history = []
    ae = train_autoencoder(train, cfg.autoencoder, stream(cfg, "autoencoder"), history)
    mse = reconstruction_mse(ae, held if held else train)
    if out is not None:
        save_autoencoder(ae, out, {"heldout_mse": mse, "seed": cfg.seed})
    return ae, mse, history


def check_ae(ae, cfg: PipelineConfig) -> None:
    if ae.cfg.latent_shape != cfg.autoencoder.latent_shape or ae.cfg.image_size != cfg.autoencoder.image_size:
        raise StageInputError(
            f"autoencoder artifact has image size {ae.cfg.image_size} and latent shape "
            f"{ae.cfg.latent_shape}, config expects {cfg.autoencoder.image_size} and "
            f"{cfg.autoencoder.latent_shape}")


def run_train_diffusion(cfg: PipelineConfig, ae, out=None):
    check_ae(ae, cfg)
    train, _ = natural_images(cfg)
    with torch.no_grad():
        latents = encode(ae, torch.stack(train))
    history = []
    model = train_diffusion(latents, cfg.diffusion, stream(cfg, "diffusion"), history)
    if out is not None:
        save_diffusion(model, cfg.diffusion, out, {"seed": cfg.seed})
    return model, history


def scenes(cfg: PipelineConfig, which: str, n: int | None = None):
    sizes = {"scenes": cfg.detector.n_scenes, "attack_scenes": cfg.attack.n_scenes,
             "eval_scenes": cfg.eval.n_scenes}
    return generate_synthetic_dataset(n or sizes[which], cfg.detector.grid, stream(cfg, which))


def run_train_detector(cfg: PipelineConfig, out=None, train_scenes=None):
    d = cfg.detector
    train_scenes = train_scenes if train_scenes is not None else scenes(cfg, "scenes")
    history = []
    det = train_detector(train_scenes, d.grid, stream(cfg, "detector"), epochs=d.epochs,
                         batch_size=d.batch_size, learning_rate=d.learning_rate, width=d.width,
                         occlusion=d.occlusion, history=history)
    if out is not None:
        save_detector(det, out, {"seed": cfg.seed})
    return det, history


def run_optimize_patch(cfg: PipelineConfig, ae, diffusion, det) -> PatchResult:
    check_ae(ae, cfg)
    if diffusion.channels != ae.cfg.latent_depth:
        raise StageInputError(f"diffusion model has {diffusion.channels} latent channels, "
                              f"autoencoder has {ae.cfg.latent_depth}")
    sched = attack_schedule(diffusion)
    images = torch.stack([s.image for s in scenes(cfg, "attack_scenes")])
    _check_size(det, images)
    gt = pseudo_ground_truth(det, images, cfg.eval.threshold)
    if not any(gt):
        raise NoBoxes("the detector finds no person on the attack scenes")
    a = cfg.attack
    return optimize_patch(ae, diffusion, sched, det, images, gt, a.weights, a.transforms,
                          a.optimizer, stream(cfg, "attack"))


def write_patch_outputs(result: PatchResult, out, meta: dict | None = None) -> tuple[Path, Path, Path]:
    """Patch artifact at ``out`` plus ``<stem>.png`` and ``<stem>_loss.csv`` next to it."""
    out = Path(out)
    png = out.with_suffix(".png")
    loss_csv = out.with_name(out.stem + "_loss.csv")
    save_patch_artifact(result, out, meta)
    save_png(result.patch, png)
    write_loss_csv(result.history, loss_csv)
    return out, png, loss_csv


def write_loss_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        w.writerows(history_rows(history))


def _check_size(det, images: torch.Tensor) -> None:
    size = det.cfg.image_size
    if tuple(images.shape[-3:]) != (3, size, size):
        raise StageInputError(f"images are {tuple(images.shape[-3:])}, detector expects "
                              f"{(3, size, size)}")


def eval_images(cfg: PipelineConfig, det, image_dir=None) -> torch.Tensor:
    if image_dir is not None:
        images = torch.stack(load_image_dir(image_dir, det.cfg.image_size))
    else:
        images = torch.stack([s.image for s in scenes(cfg, "eval_scenes")])
    _check_size(det, images)
    return images


def run_evaluate(cfg: PipelineConfig, det, patch: torch.Tensor, images: torch.Tensor) -> EvalReport:
    gt = pseudo_ground_truth(det, images, cfg.eval.threshold)
    if not any(gt):
        raise NoBoxes("no evaluation image carries a pseudo-ground-truth person box")
    control = gray_patch(patch) if cfg.eval.control else None
    snapshot = {"seed": cfg.seed, "transforms": asdict(cfg.attack.transforms),
                "threshold": cfg.eval.threshold, "n_images": len(images)}
    return evaluate_patch(det, images, patch, cfg.attack.transforms.fixed(), stream(cfg, "eval"),
                          cfg.eval.threshold, control, snapshot)


def run_cross_eval(cfg: PipelineConfig, ae, diffusion, detectors: list, patches: list | None = None):
    """Optimize (or reuse) one patch per detector and evaluate every pairing.

    Returns (clean mAPs per victim, patched mAP matrix, ASR matrix).
    """
    if len(detectors) < 2:
        raise StageInputError("cross evaluation needs at least two detectors")
    images = eval_images(cfg, detectors[0])
    for k, det in enumerate(detectors):
        if not any(pseudo_ground_truth(det, images, cfg.eval.threshold)):
            raise NoBoxes(f"detector {k} finds no person on the evaluation images")

    def make_patch(det, i):
        if patches is not None:
            return patches[i]
        return run_optimize_patch(cfg, ae, diffusion, det).patch

    clean, matrix, asr = cross_model_matrix(detectors, detectors, make_patch, images,
                                            cfg.attack.transforms.fixed(), stream(cfg, "eval"),
                                            cfg.eval.threshold)
    return clean, matrix, asr


def write_report(report: EvalReport, out, train_name: str, victim_name: str) -> tuple[Path, Path]:
    out = Path(out)
    report.to_json(out)
    csv_path = out.with_suffix(".csv")
    write_matrix_csv(csv_path, [train_name], [victim_name], [report.clean_map],
                     [[report.patched_map]], [[report.asr]])
    return out, csv_path


def load_patch_with_meta(path) -> tuple[torch.Tensor, dict]:
    result, meta = load_patch_artifact(path)
    return result.patch.float(), meta
