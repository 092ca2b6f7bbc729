"""Pseudo-ground-truth mAP, attack success rate and cross-detector transfer matrices."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import BBox, RandomSource, iou
from .detector import GridDetector, max_person_confidence, thresholded
from .patch import apply_patch_batch

ScoredBoxes = Sequence[tuple[BBox, float]]


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


def pseudo_ground_truth(det: GridDetector, images, thresh: float | None = None) -> list[list[BBox]]:
    """Person boxes the detector itself finds on clean images (score >= thresh, after NMS)."""
    return [[d.box for d, _ in dets] for dets in thresholded(det, _stack(images), thresh)]


def predictions(det: GridDetector, images, thresh: float | None = None) -> list[list[tuple[BBox, float]]]:
    return [[(d.box, s) for d, s in dets] for dets in thresholded(det, _stack(images), thresh)]


def _stack(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    return torch.stack(list(images))


def pr_curve(gt: Sequence[Sequence[BBox]], preds: Sequence[ScoredBoxes],
             iou_thresh: float = 0.5) -> list[PRPoint]:
    """Precision/recall after each prediction in descending-confidence order.

    A prediction is a true positive when its best-overlapping ground-truth
    box in the same image reaches ``iou_thresh`` and has not been claimed by
    a higher-confidence prediction.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    n_gt = sum(len(g) for g in gt)
    if n_gt == 0:
        raise ValueError("AP is undefined without ground-truth boxes")
    flat = [(score, img, box) for img, p in enumerate(preds) for box, score in p]
    flat.sort(key=lambda item: -item[0])
    claimed = [np.zeros(len(g), dtype=bool) for g in gt]
    tp = fp = 0
    points = []
    for score, img, box in flat:
        best, best_j = 0.0, -1
        for j, g in enumerate(gt[img]):
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        if best >= iou_thresh and not claimed[img][best_j]:
            claimed[img][best_j] = True
            tp += 1
        else:
            fp += 1
        points.append(PRPoint(score, tp / (tp + fp), tp / n_gt))
    return points


def compute_ap(gt: Sequence[Sequence[BBox]], preds: Sequence[ScoredBoxes],
               iou_thresh: float = 0.5) -> float:
    """All-point interpolated average precision for a single class."""
    points = pr_curve(gt, preds, iou_thresh)
    if not points:
        return 0.0
    recall = np.array([0.0] + [p.recall for p in points])
    precision = np.array([p.precision for p in points])
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * envelope))


def compute_map(det: GridDetector, images, gt: Sequence[Sequence[BBox]],
                thresh: float | None = None, iou_thresh: float = 0.5) -> float:
    """Person-class mAP (percent) of ``det`` on ``images`` against ``gt``."""
    return 100.0 * compute_ap(gt, predictions(det, images, thresh), iou_thresh)


def compute_asr(det: GridDetector, patched_images, gt: Sequence[Sequence[BBox]],
                thresh: float | None = None, iou_thresh: float = 0.5) -> float:
    """Percent of GT-bearing images where no person detection overlaps any GT box."""
    if len(patched_images) == 0:
        raise ValueError("no images")
    dets = thresholded(det, _stack(patched_images), thresh)
    bearing = success = 0
    for boxes, found in zip(gt, dets):
        if not boxes:
            continue
        bearing += 1
        hit = any(iou(d.box, g) >= iou_thresh for d, _ in found for g in boxes)
        success += not hit
    if bearing == 0:
        raise ValueError("no image carries a pseudo-ground-truth person box")
    return 100.0 * success / bearing


@dataclass
class EvalReport:
    clean_map: float
    patched_map: float
    asr: float
    clean_max_conf: list[float]
    patched_max_conf: list[float]
    config: dict = field(default_factory=dict)
    control_map: float | None = None

    @property
    def confidence_drop(self) -> float:
        """Relative reduction of the mean per-image max person confidence."""
        clean = float(np.mean(self.clean_max_conf))
        return 1.0 - float(np.mean(self.patched_max_conf)) / clean

    def to_json(self, path) -> None:
        d = asdict(self)
        d["confidence_drop"] = self.confidence_drop
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["clean_map", "patched_map", "asr", "clean_max_conf", "patched_max_conf",
                 "config", "confidence_drop"],
    "properties": {
        "clean_map": {"type": "number", "minimum": 0, "maximum": 100},
        "patched_map": {"type": "number", "minimum": 0, "maximum": 100},
        "asr": {"type": "number", "minimum": 0, "maximum": 100},
        "control_map": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "clean_max_conf": {"type": "array", "items": {"type": "number"}},
        "patched_max_conf": {"type": "array", "items": {"type": "number"}},
        "confidence_drop": {"type": "number"},
        "config": {"type": "object"},
    },
}


def evaluate_patch(det: GridDetector, images, patch: torch.Tensor, transforms, rng: RandomSource,
                   thresh: float | None = None, control: torch.Tensor | None = None,
                   config: dict | None = None) -> EvalReport:
    """Pseudo-GT on clean images, then patch every GT box and re-measure.

    ``control`` is an optional non-adversarial patch evaluated with the same
    transform draws.
    """
    images = _stack(images)
    gt = pseudo_ground_truth(det, images, thresh)
    with torch.no_grad():
        clean_conf = max_person_confidence(det, images).tolist()
        patched = apply_patch_batch(images, gt, patch, transforms, rng.child(0))
        patched_conf = max_person_confidence(det, patched).tolist()
        control_map = None
        if control is not None:
            ctrl = apply_patch_batch(images, gt, control, transforms, rng.child(0))
            control_map = compute_map(det, ctrl, gt, thresh)
    return EvalReport(
        clean_map=compute_map(det, images, gt, thresh),
        patched_map=compute_map(det, patched, gt, thresh),
        asr=compute_asr(det, patched, gt, thresh),
        clean_max_conf=clean_conf,
        patched_max_conf=patched_conf,
        config=dict(config or {}),
        control_map=control_map,
    )


def gray_patch(like: torch.Tensor, value: float = 0.5) -> torch.Tensor:
    return torch.full_like(like, value)


def cross_model_matrix(train_dets: Sequence[GridDetector], victim_dets: Sequence[GridDetector],
                       make_patch, images, transforms, rng: RandomSource,
                       thresh: float | None = None):
    """Patched mAP and ASR (percent) for patches optimized on each training detector.

    ``make_patch(det, index)`` returns the patch optimized against ``det``;
    rows index training detectors, columns victims. Returns
    ``(clean_maps, map_matrix, asr_matrix)`` with one clean mAP per victim.
    """
    if len(train_dets) < 1 or len(victim_dets) < 1:
        raise ValueError("need at least one training and one victim detector")
    images = _stack(images)
    gts = [pseudo_ground_truth(vd, images, thresh) for vd in victim_dets]
    clean = [compute_map(vd, images, gt, thresh) for vd, gt in zip(victim_dets, gts)]
    maps = np.zeros((len(train_dets), len(victim_dets)))
    asrs = np.zeros_like(maps)
    for i, td in enumerate(train_dets):
        patch = make_patch(td, i)
        for j, (vd, gt) in enumerate(zip(victim_dets, gts)):
            with torch.no_grad():
                patched = apply_patch_batch(images, gt, patch, transforms, rng.child(j))
            maps[i, j] = compute_map(vd, patched, gt, thresh)
            asrs[i, j] = compute_asr(vd, patched, gt, thresh)
    return clean, maps, asrs


def write_matrix_csv(path, train_names, victim_names, clean_maps, matrix, asrs) -> None:
    """Flat CSV: one row per (training, victim) pair."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train_model", "victim_model", "clean_map", "patched_map", "asr"])
        for i, tn in enumerate(train_names):
            for j, vn in enumerate(victim_names):
                w.writerow([tn, vn, f"{clean_maps[j]:.4f}", f"{matrix[i][j]:.4f}", f"{asrs[i][j]:.4f}"])
