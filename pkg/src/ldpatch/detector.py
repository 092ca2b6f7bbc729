"""Single-scale grid detector (one box per cell) and the person-suppression loss."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (BBox, Detection, RandomSource, arrays_to_state, expect_kind, iou,
                   save_artifact, seeded_init, state_to_arrays)
from .synthetic import GridConfig, SynthScene, generate_synthetic_dataset  # noqa: F401

log = logging.getLogger(__name__)


class DetectorOutput(NamedTuple):
    boxes: torch.Tensor  # (N, S*S, 4) as cx, cy, w, h in [0, 1]
    obj: torch.Tensor    # (N, S*S)
    cls: torch.Tensor    # (N, S*S, C), rows sum to 1


class GridDetector(nn.Module):
    def __init__(self, cfg: GridConfig, width: int = 16):
        super().__init__()
        self.cfg = cfg
        self.width = width
        ratio = cfg.image_size // cfg.grid_size
        stages = int(round(math.log2(ratio)))
        if 2 ** stages != ratio:
            raise ValueError("image_size / grid_size must be a power of two")
        layers, ch = [], 3
        for i in range(stages):
            w = width * 2 ** i
            layers += [nn.Conv2d(ch, w, 3, stride=2, padding=1), nn.GroupNorm(4, w), nn.SiLU()]
            ch = w
        for _ in range(3):
            layers += [nn.Conv2d(ch, ch, 3, padding=1), nn.GroupNorm(4, ch), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, 5 + len(cfg.classes), 1)

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        """Head activations as (N, S*S, 5 + C), cells in row-major order."""
        out = self.head(self.body(x))
        return out.flatten(2).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> DetectorOutput:
        return decode_head(self.raw(x), self.cfg.grid_size)


def _cell_offsets(S: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    rows, cols = torch.meshgrid(torch.arange(S, dtype=dtype), torch.arange(S, dtype=dtype),
                                indexing="ij")
    return rows.reshape(-1), cols.reshape(-1)


def decode_head(raw: torch.Tensor, S: int) -> DetectorOutput:
    rows, cols = _cell_offsets(S, raw.dtype)
    cx = (cols + torch.sigmoid(raw[..., 0])) / S
    cy = (rows + torch.sigmoid(raw[..., 1])) / S
    wh = torch.sigmoid(raw[..., 2:4])
    boxes = torch.stack([cx, cy, wh[..., 0], wh[..., 1]], dim=-1)
    return DetectorOutput(boxes, torch.sigmoid(raw[..., 4]), torch.softmax(raw[..., 5:], dim=-1))


def _check_input(params: GridDetector, x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    s = params.cfg.image_size
    if tuple(x.shape[1:]) != (3, s, s):
        raise ValueError(f"detector expects (3, {s}, {s}) images, got {tuple(x.shape[1:])}")
    return x


def detect(params: GridDetector, x: torch.Tensor) -> DetectorOutput:
    """All S*S candidates for an image or batch; differentiable in ``x``."""
    return params(_check_input(params, x))


def person_scores(params: GridDetector, x: torch.Tensor) -> torch.Tensor:
    """obj * P(person) for every candidate, shape (N, S*S)."""
    out = detect(params, x)
    return out.obj * out.cls[..., params.cfg.person_index]


def max_person_confidence(params: GridDetector, x: torch.Tensor) -> torch.Tensor:
    return person_scores(params, x).max(dim=1).values


def detection_loss(params: GridDetector, batch) -> torch.Tensor:
    """Mean over images of the largest obj * P(person) among all candidates."""
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ValueError("empty batch")
        batch = torch.stack(list(batch))
    if len(batch) == 0:
        raise ValueError("empty batch")
    return max_person_confidence(params, batch).mean()


def nms(dets: list[Detection], scores: list[float], iou_thresh: float = 0.5) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order."""
    order = sorted(range(len(dets)), key=lambda i: -scores[i])
    keep: list[int] = []
    for i in order:
        if all(iou(dets[i].box, dets[j].box) <= iou_thresh for j in keep):
            keep.append(i)
    return keep


def thresholded(params: GridDetector, x: torch.Tensor, thresh: float | None = None,
                iou_thresh: float = 0.5) -> list[list[tuple[Detection, float]]]:
    """Reporting view: person candidates with obj * P(person) >= thresh after NMS.

    Returns, per image, (detection, person score) pairs sorted by score.
    """
    thresh = params.cfg.confidence_threshold if thresh is None else thresh
    pi = params.cfg.person_index
    with torch.no_grad():
        out = detect(params, x)
    result = []
    for n in range(len(out.obj)):
        scores = (out.obj[n] * out.cls[n, :, pi]).tolist()
        cand, cand_scores = [], []
        for k, s in enumerate(scores):
            if s >= thresh:
                b = out.boxes[n, k].tolist()
                box = BBox(*b).clipped()
                cand.append(Detection(box, float(out.obj[n, k]), tuple(out.cls[n, k].tolist())))
                cand_scores.append(s)
        keep = nms(cand, cand_scores, iou_thresh)
        result.append([(cand[i], cand_scores[i]) for i in keep])
    return result


# --------------------------------------------------------------------------
# training

def build_targets(scenes: list[SynthScene], cfg: GridConfig):
    """Per-cell regression targets, objectness mask and class indices."""
    S = cfg.grid_size
    n = len(scenes)
    box_t = torch.zeros(n, S * S, 4)
    obj_t = torch.zeros(n, S * S)
    cls_t = torch.zeros(n, S * S, dtype=torch.long)
    area = torch.zeros(n, S * S)
    for i, scene in enumerate(scenes):
        for box, label in scene.objects:
            col = min(int(box.cx * S), S - 1)
            row = min(int(box.cy * S), S - 1)
            k = row * S + col
            if obj_t[i, k] and area[i, k] >= box.w * box.h:
                continue
            box_t[i, k] = torch.tensor([box.cx * S - col, box.cy * S - row, box.w, box.h])
            obj_t[i, k] = 1.0
            cls_t[i, k] = cfg.classes.index(label)
            area[i, k] = box.w * box.h
    return box_t, obj_t, cls_t


def grid_loss(raw: torch.Tensor, box_t, obj_t, cls_t, noobj_weight: float = 0.5,
              coord_weight: float = 5.0) -> torch.Tensor:
    pos = obj_t > 0
    obj_w = torch.where(pos, torch.ones_like(obj_t), torch.full_like(obj_t, noobj_weight))
    l_obj = (F.binary_cross_entropy_with_logits(raw[..., 4], obj_t, reduction="none") * obj_w).sum()
    if pos.any():
        pred_xy = torch.sigmoid(raw[..., 0:2][pos])
        pred_wh = torch.sigmoid(raw[..., 2:4][pos])
        l_xy = F.mse_loss(pred_xy, box_t[..., 0:2][pos], reduction="sum")
        l_wh = F.mse_loss(pred_wh.sqrt(), box_t[..., 2:4][pos].sqrt(), reduction="sum")
        l_cls = F.cross_entropy(raw[..., 5:][pos], cls_t[pos], reduction="sum")
    else:
        l_xy = l_wh = l_cls = raw.sum() * 0
    return (l_obj + coord_weight * (l_xy + l_wh) + l_cls) / len(raw)


def occlude(images: torch.Tensor, boxes: list[list[BBox]], rng: RandomSource, prob: float,
            scale=(0.2, 0.6)) -> torch.Tensor:
    """Paste flat-colored squares over person boxes, keeping the labels.

    Each box is covered with probability ``prob`` by a square whose side is a
    uniform fraction ``scale`` of the box height, centered near the box
    center. Teaches the detector that a plain occluder does not remove a
    person.
    """
    out = images.clone()
    size = images.shape[-1]
    for n, bs in enumerate(boxes):
        for b in bs:
            u = torch.rand(6, generator=rng.torch, dtype=torch.float64).tolist()
            if u[0] >= prob:
                continue
            side = max(1, round((scale[0] + (scale[1] - scale[0]) * u[1]) * b.h * size))
            cx = (b.cx + 0.25 * b.w * (2 * u[2] - 1)) * size
            cy = (b.cy + 0.25 * b.h * (2 * u[3] - 1)) * size
            x0, y0 = max(0, round(cx - side / 2)), max(0, round(cy - side / 2))
            color = torch.rand(3, generator=rng.torch, dtype=torch.float64).float()
            if u[4] < 0.3:
                color = torch.full((3,), u[5], dtype=torch.float32)
            out[n, :, y0:y0 + side, x0:x0 + side] = color[:, None, None]
    return out


def train_detector(scenes: list[SynthScene], cfg: GridConfig, rng: RandomSource, *,
                   epochs: int = 30, batch_size: int = 32, learning_rate: float = 2e-3,
                   width: int = 16, occlusion: float = 0.0,
                   history: list | None = None) -> GridDetector:
    """Fit a grid detector; ``occlusion`` is the per-person probability of a pasted occluder."""
    if not scenes:
        raise ValueError("no training scenes")
    if not 0.0 <= occlusion <= 1.0:
        raise ValueError("occlusion must lie in [0, 1]")
    model = seeded_init(GridDetector, cfg, width, seed=rng.seed)
    images = torch.stack([s.image for s in scenes])
    persons = [s.boxes(cfg.person_class) for s in scenes]
    box_t, obj_t, cls_t = build_targets(scenes, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    steps_per_epoch = math.ceil(len(images) / batch_size)
    lr_sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=learning_rate,
                                                   total_steps=epochs * steps_per_epoch)
    for epoch in range(epochs):
        perm = torch.randperm(len(images), generator=rng.torch)
        total = 0.0
        for start in range(0, len(images), batch_size):
            idx = perm[start:start + batch_size]
            batch = images[idx]
            if occlusion > 0:
                batch = occlude(batch, [persons[i] for i in idx.tolist()], rng, occlusion)
            loss = grid_loss(model.raw(batch), box_t[idx], obj_t[idx], cls_t[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"detector loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            total += loss.item()
            if history is not None:
                history.append(loss.item())
        log.info("detector epoch %d  loss %.4f", epoch, total / steps_per_epoch)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_detector(model: GridDetector, path, meta: dict | None = None) -> None:
    save_artifact(path, "detector", state_to_arrays(model),
                  {"grid": asdict(model.cfg), "width": model.width, **(meta or {})})


def load_detector(path) -> GridDetector:
    arrays, meta = expect_kind(path, "detector")
    model = GridDetector(GridConfig(**meta["grid"]), meta["width"])
    arrays_to_state(model, arrays)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
