import json

import jsonschema
import numpy as np
import pytest
import torch

from oracles import random_instance, reference_ap
from ldpatch.core import BBox, RandomSource
from ldpatch.detector import DetectorOutput, GridConfig, GridDetector
from ldpatch.evaluation import (REPORT_SCHEMA, EvalReport, compute_ap, compute_asr, compute_map,
                                cross_model_matrix, evaluate_patch, gray_patch, pr_curve,
                                pseudo_ground_truth, write_matrix_csv)
from ldpatch.patch import TransformConfig


# ---- AP

def test_ap_matches_brute_force_reference():
    rng = np.random.default_rng(0)
    for _ in range(200):
        gt, preds = random_instance(rng)
        assert sum(len(p) for p in preds) <= 10 + 3 * 3
        assert abs(compute_ap(gt, preds) - reference_ap(gt, preds)) < 1e-9


def test_ap_hand_examples():
    g1, g2 = BBox(0.25, 0.25, 0.2, 0.2), BBox(0.75, 0.75, 0.2, 0.2)
    assert compute_ap([[g1, g2]], [[(g1, 0.3), (g2, 0.1)]]) == 1.0
    miss = BBox(0.25, 0.75, 0.2, 0.2)
    points = pr_curve([[g1, g2]], [[(g1, 0.9), (miss, 0.8)]])
    assert [(p.recall, p.precision) for p in points] == [(0.5, 1.0), (0.5, 0.5)]
    assert compute_ap([[g1, g2]], [[(g1, 0.9), (miss, 0.8)]]) == pytest.approx(0.5, abs=1e-12)
    assert compute_ap([[g1], []], [[], []]) == 0.0


def test_ap_requires_ground_truth_and_valid_iou():
    with pytest.raises(ValueError):
        compute_ap([[], []], [[(BBox(0.5, 0.5, 0.1, 0.1), 0.9)], []])
    with pytest.raises(ValueError):
        compute_ap([[BBox(0.5, 0.5, 0.1, 0.1)]], [[]], iou_thresh=1.0)


def test_ap_invariant_under_monotone_confidence_maps():
    rng = np.random.default_rng(1)
    for _ in range(50):
        gt, preds = random_instance(rng)
        base = compute_ap(gt, preds)
        for f in (lambda s: s ** 3, lambda s: np.exp(5 * s) - 7, lambda s: 1 / (1 + np.exp(-10 * s))):
            mapped = [[(b, float(f(s))) for b, s in p] for p in preds]
            assert compute_ap(gt, mapped) == base


def test_ap_in_unit_interval():
    rng = np.random.default_rng(2)
    for _ in range(50):
        gt, preds = random_instance(rng)
        assert 0.0 <= compute_ap(gt, preds) <= 1.0


# ---- detector-level protocol

class BrightDetector(GridDetector):
    """Fires one person box at the image center when the center is bright."""

    BOX = (0.5, 0.5, 0.4, 0.4)

    def __init__(self):
        super().__init__(GridConfig(grid_size=2, image_size=8), width=4)

    def forward(self, x):
        n = x.shape[0]
        centre = x[:, :, 3:5, 3:5].mean(dim=(1, 2, 3))
        obj = torch.zeros(n, 4, dtype=x.dtype)
        obj[:, 0] = (centre > 0.5).to(x.dtype) * 0.9
        boxes = torch.tensor(self.BOX, dtype=x.dtype).expand(n, 4, 4).clone()
        cls = torch.tensor([1.0, 0.0, 0.0], dtype=x.dtype).expand(n, 4, 3)
        return DetectorOutput(boxes, obj, cls)


def _bright_set():
    imgs = torch.zeros(6, 3, 8, 8)
    imgs[[0, 2, 3, 5]] = 1.0
    return imgs


def test_pseudo_ground_truth_and_empty_images():
    det = BrightDetector()
    gt = pseudo_ground_truth(det, _bright_set())
    assert [len(g) for g in gt] == [1, 0, 1, 1, 0, 1]
    assert gt[0][0].xyxy() == pytest.approx((0.3, 0.3, 0.7, 0.7))


def test_clean_self_evaluation_is_100():
    det = BrightDetector()
    imgs = _bright_set()
    assert compute_map(det, imgs, pseudo_ground_truth(det, imgs)) == 100.0
    # also for random detectors with many overlapping candidates
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        rnd = GridDetector(GridConfig(grid_size=4, image_size=16), width=4).eval()
        for p in rnd.parameters():
            torch.nn.init.normal_(p, std=0.5, generator=g)
        x = torch.rand(4, 3, 16, 16, generator=g)
        gt = pseudo_ground_truth(rnd, x, thresh=0.05)
        if any(gt):
            assert compute_map(rnd, x, gt, thresh=0.05) == 100.0


def test_asr_cases():
    det = BrightDetector()
    imgs = _bright_set()
    gt = pseudo_ground_truth(det, imgs)
    assert compute_asr(det, imgs, gt) == 0.0
    assert compute_asr(det, torch.zeros_like(imgs), gt) == 100.0
    half = imgs.clone()
    half[[0, 2]] = 0.0
    assert compute_asr(det, half, gt) == 50.0
    perm = [5, 1, 3, 0, 4, 2]
    assert compute_asr(det, half[perm], [gt[i] for i in perm]) == 50.0
    with pytest.raises(ValueError):
        compute_asr(det, imgs, [[] for _ in imgs])


def test_evaluate_patch_report_and_schema(tmp_path):
    det = BrightDetector()
    imgs = _bright_set()
    dark = torch.zeros(3, 16, 16)
    rep = evaluate_patch(det, imgs, dark, TransformConfig(patch_scale=1.0).fixed(),
                         RandomSource(0), control=gray_patch(dark, 0.9), config={"k": 1})
    assert rep.clean_map == 100.0
    assert rep.patched_map == 0.0 and rep.asr == 100.0
    assert rep.control_map == 100.0
    assert rep.confidence_drop == pytest.approx(1.0)
    rep.to_json(tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["config"] == {"k": 1}


def test_report_confidence_drop():
    rep = EvalReport(100.0, 40.0, 50.0, [0.8, 0.6], [0.4, 0.3])
    assert rep.confidence_drop == pytest.approx(0.5)


def test_cross_model_matrix_shape_and_csv(tmp_path):
    dets = [BrightDetector(), BrightDetector()]
    imgs = _bright_set()
    patches = [torch.zeros(3, 8, 8), torch.full((3, 8, 8), 0.9)]
    clean, maps, asrs = cross_model_matrix(dets, dets, lambda d, i: patches[i], imgs,
                                           TransformConfig(patch_scale=1.0).fixed(),
                                           RandomSource(0))
    assert maps.shape == (2, 2) and asrs.shape == (2, 2)
    assert clean == [100.0, 100.0]
    assert maps[0].tolist() == [0.0, 0.0] and maps[1].tolist() == [100.0, 100.0]
    path = tmp_path / "m.csv"
    write_matrix_csv(path, ["a", "b"], ["a", "b"], clean, maps, asrs)
    lines = path.read_text().splitlines()
    assert lines[0] == "train_model,victim_model,clean_map,patched_map,asr"
    assert len(lines) == 5 and lines[1].startswith("a,a,100.0000,0.0000,100.0000")
