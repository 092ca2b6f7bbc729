import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from ldpatch.core import (MAGIC, ArtifactError, BBox, RandomSource, child_seed, iou,
                          load_artifact, load_image_dir, save_artifact)


def test_roundtrip_zeros(tmp_path):
    path = tmp_path / "z.art"
    save_artifact(path, "test", {"a": np.zeros((2, 2), np.float32)}, {"seed": 3})
    kind, arrays, meta = load_artifact(path)
    assert kind == "test"
    assert meta == {"seed": 3}
    np.testing.assert_array_equal(arrays["a"], np.zeros((2, 2)))


def test_roundtrip_random_floats_bitwise(tmp_path):
    x = np.random.default_rng(0).uniform(size=1000).astype(np.float32)
    path = tmp_path / "r.art"
    save_artifact(path, "test", {"x": x})
    _, arrays, _ = load_artifact(path)
    assert arrays["x"].tobytes() == x.astype("<f4").tobytes()


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=6),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_roundtrip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("art") / "p.art"
    save_artifact(path, "prop", {"arr": arr, "twice": arr * 0})
    _, arrays, _ = load_artifact(path)
    assert arrays["arr"].shape == arr.shape
    assert arrays["arr"].tobytes() == arr.astype("<f4").tobytes()


def test_layout_is_magic_header_payload(tmp_path):
    path = tmp_path / "l.art"
    save_artifact(path, "k", {"a": np.arange(3, dtype=np.float32)})
    blob = path.read_bytes()
    assert blob[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", blob[8:16])
    assert len(blob) == 16 + hlen + 12
    assert np.frombuffer(blob[16 + hlen:], "<f4").tolist() == [0.0, 1.0, 2.0]


def test_payload_length_mismatch(tmp_path):
    path = tmp_path / "m.art"
    save_artifact(path, "k", {"a": np.zeros(4, np.float32)})
    path.write_bytes(path.read_bytes()[:-4])  # header says 16 bytes, 12 remain
    with pytest.raises(ArtifactError, match="payload length mismatch"):
        load_artifact(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.art"
    path.write_bytes(b"NOTLDP00" + b"\0" * 16)
    with pytest.raises(ArtifactError, match="not an LDP artifact"):
        load_artifact(path)


def test_non_finite_rejected_before_write(tmp_path):
    path = tmp_path / "nan.art"
    with pytest.raises(ArtifactError):
        save_artifact(path, "k", {"a": np.array([1.0, np.nan], np.float32)})
    assert not path.exists()


def test_unwritable_path_reports_path(tmp_path):
    path = tmp_path / "missing_dir" / "a.art"
    with pytest.raises(ArtifactError, match="missing_dir"):
        save_artifact(path, "k", {"a": np.zeros(1, np.float32)})


def test_random_source_reproducible():
    a, b = RandomSource(123), RandomSource(123)
    np.testing.assert_array_equal(a.np.standard_normal(10_000), b.np.standard_normal(10_000))
    assert torch.equal(a.normal(10_000), b.normal(10_000))
    assert not torch.equal(RandomSource(124).normal(10), RandomSource(123).normal(10))


def test_child_seeds_differ_and_repeat():
    seeds = {child_seed(5, i) for i in range(100)}
    assert len(seeds) == 100
    assert child_seed(5, 7) == child_seed(5, 7)
    assert RandomSource(5).child(2).seed == child_seed(5, 2)


def test_bbox_invariants_and_iou():
    with pytest.raises(ValueError):
        BBox(0.5, 0.5, 0.0, 0.2)
    with pytest.raises(ValueError):
        BBox(1.2, 0.5, 0.1, 0.1)
    a = BBox(0.5, 0.5, 0.2, 0.2)
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, BBox(0.9, 0.9, 0.1, 0.1)) == 0.0
    assert iou(a, BBox(0.55, 0.5, 0.2, 0.2)) == pytest.approx(0.03 / 0.05)


def _write(path, arr):
    Image.fromarray(arr.astype(np.uint8)).save(path)


def test_load_white_png(tmp_path):
    _write(tmp_path / "w.png", np.full((8, 8, 3), 255))
    (img,) = load_image_dir(tmp_path, 8)
    assert img.shape == (3, 8, 8)
    assert torch.all(img == 1.0)


def test_checkerboard_downsample_matches_block_average(tmp_path):
    yy, xx = np.mgrid[0:16, 0:16]
    board = ((yy + xx) % 2 * 255).astype(np.uint8)
    board = np.stack([board, board // 3, 255 - board], axis=-1)
    board[3:7, 9:14] = [10, 200, 90]
    _write(tmp_path / "c.png", board)
    (img,) = load_image_dir(tmp_path, 8)
    # bilinear at half resolution samples the midpoint of each 2x2 block
    src = board.astype(np.float64) / 255.0
    expected = np.zeros((8, 8, 3))
    for i in range(8):
        for j in range(8):
            expected[i, j] = src[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1))
    np.testing.assert_allclose(img.permute(1, 2, 0).numpy(), expected, atol=1e-6)


def test_lexicographic_order(tmp_path):
    for name, v in [("a.png", 10), ("c.png", 30), ("b.png", 20)]:
        _write(tmp_path / name, np.full((4, 4, 3), v))
    imgs = load_image_dir(tmp_path, 4)
    assert [round(float(x[0, 0, 0]) * 255) for x in imgs] == [10, 20, 30]


def test_undecodable_skipped_and_empty_dir(tmp_path, caplog):
    (tmp_path / "broken.png").write_bytes(b"not an image")
    with pytest.raises(ValueError):
        load_image_dir(tmp_path, 4)
    _write(tmp_path / "ok.png", np.full((4, 4, 3), 0))
    assert len(load_image_dir(tmp_path, 4)) == 1
    assert "broken.png" in caplog.text
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(FileNotFoundError):
        load_image_dir(empty, 4)
