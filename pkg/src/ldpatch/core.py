"""Shared types, seeded randomness, image loading and the artifact file format."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

MAGIC = b"LDPART01"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class ArtifactError(Exception):
    pass


@dataclass(frozen=True)
class BBox:
    """Box in normalized image coordinates (center x/y, width, height)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside image: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size out of range: {self}")

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def clipped(self) -> "BBox":
        """Return the box clamped to the unit square."""
        x0, y0, x1, y1 = self.xyxy()
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, 1.0), min(y1, 1.0)
        return BBox.from_xyxy(x0, y0, x1, y1)


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


@dataclass(frozen=True)
class Detection:
    box: BBox
    obj: float
    cls: tuple[float, ...]

    def score(self, class_index: int) -> float:
        return self.obj * self.cls[class_index]


class RandomSource:
    """Single-owner seeded generator backing both numpy and torch draws.

    Parallel or nested work should use :meth:`child` instead of sharing an
    instance.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.np = np.random.Generator(np.random.PCG64(self.seed))
        self.torch = torch.Generator().manual_seed(self.seed & 0xFFFF_FFFF_FFFF_FFFF)

    def child(self, index: int) -> "RandomSource":
        return RandomSource(child_seed(self.seed, index))

    def normal(self, *shape, dtype=torch.float32) -> torch.Tensor:
        return torch.randn(*shape, generator=self.torch, dtype=dtype)

    def uniform(self, *shape, low=0.0, high=1.0, dtype=torch.float32) -> torch.Tensor:
        return low + (high - low) * torch.rand(*shape, generator=self.torch, dtype=dtype)

    def integers(self, low: int, high: int, size=None):
        return self.np.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.np.permutation(n)


def child_seed(seed: int, index: int) -> int:
    state = np.random.SeedSequence([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, int(index)])
    return int(state.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# artifacts

def save_artifact(path, kind: str, arrays: Mapping[str, np.ndarray],
                  meta: Mapping | None = None) -> None:
    """Write named float32 arrays and JSON metadata to ``path``.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then the arrays as little-endian float32 in header order.
    """
    path = Path(path)
    entries = []
    chunks = []
    for name, value in arrays.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise ArtifactError(f"array {name!r} contains non-finite values; refusing to write {path}")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "nbytes": len(raw)})
        chunks.append(raw)
    header = {"kind": kind, "arrays": entries, "meta": dict(meta or {})}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(chunks)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise ArtifactError(f"cannot write artifact {path}: {exc}") from exc


def load_artifact(path) -> tuple[str, dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read artifact {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise ArtifactError(f"{path}: not an LDP artifact")
    if len(blob) < 16:
        raise ArtifactError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt header") from exc
    payload = memoryview(blob)[16 + hlen:]
    declared = sum(e["nbytes"] for e in header["arrays"])
    if declared != len(payload):
        raise ArtifactError(
            f"{path}: payload length mismatch (header declares {declared} bytes, found {len(payload)})")
    arrays = {}
    offset = 0
    for e in header["arrays"]:
        n = e["nbytes"]
        if n != 4 * int(np.prod(e["shape"], dtype=np.int64)):
            raise ArtifactError(f"{path}: payload length mismatch for array {e['name']!r}")
        arr = np.frombuffer(payload[offset:offset + n], dtype="<f4").reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float32)
        offset += n
    return header["kind"], arrays, header["meta"]


def expect_kind(path, kind: str):
    """Load an artifact and check its kind."""
    got, arrays, meta = load_artifact(path)
    if got != kind:
        raise ArtifactError(f"{path}: expected a {kind!r} artifact, got {got!r}")
    return arrays, meta


def seeded_init(factory, *args, seed: int, **kwargs):
    """Construct a module with weights drawn from ``seed`` without touching global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed & 0xFFFF_FFFF_FFFF_FFFF)
        return factory(*args, **kwargs)


def state_to_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def arrays_to_state(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = ""):
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
             if k.startswith(prefix)}
    module.load_state_dict(state)
    return module


# --------------------------------------------------------------------------
# images

def resize_bilinear(x: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of a (3, H, W) or (N, 3, H, W) tensor to size x size."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x[0] if squeeze else x


def to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_pil(x: torch.Tensor) -> Image.Image:
    arr = x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    return Image.fromarray(np.round(arr * 255).astype(np.uint8))


def load_image_dir(path, target_size: int) -> list[torch.Tensor]:
    """Load every PNG/JPEG in ``path`` as a (3, S, S) tensor in [0, 1].

    Files are read in lexicographic name order; undecodable files are skipped
    with a warning.
    """
    path = Path(path)
    names = sorted(n for n in os.listdir(path) if Path(n).suffix.lower() in IMAGE_SUFFIXES)
    if not names:
        raise FileNotFoundError(f"no PNG or JPEG images in {path}")
    images = []
    for name in names:
        try:
            with Image.open(path / name) as img:
                x = to_tensor(img)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping %s: %s", path / name, exc)
            continue
        images.append(resize_bilinear(x, target_size).clamp(0.0, 1.0))
    if not images:
        raise ValueError(f"none of the {len(names)} image files in {path} could be decoded")
    return images


def save_png(x: torch.Tensor, path) -> None:
    to_pil(x).save(path, format="PNG")
