"""Synthetic single-object shape images with exact ground-truth boxes."""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import read_image, to_uint8, write_pnm

SHAPES = ("disk", "square", "triangle", "cross")
PATCH_AREA_FRACTION = 0.082
BACKGROUND_MAX = 0.3


@dataclass
class LabeledImage:
    pixels: np.ndarray  # float32 (3, H, W) in [0, 1]
    label: int
    gt_box: tuple[int, int, int, int]  # x0, y0, x1, y1; upper bounds exclusive
    class_name: str = ""
    seed: int = 0
    image_id: int = 0

    def __post_init__(self):
        _, h, w = self.pixels.shape
        x0, y0, x1, y1 = self.gt_box
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"gt_box {self.gt_box} outside a {w}x{h} image")


def default_patch_side(image_size: int) -> int:
    """Side of the square patch covering ~8.2% of the image (18 px at 64, 64 px at 224)."""
    return int(round(math.sqrt(PATCH_AREA_FRACTION) * image_size))


def default_patch_rect(image_size: int) -> tuple[int, int, int, int]:
    """Top-left corner patch as (x0, y0, width, height)."""
    side = default_patch_side(image_size)
    return (0, 0, side, side)


def default_decoy_rect(image_size: int) -> tuple[int, int, int, int]:
    """Top-right corner region of the same size as the default patch."""
    side = default_patch_side(image_size)
    return (image_size - side, 0, side, side)


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean (size, size) mask of a shape inscribed in its bounding square."""
    v, u = np.mgrid[0:size, 0:size] + 0.5
    half = size / 2.0
    if kind == "disk":
        return (u - half) ** 2 + (v - half) ** 2 <= half**2
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "triangle":
        return np.abs(u - half) <= v / 2.0
    if kind == "cross":
        thick = max(2, int(round(size / 3)))
        lo = (size - thick) // 2
        bar = (np.arange(size) >= lo) & (np.arange(size) < lo + thick)
        return bar[:, None] | bar[None, :]
    raise ValueError(f"unknown shape kind {kind!r}")


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def render_shape(kind: str, image_size: int, rng: np.random.Generator):
    """Draw one shape on a noise background; returns (uint8 HWC pixels, gt_box)."""
    px, py, pw, ph = default_patch_rect(image_size)
    lo, hi = int(math.ceil(0.25 * image_size)), int(math.floor(0.60 * image_size))
    size = int(rng.integers(lo, hi + 1))
    if kind == "disk" and size % 2:
        size -= 1  # integer radius keeps the box at (cx - r, cy - r, cx + r, cy + r)
    while True:
        x0 = int(rng.integers(0, image_size - size + 1))
        y0 = int(rng.integers(0, image_size - size + 1))
        if x0 >= px + pw or y0 >= py + ph or x0 + size <= px or y0 + size <= py:
            break
    color = np.array(colorsys.hsv_to_rgb(float(rng.random()), 1.0, 1.0))
    img = rng.uniform(0.0, BACKGROUND_MAX, size=(image_size, image_size, 3))
    mask = shape_mask(kind, size)
    region = img[y0 : y0 + size, x0 : x0 + size]
    region[mask] = color
    bx0, by0, bx1, by1 = tight_box(mask)
    return to_uint8(img), (x0 + bx0, y0 + by0, x0 + bx1, y0 + by1)


def gen_dataset(
    n: int,
    classes=SHAPES,
    image_size: int = 64,
    seed: int = 0,
) -> list[LabeledImage]:
    """Class-balanced synthetic dataset, fully determined by ``seed``.

    Labels are assigned round-robin and then shuffled, so every class count
    differs by at most one. Each image is drawn from its own derived seed.
    Objects never intersect the default top-left patch rectangle.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    classes = tuple(classes)
    for c in classes:
        if c not in SHAPES:
            raise ValueError(f"unknown shape kind {c!r}")
    labels = np.arange(n) % len(classes)
    np.random.default_rng(seed).shuffle(labels)
    out = []
    for i, label in enumerate(labels):
        img_seed = _image_seed(seed, i)
        pixels, box = render_shape(classes[label], image_size, np.random.default_rng(img_seed))
        chw = (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)
        out.append(LabeledImage(chw, int(label), box, classes[label], img_seed, i))
    return out


def save_dataset(directory, images: list[LabeledImage]) -> Path:
    """Write ``img_NNNNN.ppm`` files plus ``manifest.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for img in images:
        name = f"img_{img.image_id:05d}.ppm"
        write_pnm(directory / name, to_uint8(img.pixels.transpose(1, 2, 0)))
        record = {
            "file": name,
            "label": img.label,
            "class_name": img.class_name,
            "bbox": list(img.gt_box),
            "seed": img.seed,
        }
        lines.append(json.dumps(record, sort_keys=True))
    manifest = directory / "manifest.jsonl"
    tmp = manifest.with_suffix(".jsonl.tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(manifest)
    return manifest


def load_dataset(directory) -> list[LabeledImage]:
    directory = Path(directory)
    out = []
    with open(directory / "manifest.jsonl", encoding="utf-8") as fh:
        for i, line in enumerate(l for l in fh if l.strip()):
            rec = json.loads(line)
            pixels = read_image(directory / rec["file"])
            out.append(
                LabeledImage(
                    pixels,
                    int(rec["label"]),
                    tuple(int(v) for v in rec["bbox"]),
                    rec.get("class_name", ""),
                    int(rec.get("seed", 0)),
                    i,
                )
            )
    return out


def stack(images: list[LabeledImage]) -> np.ndarray:
    return np.stack([img.pixels for img in images]).astype(np.float32)
