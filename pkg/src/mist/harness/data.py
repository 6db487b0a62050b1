"""Synthetic segmentation samples, augmentation and portable-pixmap I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

MIN_CLASS_PIXELS = 16
SUPERSAMPLE = 4

# class 0 (background) is left transparent in overlays
PALETTE = np.array(
    [
        (0, 0, 0),
        (255, 165, 0),  # orange
        (255, 255, 0),  # yellow
        (255, 0, 0),  # red
        (0, 160, 0),  # green
        (0, 255, 255),  # cyan
        (221, 160, 221),  # plum
        (75, 0, 130),  # indigo
    ],
    dtype=np.uint8,
)

# per-class base colours of the synthetic foreground shapes
_CLASS_RGB = np.array(
    [
        (0.85, 0.30, 0.25),
        (0.25, 0.75, 0.35),
        (0.30, 0.40, 0.90),
        (0.90, 0.85, 0.30),
        (0.75, 0.35, 0.85),
        (0.35, 0.85, 0.85),
        (0.95, 0.60, 0.20),
    ]
)


@dataclass
class SegSample:
    image: np.ndarray  # [3,H,W] float64 in [0,1]
    mask: np.ndarray  # [H,W] int64 class ids
    id: str


def _coverage(shape: str, params, size: int) -> np.ndarray:
    """Anti-aliased coverage in [0,1] by supersampling each pixel."""
    s = SUPERSAMPLE
    c = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if shape == "disc":
        cy, cx, r = params
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        y0, x0, y1, x1 = params
        inside = (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _draw_shape(rng: np.random.Generator, kind: str, size: int):
    if kind == "mixed":
        kind = "disc" if rng.random() < 0.5 else "rect"
    if kind == "disc":
        r = rng.uniform(0.10, 0.25) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        return "disc", (cy, cx, r)
    h, w = rng.uniform(0.18, 0.45, size=2) * size
    y0 = rng.uniform(0, size - h)
    x0 = rng.uniform(0, size - w)
    return "rect", (y0, x0, y0 + h, x0 + w)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.35, size=3)
    slope = rng.normal(0.0, 0.08, size=(2, 3))
    ramp = np.linspace(-0.5, 0.5, size)
    img = base[:, None, None] + slope[0][:, None, None] * ramp[None, :, None] + slope[1][:, None, None] * ramp[None, None, :]
    return img + rng.normal(0.0, 0.04, size=(3, size, size))


def make_sample(rng: np.random.Generator, image_size: int, n_classes: int, shapes: str, sample_id: str) -> SegSample:
    while True:
        image = _background(rng, image_size)
        mask = np.zeros((image_size, image_size), dtype=np.int64)
        for c in range(1, n_classes):
            kind, params = _draw_shape(rng, shapes, image_size)
            alpha = _coverage(kind, params, image_size)
            colour = np.clip(_CLASS_RGB[c - 1] + rng.normal(0.0, 0.05, size=3), 0.0, 1.0)
            texture = rng.normal(0.0, 0.03, size=(3, image_size, image_size))
            image = alpha * (colour[:, None, None] + texture) + (1.0 - alpha) * image
            mask[alpha >= 0.5] = c
        counts = np.bincount(mask.ravel(), minlength=n_classes)
        if counts[1:].min() >= MIN_CLASS_PIXELS:
            return SegSample(np.clip(image, 0.0, 1.0), mask, sample_id)


def gen_synthetic(seed: int, count: int, image_size: int, n_classes: int, shapes: str = "mixed") -> List[SegSample]:
    """Deterministic discs/rectangles on noisy backgrounds; later classes occlude earlier ones."""
    if not 2 <= n_classes <= 8:
        raise ValueError(f"n_classes must lie in [2, 8], got {n_classes}")
    if shapes not in ("mixed", "disc", "rect"):
        raise ValueError(f"unknown shape kind {shapes!r}")
    return [
        make_sample(np.random.default_rng([seed, i]), image_size, n_classes, shapes, f"s{seed}_{i:05d}")
        for i in range(count)
    ]


def split(samples: Sequence[SegSample], val_fraction: float, seed: int):
    order = np.random.default_rng([seed, 0]).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


# -- augmentation -------------------------------------------------------------

def augment(s: SegSample, rng: np.random.Generator, prob: float = 0.5, rotation: float = 15.0,
            zoom: float = 0.1, shift: float = 0.1) -> SegSample:
    """Rotation, zoom, shift, horizontal flip, vertical flip; each with probability ``prob``.

    The geometric part is composed into one affine map and resampled once
    (bilinear for the image, nearest for the mask, zeros outside the frame).
    """
    u = rng.random(5)
    angle = math.radians(rng.uniform(-rotation, rotation))
    scale = rng.uniform(1.0 - zoom, 1.0 + zoom)
    H, W = s.mask.shape
    offset = rng.uniform(-shift, shift, size=2) * np.array([H, W])
    use_rot, use_zoom, use_shift, hflip, vflip = u < prob

    image, mask = s.image, s.mask
    if use_rot or use_zoom or use_shift:
        a = angle if use_rot else 0.0
        z = scale if use_zoom else 1.0
        t = offset if use_shift else np.zeros(2)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        inv = rot.T / z
        centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
        off = centre - inv @ (centre + t)
        image = np.stack(
            [ndimage.affine_transform(ch, inv, off, order=1, mode="constant", cval=0.0) for ch in image]
        )
        mask = ndimage.affine_transform(mask, inv, off, order=0, mode="constant", cval=0)
    if hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    return SegSample(np.ascontiguousarray(np.clip(image, 0.0, 1.0)), np.ascontiguousarray(mask), s.id)


def batch_arrays(samples: Sequence[SegSample]):
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


# -- portable pixmap I/O ----------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """[3,H,W] floats in [0,1] (or [H,W,3] uint8) -> binary PPM."""
    arr = image
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PPM")


def write_pgm(path, mask: np.ndarray) -> None:
    """Class-id map -> binary PGM, one gray level per class id."""
    Image.fromarray(np.ascontiguousarray(mask, dtype=np.uint8)).save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from None
    return arr.transpose(2, 0, 1) / 255.0


def read_pgm(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I"):
                raise ValueError(f"expected a grayscale class map, got mode {im.mode}")
            return np.asarray(im, dtype=np.int64)
    except OSError as exc:
        raise ValueError(f"cannot read mask {path}: {exc}") from None


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the fixed palette over ``image``; class 0 stays transparent. Returns [H,W,3] uint8."""
    base = np.round(np.clip(image, 0.0, 1.0) * 255.0).transpose(1, 2, 0)
    colours = PALETTE[np.clip(labels, 0, len(PALETTE) - 1)].astype(np.float64)
    fg = (labels > 0)[..., None]
    out = np.where(fg, (1.0 - alpha) * base + alpha * colours, base)
    return np.round(out).astype(np.uint8)


def save_dataset(samples: Sequence[SegSample], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_ppm(root / "images" / f"{s.id}.ppm", s.image)
        write_pgm(root / "masks" / f"{s.id}.pgm", s.mask)


def load_dataset(root, n_classes: int, image_size: int) -> List[SegSample]:
    """Pairs ``images/<id>.ppm`` with ``masks/<id>.pgm``."""
    root = Path(root)
    out = []
    for img_path in sorted((root / "images").glob("*.ppm")):
        mask_path = root / "masks" / f"{img_path.stem}.pgm"
        if not mask_path.exists():
            raise ValueError(f"missing mask for {img_path.name}")
        image, mask = read_ppm(img_path), read_pgm(mask_path)
        if image.shape[1:] != (image_size, image_size) or mask.shape != (image_size, image_size):
            raise ValueError(f"{img_path.stem}: expected {image_size}x{image_size}, got {image.shape[1:]}")
        if mask.max() >= n_classes:
            raise ValueError(f"{img_path.stem}: class id {mask.max()} >= n_classes {n_classes}")
        out.append(SegSample(image, mask, img_path.stem))
    if not out:
        raise ValueError(f"no images found under {root / 'images'}")
    return out
