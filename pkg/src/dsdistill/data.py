"""Seeded synthetic segmentation data: colored geometric shapes on a
background with per-pixel noise.

Every sample is deterministic in (seed, index), so generation can be
distributed or repeated freely. The task is built so that local color is
deliberately ambiguous: classes come in pairs that share a base color and
differ only in shape (disc vs rectangle vs bar), and under the default
policy each class always draws its own shape kind. Telling paired classes
apart therefore needs a receptive field that spans a good part of the
shape, which is what separates a deep wide net from a shallow narrow one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dst1

GENERATOR_VERSION = 1
SHAPE_POLICIES = ("mixed", "rects", "discs", "bars")


@dataclass
class SynthSample:
    """image: (3, H, W) float64 in [0, 1]; mask: (H, W) integer labels in
    [0, C) (255 reserved for ignore)."""

    image: np.ndarray
    mask: np.ndarray


def class_color(c: int, num_classes: int) -> np.ndarray:
    """Fixed mean RGB color for class ``c``: hue-spaced around the color
    wheel, background (class 0) dark gray."""
    if c == 0:
        return np.array([0.25, 0.25, 0.25])
    angle = 2 * np.pi * (c - 1) / max(num_classes - 1, 1)
    return 0.5 + 0.28 * np.array(
        [np.sin(angle), np.sin(angle + 2 * np.pi / 3), np.sin(angle + 4 * np.pi / 3)])


def _paint(mask, yy, xx, inside, cls):
    mask[inside] = cls


def generate(seed: int, n: int, h: int, w: int, c: int,
             shape_policy: str = "mixed",
             noise_sigma: float = 0.30) -> list[SynthSample]:
    """Generate ``n`` samples of size (h, w) with ``c`` classes.

    Each image holds 1..4 shapes (rectangles, discs, bars) of foreground
    classes 1..c-1 over a class-0 background. Fill colors are the class
    mean plus a per-shape offset; iid Gaussian pixel noise is added on top.
    """
    if c < 2:
        raise ValueError("need at least 2 classes")
    if h < 16 or w < 16:
        raise ValueError("minimum size is 16 x 16")
    if shape_policy not in SHAPE_POLICIES:
        raise ValueError(f"shape_policy must be one of {SHAPE_POLICIES}")
    return [_sample(seed, i, h, w, c, shape_policy, noise_sigma) for i in range(n)]


def _sample(seed, index, h, w, c, shape_policy, noise_sigma) -> SynthSample:
    rng = np.random.default_rng([seed, index])
    mask = np.zeros((h, w), dtype=np.int64)
    image = np.empty((3, h, w))
    bg = class_color(0, c) + rng.normal(0.0, 0.05, size=3)
    image[:] = bg[:, None, None]

    yy, xx = np.mgrid[0:h, 0:w]
    n_shapes = rng.integers(1, 5)
    for _ in range(n_shapes):
        cls = int(rng.integers(1, c))
        if shape_policy == "mixed":
            kind = ("rect", "disc", "bar")[rng.integers(0, 3)]
        else:
            kind = {"rects": "rect", "discs": "disc", "bars": "bar"}[shape_policy]
        cy = rng.uniform(0.15 * h, 0.85 * h)
        cx = rng.uniform(0.15 * w, 0.85 * w)
        size = rng.uniform(0.08, 0.22) * min(h, w)
        if kind == "rect":
            ry = size * rng.uniform(0.6, 1.4)
            rx = size * rng.uniform(0.6, 1.4)
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        elif kind == "disc":
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
        else:  # bar: thin, axis-aligned, random orientation
            thick = max(2.0, 0.25 * size)
            if rng.integers(0, 2):
                inside = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= 2.2 * size)
            else:
                inside = (np.abs(yy - cy) <= 2.2 * size) & (np.abs(xx - cx) <= thick)
        color = class_color(cls, c) + rng.normal(0.0, 0.05, size=3)
        mask[inside] = cls
        image[:, inside] = color[:, None]

    image += rng.normal(0.0, noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return SynthSample(image=image, mask=mask)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + per-sample DST1 pairs


def save_dataset(samples: list[SynthSample], out_dir, meta: dict) -> None:
    """Write samples as img_XXXXX.dst1 / msk_XXXXX.dst1 pairs plus a
    manifest echoing the generator arguments. Masks are stored as float64
    holding exact small integers."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(meta)
    manifest["generator_version"] = GENERATOR_VERSION
    manifest["count"] = len(samples)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for i, s in enumerate(samples):
        dst1.dump(s.image, out / f"img_{i:05d}.dst1")
        dst1.dump(s.mask.astype(np.float64), out / f"msk_{i:05d}.dst1")


def load_dataset(in_dir) -> tuple[list[SynthSample], dict]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("generator_version") != GENERATOR_VERSION:
        raise ValueError(
            f"dataset generator version {manifest.get('generator_version')} "
            f"!= supported {GENERATOR_VERSION}")
    samples = []
    for i in range(manifest["count"]):
        image = dst1.load(src / f"img_{i:05d}.dst1")
        mask = dst1.load(src / f"msk_{i:05d}.dst1").astype(np.int64)
        samples.append(SynthSample(image=image, mask=mask))
    return samples, manifest


def stack(samples: list[SynthSample]) -> tuple[np.ndarray, np.ndarray]:
    """(n, 3, H, W) images and (n, H, W) masks as contiguous arrays."""
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks
