"""Synthetic datasets: imbalanced 2-D Gaussians and textured shape images.

Randomness comes from numpy's Philox-4x64 counter-based generator, keyed by
``SeedSequence([seed, ...])`` so every sample has its own reproducible stream
independent of generation order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .gridio import atomic_write_bytes, load_image, load_regions, save_grid
from .regions import ImageGrid, RegionMap

TOY_CENTERS = ((1.0, 0.0), (0.0, 1.0))
MIN_REGION_PIXELS = 16

# Mean colours: foreground is red-dominant, background blue-dominant, so a
# per-pixel model can tell them apart after per-image standardization.
FG_RANGE = ((0.7, 1.0), (0.2, 0.8), (0.0, 0.3))
BG_RANGE = ((0.0, 0.3), (0.2, 0.8), (0.7, 1.0))


def make_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True, eq=False)
class ToySet:
    points: np.ndarray  # (n, 2)
    class_id: np.ndarray  # (n,), 0 = class 1, 1 = class 2

    def __len__(self):
        return len(self.class_id)

    def counts(self) -> tuple[int, int]:
        return int(np.sum(self.class_id == 0)), int(np.sum(self.class_id == 1))


def gen_toy_gaussians(n1: int = 10000, n2: int = 10, var: float = 0.2, seed: int = 0):
    """Independent train and test sets: class 1 around (1, 0), class 2 around (0, 1).

    ``var`` is the per-coordinate variance of the isotropic noise.
    """
    if n1 < 1 or n2 < 1:
        raise ValueError("both classes need at least one point")
    if var < 0:
        raise ValueError("variance must be non-negative")
    std = math.sqrt(var)
    sets = []
    for split in (0, 1):
        rng = make_rng(seed, 7001, split)
        parts = []
        for cls, n in enumerate((n1, n2)):
            parts.append(np.asarray(TOY_CENTERS[cls]) + std * rng.standard_normal((n, 2)))
        labels = np.concatenate([np.zeros(n1, dtype=np.int64), np.ones(n2, dtype=np.int64)])
        sets.append(ToySet(np.concatenate(parts), labels))
    return sets[0], sets[1]


@dataclass(frozen=True, eq=False)
class SynthSample:
    image: ImageGrid
    regions: RegionMap
    class_labels: tuple
    fidelity_flag: bool = False
    sample_id: int = 0
    seed: int = 0

    def __post_init__(self):
        if len(self.class_labels) != self.regions.region_count:
            raise ValueError("need one class label per region")

    def label_map(self) -> np.ndarray:
        """Per-pixel class labels."""
        return np.asarray(self.class_labels, dtype=np.int32)[self.regions.ids]

    def saliency_gt(self) -> np.ndarray:
        return self.label_map().astype(np.uint8)


def _shape_mask(rng, size):
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    ry, rx = rng.uniform(size / 8, size / 3, 2)
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _colour(rng, ranges):
    return np.array([rng.uniform(lo, hi) for lo, hi in ranges])


def _one_shape_image(rng, size, regions_per_image, noise):
    while True:
        ids = np.zeros((size, size), dtype=np.int32)
        for k in range(1, regions_per_image):
            ids[_shape_mask(rng, size)] = k
        counts = np.bincount(ids.ravel(), minlength=regions_per_image)
        if counts.min() >= MIN_REGION_PIXELS:
            break
    colours = [_colour(rng, BG_RANGE)]
    while len(colours) < regions_per_image:
        c = _colour(rng, FG_RANGE)
        if all(np.sum((c - o) ** 2) >= 0.09 for o in colours[1:]):
            colours.append(c)
    img = np.asarray(colours)[ids]
    if noise > 0:
        img = img + noise * rng.standard_normal(img.shape)
    return img, ids


def gen_shapes(count: int, size: int = 64, regions_per_image: int = 2, seed: int = 0, noise: float = 0.1):
    """Images with one or two ellipses/rectangles on a background.

    Region 0 is the background (class 0); every shape is its own region with
    class 1.  A draw leaving any region under 16 pixels is resampled.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if size < 16:
        raise ValueError("size must be at least 16")
    if regions_per_image not in (2, 3):
        raise ValueError("regions_per_image must be 2 or 3")
    out = []
    for i in range(count):
        rng = make_rng(seed, 9001, i)
        img, ids = _one_shape_image(rng, size, regions_per_image, noise)
        labels = (0,) + (1,) * (regions_per_image - 1)
        out.append(SynthSample(ImageGrid(img), RegionMap(ids), labels, False, i, seed))
    return out


def flip_labels(samples, fraction: float, seed: int):
    """Invert the class labels of exactly ``round(fraction * n)`` samples.

    Region geometry is never touched; flipped samples get ``fidelity_flag``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    samples = list(samples)
    for smp in samples:
        if any(c not in (0, 1) for c in smp.class_labels):
            raise ValueError("flip_labels needs binary class labels")
    k = int(math.floor(fraction * len(samples) + 0.5))
    chosen = set(make_rng(seed, 4242).choice(len(samples), size=k, replace=False).tolist())
    return [
        replace(smp, class_labels=tuple(1 - c for c in smp.class_labels), fidelity_flag=not smp.fidelity_flag)
        if i in chosen else smp
        for i, smp in enumerate(samples)
    ]


def standardize(image, scale: float = 255.0) -> ImageGrid:
    """Per-image zero mean and unit variance (over all pixels and channels), then divide by ``scale``."""
    v = np.asarray(getattr(image, "values", image), dtype=np.float64)
    std = float(v.std())
    if not std > 0:
        raise ValueError("cannot standardize a zero-variance image")
    return ImageGrid((v - v.mean()) / std / scale)


def save_dataset(directory, samples, meta: dict | None = None) -> None:
    d = Path(directory)
    entries = []
    for smp in samples:
        stem = f"sample_{smp.sample_id:05d}"
        save_grid(d / f"{stem}_image.casg", smp.image)
        save_grid(d / f"{stem}_regions.casg", smp.regions)
        entries.append({
            "id": smp.sample_id,
            "seed": smp.seed,
            "class_labels": list(smp.class_labels),
            "fidelity_flag": smp.fidelity_flag,
            "image": f"{stem}_image.casg",
            "regions": f"{stem}_regions.casg",
        })
    index = {"meta": meta or {}, "samples": entries}
    atomic_write_bytes(d / "index.json", (json.dumps(index, indent=2, sort_keys=True) + "\n").encode())


def load_dataset(directory):
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    return [
        SynthSample(
            load_image(d / e["image"]),
            load_regions(d / e["regions"]),
            tuple(e["class_labels"]),
            e["fidelity_flag"],
            e["id"],
            e["seed"],
        )
        for e in index["samples"]
    ]
