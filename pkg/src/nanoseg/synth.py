"""Synthetic microscope-like scenes with exact ground-truth masks.

Scenes emulate bright-field particle imagery: a bright background (default
0.75) with an optional linear illumination gradient, dark soft-edged disks for
particles, additive Gaussian noise, and optional blur. The ground-truth mask
is exact by construction: a pixel is particle iff its center (integer lattice
point, x = column / y = row) lies within distance r of a disk center.

Generation is a pure function of (config, seed); datasets derive per-sample
seeds from a master seed plus the sample index.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import imgcore
from .filters import gaussian_blur

__all__ = [
    "PlacementError",
    "SynthConfig",
    "Sample",
    "DatasetSplit",
    "render_scene",
    "generate",
    "random_crop",
    "affine_shift",
    "make_dataset",
    "save_dataset",
    "load_dataset",
]

MAX_REJECTIONS = 10_000


class PlacementError(RuntimeError):
    """Rejection sampling could not satisfy the placement constraints."""


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    particle_count: tuple[int, int] = (6, 12)
    radius: tuple[float, float] = (4.0, 10.0)
    particle_contrast: float = 0.45
    edge_softness: float = 1.0
    noise_sigma: float = 0.05
    illumination_tilt: float = 0.1
    blur_sigma: float = 0.0
    target_particle_fraction: float | None = None
    invert: bool = False

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        lo, hi = self.particle_count
        if not (0 <= lo <= hi):
            raise ValueError(f"invalid particle_count range {self.particle_count}")
        rlo, rhi = self.radius
        if not (1.0 <= rlo <= rhi):
            raise ValueError(f"radii must satisfy 1 <= lo <= hi, got {self.radius}")
        if not 0.0 < self.particle_contrast <= 1.0:
            raise ValueError(f"particle_contrast must be in (0, 1], got {self.particle_contrast}")
        for name in ("edge_softness", "noise_sigma", "illumination_tilt", "blur_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        frac = self.target_particle_fraction
        if frac is not None and not 0.0 < frac < 1.0:
            raise ValueError(f"target_particle_fraction must be in (0, 1), got {frac}")

    def to_json(self, path) -> None:
        doc = asdict(self)
        doc["particle_count"] = list(self.particle_count)
        doc["radius"] = list(self.radius)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        doc = json.loads(Path(path).read_text())
        doc["particle_count"] = tuple(doc["particle_count"])
        doc["radius"] = tuple(doc["radius"])
        return cls(**doc)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    mask: np.ndarray
    seed: int


@dataclass(frozen=True)
class DatasetSplit:
    train: list[Sample]
    test: list[Sample]
    split_seed: int


def _disk_window(size: int, cx: float, cy: float, r: float, pad: float):
    """Index window and center distances covering a disk plus its soft rim."""
    reach = int(np.ceil(r + pad))
    x0 = max(0, int(np.floor(cx)) - reach)
    x1 = min(size - 1, int(np.ceil(cx)) + reach)
    y0 = max(0, int(np.floor(cy)) - reach)
    y1 = min(size - 1, int(np.ceil(cy)) + reach)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    dist = np.hypot(xs[None, :] - cx, ys[:, None] - cy)
    return (slice(y0, y1 + 1), slice(x0, x1 + 1)), dist


def render_scene(config: SynthConfig, particles, tilt_angle: float = 0.0,
                 noise: np.ndarray | None = None):
    """Render an image/mask pair from an explicit particle list.

    ``particles`` is a sequence of (cx, cy, r) disk descriptions. This is the
    deterministic core that `generate` drives with random draws; tests use it
    to build scenes with exactly known geometry.
    """
    size = config.image_size
    img = np.full((size, size), 0.75, dtype=np.float64)
    if config.illumination_tilt > 0:
        y, x = np.mgrid[0:size, 0:size].astype(np.float64)
        proj = np.cos(tilt_angle) * x / (size - 1) + np.sin(tilt_angle) * y / (size - 1)
        lo, hi = proj.min(), proj.max()
        if hi > lo:
            img -= config.illumination_tilt * ((proj - lo) / (hi - lo) - 0.5)

    mask = np.zeros((size, size), dtype=bool)
    depth = np.zeros((size, size), dtype=np.float64)
    soft = config.edge_softness
    pad = 6.0 * soft + 2.0
    for cx, cy, r in particles:
        window, dist = _disk_window(size, cx, cy, r, pad)
        mask[window] |= dist <= r
        if soft > 0:
            profile = config.particle_contrast / (1.0 + np.exp((dist - r) / soft))
        else:
            profile = config.particle_contrast * (dist <= r)
        np.maximum(depth[window], profile, out=depth[window])
    img -= depth

    if noise is not None:
        img = img + noise
    if config.blur_sigma > 0:
        img = gaussian_blur(img, config.blur_sigma)
    img = np.clip(img, 0.0, 1.0)
    if config.invert:
        img = 1.0 - img
    return img, mask


def _disk_pixel_count(size: int, cx: float, cy: float, r: float) -> int:
    _, dist = _disk_window(size, cx, cy, r, pad=0.0)
    return int(np.count_nonzero(dist <= r))


def _place_particles(config: SynthConfig, rng: np.random.Generator):
    """Draw non-overlapping disk placements, optionally chasing a pixel-fraction target."""
    size = config.image_size
    total_px = size * size
    target = config.target_particle_fraction
    if target is None:
        wanted = int(rng.integers(config.particle_count[0], config.particle_count[1] + 1))
    else:
        wanted = None

    placed: list[tuple[float, float, float]] = []
    covered = 0
    rejections = 0
    while True:
        if wanted is not None and len(placed) >= wanted:
            break
        if target is not None and covered / total_px >= target:
            break
        if rejections >= MAX_REJECTIONS:
            raise PlacementError(
                f"gave up after {rejections} rejected placements "
                f"({len(placed)} particles placed, fraction {covered / total_px:.3f})"
            )
        r = rng.uniform(config.radius[0], config.radius[1])
        margin = r + 1.0
        # the center must admit uniform(margin, size - 1 - margin)
        if 2 * margin > size - 1:
            rejections += 1
            continue
        cx = rng.uniform(margin, size - 1 - margin)
        cy = rng.uniform(margin, size - 1 - margin)
        if any(np.hypot(cx - px, cy - py) < r + pr + 1.0 for px, py, pr in placed):
            rejections += 1
            continue
        if target is not None:
            gain = _disk_pixel_count(size, cx, cy, r)
            if (covered + gain) / total_px > target + 0.05:
                rejections += 1
                continue
            covered += gain
        placed.append((cx, cy, r))
    return placed


def generate(config: SynthConfig, seed: int) -> Sample:
    """Generate one scene deterministically from (config, seed)."""
    rng = np.random.default_rng(seed)
    tilt_angle = float(rng.uniform(0.0, 2.0 * np.pi))
    particles = _place_particles(config, rng)
    noise = None
    if config.noise_sigma > 0:
        noise = rng.normal(0.0, config.noise_sigma, (config.image_size, config.image_size))
    img, mask = render_scene(config, particles, tilt_angle=tilt_angle, noise=noise)
    return Sample(image=img, mask=mask, seed=seed)


def random_crop(sample: Sample, crop: int, seed: int) -> Sample:
    """Crop image and mask with one shared random offset."""
    h, w = sample.image.shape
    if crop > min(h, w):
        raise ValueError(f"crop {crop} exceeds image size {sample.image.shape}")
    rng = np.random.default_rng(seed)
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    return Sample(
        image=sample.image[oy : oy + crop, ox : ox + crop].copy(),
        mask=sample.mask[oy : oy + crop, ox : ox + crop].copy(),
        seed=sample.seed,
    )


def _shift2d(arr: np.ndarray, dx: int, dy: int, edge_fill: bool) -> np.ndarray:
    """Integer translation; vacated border replicates the edge or stays False."""
    h, w = arr.shape
    core = arr[
        max(0, -dy) : h - max(0, dy),
        max(0, -dx) : w - max(0, dx),
    ]
    pad = ((max(0, dy), max(0, -dy)), (max(0, dx), max(0, -dx)))
    if edge_fill:
        return np.pad(core, pad, mode="edge")
    return np.pad(core, pad, mode="constant", constant_values=False)


def affine_shift(sample: Sample, dx: int, dy: int, fill: str = "replicate") -> Sample:
    """Translate image and mask together by whole pixels.

    Positive dx moves content right, positive dy moves it down. The vacated
    image border is edge-replicated; the vacated mask border is False.
    """
    if fill != "replicate":
        raise ValueError(f"unsupported fill mode {fill!r}")
    h, w = sample.image.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"shift ({dx}, {dy}) out of range for {sample.image.shape}")
    return Sample(
        image=_shift2d(sample.image, dx, dy, edge_fill=True),
        mask=_shift2d(sample.mask, dx, dy, edge_fill=False),
        seed=sample.seed,
    )


def make_dataset(config: SynthConfig, n_images: int, split_seed: int) -> DatasetSplit:
    """Generate n samples (seeds split_seed..split_seed+n-1) and 70/30-split them."""
    if n_images < 2:
        raise ValueError(f"need at least 2 images to split, got {n_images}")
    samples = [generate(config, split_seed + i) for i in range(n_images)]
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(n_images)
    n_train = min(max(int(round(0.7 * n_images)), 1), n_images - 1)
    train = [samples[i] for i in perm[:n_train]]
    test = [samples[i] for i in perm[n_train:]]
    return DatasetSplit(train=train, test=test, split_seed=split_seed)


def save_dataset(split: DatasetSplit, config: SynthConfig, out_dir) -> None:
    """Persist a dataset directory: NNNNN.pgm / NNNNN_mask.pgm, manifest, config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.to_json(out / "config.json")
    rows = []
    for part, samples in (("train", split.train), ("test", split.test)):
        for sample in samples:
            stem = f"{sample.seed - split.split_seed:05d}"
            imgcore.write_pgm(sample.image, out / f"{stem}.pgm", bit_depth=16)
            imgcore.write_mask(sample.mask, out / f"{stem}_mask.pgm")
            rows.append((stem, sample.seed, part, sample.mask.mean()))
    rows.sort()
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "seed", "split", "particle_fraction"])
        for stem, seed, part, frac in rows:
            writer.writerow([f"{stem}.pgm", seed, part, repr(float(frac))])


def load_dataset(in_dir) -> tuple[DatasetSplit, SynthConfig]:
    """Load a dataset directory written by `save_dataset`."""
    src = Path(in_dir)
    config = SynthConfig.from_json(src / "config.json")
    train: list[Sample] = []
    test: list[Sample] = []
    split_seed = None
    with open(src / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            stem = row["filename"].removesuffix(".pgm")
            seed = int(row["seed"])
            if split_seed is None or seed - int(stem) < split_seed:
                split_seed = seed - int(stem)
            sample = Sample(
                image=imgcore.read_pgm(src / f"{stem}.pgm"),
                mask=imgcore.read_mask(src / f"{stem}_mask.pgm"),
                seed=seed,
            )
            (train if row["split"] == "train" else test).append(sample)
    if split_seed is None:
        raise ValueError(f"empty dataset manifest in {src}")
    return DatasetSplit(train=train, test=test, split_seed=split_seed), config
