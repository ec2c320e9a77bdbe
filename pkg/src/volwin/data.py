"""Synthetic volumetric segmentation data.

Each sample is a single-channel volume containing a few solid shapes
(spheres or axis-aligned boxes) on a constant background plus Gaussian
noise. Every foreground class paints at least one shape per sample and a
sample is redrawn if a later shape fully buries an earlier class, so all
classes are present in every sample. Generation is bitwise reproducible
from the spec's seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SHAPE_KINDS = ("sphere", "box")


@dataclass
class SyntheticSpec:
    edge: int = 32
    num_classes: int = 3
    shapes_min: int = 2
    shapes_max: int = 4
    kinds: tuple = SHAPE_KINDS
    intensities: tuple | None = None
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need background plus at least one class, got {self.num_classes}")
        if self.shapes_min < self.num_classes - 1:
            self.shapes_min = self.num_classes - 1
        if self.shapes_max < self.shapes_min:
            raise ConfigError(f"shapes_max {self.shapes_max} < shapes_min {self.shapes_min}")
        for k in self.kinds:
            if k not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind {k!r}, choose from {SHAPE_KINDS}")
        if self.intensities is None:
            # Background 0, foreground classes spread over (0, 1].
            k = self.num_classes - 1
            self.intensities = tuple([0.0] + [(i + 1) / k for i in range(k)])
        if len(self.intensities) != self.num_classes:
            raise ConfigError(
                f"{len(self.intensities)} intensities for {self.num_classes} classes"
            )

    @property
    def radius_range(self) -> tuple:
        lo = max(2.0, self.edge / 8.0)
        hi = max(lo + 1.0, self.edge / 5.0)
        if 2 * hi >= self.edge:
            raise ConfigError(f"volume edge {self.edge} too small for the shapes it must contain")
        return (lo, hi)


@dataclass
class SegSample:
    volume: np.ndarray  # [1, D, H, W] float
    labels: np.ndarray  # [D, H, W] int class ids

    def __post_init__(self):
        if self.volume.shape[1:] != self.labels.shape:
            raise ConfigError(f"volume {self.volume.shape} does not match labels {self.labels.shape}")


def _paint_sphere(labels, vol, center, radius, cls, intensity, grid):
    mask = ((grid[0] - center[0]) ** 2 + (grid[1] - center[1]) ** 2 + (grid[2] - center[2]) ** 2) <= radius**2
    labels[mask] = cls
    vol[mask] = intensity
    return mask


def _paint_box(labels, vol, center, half, cls, intensity, grid):
    mask = (
        (np.abs(grid[0] - center[0]) <= half[0])
        & (np.abs(grid[1] - center[1]) <= half[1])
        & (np.abs(grid[2] - center[2]) <= half[2])
    )
    labels[mask] = cls
    vol[mask] = intensity
    return mask


def _draw_sample(spec: SyntheticSpec, rng: np.random.Generator) -> SegSample:
    e = spec.edge
    grid = np.meshgrid(np.arange(e), np.arange(e), np.arange(e), indexing="ij")
    labels = np.zeros((e, e, e), dtype=np.int64)
    vol = np.full((e, e, e), spec.intensities[0], dtype=np.float64)
    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    fg = list(range(1, spec.num_classes))
    classes = [fg[i % len(fg)] for i in range(n_shapes)]
    lo, hi = spec.radius_range
    for cls in classes:
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        r = rng.uniform(lo, hi)
        if kind == "sphere":
            c = rng.uniform(r, e - 1 - r, size=3)
            _paint_sphere(labels, vol, c, r, cls, spec.intensities[cls], grid)
        else:
            half = rng.uniform(lo * 0.6, hi * 0.8, size=3)
            c = np.array([rng.uniform(half[i], e - 1 - half[i]) for i in range(3)])
            _paint_box(labels, vol, c, half, cls, spec.intensities[cls], grid)
    if spec.noise_sigma > 0:
        vol = vol + rng.normal(0.0, spec.noise_sigma, size=vol.shape)
    return SegSample(volume=vol[None], labels=labels)


def gen_dataset(spec: SyntheticSpec, n: int) -> list:
    """Deterministically generate ``n`` samples; every class occurs in each."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(n):
        for _attempt in range(64):
            sample = _draw_sample(spec, rng)
            present = np.unique(sample.labels)
            if len(present) == spec.num_classes:
                out.append(sample)
                break
        else:
            raise ConfigError("could not place all classes; shapes bury each other at this geometry")
    return out
