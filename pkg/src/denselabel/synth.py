"""Synthetic aerial scenes for desk-scale experiments.

Each scene is a 4-band raster (elevation, near-infrared, red, green, all
in [0, 1]) with a per-pixel class map over six classes:

    0 impervious   gray ground-level ribbons (roads)
    1 building     elevated rectangles with bright-red roofs
    2 low-veg      the textured background
    3 tree         clustered green blobs with a canopy elevation bump
    4 car          small bright two-tone boxes placed on the roads
    5 clutter      rare ground-level speckles

The layout is procedural and fully determined by the seed: identical
configurations produce bit-identical scenes.  Class pixel fractions are
driven toward per-class target ranges; the generator samples a target
inside each range and keeps adding objects until it is reached (later
classes may overwrite earlier ones, which the generous default ranges
absorb).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

CLASS_NAMES = ("impervious", "building", "low_veg", "tree", "car", "clutter")
N_CLASSES_FULL = len(CLASS_NAMES)

IMPERVIOUS, BUILDING, LOW_VEG, TREE, CAR, CLUTTER = range(6)

# Label map colors for previews: white, blue, cyan, green, yellow, red.
CLASS_COLORS = (
    (255, 255, 255),
    (0, 0, 255),
    (0, 255, 255),
    (0, 255, 0),
    (255, 255, 0),
    (255, 0, 0),
)


@dataclass
class SceneConfig:
    """Scene geometry and appearance knobs.

    ``*_frac`` are inclusive (lo, hi) target ranges for the pixel
    fraction of each placed class; the background class fills whatever
    remains.  ``relief`` is the minimum elevation gap between building
    roofs and the surrounding ground.  ``noise`` is the per-pixel
    radiometric noise level.
    """

    seed: int = 0
    size: int = 256
    noise: float = 0.03
    relief: float = 0.3
    impervious_frac: tuple = (0.08, 0.22)
    building_frac: tuple = (0.10, 0.30)
    tree_frac: tuple = (0.06, 0.22)
    car_frac: tuple = (0.008, 0.05)
    clutter_frac: tuple = (0.0, 0.01)

    def __post_init__(self):
        if self.size < 64:
            raise ConfigError(f"scene size must be >= 64, got {self.size}")
        total_min = 0.0
        for name in ("impervious_frac", "building_frac", "tree_frac",
                     "car_frac", "clutter_frac"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi <= 1.0):
                raise ConfigError(f"{name}: empty or invalid range ({lo}, {hi})")
            total_min += lo
        if total_min > 1.0:
            raise ConfigError(
                f"infeasible density config: class minimum fractions sum to "
                f"{total_min:.3f} > 1"
            )

    def placed(self):
        return (
            (IMPERVIOUS, self.impervious_frac),
            (BUILDING, self.building_frac),
            (TREE, self.tree_frac),
            (CAR, self.car_frac),
            (CLUTTER, self.clutter_frac),
        )


@dataclass
class LabeledRaster:
    """A multi-band image, its per-pixel class map and an optional
    ignore mask (True = excluded from losses and metrics)."""

    image: np.ndarray   # (c, h, w) float32
    labels: np.ndarray  # (h, w) uint8
    ignore: np.ndarray = None

    def __post_init__(self):
        if self.ignore is None:
            self.ignore = np.zeros(self.labels.shape, dtype=bool)


def _smooth_field(rng, size, cells, lo, hi):
    """Random smooth field in [lo, hi]: coarse noise, bilinearly blown up."""
    coarse = rng.random((cells, cells))
    idx = np.linspace(0, cells - 1, size)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, cells - 1)
    t = idx - i0
    rows = coarse[i0][:, i1] * t[None, :] + coarse[i0][:, i0] * (1 - t[None, :])
    rows1 = coarse[i1][:, i1] * t[None, :] + coarse[i1][:, i0] * (1 - t[None, :])
    f = rows * (1 - t[:, None]) + rows1 * t[:, None]
    return lo + (hi - lo) * f


def _rot_box_mask(size, cy, cx, hh, hw, angle):
    """Pixels inside a rotated box of half-extents (hh, hw)."""
    ys, xs = np.mgrid[0:size, 0:size]
    dy = ys - cy
    dx = xs - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (np.abs(u) <= hw) & (np.abs(v) <= hh)


def _paint(image, mask, values, jitter, rng):
    for band, v in enumerate(values):
        if v is None:
            continue
        image[band, mask] = v + rng.normal(0.0, jitter)


def synth_scene(config: SceneConfig):
    """Generate one scene.  Returns a :class:`LabeledRaster` with bands
    ordered (elevation, NIR, R, G)."""
    rng = np.random.default_rng(config.seed)
    s = config.size
    image = np.zeros((4, s, s), dtype=np.float64)
    labels = np.full((s, s), LOW_VEG, dtype=np.uint8)

    # Background: low vegetation over gently undulating terrain.
    image[0] = _smooth_field(rng, s, 6, 0.03, 0.13)
    image[1] = _smooth_field(rng, s, 10, 0.55, 0.75)
    image[2] = _smooth_field(rng, s, 10, 0.15, 0.30)
    image[3] = _smooth_field(rng, s, 10, 0.45, 0.62)

    targets = {c: rng.uniform(lo, hi) for c, (lo, hi) in config.placed()}

    def frac(c):
        return float((labels == c).mean())

    # Roads: long straight ribbons.
    guard = 0
    while frac(IMPERVIOUS) < targets[IMPERVIOUS] and guard < 60:
        guard += 1
        angle = rng.uniform(0, math.pi)
        offset = rng.uniform(-0.45 * s, 0.45 * s)
        width = rng.uniform(0.025 * s, 0.05 * s)
        ys, xs = np.mgrid[0:s, 0:s]
        d = (xs - s / 2) * math.sin(angle) - (ys - s / 2) * math.cos(angle)
        mask = np.abs(d - offset) <= width / 2
        labels[mask] = IMPERVIOUS
        gray = rng.uniform(0.32, 0.42)
        _paint(image, mask, (0.10, gray, gray, gray), 0.01, rng)

    # Buildings: rotated rectangles with elevated roofs.
    guard = 0
    while frac(BUILDING) < targets[BUILDING] and guard < 200:
        guard += 1
        hh = rng.uniform(0.035 * s, 0.10 * s)
        hw = rng.uniform(0.035 * s, 0.10 * s)
        cy, cx = rng.uniform(hh, s - hh), rng.uniform(hw, s - hw)
        angle = rng.uniform(0, math.pi) if rng.random() < 0.5 else 0.0
        mask = _rot_box_mask(s, cy, cx, hh, hw, angle)
        mask &= labels != BUILDING
        labels[mask] = BUILDING
        roof = rng.uniform(0.60, 0.80)
        height = config.relief + 0.2 + rng.uniform(0.0, 0.25)
        _paint(image, mask, (height, rng.uniform(0.30, 0.42), roof,
                             rng.uniform(0.25, 0.38)), 0.01, rng)

    # Trees: clusters of overlapping disks with a canopy bump.
    ys, xs = np.mgrid[0:s, 0:s]
    guard = 0
    while frac(TREE) < targets[TREE] and guard < 200:
        guard += 1
        cy, cx = rng.uniform(0, s), rng.uniform(0, s)
        for _ in range(rng.integers(2, 6)):
            r = rng.uniform(0.02 * s, 0.045 * s)
            oy = cy + rng.normal(0, 0.03 * s)
            ox = cx + rng.normal(0, 0.03 * s)
            mask = (ys - oy) ** 2 + (xs - ox) ** 2 <= r * r
            mask &= labels != BUILDING
            labels[mask] = TREE
            _paint(image, mask,
                   (rng.uniform(0.22, 0.38), rng.uniform(0.80, 0.95),
                    rng.uniform(0.08, 0.18), rng.uniform(0.55, 0.72)),
                   0.015, rng)

    # Cars: small bright boxes on the road network.
    road_idx = np.flatnonzero(labels == IMPERVIOUS)
    guard = 0
    while frac(CAR) < targets[CAR] and guard < 400 and road_idx.size:
        guard += 1
        p = road_idx[rng.integers(road_idx.size)]
        cy, cx = divmod(int(p), s)
        angle = rng.uniform(0, math.pi)
        mask = _rot_box_mask(s, cy, cx, rng.uniform(2.2, 3.4),
                             rng.uniform(4.2, 6.0), angle)
        mask &= labels != BUILDING
        labels[mask] = CAR
        _paint(image, mask,
               (0.16, rng.uniform(0.10, 0.20), rng.uniform(0.85, 0.98),
                rng.uniform(0.75, 0.92)), 0.01, rng)

    # Clutter: rare ground-level speckles.
    guard = 0
    while frac(CLUTTER) < targets[CLUTTER] and guard < 200:
        guard += 1
        cy, cx = rng.uniform(2, s - 2), rng.uniform(2, s - 2)
        r = rng.uniform(1.2, 2.8)
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        labels[mask] = CLUTTER
        _paint(image, mask, (0.14, rng.uniform(0.2, 0.4),
                             rng.uniform(0.55, 0.75), rng.uniform(0.1, 0.25)),
               0.01, rng)

    image += rng.normal(0.0, config.noise, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return LabeledRaster(image.astype(np.float32), labels)


def class_fractions(labels):
    """Pixel fraction of every class, indexed by class id."""
    return np.bincount(np.asarray(labels).ravel(),
                       minlength=N_CLASSES_FULL) / labels.size


def labels_to_rgb(labels):
    """Label map as an (h, w, 3) uint8 color image for previews."""
    lut = np.array(CLASS_COLORS + ((0, 0, 0),) * (256 - N_CLASSES_FULL),
                   dtype=np.uint8)
    return lut[np.asarray(labels)]
