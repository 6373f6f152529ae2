"""Generator for the synthetic shapes-on-terrain dataset used by the acceptance run.

Each sample shows one coloured shape on a textured biome background.  The
shape class (colour + shape) also fixes the coordinate quadrant, and the
biome follows the absolute latitude band, so images, captions and locations
share structure that the alignment losses can discover.
"""

from __future__ import annotations

import numpy as np

from flavars.datapipe.records import SampleRecord
from flavars.encoders import GeoCoordinate

CLASSES = (
    ("red", "circle", (220, 30, 30)),
    ("blue", "square", (30, 60, 220)),
    ("yellow", "triangle", (240, 225, 30)),
    ("purple", "cross", (150, 40, 170)),
)
CLASS_NAMES = tuple(f"{c} {s}" for c, s, _ in CLASSES)

# (name, rgb) by |lat| band of 22.5 degrees, equator first
BIOMES = (
    ("forest", (34, 85, 40)),
    ("desert", (190, 160, 110)),
    ("grassland", (110, 170, 80)),
    ("snow", (225, 230, 235)),
)

# lat sign, lon sign for each class
QUADRANTS = ((1, 1), (1, -1), (-1, 1), (-1, -1))

TEMPLATES = (
    "a {size} {color} {shape} on {biome}.",
    "satellite photo of a {color} {shape} in a {biome} area",
    "{biome} with a {size} {color} {shape}",
    "an aerial view of one {color} {shape} surrounded by {biome}.",
    "a satellite photo of {color} {shape} over {biome}",
)


def quadrant_label(lat: float, lon: float) -> int:
    return (0 if lat >= 0 else 2) + (0 if lon >= 0 else 1)


def _texture(rng: np.random.Generator, size: int, rgb) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(0.3, 0.8)
    phase = rng.uniform(0, 2 * np.pi)
    waves = 14.0 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    noise = rng.normal(0.0, 10.0, size=(size, size, 3))
    return np.asarray(rgb, dtype=np.float64)[None, None, :] + waves[..., None] + noise


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if kind == "triangle":
        # apex up, base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "cross":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return inside & ((np.abs(dx) <= r / 3) | (np.abs(dy) <= r / 3))
    raise ValueError(kind)


def make_sample(index: int, rng: np.random.Generator, image_size: int = 32) -> SampleRecord:
    cls = int(rng.integers(len(CLASSES)))
    color, shape, rgb = CLASSES[cls]
    lat_sign, lon_sign = QUADRANTS[cls]
    abs_lat = rng.uniform(0.0, 90.0)
    lat = float(lat_sign * abs_lat) if abs_lat > 0 else 0.0
    lon = float(lon_sign * rng.uniform(1e-6, 180.0))
    biome, biome_rgb = BIOMES[min(int(abs_lat // 22.5), 3)]
    large = bool(rng.random() < 0.5)
    r = rng.uniform(0.28, 0.36) * image_size if large else rng.uniform(0.16, 0.22) * image_size
    cx = rng.uniform(r, image_size - r)
    cy = rng.uniform(r, image_size - r)

    img = _texture(rng, image_size, biome_rgb)
    mask = _shape_mask(shape, image_size, cx, cy, r)
    shade = rng.normal(0.0, 8.0, size=(image_size, image_size, 3))
    img[mask] = np.asarray(rgb, dtype=np.float64) + shade[mask]
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    caption = template.format(size="large" if large else "small", color=color, shape=shape, biome=biome)
    return SampleRecord(
        id=f"s{index:05d}",
        image=image,
        caption=caption,
        coord=GeoCoordinate(lat, lon),
        score=float(np.round(rng.uniform(0.15, 0.45), 6)),
        label=CLASS_NAMES[cls],
        mask=(mask.astype(np.uint8) * (cls + 1)),
    )


def make_synthetic_records(n: int, seed: int = 0, image_size: int = 32) -> list[SampleRecord]:
    rng = np.random.default_rng(seed)
    return [make_sample(i, rng, image_size) for i in range(n)]
