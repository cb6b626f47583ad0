"""Deterministic synthetic image-classification datasets.

Two desk-scale generators matching the package's canonical shapes:

- synth_digits: 28x28x1, 10 classes, anti-aliased digit glyphs with random
  font, size, rotation, offset and blur (MNIST-class stand-in).
- synth_shapes: 32x32x3, 10 classes, colored geometric figures on dark
  backgrounds (CIFAR-class stand-in).

Every sample is a pure function of (seed, index), so regenerating a split
reproduces it bit-for-bit.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .data import LabeledDataset

_FONT_DIRS = [
    Path("/usr/share/fonts/truetype/dejavu"),
]
_FONT_FILES = [
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
]


def _font_paths() -> list[str]:
    for d in _FONT_DIRS:
        found = [str(d / f) for f in _FONT_FILES if (d / f).exists()]
        if found:
            return found
    # matplotlib ships DejaVu; use it as a fallback so the generator
    # works on hosts without the system font package.
    import matplotlib

    ttf = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    found = [str(ttf / f) for f in _FONT_FILES if (ttf / f).exists()]
    if not found:
        raise RuntimeError("no DejaVu fonts found for synthetic digit rendering")
    return found


_FONT_CACHE: dict[tuple[str, int], ImageFont.FreeTypeFont] = {}


def _font(path: str, size: int) -> ImageFont.FreeTypeFont:
    key = (path, size)
    if key not in _FONT_CACHE:
        _FONT_CACHE[key] = ImageFont.truetype(path, size)
    return _FONT_CACHE[key]


def _render_digit(rng: np.random.Generator, digit: int, fonts: list[str]) -> np.ndarray:
    # draw at 2x resolution, rotate, then downsample for soft MNIST-like strokes
    big = 56
    font_path = fonts[int(rng.integers(len(fonts)))]
    size = int(rng.integers(32, 49))
    dx = float(rng.uniform(-5.0, 5.0))
    dy = float(rng.uniform(-5.0, 5.0))
    angle = float(rng.uniform(-20.0, 20.0))
    blur = float(rng.uniform(0.0, 1.2))
    level = float(rng.uniform(0.75, 1.0))

    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)
    draw.text((big / 2 + dx, big / 2 + dy), str(digit), fill=255,
              font=_font(font_path, size), anchor="mm")
    img = img.rotate(angle, resample=Image.BILINEAR, center=(big / 2, big / 2))
    if blur > 0.05:
        img = img.filter(ImageFilter.GaussianBlur(blur))
    img = img.resize((28, 28), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.clip(arr * level, 0.0, 1.0)[..., None]


def synth_digits(n: int, seed: int, split: str = "train",
                 name: str = "synth-digits") -> LabeledDataset:
    """Rendered-digit dataset: (n, 28, 28, 1) float32 in [0,1], K=10."""
    if n <= 0:
        raise ValueError("n must be positive")
    fonts = _font_paths()
    rng = np.random.Generator(np.random.PCG64(seed))
    images = np.empty((n, 28, 28, 1), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        digit = int(rng.integers(10))
        labels[i] = digit
        images[i] = _render_digit(rng, digit, fonts)
    return LabeledDataset(images=images, labels=labels, class_count=10,
                          name=name, split=split)


_SHAPE_CLASSES = [
    "circle", "square", "triangle", "diamond", "star",
    "cross", "ring", "hbars", "vbars", "checker",
]


def _regular_polygon(cx, cy, r, sides, phase):
    ang = phase + 2 * np.pi * np.arange(sides) / sides
    return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in ang]


def _star(cx, cy, r, phase):
    pts = []
    for k in range(10):
        rad = r if k % 2 == 0 else 0.45 * r
        a = phase + np.pi * k / 5
        pts.append((cx + rad * np.cos(a), cy + rad * np.sin(a)))
    return pts


def _render_shape(rng: np.random.Generator, cls: int) -> np.ndarray:
    big = 64
    hue = float(rng.uniform(0.0, 1.0))
    fg = tuple(int(255 * v) for v in colorsys.hsv_to_rgb(hue, float(rng.uniform(0.6, 1.0)),
                                                         float(rng.uniform(0.7, 1.0))))
    bg_v = float(rng.uniform(0.0, 0.25))
    bg = tuple(int(255 * v) for v in colorsys.hsv_to_rgb(float(rng.uniform(0.0, 1.0)),
                                                         float(rng.uniform(0.0, 0.5)), bg_v))
    cx = big / 2 + float(rng.uniform(-6.0, 6.0))
    cy = big / 2 + float(rng.uniform(-6.0, 6.0))
    r = float(rng.uniform(16.0, 26.0))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    blur = float(rng.uniform(0.0, 1.0))

    img = Image.new("RGB", (big, big), bg)
    draw = ImageDraw.Draw(img)
    kind = _SHAPE_CLASSES[cls]
    if kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fg)
    elif kind == "square":
        draw.polygon(_regular_polygon(cx, cy, r, 4, phase), fill=fg)
    elif kind == "triangle":
        draw.polygon(_regular_polygon(cx, cy, r, 3, phase), fill=fg)
    elif kind == "diamond":
        draw.polygon([(cx, cy - r), (cx + 0.55 * r, cy), (cx, cy + r), (cx - 0.55 * r, cy)],
                     fill=fg)
    elif kind == "star":
        draw.polygon(_star(cx, cy, r, phase), fill=fg)
    elif kind == "cross":
        w = 0.36 * r
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fg)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=fg)
    elif kind == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fg)
        draw.ellipse([cx - 0.5 * r, cy - 0.5 * r, cx + 0.5 * r, cy + 0.5 * r], fill=bg)
    elif kind == "hbars":
        for k in (-1, 0, 1):
            y = cy + k * 0.8 * r
            draw.rectangle([cx - r, y - 0.22 * r, cx + r, y + 0.22 * r], fill=fg)
    elif kind == "vbars":
        for k in (-1, 0, 1):
            x = cx + k * 0.8 * r
            draw.rectangle([x - 0.22 * r, cy - r, x + 0.22 * r, cy + r], fill=fg)
    elif kind == "checker":
        s = 0.5 * r
        for i in (-1, 0):
            for j in (-1, 0):
                if (i + j) % 2 == 0:
                    draw.rectangle([cx + i * 2 * s, cy + j * 2 * s,
                                    cx + (i + 1) * 2 * s, cy + (j + 1) * 2 * s], fill=fg)
    if blur > 0.05:
        img = img.filter(ImageFilter.GaussianBlur(blur))
    img = img.resize((32, 32), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def synth_shapes(n: int, seed: int, split: str = "train",
                 name: str = "synth-shapes") -> LabeledDataset:
    """Rendered-shape dataset: (n, 32, 32, 3) float32 in [0,1], K=10."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    images = np.empty((n, 32, 32, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = int(rng.integers(10))
        labels[i] = cls
        images[i] = _render_shape(rng, cls)
    return LabeledDataset(images=images, labels=labels, class_count=10,
                          name=name, split=split)
