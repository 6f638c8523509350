"""HSV threshold lookup-table segmenter.

Thresholds are compiled into a dense (hue, saturation, value) table once;
segmenting is then one table read per pixel and yields the same label-map
type as the network's ``predict_labels``.
"""
from __future__ import annotations

import colorsys
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError, FormatError, ShapeError
from .model import LABEL_DTYPE

H_BINS, S_BINS, V_BINS = 360, 64, 64


def rgb_to_hsv(r: int, g: int, b: int) -> tuple[float, float, float]:
    """8-bit RGB to (hue degrees in [0, 360), saturation, value); hue is 0 for greys."""
    mx, mn = max(r, g, b), min(r, g, b)
    d = mx - mn
    if d == 0:
        h = 0.0
    elif mx == r:
        h = 60.0 * (g - b) / d
    elif mx == g:
        h = 60.0 * (b - r) / d + 120.0
    else:
        h = 60.0 * (r - g) / d + 240.0
    if h < 0:
        h += 360.0
    s = d / mx if mx else 0.0
    return h, s, mx / 255.0


def hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb((h % 360.0) / 360.0, s, v)
    return tuple(int(round(c * 255)) for c in (r, g, b))


def _rgb_to_hsv_array(rgb: np.ndarray):
    rgb = rgb.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    d = mx - rgb.min(axis=-1)
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, 60.0 * (g - b) / safe,
                 np.where(mx == g, 60.0 * (b - r) / safe + 120.0, 60.0 * (r - g) / safe + 240.0))
    h = np.where(d > 0, h, 0.0)
    h = np.where(h < 0, h + 360.0, h)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx / 255.0


@dataclass(frozen=True)
class ClassThreshold:
    class_id: int
    name: str
    hue: tuple[float, float]
    sat: tuple[float, float] = (0.0, 1.0)
    val: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not 1 <= self.class_id <= 255:
            raise ValueError(f"class id must lie in [1, 255], got {self.class_id}")
        lo, hi = self.hue
        if not (0 <= lo <= 360 and 0 <= hi <= 360):
            raise ValueError(f"hue range {self.hue} outside [0, 360]")
        for label, (a, b) in (("saturation", self.sat), ("value", self.val)):
            if not 0 <= a <= b <= 1:
                raise ValueError(f"{label} range ({a}, {b}) must satisfy 0 <= lo <= hi <= 1")

    def contains(self, h, s, v):
        """Elementwise membership; a hue range with lo > hi wraps through 0."""
        lo, hi = self.hue
        in_h = (h >= lo) & (h <= hi) if lo <= hi else (h >= lo) | (h <= hi)
        return in_h & (s >= self.sat[0]) & (s <= self.sat[1]) & (v >= self.val[0]) & (v <= self.val[1])


@dataclass(frozen=True)
class HsvThresholds:
    """Classes in priority order: the first matching class wins, unmatched is 0."""

    classes: tuple[ClassThreshold, ...] = ()

    @property
    def class_count(self) -> int:
        return max((c.class_id for c in self.classes), default=0) + 1

    @property
    def names(self) -> list[str]:
        names = ["background"] + [f"class{i}" for i in range(1, self.class_count)]
        for c in self.classes:
            names[c.class_id] = c.name
        return names

    def label(self, h, s, v) -> np.ndarray:
        h, s, v = np.broadcast_arrays(np.asarray(h, float), np.asarray(s, float), np.asarray(v, float))
        out = np.zeros(h.shape, LABEL_DTYPE)
        done = np.zeros(h.shape, bool)
        for c in self.classes:
            hit = c.contains(h, s, v) & ~done
            out[hit] = c.class_id
            done |= hit
        return out


_LINE = re.compile(r"class\s+(\d+)\s+(\S+)((?:\s+[hsv]=\S+)*)\s*$")


def _range(text: str, key: str, line_no: int) -> tuple[float, float]:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise FormatError(f"line {line_no}: bad {key} range {text!r}, expected lo:hi") from None


def parse_thresholds(text: str) -> HsvThresholds:
    """Parse ``class <id> <name> h=<lo>:<hi> s=<lo>:<hi> v=<lo>:<hi>`` lines.

    Blank lines and ``#`` comments are skipped; line order is priority
    order; omitted s or v ranges default to the full [0, 1].
    """
    classes = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise FormatError(f"line {n}: expected 'class <id> <name> h=lo:hi s=lo:hi v=lo:hi'")
        fields = {}
        for item in m.group(3).split():
            key, value = item.split("=", 1)
            if key in fields:
                raise FormatError(f"line {n}: duplicate {key}= field")
            fields[key] = _range(value, key, n)
        if "h" not in fields:
            raise FormatError(f"line {n}: missing h= range")
        try:
            classes.append(ClassThreshold(int(m.group(1)), m.group(2), fields["h"],
                                          fields.get("s", (0.0, 1.0)), fields.get("v", (0.0, 1.0))))
        except ValueError as e:
            raise FormatError(f"line {n}: {e}") from None
    return HsvThresholds(tuple(classes))


def load_thresholds(path) -> HsvThresholds:
    return parse_thresholds(Path(path).read_text())


@dataclass(frozen=True)
class Lut:
    table: np.ndarray  # (H_BINS, S_BINS, V_BINS) uint8
    class_count: int

    def __post_init__(self):
        if self.table.ndim != 3 or self.table.dtype != LABEL_DTYPE:
            raise ShapeError("lut table must be a 3-d uint8 array")
        self.table.setflags(write=False)


def build_lut(thresholds: HsvThresholds, bins=(H_BINS, S_BINS, V_BINS)) -> Lut:
    """Label every bin by the class its center falls in."""
    hb, sb, vb = bins
    h = (np.arange(hb) + 0.5) * (360.0 / hb)
    s = (np.arange(sb) + 0.5) / sb
    v = (np.arange(vb) + 0.5) / vb
    table = thresholds.label(h[:, None, None], s[None, :, None], v[None, None, :])
    return Lut(np.ascontiguousarray(table), max(thresholds.class_count, 2))


def segment_lut(image, lut: Lut) -> np.ndarray:
    """Label map for a 1x3xHxW image in [0, 1]; same type as ``predict_labels``."""
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[:2] != (1, 3):
        raise ShapeError(f"expected a 1x3xHxW image, got shape {image.shape}")
    if image.dtype not in (np.float32, np.float64):
        image = image.astype(np.float64)
    try:
        return kernels.lut_segment(np.ascontiguousarray(image[0]), lut.table)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def direct_labels(rgb, thresholds: HsvThresholds) -> np.ndarray:
    """Unquantized threshold evaluation on (..., 3) uint8 pixels."""
    return thresholds.label(*_rgb_to_hsv_array(np.asarray(rgb)))
