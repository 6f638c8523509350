"""Images, masks, synthetic scenes and segmentation metrics.

Images are ``(1, 3, H, W)`` float32 tensors in [0, 1]; masks (label maps)
are ``(H, W)`` uint8 arrays of class indices. On disk images are binary
PPM (P6) and masks binary PGM (P5) with the class index as pixel value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .model import LABEL_DTYPE
from .tensor import DTYPE

MANIFEST = "dataset.txt"
SYNTH_KINDS = {"ball": ("background", "ball"), "goal": ("background", "goalpost_bottom")}


# -- netpbm ----------------------------------------------------------------

def _read_netpbm(data: bytes, magic: bytes):
    if data[:2] != magic:
        found = data[:2].decode("latin-1", "replace")
        raise FormatError(f"expected binary {magic.decode()} file, found magic {found!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"bad header field {data[start:pos]!r}") from None
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}")
    return width, height, maxval, data[pos + 1:]


def decode_ppm(data: bytes) -> np.ndarray:
    width, height, maxval, payload = _read_netpbm(data, b"P6")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    need = width * height * 3
    if len(payload) < need:
        raise FormatError(f"truncated pixel data: {len(payload)} of {need} bytes")
    rgb = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width, 3)
    return (rgb.transpose(2, 0, 1)[None].astype(DTYPE) / DTYPE(255)).astype(DTYPE)


def encode_ppm(image) -> bytes:
    return b"P6\n%d %d\n255\n" % (image.shape[3], image.shape[2]) + to_rgb_bytes(image).tobytes()


def to_rgb_bytes(image) -> np.ndarray:
    """``(1, 3, H, W)`` tensor in [0, 1] to an ``(H, W, 3)`` uint8 array."""
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[:2] != (1, 3):
        raise ShapeError(f"expected a 1x3xHxW image, got shape {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise DataError("image values must lie in [0, 1]")
    return np.ascontiguousarray(np.rint(image[0].transpose(1, 2, 0) * 255).astype(np.uint8))


def from_rgb_bytes(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.uint8)
    return (rgb.transpose(2, 0, 1)[None].astype(DTYPE) / DTYPE(255)).astype(DTYPE)


def load_ppm(path) -> np.ndarray:
    return decode_ppm(_read(path))


def save_ppm(image, path) -> None:
    Path(path).write_bytes(encode_ppm(image))


def decode_pgm(data: bytes) -> np.ndarray:
    width, height, maxval, payload = _read_netpbm(data, b"P5")
    if not 1 <= maxval <= 255:
        raise FormatError(f"only 8-bit masks are supported, got maxval {maxval}")
    need = width * height
    if len(payload) < need:
        raise FormatError(f"truncated pixel data: {len(payload)} of {need} bytes")
    mask = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width).copy()
    if mask.max(initial=0) > maxval:
        raise FormatError(f"pixel value exceeds maxval {maxval}")
    return mask


def encode_pgm(mask) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise DataError("mask values must fit in a byte")
    return b"P5\n%d %d\n255\n" % (mask.shape[1], mask.shape[0]) + mask.astype(np.uint8).tobytes()


def load_mask(path) -> np.ndarray:
    return decode_pgm(_read(path)).astype(LABEL_DTYPE)


def save_mask(mask, path) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    images: list
    masks: list
    class_count: int = 2
    class_names: tuple = ("background", "foreground")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise DataError(f"{len(self.images)} images but {len(self.masks)} masks")
        if len(self.class_names) != self.class_count:
            raise DataError(f"{len(self.class_names)} class names for {self.class_count} classes")
        for i, (img, msk) in enumerate(zip(self.images, self.masks)):
            if img.ndim != 4 or img.shape[:2] != (1, 3):
                raise DataError(f"pair {i}: image must be 1x3xHxW, got {img.shape}")
            if img.shape[2:] != msk.shape:
                raise DataError(f"pair {i}: image {img.shape[2]}x{img.shape[3]} vs mask "
                                f"{msk.shape[0]}x{msk.shape[1]}")
            if msk.size and int(msk.max()) >= self.class_count:
                raise DataError(f"pair {i}: label {int(msk.max())} >= class_count {self.class_count}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.images[i] for i in indices], [self.masks[i] for i in indices],
                       self.class_count, self.class_names, dict(self.meta))


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (img, msk) in enumerate(zip(ds.images, ds.masks)):
        save_ppm(img, d / f"img_{i:05d}.ppm")
        save_mask(msk, d / f"msk_{i:05d}.pgm")
    lines = [f"class_count={ds.class_count}", f"names={','.join(ds.class_names)}", f"count={len(ds)}"]
    lines += [f"{k}={v}" for k, v in ds.meta.items()]
    (d / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    try:
        text = (d / MANIFEST).read_text(encoding="utf-8")
    except OSError:
        raise FormatError(f"missing manifest {d / MANIFEST}") from None
    info = {}
    for line in text.splitlines():
        key, sep, value = line.strip().partition("=")
        if sep:
            info[key] = value
    try:
        class_count = int(info["class_count"])
        count = int(info["count"])
        names = tuple(info.get("names", "").split(",")) if info.get("names") else tuple(
            f"class{i}" for i in range(class_count))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad manifest: {exc}") from None
    images = [load_ppm(d / f"img_{i:05d}.ppm") for i in range(count)]
    masks = [load_mask(d / f"msk_{i:05d}.pgm") for i in range(count)]
    meta = {k: v for k, v in info.items() if k not in ("class_count", "count", "names")}
    return Dataset(images, masks, class_count, names, meta)


# -- synthetic scenes --------------------------------------------------------

def _disc(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def _field(rng, h, w):
    base = np.array([0.12, 0.50, 0.14]) + rng.uniform(-0.05, 0.05, 3)
    shade = 1.0 + rng.uniform(-0.15, 0.15) * np.linspace(-1, 1, h)[:, None, None]
    img = base[None, None, :] * shade + rng.normal(0, 0.03, (h, w, 3))
    return img


def _field_line(rng, img, h, w, thick=(0.8, 1.6)):
    white = rng.uniform(0.8, 0.95)
    thick = rng.uniform(*thick)
    if rng.random() < 0.5:
        y = rng.uniform(0, h)
        slope = rng.uniform(-0.3, 0.3)
        yy, xx = np.mgrid[0:h, 0:w]
        sel = np.abs(yy + 0.5 - (y + slope * (xx + 0.5 - w / 2))) <= thick
    else:
        x = rng.uniform(0, w)
        slope = rng.uniform(-0.3, 0.3)
        yy, xx = np.mgrid[0:h, 0:w]
        sel = np.abs(xx + 0.5 - (x + slope * (yy + 0.5 - h / 2))) <= thick
    img[sel] = white
    return sel


def _robot(rng, img, h, w):
    # white body with a dark band, same brightness as the ball
    bh, bw = int(rng.integers(h // 6, h // 3)), int(rng.integers(w // 10, w // 5))
    y0, x0 = int(rng.integers(0, h - bh)), int(rng.integers(0, w - bw))
    img[y0:y0 + bh, x0:x0 + bw] = rng.uniform(0.8, 0.95)
    band = int(rng.integers(y0, y0 + bh - 1))
    img[band:band + max(1, bh // 5), x0:x0 + bw] = rng.uniform(0.05, 0.2)


def _ball_scene(rng, h, w):
    img = _field(rng, h, w)
    mask = np.zeros((h, w), LABEL_DTYPE)
    for _ in range(int(rng.integers(1, 4))):
        _field_line(rng, img, h, w, (1.0, 2.5))
    if rng.random() < 0.6:
        _robot(rng, img, h, w)
    side = min(h, w)
    r_lo = max(2.0, 0.05 * side)
    r = rng.uniform(r_lo, max(r_lo, 0.2 * side))
    cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
    ball = _disc(h, w, cy, cx, r)
    img[ball] = rng.uniform(0.8, 0.95)
    if rng.random() < 0.7:
        # black patches of a classic ball
        for _ in range(rng.integers(2, 5)):
            a, d = rng.uniform(0, 2 * np.pi), rng.uniform(0, 0.6 * r)
            patch = _disc(h, w, cy + d * np.sin(a), cx + d * np.cos(a), max(0.8, 0.25 * r)) & ball
            img[patch] = rng.uniform(0.05, 0.2)
    mask[ball] = 1
    img += rng.normal(0, 0.02, img.shape)
    img *= rng.uniform(0.75, 1.1)  # exposure
    return img, mask


def _goal_scene(rng, h, w):
    img = _field(rng, h, w)
    mask = np.zeros((h, w), LABEL_DTYPE)
    horizon = int(rng.integers(h // 6, h // 3))
    img[:horizon] = np.array([0.55, 0.55, 0.6]) + rng.normal(0, 0.03, (horizon, w, 3))
    if rng.random() < 0.4:
        _field_line(rng, img, h, w)
    post_w = max(2, int(round(rng.uniform(0.04, 0.07) * w)))
    gap = int(rng.integers(w // 4, w // 2))
    left = int(rng.integers(0, w - gap - 2 * post_w + 1))
    bottom = int(rng.integers(h // 2, h - 2))
    top = int(rng.integers(0, horizon + 1))
    white = rng.uniform(0.85, 1.0)
    foot = max(2, h // 16)
    for x0 in (left, left + gap + post_w):
        img[top:bottom, x0:x0 + post_w] = white
        mask[max(top, bottom - foot):bottom, x0:x0 + post_w] = 1
    img[top:top + post_w, left:left + gap + 2 * post_w] = white
    return img, mask


def synth_dataset(kind: str, n: int, h: int, w: int, seed: int) -> Dataset:
    """Deterministic synthetic field scenes.

    ``ball``: noisy green field, one to three white field lines and
    often a white robot body as distractors, one white (often patched)
    ball labelled 1, random exposure.
    ``goal``: white goal posts with a crossbar; the bottom ``h // 16`` rows
    of each post are labelled 1.
    """
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; choose from {sorted(SYNTH_KINDS)}")
    if h < 8 or w < 8 or h % 8 or w % 8:
        raise ShapeError(f"synthetic size {h}x{w} must be a positive multiple of 8")
    if n < 1:
        raise DataError("n must be at least 1")
    scene = _ball_scene if kind == "ball" else _goal_scene
    kind_id = sorted(SYNTH_KINDS).index(kind)
    images, masks = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i, kind_id])
        img, mask = scene(rng, h, w)
        # quantize so the in-memory dataset equals its PPM round trip
        rgb = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        images.append(from_rgb_bytes(rgb))
        masks.append(mask)
    meta = {"kind": kind, "seed": seed, "size": f"{h}x{w}"}
    return Dataset(images, masks, 2, SYNTH_KINDS[kind], meta)


# -- metrics -----------------------------------------------------------------

@dataclass
class EvalResult:
    pixel_accuracy: float
    iou: list
    confusion: np.ndarray  # rows: target class, columns: predicted class

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou))

    def to_kv(self, names=None) -> list[str]:
        names = names or [str(i) for i in range(len(self.iou))]
        lines = [f"pixel_accuracy={self.pixel_accuracy:.6f}", f"mean_iou={self.mean_iou:.6f}"]
        lines += [f"iou.{name}={v:.6f}" for name, v in zip(names, self.iou)]
        c = len(self.iou)
        lines += [f"confusion.{i}.{j}={int(self.confusion[i, j])}" for i in range(c) for j in range(c)]
        return lines


def confusion_matrix(pred, target, class_count: int) -> np.ndarray:
    pred = np.asarray(pred).astype(np.int64).ravel()
    target = np.asarray(target).astype(np.int64).ravel()
    if pred.size and (pred.max() >= class_count or target.max() >= class_count):
        raise DataError(f"label outside [0, {class_count})")
    return np.bincount(target * class_count + pred, minlength=class_count ** 2).reshape(
        class_count, class_count)


def evaluate(pred, target, class_count: int) -> EvalResult:
    """Pixel accuracy, per-class IoU and confusion over all paired label maps.

    A class absent from both prediction and target scores IoU 1.
    """
    if isinstance(pred, np.ndarray) and pred.ndim == 2:
        pred, target = [pred], [target]
    if len(pred) != len(target):
        raise ShapeError(f"{len(pred)} predictions for {len(target)} targets")
    conf = np.zeros((class_count, class_count), np.int64)
    for i, (p, t) in enumerate(zip(pred, target)):
        if np.shape(p) != np.shape(t):
            raise ShapeError(f"pair {i}: prediction {np.shape(p)} vs target {np.shape(t)}")
        conf += confusion_matrix(p, t, class_count)
    total = conf.sum()
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    iou = [float(tp[c] / union[c]) if union[c] else 1.0 for c in range(class_count)]
    acc = float(tp.sum() / total) if total else 1.0
    return EvalResult(acc, iou, conf)
