"""
Image buffers, corpus handling and pixel-space operators.

An image buffer is a float64 ``(H, W, 3)`` array in [0, 1], RGB order.
Batches stack along a leading axis.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, SplitViolation

LUMA = np.array([0.299, 0.587, 0.114])
SPLITS = ("encoder-pretrain", "reconstructor-train", "operator-fit", "eval")
IMAGE_SUFFIXES = (".ppm", ".png")


def check_image(img: np.ndarray, min_size: int = 1) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected H×W×3 image, got shape {img.shape}")
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise DataError(f"image {img.shape[:2]} smaller than {min_size}")
    if not np.all((img >= 0.0) & (img <= 1.0)):
        raise DataError("pixel values outside [0, 1]")
    return img


# file formats


def _read_ppm(data: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError("malformed PPM header") from exc
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval} (only 8-bit, maxval 255)")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise DataError("truncated PPM pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG":
            raise DataError(f"{path}: not a PNG file")
        if im.mode in ("RGBA", "LA", "PA") or "transparency" in im.info:
            raise DataError(f"{path}: PNG with alpha channel is not supported; save as 8-bit RGB")
        if im.mode != "RGB":
            raise DataError(f"{path}: PNG mode {im.mode} unsupported; expected 8-bit RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_raw(path) -> np.ndarray:
    """Decode a PPM (P6) or PNG file to a uint8 H×W×3 array."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            return _read_png(path)
        return _read_ppm(path.read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def save_ppm(path, img: np.ndarray) -> None:
    px = to_uint8(img)
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def save_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def save_image(path, img: np.ndarray) -> None:
    if str(path).lower().endswith(".png"):
        save_png(path, img)
    else:
        save_ppm(path, img)


def load_image(path, size: int | None = None) -> np.ndarray:
    """Read an image, scale to [0, 1], center-crop to square and resize to ``size``."""
    img = read_raw(path).astype(np.float64) / 255.0
    if size is None:
        return img
    return resize(center_crop(img), size, size)


# geometry


def center_crop(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (no antialiasing)."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# pixel operators


@dataclass(frozen=True)
class PixelOperator:
    kind: str = "identity"  # swap_rb | suppress | grayscale | identity
    channel: int = 2
    alpha: float = 0.9

    def __post_init__(self):
        if self.kind not in ("swap_rb", "suppress", "grayscale", "identity"):
            raise ValueError(f"unknown pixel operator {self.kind!r}")
        if self.kind == "suppress":
            if not 0.0 < self.alpha < 1.0:
                raise ValueError("suppression factor must lie in (0, 1)")
            if self.channel not in (0, 1, 2):
                raise ValueError("channel must be 0, 1 or 2")

    def tag(self) -> str:
        if self.kind == "suppress":
            return f"suppress(ch={self.channel},alpha={self.alpha:g})"
        return self.kind


def grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma replicated into all three channels."""
    y = img @ LUMA
    return np.repeat(y[..., None], 3, axis=-1)


def apply_pixel_op(op: PixelOperator, img: np.ndarray) -> np.ndarray:
    """Apply ``op`` to one image or a batch (last axis = RGB)."""
    if op.kind == "identity":
        return np.array(img, dtype=np.float64)
    if op.kind == "swap_rb":
        return np.array(img[..., ::-1], dtype=np.float64)
    if op.kind == "grayscale":
        return grayscale(img)
    out = np.array(img, dtype=np.float64)
    out[..., op.channel] *= op.alpha
    return out


def augment(img: np.ndarray, seed, *, flip_prob: float = 0.5,
            scale: tuple[float, float] = (0.6, 1.0), jitter: float = 0.2) -> np.ndarray:
    """Random horizontal flip, square crop-resize and per-channel brightness jitter."""
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    out = img
    if rng.random() < flip_prob:
        out = out[:, ::-1]
    s = rng.uniform(*scale)
    ch, cw = max(1, round(s * h)), max(1, round(s * w))
    if (ch, cw) != (h, w):
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = resize(out[top:top + ch, left:left + cw], h, w)
    shift = rng.uniform(-jitter, jitter, size=3) if jitter > 0 else np.zeros(3)
    return np.clip(out + shift, 0.0, 1.0)


# corpus


@dataclass
class Corpus:
    splits: dict[str, list[str]]
    seed: int

    def assert_disjoint(self) -> None:
        names = list(self.splits)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                common = set(self.splits[a]) & set(self.splits[b])
                if common:
                    raise SplitViolation(f"splits {a!r} and {b!r} share {len(common)} file(s)")


@dataclass
class ImageSet:
    """Decoded images of one split, tagged with that split's name."""

    split: str
    ids: list[str]
    pixels: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.ids)

    def require(self, split: str) -> "ImageSet":
        if self.split != split:
            raise SplitViolation(f"expected images from split {split!r}, got {self.split!r}")
        return self

    def subset(self, n: int) -> "ImageSet":
        return ImageSet(self.split, self.ids[:n], self.pixels[:n])


def _rank_key(name: str, seed: int) -> bytes:
    return hashlib.sha256(f"{seed}:{name}".encode()).digest()


def split_corpus(files: Sequence[str], seed: int,
                 fractions: Sequence[float] = (0.5, 0.3, 0.1, 0.1),
                 names: Sequence[str] = SPLITS) -> Corpus:
    """Deterministic disjoint split.

    Files are ordered by a seeded hash of their base name, then cut into
    consecutive blocks whose sizes follow ``fractions`` (largest-remainder
    rounding).
    """
    if not files:
        raise DataError("empty file list")
    if len(fractions) != len(names):
        raise ValueError("one fraction per split name is required")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be nonnegative and sum to 1, got {list(fractions)}")
    if len(set(map(os.path.basename, files))) != len(files):
        raise DataError("duplicate file names in corpus")
    n = len(files)
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    for name, f, s in zip(names, fractions, sizes):
        if f > 0 and s == 0:
            raise DataError(f"too few files ({n}) for split {name!r} at fraction {f}")
    ranked = sorted(files, key=lambda p: _rank_key(os.path.basename(p), seed))
    splits, start = {}, 0
    for name, s in zip(names, sizes):
        splits[name] = sorted(ranked[start:start + s])
        start += s
    return Corpus(splits, seed)


def list_images(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus directory {root} not found")
    files = sorted(str(p) for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no .ppm/.png images in {root}")
    return files


def load_split(corpus: Corpus, split: str, size: int, limit: int | None = None) -> ImageSet:
    files = corpus.splits[split][:limit]
    if not files:
        raise DataError(f"split {split!r} is empty")
    pixels = np.stack([load_image(p, size) for p in files])
    return ImageSet(split, [Path(p).stem for p in files], pixels)


# synthetic corpus

_OBJECTS = {
    "apple": np.array([0.80, 0.10, 0.10]),
    "leaf": np.array([0.15, 0.55, 0.15]),
    "lemon": np.array([0.95, 0.85, 0.15]),
    "plum": np.array([0.45, 0.15, 0.55]),
}


def synth_scene(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """A procedural outdoor scene: sky, ground, sun and a few coloured objects.

    Most object classes have a fixed hue (so colour is predictable from shape
    and position); rectangles take arbitrary colours.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    horizon = rng.uniform(0.35, 0.65)
    sky_top = np.array([0.25, 0.45, 0.85]) + rng.uniform(-0.08, 0.08, 3)
    sky_low = np.array([0.70, 0.82, 0.95]) + rng.uniform(-0.05, 0.05, 3)
    t = np.clip(yy / horizon, 0, 1)[..., None]
    img = sky_top * (1 - t) + sky_low * t
    if rng.random() < 0.75:
        ground = np.array([0.20, 0.55, 0.20])
    else:
        ground = np.array([0.80, 0.70, 0.45])
    ground = ground + rng.uniform(-0.08, 0.08, 3)
    below = (yy >= horizon)[..., None]
    shade = 1.0 - 0.3 * np.clip((yy - horizon) / (1 - horizon), 0, 1)[..., None]
    img = np.where(below, ground * shade, img)
    if rng.random() < 0.5:
        cy, cx = rng.uniform(0.08, horizon * 0.8), rng.uniform(0.1, 0.9)
        r = rng.uniform(0.06, 0.12)
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r)[..., None]
        img = np.where(disc, np.array([1.0, 0.92, 0.35]), img)
    for _ in range(rng.integers(1, 4)):
        kind = rng.choice(["apple", "leaf", "lemon", "plum", "block"])
        cy, cx = rng.uniform(horizon, 0.95), rng.uniform(0.1, 0.9)
        if kind == "block":
            hh, ww = rng.uniform(0.08, 0.25, 2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
            color = rng.uniform(0.05, 0.95, 3)
        else:
            ry, rx = rng.uniform(0.05, 0.12), rng.uniform(0.05, 0.12)
            if kind == "leaf":
                rx *= 0.5
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
            color = np.clip(_OBJECTS[kind] + rng.uniform(-0.06, 0.06, 3), 0, 1)
        img = np.where(mask[..., None], color, img)
    img = img + rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0)


def write_synthetic_corpus(root, n: int, size: int = 32, seed: int = 0) -> list[str]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for k in range(n):
        p = root / f"img_{k:05d}.ppm"
        save_ppm(p, synth_scene(rng, size))
        paths.append(str(p))
    return paths
