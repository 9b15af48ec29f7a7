"""Core pixel-grid value types and shared image operations.

Conventions used throughout the package:

* arrays are indexed ``[row, col]`` == ``[y, x]``; points are ``(x, y)`` pairs
* images are single-channel float grids, nominally in [0, 1] after normalization
* masks are uint8 grids with values in {0, 1}

All value types are immutable: constructors copy their input and freeze the
underlying array, operations return new objects.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel float image. Normalized images live in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("image data must be a non-empty 2-d array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Binary pixel mask, values in {0, 1}, dtype uint8."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("mask data must be a non-empty 2-d array")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        else:
            arr = arr.astype(np.uint8, casting="unsafe")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-pixel foreground probability in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("probability map must be a non-empty 2-d array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("probability map contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("probability values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Ordered frames of one acquisition, optionally with per-frame masks."""

    frames: tuple
    masks: tuple | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a sequence needs at least one frame")
        h, w = frames[0].height, frames[0].width
        for f in frames:
            if (f.height, f.width) != (h, w):
                raise ValueError("all frames must share the same dimensions")
        masks = self.masks
        if masks is not None:
            masks = tuple(masks)
            if len(masks) != len(frames):
                raise ValueError("need exactly one mask per frame")
            for m in masks:
                if (m.height, m.width) != (h, w):
                    raise ValueError("mask dimensions must match the frames")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "masks", masks)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width


@dataclass(frozen=True)
class PixelSpacing:
    """Physical size of one pixel in millimetres."""

    mm_per_px: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.mm_per_px) and self.mm_per_px > 0):
            raise ValueError("mm_per_px must be positive and finite")

    def to_mm(self, px: float) -> float:
        return px * self.mm_per_px


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile of an ascending array (q in [0, 100])."""
    n = sorted_values.size
    idx = int(np.ceil(q / 100.0 * n)) - 1
    return float(sorted_values[min(max(idx, 0), n - 1)])


def normalize_percentile(raw, low: float = 2.0, high: float = 98.0):
    """Map the [low, high] percentile range of ``raw`` onto [0, 1], clamped.

    Returns ``(Image, info)`` where info carries the percentile values and a
    ``degenerate`` flag: when both percentiles coincide the output is all
    zeros.  The mapping is idempotent on its own output.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if isinstance(raw, Image):
        arr = raw.data
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("expected a non-empty 2-d array")
    if not (0.0 <= low < high <= 100.0):
        raise ValueError("percentiles must satisfy 0 <= low < high <= 100")
    flat = np.sort(arr, axis=None)
    lo = nearest_rank(flat, low)
    hi = nearest_rank(flat, high)
    info = {"low_value": lo, "high_value": hi, "degenerate": hi <= lo}
    if info["degenerate"]:
        return Image(np.zeros_like(arr)), info
    out = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    return Image(out), info


# ---------------------------------------------------------------------------
# mask construction
# ---------------------------------------------------------------------------

def dilate_5x5(mask: BinaryMask) -> BinaryMask:
    """Binary dilation by the full 5x5 square (Chebyshev radius 2), clipped
    at the border."""
    a = mask.data
    h, w = a.shape
    padded = np.pad(a, 2)
    out = np.zeros_like(a)
    for dy in range(5):
        for dx in range(5):
            np.maximum(out, padded[dy:dy + h, dx:dx + w], out=out)
    return BinaryMask(out)


def catmull_rom_chain(points, spacing: float = 0.25) -> np.ndarray:
    """Densely sample a centripetal Catmull-Rom spline through ``points``.

    The curve interpolates every control point, including both endpoints
    (end segments use reflected phantom controls).  Returns an (n, 2) float
    array with consecutive samples roughly ``spacing`` apart.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array")
    keep = np.ones(len(pts), bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12
    pts = pts[keep]
    if len(pts) < 2:
        raise ValueError("need at least two distinct points")
    ext = np.vstack([2 * pts[0] - pts[1], pts, 2 * pts[-1] - pts[-2]])
    pieces = [pts[:1]]
    for i in range(len(pts) - 1):
        seg = _cr_segment(ext[i], ext[i + 1], ext[i + 2], ext[i + 3], spacing)
        pieces.append(seg[1:])
    return np.vstack(pieces)


def _cr_segment(p0, p1, p2, p3, spacing):
    # centripetal parameterization: knot spacing = sqrt of chord length
    def step(pa, pb):
        return max(np.sqrt(np.linalg.norm(pb - pa)), 1e-9)

    t0 = 0.0
    t1 = t0 + step(p0, p1)
    t2 = t1 + step(p1, p2)
    t3 = t2 + step(p2, p3)
    n = max(int(np.ceil(np.linalg.norm(p2 - p1) / spacing)), 1) + 1
    t = np.linspace(t1, t2, n)[:, None]

    def lerp(pa, pb, ta, tb):
        w = (t - ta) / (tb - ta)
        return (1.0 - w) * pa + w * pb

    a1 = lerp(p0, p1, t0, t1)
    a2 = lerp(p1, p2, t1, t2)
    a3 = lerp(p2, p3, t2, t3)
    b1 = ((t2 - t) / (t2 - t0)) * a1 + ((t - t0) / (t2 - t0)) * a2
    b2 = ((t3 - t) / (t3 - t1)) * a2 + ((t - t1) / (t3 - t1)) * a3
    return ((t2 - t) / (t2 - t1)) * b1 + ((t - t1) / (t2 - t1)) * b2


def rasterize_curve(points, width: int, height: int) -> BinaryMask:
    """Rasterize the Catmull-Rom spline through ``points`` as a 1-px-wide
    8-connected pixel path.

    Control points must lie inside the image bounds; the interpolated curve
    is clipped to them.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("need an (n >= 2, 2) array of points")
    if (pts[:, 0] < 0).any() or (pts[:, 0] > width - 1).any() \
            or (pts[:, 1] < 0).any() or (pts[:, 1] > height - 1).any():
        raise ValueError("control points must lie inside the image bounds")
    dense = catmull_rom_chain(pts, spacing=0.25)
    dense[:, 0] = np.clip(dense[:, 0], 0, width - 1)
    dense[:, 1] = np.clip(dense[:, 1], 0, height - 1)
    cols = np.rint(dense[:, 0]).astype(int)
    rows = np.rint(dense[:, 1]).astype(int)
    chain = [(cols[0], rows[0])]
    for x, y in zip(cols[1:], rows[1:]):
        px, py = chain[-1]
        if (x, y) == (px, py):
            continue
        for qx, qy in _walk_segment(px, py, x, y):
            chain.append((qx, qy))
    # drop pixels that only round a corner: the rounded samples take two
    # orthogonal steps where the digital line takes one diagonal, which
    # doubles the stroke width along diagonal runs
    i = 1
    while i < len(chain) - 1:
        ax, ay = chain[i - 1]
        bx, by = chain[i + 1]
        if max(abs(ax - bx), abs(ay - by)) <= 1 and (ax, ay) != (bx, by):
            del chain[i]
        else:
            i += 1
    grid = np.zeros((height, width), dtype=np.uint8)
    for x, y in chain:
        grid[y, x] = 1
    return BinaryMask(grid)


def _walk_segment(x0, y0, x1, y1):
    # straight 8-connected walk between two pixels, excluding the start
    n = max(abs(int(x1) - int(x0)), abs(int(y1) - int(y0)))
    for i in range(1, n + 1):
        yield (int(round(x0 + (x1 - x0) * i / n)),
               int(round(y0 + (y1 - y0) * i / n)))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def atomic_write_bytes(path, payload: bytes) -> None:
    """Write a file via a temp name + rename so readers never see a torn
    file."""
    path = Path(path)
    tmp = path.parent / f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink(missing_ok=True)


def read_gray(path) -> np.ndarray:
    """Read a grayscale image file as a float array scaled to [0, 1] by its
    bit depth.  Accepts 8/16-bit PNG and ASCII or binary PGM."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    with _PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        if im.mode == "I":
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64) / 255.0


def _read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a PGM file")
    binary = data[:2] == b"P5"
    # header tokens: magic, width, height, maxval (comments start with '#')
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    width, height, maxval = tokens
    if binary:
        pos += 1
        dtype = ">u2" if maxval > 255 else np.uint8
        arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    else:
        arr = np.array(data[pos:].split(), dtype=np.float64)
        if arr.size != width * height:
            raise ValueError(f"{path}: pixel count mismatch")
    return arr.reshape(height, width).astype(np.float64) / float(maxval)


def load_image(path, normalize: bool = True) -> Image:
    """Load a grayscale image; optionally percentile-normalize it."""
    arr = read_gray(path)
    if normalize:
        img, _ = normalize_percentile(arr)
        return img
    return Image(arr)


def load_mask(path) -> BinaryMask:
    arr = read_gray(path)
    return BinaryMask(arr > 0.5)


def save_image(img: Image, path) -> None:
    """Write an image as 16-bit grayscale PNG (values clipped to [0, 1])."""
    arr = np.clip(img.data, 0.0, 1.0)
    a16 = np.round(arr * 65535.0).astype(np.uint16)
    _save_png(a16, path)


def save_probability_map(pm: ProbabilityMap, path) -> None:
    a16 = np.round(pm.data * 65535.0).astype(np.uint16)
    _save_png(a16, path)


def save_mask(mask: BinaryMask, path) -> None:
    """Write a mask as 8-bit PNG with values {0, 255}."""
    _save_png((mask.data * 255).astype(np.uint8), path)


def save_rgb(arr: np.ndarray, path) -> None:
    """Write an (h, w, 3) uint8 array as an RGB PNG."""
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValueError("expected an (h, w, 3) uint8 array")
    _save_png(a, path)


def _save_png(arr: np.ndarray, path) -> None:
    import io

    buf = io.BytesIO()
    _PILImage.fromarray(arr).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
