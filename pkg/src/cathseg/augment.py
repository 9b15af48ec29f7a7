"""Training-time augmentation: one composed affine warp per sample plus
photometric jitter.

A sample is augmented with probability ``p_augment``; otherwise it passes
through untouched.  When augmenting, a single affine transform (optional
horizontal/vertical flips, rotation, isotropic scale, translation, all about
the image center) is sampled once and applied identically to every frame and
to the mask.  Frames are resampled bilinearly with zero fill outside the
input; the mask is re-binarized at 0.5 after resampling.  Frames then get a
global intensity shift and per-pixel Gaussian noise; the results are NOT
clamped, so frame values may leave [0, 1] by up to the shift range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import BinaryMask, Image


@dataclass(frozen=True)
class AugmentConfig:
    p_augment: float = 0.5
    p_flip: float = 0.5
    rot_deg: float = 9.0
    scale_low: float = 0.9
    scale_high: float = 1.1
    translate_frac: float = 0.16
    intensity_shift: float = 0.07
    noise_sigma: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.p_augment <= 1.0:
            raise ValueError("p_augment must lie in [0, 1]")
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValueError("p_flip must lie in [0, 1]")
        if self.rot_deg < 0 or self.rot_deg > 180:
            raise ValueError("rot_deg must lie in [0, 180]")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("need 0 < scale_low <= scale_high")
        if self.translate_frac < 0 or self.translate_frac >= 1:
            raise ValueError("translate_frac must lie in [0, 1)")
        if self.intensity_shift < 0:
            raise ValueError("intensity_shift must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "p_augment", "p_flip", "rot_deg", "scale_low", "scale_high",
            "translate_frac", "intensity_shift", "noise_sigma")}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augment config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AugmentParams:
    """The concrete draw applied to one sample."""

    flip_h: bool
    flip_v: bool
    angle_deg: float
    scale: float
    tx: float
    ty: float
    shift: float


def warp(arr: np.ndarray, params: AugmentParams, binary: bool = False) -> np.ndarray:
    """Resample one image under the composed affine transform.

    The forward map takes input point p to R(angle) @ S(scale) @ F(flips)
    @ (p - c) + c + t, with c the image center; resampling inverts it.
    Bilinear interpolation, zero outside the source; ``binary`` output is
    thresholded at 0.5.
    """
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("warp expects a 2-d array")
    if params.scale <= 0:
        raise ValueError("scale must be positive")
    if abs(params.angle_deg) > 180:
        raise ValueError("rotation angle out of range")
    h, w = a.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    th = math.radians(params.angle_deg)
    fx = -1.0 if params.flip_h else 1.0
    fy = -1.0 if params.flip_v else 1.0
    s = params.scale
    # forward 2x2: rotation @ scale @ flip
    m00 = math.cos(th) * s * fx
    m01 = -math.sin(th) * s * fy
    m10 = math.sin(th) * s * fx
    m11 = math.cos(th) * s * fy
    det = m00 * m11 - m01 * m10
    i00, i01, i10, i11 = m11 / det, -m01 / det, -m10 / det, m00 / det

    xs = np.arange(w, dtype=np.float64)[None, :] - cx - params.tx
    ys = np.arange(h, dtype=np.float64)[:, None] - cy - params.ty
    u = i00 * xs + i01 * ys + cx
    v = i10 * xs + i11 * ys + cy

    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    wx = u - x0
    wy = v - y0
    out = np.zeros((h, w), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            weight = (wx if dx else (1.0 - wx)) * (wy if dy else (1.0 - wy))
            vals = np.zeros((h, w), dtype=np.float64)
            vals[valid] = a[yi[valid], xi[valid]]
            out += weight * vals
    if binary:
        return (out >= 0.5).astype(np.uint8)
    return out


def draw_params(cfg: AugmentConfig, rng: np.random.Generator,
                width: int, height: int) -> AugmentParams:
    """Sample one transform.  Draw order is fixed (flips, angle, scale,
    translation, intensity shift) so a seeded generator reproduces runs."""
    flip_h = bool(rng.random() < cfg.p_flip)
    flip_v = bool(rng.random() < cfg.p_flip)
    angle = float(rng.uniform(-cfg.rot_deg, cfg.rot_deg))
    scale = float(rng.uniform(cfg.scale_low, cfg.scale_high))
    tx = float(rng.uniform(-cfg.translate_frac, cfg.translate_frac) * width)
    ty = float(rng.uniform(-cfg.translate_frac, cfg.translate_frac) * height)
    shift = float(rng.uniform(-cfg.intensity_shift, cfg.intensity_shift))
    return AugmentParams(flip_h, flip_v, angle, scale, tx, ty, shift)


def augment_arrays(frames: np.ndarray, mask: np.ndarray, cfg: AugmentConfig,
                   rng: np.random.Generator):
    """Augment one (4, h, w) frame stack and its (h, w) mask.

    Returns ``(frames, mask, params)``; params is None when the no-op branch
    was taken.  Geometry is shared between frames and mask; intensity shift
    and noise touch the frames only.
    """
    frames = np.asarray(frames)
    mask = np.asarray(mask)
    if frames.ndim != 3:
        raise ValueError("frames must be (n, h, w)")
    if mask.shape != frames.shape[1:]:
        raise ValueError("mask shape must match the frames")
    if rng.random() >= cfg.p_augment:
        return frames, mask, None
    h, w = mask.shape
    params = draw_params(cfg, rng, w, h)
    out = np.empty_like(frames, dtype=np.float64)
    for k in range(frames.shape[0]):
        out[k] = warp(frames[k], params)
    out += params.shift
    if cfg.noise_sigma > 0:
        out += rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    new_mask = warp(mask.astype(np.float64), params, binary=True)
    return out.astype(frames.dtype, copy=False), new_mask, params


def augment_sample(frames, mask: BinaryMask, cfg: AugmentConfig,
                   rng: np.random.Generator):
    """Image-typed wrapper around :func:`augment_arrays` for a 4-frame
    sample.  Augmented frame values may leave [0, 1], so the frames come
    back as plain arrays; the mask stays a BinaryMask."""
    stack = np.stack([f.data for f in frames])
    new_frames, new_mask, params = augment_arrays(stack, mask.data, cfg, rng)
    return new_frames, BinaryMask(new_mask), params
