"""Synthetic fluoroscopy-like sequences with exact ground truth.

Each sequence is one smooth random curve entering from an image border,
optionally self-intersecting exactly once, rendered dark on a smooth
low-frequency background with additive Gaussian noise. Per frame the curve's
control points jitter to simulate a manoeuvre. Ground-truth masks are built
by rasterizing the curve and dilating with the 5x5 square, exactly the way
training labels are constructed from annotated centerlines.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .centerline import (
    Centerline,
    extract_centerline,
    polyline_length,
    resample_polyline,
    save_centerline_json,
)
from .imagecore import (
    FrameSequence,
    Image,
    ProbabilityMap,
    atomic_write_bytes,
    catmull_rom_chain,
    dilate_5x5,
    load_mask,
    rasterize_curve,
    save_image,
    save_mask,
)

BACKGROUND_LEVEL = 0.55
# distance from the image edge to the entry endpoint: one dilation radius,
# so the rendered stroke cap reaches the border without being clipped flat
ENTRY_INSET = 2.0


def _range_pair(value, name):
    pair = tuple(float(v) for v in value)
    if len(pair) != 2 or not all(np.isfinite(pair)) or pair[0] > pair[1]:
        raise ValueError(f"{name} must be a (low, high) pair with low <= high")
    return pair


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    frames_per_seq: int = 4
    n_control_points: tuple = (4, 8)
    motion_px: tuple = (0.5, 1.5)
    catheter_intensity: tuple = (0.25, 0.45)
    background_texture_scale: float = 0.12
    noise_sigma: float = 0.02
    loop_probability: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if self.frames_per_seq < 1:
            raise ValueError("frames_per_seq must be at least 1")
        ncp = tuple(int(v) for v in self.n_control_points)
        if len(ncp) != 2 or ncp[0] < 3 or ncp[0] > ncp[1]:
            raise ValueError("n_control_points must be a (min >= 3, max) pair")
        object.__setattr__(self, "n_control_points", ncp)
        motion = _range_pair(self.motion_px, "motion_px")
        if motion[0] < 0:
            raise ValueError("motion_px must be non-negative")
        object.__setattr__(self, "motion_px", motion)
        inten = _range_pair(self.catheter_intensity, "catheter_intensity")
        if not 0.0 < inten[0] <= inten[1] < 1.0:
            raise ValueError("catheter_intensity must lie in (0, 1)")
        object.__setattr__(self, "catheter_intensity", inten)
        if self.background_texture_scale < 0 or self.noise_sigma < 0:
            raise ValueError("texture scale and noise sigma must be non-negative")
        if not 0.0 <= self.loop_probability <= 1.0:
            raise ValueError("loop_probability must lie in [0, 1]")
        # a self-intersecting curve needs room: the ring, a 35 px run-in and
        # run-out on either side of the crossing, and the bend-radius floor
        # do not fit below 112 px, and rejection sampling would exhaust its
        # attempts on most draws
        if self.loop_probability > 0.0 and self.image_size < 112:
            raise ValueError(
                "loop_probability > 0 requires image_size >= 112; "
                "set loop_probability=0.0 for smaller images")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "frames_per_seq": self.frames_per_seq,
            "n_control_points": list(self.n_control_points),
            "motion_px": list(self.motion_px),
            "catheter_intensity": list(self.catheter_intensity),
            "background_texture_scale": self.background_texture_scale,
            "noise_sigma": self.noise_sigma,
            "loop_probability": self.loop_probability,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("n_control_points", "motion_px", "catheter_intensity"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class SynthSequence:
    """One generated sequence: frames + masks plus the exact ground truth.

    ``centerlines`` holds one sub-pixel (x, y) point array per frame, tip
    first (the tip is the interior end; the last point sits at the image
    edge, inset by the stroke half-width so the rendered cap just reaches
    the border).
    """

    sequence: FrameSequence
    centerlines: tuple
    has_loop: bool

    def __len__(self) -> int:
        return len(self.sequence)


# ---------------------------------------------------------------------------
# curve construction
# ---------------------------------------------------------------------------

def _border_distances(pts: np.ndarray, size: int) -> np.ndarray:
    return np.minimum.reduce([pts[:, 0], pts[:, 1],
                              size - 1 - pts[:, 0], size - 1 - pts[:, 1]])


def _count_crossings(pts: np.ndarray) -> int:
    """Number of proper self-intersections of a polyline, counted on a
    ~1.5 px resampling so segment count stays moderate."""
    p = resample_polyline(pts, 1.5)
    a, b = p[:-1], p[1:]
    n = len(a)
    if n < 3:
        return 0
    ii, jj = np.triu_indices(n, k=2)

    def cross(o, u, v):
        return (u[:, 0] - o[:, 0]) * (v[:, 1] - o[:, 1]) \
            - (u[:, 1] - o[:, 1]) * (v[:, 0] - o[:, 0])

    p1, p2 = a[ii], b[ii]
    q1, q2 = a[jj], b[jj]
    d1 = cross(p1, p2, q1)
    d2 = cross(p1, p2, q2)
    d3 = cross(q1, q2, p1)
    d4 = cross(q1, q2, p2)
    proper = (np.sign(d1) * np.sign(d2) < 0) & (np.sign(d3) * np.sign(d4) < 0)
    return int(np.count_nonzero(proper))


def _far_contacts(p: np.ndarray, radius: float = 7.0):
    """Spatially close but arc-distant index pairs of a 1 px resampled
    curve, as (earlier index, later index) arrays.

    ``radius`` covers the reach of the 5x5 dilation: two curve parts
    closer than this render as one fused stroke.  Pairs up to 9 px apart
    along the curve are the curve passing itself by bending, not two
    separate parts, and are skipped; anything beyond that within the
    radius is a genuine contact (a hairpin tighter than the tube width
    shows up here too).  Returns None when there is no contact.
    """
    pairs = cKDTree(p).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return None
    lo = np.minimum(pairs[:, 0], pairs[:, 1]).astype(np.float64)
    hi = np.maximum(pairs[:, 0], pairs[:, 1]).astype(np.float64)
    keep = (hi - lo) > 9.0
    if not keep.any():
        return None
    return lo[keep], hi[keep]


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _sample_control_points(cfg: SynthConfig, rng, with_loop: bool):
    """One attempt at a control polygon: border entry point, inward random
    walk, optionally a full circle of control points spliced mid-walk to
    force exactly one self-intersection."""
    size = cfg.image_size
    lo_n, hi_n = cfg.n_control_points
    n_ctrl = int(rng.integers(lo_n, hi_n + 1))
    side = int(rng.integers(4))
    along = float(rng.uniform(0.2, 0.8)) * (size - 1)
    # the entry endpoint sits one dilation radius inside the edge: the mask
    # cap then reaches the border without being clipped flat, so thinning
    # keeps the medial line all the way to the endpoint instead of
    # retracting by half the stroke width
    inset = ENTRY_INSET
    if side == 0:
        entry, heading = np.array([inset, along]), 0.0
    elif side == 1:
        entry, heading = np.array([size - 1.0 - inset, along]), math.pi
    elif side == 2:
        entry, heading = np.array([along, inset]), math.pi / 2
    else:
        entry, heading = np.array([along, size - 1.0 - inset]), -math.pi / 2
    heading += float(rng.uniform(-0.5, 0.5))
    margin = 0.1 * size
    center = np.array([size / 2.0, size / 2.0])
    loop_at = int(rng.integers(2, max(3, n_ctrl - 2))) if with_loop else -1
    loop_dir = 1.0 if rng.random() < 0.5 else -1.0
    # radius floor keeps the ring long enough that the extractor's spline
    # (one control point per 10 px) can follow it without cutting corners
    loop_r = float(rng.uniform(0.11, 0.16)) * size

    pts = [entry]
    cur = entry
    for k in range(1, n_ctrl):
        step = float(rng.uniform(0.16, 0.28)) * size
        turn = float(rng.uniform(-0.9, 0.9)) if k > 1 else 0.0
        heading += turn
        nxt = cur + step * _unit(heading)
        tries = 0
        while tries < 8 and _border_distances(nxt[None], size)[0] < margin:
            # steer toward the image center to stay inside
            to_center = math.atan2(*(center - cur)[::-1])
            heading += 0.5 * ((to_center - heading + math.pi) % (2 * math.pi) - math.pi)
            nxt = cur + step * _unit(heading)
            tries += 1
        pts.append(nxt)
        cur = nxt
        if k == loop_at:
            # circle swept short of a full turn; the exit then cuts back
            # across the inflow, so the self-crossing is transversal (a
            # tangent retrace would fuse into one stroke when rendered)
            incoming = _unit(heading)
            normal = loop_dir * np.array([-incoming[1], incoming[0]])
            c = cur + loop_r * normal
            a0 = math.atan2(*(cur - c)[::-1])
            sweep = 2 * math.pi - float(rng.uniform(0.9, 1.3))
            for j in range(1, 7):
                a = a0 + loop_dir * sweep * j / 6.0
                pts.append(c + loop_r * _unit(a))
            cur = pts[-1]
            heading += loop_dir * sweep
    return np.array(pts)


def _curve_ok(dense: np.ndarray, size: int, want_loop: bool) -> bool:
    if (dense < 0).any() or (dense > size - 1).any():
        return False
    arc = float(np.linalg.norm(np.diff(dense, axis=0), axis=1).sum())
    # absolute floor on top of the relative one: the smoothing spline puts
    # one control point per 10 px with a floor of 4, so a curve much under
    # ~70 px is fit by one or two cubic spans and cuts its corners
    if not max(0.55 * size, 72.0) <= arc <= 4.0 * size:
        return False
    bd = _border_distances(dense, size)
    # the only border contact is the entry end
    seg = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    if (bd[seg > 8.0] < 2.0).any():
        return False
    tip_margin = max(4.0, 0.1 * size)
    if bd[-1] < tip_margin or bd[-1] <= bd[0]:
        return False
    crossings = _count_crossings(dense)
    if crossings != (1 if want_loop else 0):
        return False
    p = resample_polyline(dense, 1.0)
    # smoothness gate: a bend tighter than the stroke half-width renders as
    # a fused blob whose skeleton cuts the corner, so cap the tangent turn
    # over any 4 px arc window; the self-intersection ring stays well under
    # the cap by its radius floor
    t = np.diff(p, axis=0)
    t /= np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    if len(t) > 4 and (t[:-4] * t[4:]).sum(axis=1).min() < math.cos(math.radians(40.0)):
        return False
    contacts = _far_contacts(p)
    if want_loop:
        if contacts is None:
            return False
        lo, hi = contacts
        # all near-contacts must belong to one compact transversal
        # crossing; a wider spread means a strand runs tangent to another
        # (or hairpins into itself), which renders as a fused stroke no
        # thinning can separate
        if max(float(np.ptp(lo)), float(np.ptp(hi))) > 16.0:
            return False
        # same failure mode, finer signature: contacts where the two
        # strands run within ~30 degrees of parallel are a graze, not a
        # crossing, even when confined to a compact region
        v = p[2:] - p[:-2]
        tang = v / np.linalg.norm(v, axis=1, keepdims=True)
        ti = tang[np.clip(lo.astype(int) - 1, 0, len(tang) - 1)]
        tj = tang[np.clip(hi.astype(int) - 1, 0, len(tang) - 1)]
        if (np.abs((ti * tj).sum(axis=1)) > math.cos(math.pi / 6)).any():
            return False
        # the tails on either side of the crossing must outlive the
        # extractor's short-side-branch pruning (threshold 30 px)
        if float(lo.min()) < 35.0 or (len(p) - 1) - float(hi.max()) < 35.0:
            return False
    elif contacts is not None:
        return False
    return True


def _make_base_curve(cfg: SynthConfig, rng, with_loop: bool):
    for _ in range(240):
        cps = _sample_control_points(cfg, rng, with_loop)
        dense = catmull_rom_chain(cps, spacing=0.25)
        if _curve_ok(dense, cfg.image_size, with_loop):
            return cps
    raise RuntimeError("could not sample a valid synthetic curve; "
                       "loosen the config ranges")


def _jitter_points(cps: np.ndarray, cfg: SynthConfig, rng) -> np.ndarray:
    lo, hi = cfg.motion_px
    mag = rng.uniform(lo, hi, len(cps))
    ang = rng.uniform(0.0, 2 * math.pi, len(cps))
    out = cps + mag[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # keep the entry end pinned to its edge at the fixed inset
    size = cfg.image_size
    entry = cps[0]
    moved = out[0].copy()
    if entry[0] == ENTRY_INSET or entry[0] == size - 1.0 - ENTRY_INSET:
        moved[0] = entry[0]
        moved[1] = np.clip(moved[1], 1.0, size - 2.0)
    else:
        moved[1] = entry[1]
        moved[0] = np.clip(moved[0], 1.0, size - 2.0)
    out[0] = moved
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _render_background(size: int, scale: float, rng) -> np.ndarray:
    """Smooth anatomy-like background: base level plus 3 to 5 random
    low-frequency cosine gratings with amplitudes summing to ``scale``."""
    bg = np.full((size, size), BACKGROUND_LEVEL)
    if scale <= 0:
        return bg
    k = int(rng.integers(3, 6))
    amps = rng.uniform(0.4, 1.0, k)
    amps *= scale / amps.sum()
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1.0)
    for i in range(k):
        freq = float(rng.uniform(0.5, 2.0))
        theta = float(rng.uniform(0.0, 2 * math.pi))
        phase = float(rng.uniform(0.0, 2 * math.pi))
        proj = xs * math.cos(theta) + ys * math.sin(theta)
        bg += amps[i] * np.cos(2 * math.pi * freq * proj + phase)
    return bg


def _render_frame(dense: np.ndarray, bg: np.ndarray, depth: float,
                  sigma: float, noise_sigma: float, rng) -> Image:
    size = bg.shape[0]
    tree = cKDTree(resample_polyline(dense, 0.5))
    ys, xs = np.mgrid[0:size, 0:size]
    query = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    dist, _ = tree.query(query)
    profile = depth * np.exp(-(dist ** 2) / (2.0 * sigma * sigma))
    img = bg - profile.reshape(size, size)
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return Image(np.clip(img, 0.0, 1.0))


# ---------------------------------------------------------------------------
# sequence and dataset generation
# ---------------------------------------------------------------------------

def _recoverable(mask, dense: np.ndarray, has_loop: bool) -> bool:
    """Round-trip gate: the noise-free mask must come back out of the
    extraction pipeline close to the curve that drew it.

    Geometric screens alone cannot predict the rare pathological
    interactions between a bend, the pixel grid and the smoothing spline,
    so the generator simply runs the pipeline and keeps only curves it can
    recover.  Open curves must round-trip within a 2 px Hausdorff bound;
    looped curves must come back as a single chain of nearly the same arc
    length with the tip in place.
    """
    res = extract_centerline(ProbabilityMap(mask.data.astype(np.float64)))
    if res is None or len(res.points) < 4:
        return False
    gt = resample_polyline(dense, 1.0)
    pr = res.points
    tip = float(np.linalg.norm(pr[0] - gt[0]))
    if has_loop:
        ratio = polyline_length(pr) / max(polyline_length(gt), 1e-9)
        return abs(ratio - 1.0) <= 0.04 and tip <= 3.0
    d1 = float(cKDTree(pr).query(gt)[0].max())
    d2 = float(cKDTree(gt).query(pr)[0].max())
    return max(d1, d2) <= 2.0 and tip <= 2.5


def generate_sequence(cfg: SynthConfig, rng) -> SynthSequence:
    """Generate one sequence: sample a valid curve (bounded rejection until
    the self-intersection count matches the drawn topology and the drawn
    mask survives the round-trip gate), jitter it per frame, render frames,
    and build masks by rasterize + dilate."""
    size = cfg.image_size
    has_loop = bool(rng.random() < cfg.loop_probability)
    for _ in range(20):
        base = _make_base_curve(cfg, rng, has_loop)
        dense0 = catmull_rom_chain(base, spacing=0.25)[::-1]  # tip first
        mask0 = dilate_5x5(rasterize_curve(dense0, size, size))
        if _recoverable(mask0, dense0, has_loop):
            break
    else:
        raise RuntimeError("could not sample a recoverable synthetic curve; "
                           "loosen the config ranges")
    bg = _render_background(size, cfg.background_texture_scale, rng)
    depth = float(rng.uniform(*cfg.catheter_intensity))
    sigma = float(rng.uniform(2.0, 3.0))

    frames, masks, centerlines = [], [], []
    cps, dense, mask = base, dense0, mask0
    for f in range(cfg.frames_per_seq):
        if f > 0 and cfg.motion_px[1] > 0:
            for _ in range(25):
                cand = _jitter_points(cps, cfg, rng)
                d = catmull_rom_chain(cand, spacing=0.25)
                if not _curve_ok(d, size, has_loop):
                    continue
                d = d[::-1]  # tip first
                m = dilate_5x5(rasterize_curve(d, size, size))
                if _recoverable(m, d, has_loop):
                    cps, dense, mask = cand, d, m
                    break
            # on exhaustion the previous frame's curve is reused
        frames.append(_render_frame(dense, bg, depth, sigma, cfg.noise_sigma, rng))
        masks.append(mask)
        centerlines.append(dense)
    return SynthSequence(
        sequence=FrameSequence(tuple(frames), tuple(masks)),
        centerlines=tuple(centerlines),
        has_loop=has_loop,
    )


def _write_sequence(seq_dir: Path, seq: SynthSequence) -> None:
    seq_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.sequence.frames):
        save_image(frame, seq_dir / f"frame_{i}.png")
        save_mask(seq.sequence.masks[i], seq_dir / f"mask_{i}.png")
        save_centerline_json(Centerline(seq.centerlines[i]),
                             seq.sequence.width, seq.sequence.height,
                             seq_dir / f"centerline_{i}.json")


def generate_dataset(cfg: SynthConfig, out_dir, n_sequences: int,
                     threads: int = 1) -> Path:
    """Write ``n_sequences`` sequences under ``out_dir`` plus a manifest.

    Per-sequence generators are spawned from the master seed, so output is
    identical for any thread count. Returns the manifest path.
    """
    if n_sequences < 1:
        raise ValueError("need at least one sequence")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(cfg.seed).spawn(n_sequences)

    def make(i: int) -> tuple:
        seq = generate_sequence(cfg, np.random.default_rng(children[i]))
        seq_id = f"seq_{i:04d}"
        _write_sequence(out / seq_id, seq)
        return seq_id, seq.has_loop

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(make, range(n_sequences)))
    else:
        entries = [make(i) for i in range(n_sequences)]
    manifest = {
        "config": cfg.to_dict(),
        "n_sequences": n_sequences,
        "sequences": [{"id": sid, "has_loop": loop} for sid, loop in entries],
    }
    path = out / "manifest.json"
    atomic_write_bytes(path, json.dumps(manifest, indent=2).encode("utf-8"))
    return path


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = (".png", ".pgm")


def read_manifest(root) -> dict | None:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sequence_dirs(root) -> list:
    """Sequence subdirectories of a dataset root, sorted by name. A root
    that itself contains frames counts as one single-sequence dataset."""
    root = Path(root)
    subs = sorted(p for p in root.iterdir() if p.is_dir() and _frame_files(p))
    if subs:
        return subs
    if _frame_files(root):
        return [root]
    return []


def _frame_files(seq_dir: Path) -> list:
    named = []
    for p in seq_dir.iterdir():
        if p.suffix.lower() not in _IMAGE_SUFFIXES or not p.stem.startswith("frame_"):
            continue
        try:
            named.append((int(p.stem.split("_", 1)[1]), p))
        except ValueError:
            continue
    if named:
        return [p for _, p in sorted(named)]
    return sorted(p for p in seq_dir.iterdir()
                  if p.suffix.lower() in _IMAGE_SUFFIXES
                  and not p.stem.startswith("mask_"))


def load_sequence_arrays(seq_dir, normalize: bool, with_masks: bool):
    """Load one sequence directory into float frame and uint8 mask stacks.

    ``normalize`` applies percentile normalization (for raw imports);
    generated datasets are stored already normalized. Masks are looked up as
    mask_<i>.png next to frame_<i>.png and are never normalized.
    """
    from .imagecore import load_image

    seq_dir = Path(seq_dir)
    files = _frame_files(seq_dir)
    if not files:
        raise FileNotFoundError(f"{seq_dir}: no frame images found")
    frames = [load_image(p, normalize=normalize).data for p in files]
    frames = np.stack(frames).astype(np.float64)
    masks = None
    if with_masks:
        mask_files = [p.parent / f"mask_{p.stem.split('_', 1)[1]}.png" for p in files]
        if all(p.exists() for p in mask_files):
            masks = np.stack([load_mask(p).data for p in mask_files])
        else:
            missing = [str(p) for p in mask_files if not p.exists()]
            raise FileNotFoundError(f"missing masks: {missing[:3]}")
    return frames, masks


__all__ = [
    "BACKGROUND_LEVEL",
    "SynthConfig",
    "SynthSequence",
    "generate_sequence",
    "generate_dataset",
    "read_manifest",
    "sequence_dirs",
    "load_sequence_arrays",
]
