"""Centerline extraction from a per-pixel probability map.

Pipeline: threshold -> Zhang-Suen thinning -> branch decomposition at
skeleton junctions -> two passes of (connect nearby branches, re-join for
maximal chain length, merge loops by crossing direction), the second pass
with a larger connection radius -> close or discard the remaining side
branches -> pick the longest chain, orient it tip-first, smooth with a
least-squares cubic B-spline and resample at 1 px arc spacing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_lsq_spline
from scipy.spatial import cKDTree

from .imagecore import BinaryMask, ProbabilityMap, atomic_write_bytes


@dataclass(frozen=True)
class ExtractParams:
    """Tuning constants for the extraction pipeline (all in pixels)."""

    prob_threshold: float = 0.01
    link_dist: float = 5.0
    link_dist_far: float = 20.0
    min_loop_len: float = 30.0

    def __post_init__(self):
        if not 0.0 < self.prob_threshold <= 1.0:
            raise ValueError("prob_threshold must lie in (0, 1]")
        if not 0.0 < self.link_dist <= self.link_dist_far:
            raise ValueError("need 0 < link_dist <= link_dist_far")
        if self.min_loop_len <= 0:
            raise ValueError("min_loop_len must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "prob_threshold", "link_dist", "link_dist_far", "min_loop_len")}

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractParams":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown extract config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Connection:
    """Closest point pair between two branches: indices into the branch
    list, point indices within each branch, Euclidean gap."""

    a: int
    ia: int
    b: int
    ib: int
    dist: float


@dataclass
class BranchGraph:
    """Pixel chains plus the connections found between them.

    ``branches`` holds (n, 2) integer (x, y) arrays.  Raw skeleton branches
    are 8-connected with no repeated pixel; linked chains may contain jumps
    up to the connection radius and, after loop closure, revisited pixels.
    """

    branches: list = field(default_factory=list)
    connections: list = field(default_factory=list)
    connect_dist: float | None = None


@dataclass(frozen=True, eq=False)
class Centerline:
    """Ordered sub-pixel centerline points; the tip is the first point."""

    points: np.ndarray  # (n, 2) float (x, y)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("centerline needs an (n >= 2, 2) point array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("centerline points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def tip(self) -> np.ndarray:
        return self.points[0]

    def arc_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


# ---------------------------------------------------------------------------
# thresholding and thinning
# ---------------------------------------------------------------------------

def threshold(pm: ProbabilityMap, prob_threshold: float) -> BinaryMask:
    """Foreground mask of pixels with probability >= prob_threshold."""
    if not 0.0 < prob_threshold <= 1.0:
        raise ValueError("prob_threshold must lie in (0, 1]")
    return BinaryMask(pm.data >= prob_threshold)


# neighbor offsets in Zhang-Suen order P2..P9: N, NE, E, SE, S, SW, W, NW
_ZS_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def skeletonize(mask: BinaryMask) -> BinaryMask:
    """Zhang-Suen two-subiteration thinning (Zhang & Suen, 1984).

    Each subiteration evaluates all conditions on the current image and
    deletes the flagged pixels simultaneously; iterates until stable.
    Runs on the coordinate list of foreground pixels, so cost scales with
    the foreground size rather than the full grid.
    """
    grid = np.pad(mask.data.astype(np.uint8), 1)
    ys, xs = np.nonzero(grid)
    while True:
        changed = False
        for step in (0, 1):
            if ys.size == 0:
                break
            neigh = np.empty((8, ys.size), dtype=np.uint8)
            for k, (dy, dx) in enumerate(_ZS_OFFSETS):
                neigh[k] = grid[ys + dy, xs + dx]
            count = neigh.sum(axis=0, dtype=np.int32)
            nxt = np.roll(neigh, -1, axis=0)
            transitions = ((neigh == 0) & (nxt == 1)).sum(axis=0, dtype=np.int32)
            p2, p4, p6, p8 = neigh[0], neigh[2], neigh[4], neigh[6]
            cond = (count >= 2) & (count <= 6) & (transitions == 1)
            if step == 0:
                cond &= (p2 & p4 & p6) == 0
                cond &= (p4 & p6 & p8) == 0
            else:
                cond &= (p2 & p4 & p8) == 0
                cond &= (p2 & p6 & p8) == 0
            if cond.any():
                grid[ys[cond], xs[cond]] = 0
                keep = ~cond
                ys, xs = ys[keep], xs[keep]
                changed = True
        if not changed:
            break
    return BinaryMask(grid[1:-1, 1:-1])


# ---------------------------------------------------------------------------
# branch decomposition
# ---------------------------------------------------------------------------

# orthogonal neighbors first so chain walks hug the pixel path
_N8 = ((-1, 0), (0, -1), (0, 1), (1, 0), (-1, -1), (-1, 1), (1, -1), (1, 1))


def _neighbor_counts(grid: np.ndarray) -> np.ndarray:
    """Number of foreground pixels in each pixel's 8-neighborhood."""
    padded = np.pad(grid.astype(np.int32), 1)
    h, w = grid.shape
    out = np.zeros((h, w), dtype=np.int32)
    for dy, dx in _N8:
        out += padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return out


def extract_branches(skel: BinaryMask) -> BranchGraph:
    """Decompose a thin skeleton into junction-free 8-connected chains.

    A pixel with three or more skeleton neighbors is a junction pixel and
    belongs to no branch; the remaining pixels form simple chains (isolated
    pixels become single-pixel branches, closed rings one open chain).

    Counting neighbors rather than distinct arms makes the rule sweep out
    whole junction clusters, thinning leftovers included (a 2x2 remnant at
    a symmetric crossing, the blob where one stroke tangentially absorbs
    another).  Crossing strands then separate into clean stubs instead of
    one strand walking straight through the cluster, which is what the
    later re-linking stages assume.  Anything thicker than such remnants
    (a 3x3 block, which thinning can never leave behind) raises.
    """
    grid = skel.data
    if len(grid) >= 3 and grid.shape[1] >= 3:
        solid3 = grid[:-2, :-2]
        for dy in range(3):
            for dx in range(3):
                solid3 = solid3 & grid[dy:dy + grid.shape[0] - 2,
                                       dx:dx + grid.shape[1] - 2]
        if solid3.any():
            raise ValueError("input is not a thinned skeleton: "
                             "found a solid 3x3 block")
    chain = (grid == 1) & (_neighbor_counts(grid) < 3)
    h, w = grid.shape

    def chain_neighbors(y, x):
        out = []
        for dy, dx in _N8:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and chain[yy, xx]:
                out.append((yy, xx))
        return out

    visited = np.zeros_like(chain)
    branches = []

    def walk(y, x):
        # follow the chain from an endpoint (or around a ring)
        path = [(x, y)]
        visited[y, x] = True
        cur = (y, x)
        prev = None
        while True:
            nxt = None
            for yy, xx in chain_neighbors(*cur):
                if (yy, xx) != prev and not visited[yy, xx]:
                    nxt = (yy, xx)
                    break
            if nxt is None:
                break
            visited[nxt] = True
            path.append((nxt[1], nxt[0]))
            prev, cur = cur, nxt
        return np.array(path, dtype=np.int64)

    ys, xs = np.nonzero(chain)
    degree = {}
    for y, x in zip(ys, xs):
        degree[(y, x)] = len(chain_neighbors(y, x))
    # endpoints first so chains start at their natural ends
    for (y, x), deg in degree.items():
        if deg <= 1 and not visited[y, x]:
            branches.append(walk(y, x))
    for (y, x), deg in degree.items():
        if not visited[y, x]:  # leftover pixels belong to closed rings
            branches.append(walk(y, x))
    return BranchGraph(branches=branches)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def polyline_length(pts: np.ndarray) -> float:
    if len(pts) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts.astype(np.float64), axis=0), axis=1).sum())


def _closest_pair(pa: np.ndarray, pb: np.ndarray):
    """Indices and distance of the closest point pair between two chains."""
    if len(pa) * len(pb) <= 40000:
        d = np.linalg.norm(pa[:, None, :].astype(np.float64)
                           - pb[None, :, :].astype(np.float64), axis=2)
        k = int(np.argmin(d))
        ia, ib = divmod(k, len(pb))
        return ia, ib, float(d[ia, ib])
    tree = cKDTree(pb.astype(np.float64))
    dists, idx = tree.query(pa.astype(np.float64))
    ia = int(np.argmin(dists))
    return ia, int(idx[ia]), float(dists[ia])


def _tangent(pts: np.ndarray, at_end: bool, window: int = 5) -> np.ndarray:
    """Unit travel direction at a chain end, from a least-squares line fit
    over the last ``window`` + 1 points (direction points out of the chain
    at the tail end, into the chain at the head)."""
    p = pts.astype(np.float64)
    seg = p[-(window + 1):] if at_end else p[:window + 1]
    if len(seg) < 2:
        return np.zeros(2)
    centered = seg - seg.mean(axis=0)
    # principal axis of the window
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    d = vt[0]
    ref = seg[-1] - seg[0]
    if np.dot(d, ref) < 0:
        d = -d
    n = np.linalg.norm(d)
    return d / n if n > 0 else np.zeros(2)


def _turn(u: np.ndarray, v: np.ndarray) -> float:
    """Angle in radians between an incoming and an outgoing direction
    (0 = straight continuation)."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    c = float(np.dot(u, v) / (nu * nv))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# linking
# ---------------------------------------------------------------------------

def find_connections(g: BranchGraph, dist: float) -> BranchGraph:
    """Record the closest point pair of every branch pair that comes within
    ``dist`` pixels; at most one connection per unordered pair."""
    if dist <= 0:
        raise ValueError("connection distance must be positive")
    conns = []
    br = g.branches
    for i in range(len(br)):
        for j in range(i + 1, len(br)):
            ia, ib, d = _closest_pair(br[i], br[j])
            if d <= dist:
                conns.append(Connection(i, ia, j, ib, d))
    return BranchGraph(branches=list(br), connections=conns, connect_dist=dist)


def _join(head: np.ndarray, tail: np.ndarray) -> np.ndarray:
    if len(head) == 0:
        return tail
    if len(tail) == 0:
        return head
    return np.concatenate([head, tail])


def _split_at(c: np.ndarray, i: int):
    """Split a chain at pixel ``i``, keeping that pixel at the cut.

    A cut at the first pixel is a no-op (empty half plus the whole chain)
    so an endpoint connection welds the full chain instead of stranding
    its end pixel; elsewhere the pixel stays with the leading half.  The
    pixel multiset is conserved either way.
    """
    if i == 0:
        return c[:0], c
    return c[:i + 1], c[i + 1:]


def _pairings(a: np.ndarray, ia: int, b: np.ndarray, ib: int):
    """Enumerate the re-join options at a connection.

    Both chains are split at the connection points and the four
    half-chains are re-joined across the connection.  Yields
    (label, chains) with label "identity", "head-head" or "head-tail".
    """
    a1, a2 = _split_at(a, ia)
    b1, b2 = _split_at(b, ib)
    yield "identity", [a, b]
    # a1 ends at the connection, b1 reversed starts at it
    yield "head-head", [_join(a1, b1[::-1]), _join(a2[::-1], b2)]
    yield "head-tail", [_join(a1, b2), _join(b1, a2)]


def _pairing_turn(label: str, a, ia, b, ib) -> float:
    a1, a2 = _split_at(a, ia)
    b1, b2 = _split_at(b, ib)
    if label == "head-head":
        t = _turn(_tangent(a1, True), -_tangent(b1, True)) if len(a1) > 1 and len(b1) > 1 else 0.0
        t += _turn(-_tangent(a2, False), _tangent(b2, False)) if len(a2) > 1 and len(b2) > 1 else 0.0
        return t
    if label == "head-tail":
        t = _turn(_tangent(a1, True), _tangent(b2, False)) if len(a1) > 1 and len(b2) > 1 else 0.0
        t += _turn(_tangent(b1, True), _tangent(a2, False)) if len(b1) > 1 and len(a2) > 1 else 0.0
        return t
    return 0.0


def _best_pairing(a: np.ndarray, ia: int, b: np.ndarray, ib: int):
    """Best re-join of two branches at their closest point pair.

    Returns (gain flag, replacement chains).  The identity (no re-join) is
    the baseline and wins ties, so short stubs crossing a long chain do not
    cut it; among genuine re-joins the longest resulting chain wins, with
    smaller total turning angle at the joins as tie-break.
    """
    base_len = max(polyline_length(a), polyline_length(b))
    best = None  # (length, turn, chains)
    for label, chains in _pairings(a, ia, b, ib):
        if label == "identity":
            continue
        chains = [c for c in chains if len(c) > 0]
        longest = max(polyline_length(c) for c in chains)
        if longest <= base_len + 1e-9:
            continue
        turn = _pairing_turn(label, a, ia, b, ib)
        if best is None or longest > best[0] + 1e-9 or \
                (abs(longest - best[0]) <= 1e-9 and turn < best[1] - 1e-12):
            best = (longest, turn, chains)
    if best is None:
        return False, [a, b]
    return True, best[2]


def _is_loop_branch(pts: np.ndarray, dist: float, arc_min: float) -> bool:
    """True when a branch closes onto itself: its own endpoints nearly meet
    while the path between them is long."""
    if len(pts) < 4:
        return False
    gap = float(np.linalg.norm((pts[0] - pts[-1]).astype(np.float64)))
    return gap <= dist and polyline_length(pts) >= arc_min


def link_longest(g: BranchGraph, loop_defer_arc: float | None = None,
                 loop_defer_gap: float | None = None) -> BranchGraph:
    """Re-join connected branches into maximal chains.

    For every pair of branches that come within the connection distance,
    both are split at their contact points and the halves re-joined into
    whichever pairing yields the longest single chain.  Pairs are processed
    closest first and the scan restarts after every merge, until no re-join
    gains length.

    Branches that close onto themselves (arc at least ``loop_defer_arc``,
    endpoint gap at most ``loop_defer_gap``) are left alone here: a
    pairwise re-join can only weld a loop wrongly, while the loop merge
    step splices it whole into its host chain.  The gap tolerance accepts
    the width of the junction cluster the thinning left at the crossing,
    which can well exceed the first-pass connection distance.
    """
    if g.connect_dist is None:
        raise ValueError("run find_connections first")
    dist = g.connect_dist
    if loop_defer_arc is None:
        loop_defer_arc = 6.0 * dist
    if loop_defer_gap is None:
        loop_defer_gap = dist
    branches = list(g.branches)
    settled = set()  # id pairs where identity won
    for _ in range(10 * len(branches) + 50):
        candidates = []
        for i in range(len(branches)):
            if _is_loop_branch(branches[i], loop_defer_gap, loop_defer_arc):
                continue
            for j in range(i + 1, len(branches)):
                if _is_loop_branch(branches[j], loop_defer_gap, loop_defer_arc):
                    continue
                key = frozenset((id(branches[i]), id(branches[j])))
                if key in settled:
                    continue
                ia, ib, d = _closest_pair(branches[i], branches[j])
                if d <= dist:
                    candidates.append((d, i, j, ia, ib))
        if not candidates:
            break
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        merged = False
        for d, i, j, ia, ib in candidates:
            a, b = branches[i], branches[j]
            gained, chains = _best_pairing(a, ia, b, ib)
            if not gained:
                settled.add(frozenset((id(a), id(b))))
                continue
            rest = [branches[k] for k in range(len(branches)) if k not in (i, j)]
            branches = rest + [c for c in chains if len(c) > 0]
            merged = True
            break
        if not merged:
            break
    return BranchGraph(branches=branches, connections=[], connect_dist=dist)


# ---------------------------------------------------------------------------
# loop handling
# ---------------------------------------------------------------------------

def _loop_pairs(pts: np.ndarray, dist: float, min_loop_len: float):
    """Point index pairs (i < j) that are within ``dist`` of each other but
    at least ``min_loop_len`` apart along the chain, closest first."""
    p = pts.astype(np.float64)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
    tree = cKDTree(p)
    pairs = []
    for i, j in tree.query_pairs(dist):
        i, j = (i, j) if i < j else (j, i)
        if arc[j] - arc[i] >= min_loop_len:
            pairs.append((float(np.linalg.norm(p[i] - p[j])), i, j))
    pairs.sort()
    return [(i, j) for _, i, j in pairs]


_REWIRE_MARGIN = 0.5  # radians


def _fix_interior_loop(pts: np.ndarray, dist: float, min_loop_len: float) -> np.ndarray:
    """If the chain crosses itself, re-wire the crossing so the traversal
    continues along the tangent-consistent direction: reverse the loop
    segment when that lowers the turning angle at the crossing.

    A mis-walked crossing improves by roughly twice the crossing angle, so
    the margin only blocks the ambiguous case of a smooth hairpin whose
    anti-parallel arms make both pairings look straight.
    """
    for _ in range(3):
        pairs = _loop_pairs(pts, dist, min_loop_len)
        flipped = False
        for i, j in pairs:
            if i == 0 or j == len(pts) - 1:
                continue  # endpoint loops are handled by splicing/closure
            in_i = _tangent(pts[:i + 1], True)
            out_i = _tangent(pts[i:], False)
            in_j = _tangent(pts[:j + 1], True)
            out_j = _tangent(pts[j:], False)
            current = _turn(in_i, out_i) + _turn(in_j, out_j)
            reversed_mid = _turn(in_i, -in_j) + _turn(-out_i, out_j)
            if reversed_mid < current - _REWIRE_MARGIN:
                pts = np.concatenate([pts[:i + 1], pts[i + 1:j + 1][::-1], pts[j + 1:]])
                flipped = True
                break
        if not flipped:
            break
    return pts


def merge_loops(g: BranchGraph, dist: float, min_loop_len: float,
                pair_dist: float | None = None,
                end_hosts: bool = True) -> BranchGraph:
    """Detect loops and merge them following the direction at the crossing.

    A loop is two points of one branch within ``pair_dist`` of each other
    (``dist`` when not given) but at least ``min_loop_len`` apart along the
    branch.  A loop interior to a chain gets its middle reversed if that
    makes the crossing directions consistent.  A branch that is itself a
    loop (its two endpoints nearly meet, within ``dist``) is spliced into
    the chain passing through the crossing, with the traversal orientation
    chosen by minimal turning angle; the result is a single
    self-intersecting polyline instead of two chains.  A standalone ring
    stays a single traversal.

    ``pair_dist`` stays tight even when ``dist`` is the wide second-pass
    radius: crossing strands are in contact in a thinned skeleton, whereas
    two curve parts 15-20 px apart merely pass near each other.

    With ``end_hosts`` False a ring is spliced only where the host chain
    passes through the crossing, never onto a host's free end.  Early
    passes use that so a ring flanked by two not-yet-joined tails is not
    consumed by one tail alone, which would leave the other tail nothing
    to join; the final pass keeps end splices as a fallback.
    """
    if pair_dist is None:
        pair_dist = dist
    branches = [b.copy() for b in g.branches]
    # splice whole-branch loops into their host chain
    changed = True
    while changed:
        changed = False
        for k, br in enumerate(branches):
            if len(br) < 4:
                continue
            gap = float(np.linalg.norm((br[0] - br[-1]).astype(np.float64)))
            if gap > dist or polyline_length(br) < min_loop_len:
                continue
            crossing = (br[0].astype(np.float64) + br[-1].astype(np.float64)) / 2.0
            host_k, host_idx, host_d = -1, -1, np.inf
            for m, other in enumerate(branches):
                if m == k:
                    continue
                d = np.linalg.norm(other.astype(np.float64) - crossing, axis=1)
                idx = int(np.argmin(d))
                if not end_hosts and idx in (0, len(other) - 1):
                    continue
                if d[idx] < host_d:
                    host_k, host_idx, host_d = m, idx, float(d[idx])
            if host_k < 0 or host_d > dist:
                continue  # standalone ring: already one loop traversal
            host = branches[host_k]
            in_dir = _tangent(host[:host_idx + 1], True) if host_idx > 0 else np.zeros(2)
            out_dir = _tangent(host[host_idx:], False) if host_idx < len(host) - 1 else np.zeros(2)
            fwd = _turn(in_dir, _tangent(br, False)) + _turn(_tangent(br, True), out_dir)
            rev = _turn(in_dir, -_tangent(br, True)) + _turn(-_tangent(br, False), out_dir)
            body = br if fwd <= rev else br[::-1]
            branches[host_k] = np.concatenate([host[:host_idx + 1], body, host[host_idx + 1:]])
            del branches[k]
            changed = True
            break
    branches = [_fix_interior_loop(b, pair_dist, min_loop_len) for b in branches]
    return BranchGraph(branches=branches, connections=[], connect_dist=g.connect_dist)


# ---------------------------------------------------------------------------
# side branches
# ---------------------------------------------------------------------------

def close_remaining(g: BranchGraph, min_loop_len: float) -> BranchGraph:
    """Resolve branches still connected to the main (longest) chain: a side
    branch of at least ``min_loop_len`` is traversed out-and-back (both of
    its endpoints close onto the main chain, like a loop seen edge-on),
    shorter ones are discarded as spurs.  Iterates until the main chain has
    no connected side branches left."""
    if g.connect_dist is None:
        raise ValueError("run find_connections first")
    dist = g.connect_dist
    branches = list(g.branches)
    for _ in range(len(branches) + 10):
        if len(branches) <= 1:
            break
        main_k = int(np.argmax([polyline_length(b) for b in branches]))
        main = branches[main_k]
        best = None
        for m, other in enumerate(branches):
            if m == main_k:
                continue
            ia, ib, d = _closest_pair(main, other)
            if d <= dist and (best is None or d < best[0]):
                best = (d, m, ia, ib)
        if best is None:
            break
        _, m, ia, ib = best
        side = branches[m]
        if polyline_length(side) < min_loop_len:
            del branches[m]
            continue
        # out-and-back along the longer arm from the attachment point
        head, tail = side[:ib + 1], side[ib:]
        arm = tail if polyline_length(tail) >= polyline_length(head) else head[::-1]
        detour = np.concatenate([arm, arm[::-1][1:]]) if len(arm) > 1 else arm
        new_main = np.concatenate([main[:ia + 1], detour, main[ia + 1:]])
        branches = [b for k, b in enumerate(branches) if k not in (main_k, m)]
        branches.append(new_main)
    return BranchGraph(branches=branches, connections=[], connect_dist=dist)


# ---------------------------------------------------------------------------
# smoothing and the full pipeline
# ---------------------------------------------------------------------------

def resample_polyline(pts: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Resample a polyline at fixed arc-length steps, keeping both ends."""
    p = np.asarray(pts, dtype=np.float64)
    if len(p) < 2:
        return p.copy()
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total <= 0:
        return p[:1].copy()
    targets = np.arange(0.0, total, spacing)
    if total - targets[-1] > 1e-9:
        targets = np.append(targets, total)
    x = np.interp(targets, arc, p[:, 0])
    y = np.interp(targets, arc, p[:, 1])
    return np.stack([x, y], axis=1)


def smooth_spline(pts: np.ndarray) -> np.ndarray:
    """Least-squares cubic B-spline fit (one control point per 10 input
    points, minimum 4), evaluated at 1 px arc spacing.  Endpoints are pinned
    by heavy weights.  Fewer than 4 input points come back unsmoothed."""
    p = np.asarray(pts, dtype=np.float64)
    keep = np.ones(len(p), bool)
    keep[1:] = np.linalg.norm(np.diff(p, axis=0), axis=1) > 1e-12
    p = p[keep]
    if len(p) < 4:
        return resample_polyline(p)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
    u = arc / arc[-1]
    n_ctrl = max(4, len(p) // 10)
    interior = np.linspace(0.0, 1.0, n_ctrl - 2)[1:-1]
    knots = np.concatenate([np.zeros(4), interior, np.ones(4)])
    w = np.ones(len(p))
    w[0] = w[-1] = 1e3
    spline = make_lsq_spline(u, p, knots, k=3, w=w)
    dense = spline(np.linspace(0.0, 1.0, max(4 * len(p), 64)))
    return resample_polyline(dense)


def border_distance(point, width: int, height: int) -> float:
    """Distance from a point to the nearest image border."""
    x, y = float(point[0]), float(point[1])
    return min(x, y, width - 1 - x, height - 1 - y)


def _orient_tip_first(pts: np.ndarray, width: int, height: int) -> np.ndarray:
    """The tip is the endpoint farther from the image border; ties go to the
    larger y, then larger x."""
    a, b = pts[0], pts[-1]
    ka = (border_distance(a, width, height), float(a[1]), float(a[0]))
    kb = (border_distance(b, width, height), float(b[1]), float(b[0]))
    return pts if ka >= kb else pts[::-1]


def extract_centerline(pm: ProbabilityMap, params: ExtractParams | None = None):
    """Full extraction pipeline; returns a Centerline or None when the map
    contains no usable curve (empty threshold mask or a final chain shorter
    than 4 pixels)."""
    if params is None:
        params = ExtractParams()
    mask = threshold(pm, params.prob_threshold)
    if mask.count() == 0:
        return None
    skel = skeletonize(mask)
    g = extract_branches(skel)
    if not g.branches:
        return None
    for dist in (params.link_dist, params.link_dist_far):
        g = find_connections(g, dist)
        g = link_longest(g, loop_defer_arc=params.min_loop_len,
                         loop_defer_gap=params.link_dist_far)
        g = merge_loops(g, dist, params.min_loop_len,
                        pair_dist=params.link_dist,
                        end_hosts=dist >= params.link_dist_far)
    g = find_connections(g, params.link_dist_far)
    g = close_remaining(g, params.min_loop_len)
    if not g.branches:
        return None
    chain = max(g.branches, key=polyline_length)
    if len(chain) < 4:
        return None
    chain = _orient_tip_first(chain.astype(np.float64), pm.width, pm.height)
    smoothed = smooth_spline(chain)
    if len(smoothed) < 2:
        return None
    return Centerline(smoothed)


# ---------------------------------------------------------------------------
# serialization and rendering
# ---------------------------------------------------------------------------

def centerline_to_dict(centerline, width: int, height: int) -> dict:
    pts = [] if centerline is None else [[float(x), float(y)] for x, y in centerline.points]
    return {
        "width": int(width),
        "height": int(height),
        "tip_index": 0,
        "points": pts,
        "success": centerline is not None,
    }


def save_centerline_json(centerline, width: int, height: int, path) -> None:
    payload = json.dumps(centerline_to_dict(centerline, width, height))
    atomic_write_bytes(path, payload.encode("utf-8"))


def load_centerline_json(path):
    """Returns (centerline-or-None, width, height)."""
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    pts = np.array(d["points"], dtype=np.float64).reshape(-1, 2)
    if d.get("tip_index", 0) != 0:
        pts = pts[::-1]
    c = Centerline(pts) if len(pts) >= 2 else None
    return c, int(d["width"]), int(d["height"])


def render_overlay(frame, centerline) -> np.ndarray:
    """RGB overlay of a centerline on a frame, shaded from red at the tip to
    rose at the tail; points are dilated to 3x3 for visibility."""
    base = np.clip(frame.data, 0.0, 1.0)
    rgb = np.repeat((base * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    if centerline is None:
        return rgb
    h, w = base.shape
    pts = centerline.points
    n = max(len(pts) - 1, 1)
    tip_color = np.array([255, 0, 0], dtype=np.float64)
    tail_color = np.array([255, 150, 180], dtype=np.float64)
    for k, (x, y) in enumerate(pts):
        t = k / n
        color = np.round((1 - t) * tip_color + t * tail_color).astype(np.uint8)
        cx, cy = int(round(x)), int(round(y))
        y0, y1 = max(cy - 1, 0), min(cy + 2, h)
        x0, x1 = max(cx - 1, 0), min(cx + 2, w)
        rgb[y0:y1, x0:x1] = color
    return rgb
