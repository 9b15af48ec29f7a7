"""Centerline extraction: thinning vs an independent reference, branch
graph construction, chain linking, loop handling, spur pruning, tip
selection, spline smoothing, and round trips against rendered curves."""

import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial import cKDTree

from cathseg.centerline import (
    BranchGraph,
    Centerline,
    ExtractParams,
    border_distance,
    close_remaining,
    extract_branches,
    extract_centerline,
    find_connections,
    link_longest,
    load_centerline_json,
    merge_loops,
    polyline_length,
    resample_polyline,
    save_centerline_json,
    skeletonize,
    smooth_spline,
    threshold,
)
from cathseg.imagecore import BinaryMask, ProbabilityMap, dilate_5x5, rasterize_curve
from cathseg.synthgen import SynthConfig, generate_sequence

from conftest import random_curvelike_mask

EIGHT = np.ones((3, 3), dtype=int)


# ---------------------------------------------------------------------------
# reference thinning, written independently of the production code: plain
# per-pixel loops straight from the published two-subiteration conditions
# ---------------------------------------------------------------------------

def reference_thin(mask: np.ndarray) -> np.ndarray:
    img = np.pad(np.asarray(mask, dtype=np.uint8), 1)

    def neighbors(y, x):
        # clockwise from north
        return [img[y - 1, x], img[y - 1, x + 1], img[y, x + 1],
                img[y + 1, x + 1], img[y + 1, x], img[y + 1, x - 1],
                img[y, x - 1], img[y - 1, x - 1]]

    while True:
        removed_any = False
        for phase in (1, 2):
            to_remove = []
            ys, xs = np.nonzero(img)
            for y, x in zip(ys, xs):
                n = neighbors(y, x)
                b = sum(n)
                if not 2 <= b <= 6:
                    continue
                a = sum(1 for k in range(8) if n[k] == 0 and n[(k + 1) % 8] == 1)
                if a != 1:
                    continue
                p2, p4, p6, p8 = n[0], n[2], n[4], n[6]
                if phase == 1:
                    if p2 * p4 * p6 != 0 or p4 * p6 * p8 != 0:
                        continue
                else:
                    if p2 * p4 * p8 != 0 or p2 * p6 * p8 != 0:
                        continue
                to_remove.append((y, x))
            for y, x in to_remove:
                img[y, x] = 0
            removed_any = removed_any or bool(to_remove)
        if not removed_any:
            return img[1:-1, 1:-1]


def _hand_masks():
    isolated = np.zeros((7, 7), np.uint8)
    isolated[3, 3] = 1

    line = np.zeros((7, 12), np.uint8)
    line[3, 1:11] = 1

    bar = np.zeros((7, 13), np.uint8)
    bar[2:5, 2:11] = 1  # 3 x 9 solid bar

    cross = np.zeros((9, 9), np.uint8)
    for i in range(9):
        cross[i, i] = 1
        cross[i, 8 - i] = 1
    return {"isolated": isolated, "line": line, "bar": bar, "cross": cross}


def _components(mask):
    return ndimage.label(mask, structure=EIGHT)[1]


def test_thinning_matches_reference_on_hand_cases():
    for name, m in _hand_masks().items():
        got = skeletonize(BinaryMask(m)).data
        want = reference_thin(m)
        assert np.array_equal(got, want), f"mismatch on {name}"
        assert _components(got) == _components(m), f"component change on {name}"


def test_thinning_bar_reduces_to_center_row():
    bar = _hand_masks()["bar"]
    got = skeletonize(BinaryMask(bar)).data
    assert got.sum() > 0
    ys = np.nonzero(got)[0]
    assert set(ys) == {3}


def test_thinning_matches_reference_on_random_masks(rng):
    for _ in range(25):
        m = random_curvelike_mask(rng, size=32)
        got = skeletonize(BinaryMask(m)).data
        want = reference_thin(m)
        assert np.array_equal(got, want)
        assert _components(got) == _components(m)


def test_thinning_never_gains_pixels(rng):
    for _ in range(10):
        m = random_curvelike_mask(rng, size=32)
        s = skeletonize(BinaryMask(m)).data
        assert np.all(m >= s)


def test_thinning_of_single_strokes_is_thin(rng):
    # works on simple strokes: at an X-crossing the classic two-subiteration
    # rules reach a fixed point that keeps a 2x2 junction cluster, which the
    # branch decomposition later sweeps as junction pixels
    for _ in range(10):
        xs = np.cumsum(rng.uniform(6.0, 9.0, 6))
        xs = xs - xs[0]
        ys = rng.uniform(4.0, 44.0, 6)
        pts = np.column_stack([4.0 + xs, ys])
        m = dilate_5x5(rasterize_curve(pts, 48, 48)).data
        s = skeletonize(BinaryMask(m)).data
        assert np.all(m >= s)
        assert not (s[:-1, :-1] & s[1:, :-1] & s[:-1, 1:] & s[1:, 1:]).any()


def test_threshold_rule():
    pm = ProbabilityMap(np.array([[0.0, 0.005], [0.01, 0.995]]))
    m = threshold(pm, 0.01).data
    assert np.array_equal(m, [[0, 0], [1, 1]])


# ---------------------------------------------------------------------------
# branch decomposition
# ---------------------------------------------------------------------------

def _branch_sets(g):
    return [set(map(tuple, br.tolist())) for br in g.branches]


def test_branches_of_diagonal_cross():
    g = extract_branches(BinaryMask(_hand_masks()["cross"]))
    assert len(g.branches) == 4
    for br in g.branches:
        assert len(br) == 4  # center junction pixel excluded


def test_branches_of_open_curve():
    pts = np.array([[2.0, 2.0], [20.0, 8.0], [30.0, 28.0]])
    m = rasterize_curve(pts, 33, 33)
    g = extract_branches(m)
    assert len(g.branches) == 1


def test_branches_empty_and_isolated():
    assert extract_branches(BinaryMask(np.zeros((5, 5), np.uint8))).branches == []
    lone = np.zeros((5, 5), np.uint8)
    lone[2, 3] = 1
    g = extract_branches(BinaryMask(lone))
    assert len(g.branches) == 1 and len(g.branches[0]) == 1
    assert tuple(g.branches[0][0]) == (3, 2)  # stored as (x, y)


def test_branches_reject_solid_blocks():
    solid = np.ones((5, 5), np.uint8)
    with pytest.raises(ValueError):
        extract_branches(BinaryMask(solid))


def test_branch_chains_are_valid(rng):
    for _ in range(10):
        m = random_curvelike_mask(rng, size=32)
        g = extract_branches(skeletonize(BinaryMask(m)))
        for br in g.branches:
            assert len(set(map(tuple, br.tolist()))) == len(br)  # no repeats
            if len(br) > 1:
                steps = np.abs(np.diff(br, axis=0)).max(axis=1)
                assert np.all(steps == 1)  # consecutive pixels are 8-neighbors


# ---------------------------------------------------------------------------
# connections
# ---------------------------------------------------------------------------

def _segment(x0, y0, x1, y1):
    n = max(abs(x1 - x0), abs(y1 - y0)) + 1
    return np.column_stack([np.linspace(x0, x1, n).round().astype(int),
                            np.linspace(y0, y1, n).round().astype(int)])


def test_connections_respect_radius():
    g = BranchGraph([_segment(0, 0, 20, 0), _segment(0, 10, 20, 10)])
    assert find_connections(g, 5.0).connections == []
    g2 = find_connections(BranchGraph(list(g.branches)), 20.0)
    assert len(g2.connections) == 1
    assert g2.connections[0].dist == pytest.approx(10.0)


def test_connections_one_per_pair():
    g = BranchGraph([_segment(0, 0, 10, 0),
                     _segment(0, 3, 10, 3),
                     _segment(0, 6, 10, 6)])
    g = find_connections(g, 8.0)
    assert len(g.connections) == 3
    pairs = {(c.a, c.b) for c in g.connections}
    assert pairs == {(0, 1), (0, 2), (1, 2)}


def test_connection_is_closest_pair(rng):
    for _ in range(10):
        a = _segment(0, 0, 15, int(rng.integers(0, 8)))
        b = _segment(0, int(rng.integers(10, 18)), 15, 22)
        g = find_connections(BranchGraph([a, b]), 25.0)
        assert len(g.connections) == 1
        c = g.connections[0]
        brute = min(np.linalg.norm(p - q) for p in a.astype(float)
                    for q in b.astype(float))
        assert c.dist == pytest.approx(brute)
        assert np.linalg.norm(a[c.ia].astype(float) - b[c.ib]) == pytest.approx(brute)


# ---------------------------------------------------------------------------
# chain linking
# ---------------------------------------------------------------------------

def test_link_merges_collinear_gap():
    g = BranchGraph([_segment(0, 0, 10, 0), _segment(13, 0, 23, 0)])
    g = find_connections(g, 5.0)
    g = link_longest(g)
    assert len(g.branches) == 1
    assert len(g.branches[0]) == 22
    xs = g.branches[0][:, 0]
    assert abs(xs[0] - xs[-1]) == 23


def test_link_no_connections_is_noop():
    branches = [_segment(0, 0, 5, 0), _segment(0, 20, 5, 20)]
    g = link_longest(find_connections(BranchGraph(branches), 3.0))
    assert len(g.branches) == 2
    assert _branch_sets(g) == [set(map(tuple, b.tolist())) for b in branches]


def test_link_t_shape_extends_through_stem():
    bar = _segment(0, 10, 20, 10)
    stem = _segment(10, 12, 10, 30)
    g = link_longest(find_connections(BranchGraph([bar, stem]), 5.0))
    assert len(g.branches) == 2
    main = max(g.branches, key=len)
    other = min(g.branches, key=len)
    main_set = set(map(tuple, main.tolist()))
    # the long chain runs from one bar end through the junction to the stem end
    assert (10, 30) in main_set
    assert ((0, 10) in main_set) != ((20, 10) in main_set)
    assert len(other) == 10  # the leftover bar arm
    # pixel multiset is conserved by the re-wiring
    before = sorted(map(tuple, np.vstack([bar, stem]).tolist()))
    after = sorted(map(tuple, np.vstack(g.branches).tolist()))
    assert before == after


# ---------------------------------------------------------------------------
# loop handling
# ---------------------------------------------------------------------------

def _ring_chain(radius=16.0, gap_deg=8.0, center=(20.0, 20.0)):
    sweep = np.radians(np.linspace(gap_deg / 2, 360.0 - gap_deg / 2, 400))
    pts = np.column_stack([center[0] + radius * np.cos(sweep),
                           center[1] + radius * np.sin(sweep)])
    pix = np.round(pts).astype(int)
    keep = np.ones(len(pix), bool)
    keep[1:] = np.any(np.diff(pix, axis=0) != 0, axis=1)
    return pix[keep]


def test_merge_loops_straight_branch_unchanged():
    chain = _segment(0, 0, 40, 0)
    g = merge_loops(BranchGraph([chain.copy()]), 5.0, 30.0)
    assert len(g.branches) == 1
    assert np.array_equal(g.branches[0], chain)


def test_merge_loops_closes_circle_as_single_traversal():
    ring = _ring_chain()  # circumference ~100 px, endpoint gap ~2 px
    assert np.linalg.norm((ring[0] - ring[-1]).astype(float)) <= 3.0
    g = merge_loops(BranchGraph([ring.copy()]), 5.0, 30.0)
    assert len(g.branches) == 1
    assert sorted(map(tuple, g.branches[0].tolist())) == \
        sorted(map(tuple, ring.tolist()))


def test_merge_loops_ignores_short_hairpin():
    # 10 px out-and-back: close endpoints but along-chain distance < 30
    up = _segment(0, 0, 0, 5)
    down = _segment(1, 5, 1, 0)
    hairpin = np.vstack([up, down[::-1][1:]])
    g = merge_loops(BranchGraph([hairpin.copy()]), 5.0, 30.0)
    assert np.array_equal(g.branches[0], hairpin)


def test_pixels_conserved_through_linking_on_crossing_curve():
    # rendered self-crossing curve: branch pixels survive both pipeline passes
    cfg = SynthConfig(image_size=128, frames_per_seq=1, loop_probability=1.0,
                      noise_sigma=0.0)
    seq = generate_sequence(cfg, np.random.default_rng(3))
    skel = skeletonize(BinaryMask(seq.sequence.masks[0].data))
    g = extract_branches(skel)
    p = ExtractParams()
    before = sorted(map(tuple, np.vstack(g.branches).tolist()))
    for dist in (p.link_dist, p.link_dist_far):
        g = find_connections(g, dist)
        g = link_longest(g, loop_defer_arc=p.min_loop_len,
                         loop_defer_gap=p.link_dist_far)
        g = merge_loops(g, dist, p.min_loop_len, pair_dist=p.link_dist,
                        end_hosts=dist >= p.link_dist_far)
        after = set(map(tuple, np.vstack(g.branches).tolist()))
        assert after == set(before)  # multiset up to revisits at splices


# ---------------------------------------------------------------------------
# side branch closure
# ---------------------------------------------------------------------------

def test_close_remaining_removes_short_spur():
    main = _segment(0, 25, 50, 25)
    spur = _segment(25, 27, 25, 31)  # 5 px
    g = find_connections(BranchGraph([main.copy(), spur]), 20.0)
    g = close_remaining(g, 30.0)
    assert len(g.branches) == 1
    assert np.array_equal(g.branches[0], main)


def test_close_remaining_traverses_long_side_branch():
    main = _segment(0, 45, 60, 45)
    side = _segment(30, 47, 30, 87)  # 41 px, attached mid-chain
    g = find_connections(BranchGraph([main.copy(), side.copy()]), 20.0)
    g = close_remaining(g, 30.0)
    assert len(g.branches) == 1
    length = polyline_length(g.branches[0].astype(float))
    expect = 60.0 + 2 * 40.0
    assert abs(length - expect) <= 8.0  # out-and-back detour

def test_close_remaining_no_side_branches_noop():
    main = _segment(0, 10, 30, 10)
    g = find_connections(BranchGraph([main.copy()]), 20.0)
    g = close_remaining(g, 30.0)
    assert np.array_equal(g.branches[0], main)


# ---------------------------------------------------------------------------
# spline smoothing
# ---------------------------------------------------------------------------

def test_spline_preserves_collinear_points():
    t = np.linspace(0.0, 40.0, 60)
    pts = np.column_stack([t, 0.5 * t + 3.0])
    out = smooth_spline(pts)
    resid = np.abs(out[:, 1] - (0.5 * out[:, 0] + 3.0))
    assert resid.max() < 1e-6


def test_spline_flattens_pixel_zigzag():
    xs = np.arange(0.0, 60.0)
    ys = 10.0 + (np.arange(60) % 2)  # 1 px square-wave jitter
    out = smooth_spline(np.column_stack([xs, ys]))
    assert np.abs(out[:, 1] - 10.5).max() < 0.5


def test_spline_four_points_interpolates():
    # 4 points, 4 control points: the LSQ fit is exact, so every input
    # point lies on the curve; the nearest 1 px-spaced output sample can
    # still be up to half a step away along the arc
    pts = np.array([[0.0, 0.0], [10.0, 4.0], [20.0, -2.0], [30.0, 1.0]])
    out = smooth_spline(pts)
    for p in pts:
        assert np.linalg.norm(out - p, axis=1).min() < 0.6


def test_spline_short_input_unsmoothed():
    pts = np.array([[0.0, 0.0], [4.0, 4.0], [9.0, 5.0]])
    assert np.allclose(smooth_spline(pts), resample_polyline(pts))


def test_spline_pins_endpoints(rng):
    t = np.linspace(0, 2 * np.pi, 80)
    pts = np.column_stack([40 + 30 * np.cos(t * 0.6), 40 + 25 * np.sin(t)])
    out = smooth_spline(pts)
    assert np.linalg.norm(out[0] - pts[0]) <= 1.0
    assert np.linalg.norm(out[-1] - pts[-1]) <= 1.0


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def _gt_and_extracted(seed, with_loop, size=128):
    cfg = SynthConfig(image_size=size, frames_per_seq=1,
                      loop_probability=1.0 if with_loop else 0.0,
                      noise_sigma=0.0)
    seq = generate_sequence(cfg, np.random.default_rng(seed))
    gt = resample_polyline(seq.centerlines[0], 1.0)
    pm = ProbabilityMap(seq.sequence.masks[0].data.astype(np.float64))
    return gt, extract_centerline(pm)


def test_extract_empty_map_returns_none():
    assert extract_centerline(ProbabilityMap(np.zeros((32, 32)))) is None


def test_extract_roundtrip_open_curves():
    for seed in range(8):
        gt, cl = _gt_and_extracted(seed, with_loop=False)
        assert cl is not None
        pr = cl.points
        mean_d = 0.5 * (cKDTree(pr).query(gt)[0].mean()
                        + cKDTree(gt).query(pr)[0].mean())
        assert mean_d <= 1.0, f"seed {seed}: mean distance {mean_d:.2f}"
        assert np.linalg.norm(gt[0] - pr[0]) <= 2.0, f"seed {seed}: wrong tip"
        # Hausdorff bound for clean non-crossing curves
        haus = max(cKDTree(pr).query(gt)[0].max(), cKDTree(gt).query(pr)[0].max())
        assert haus <= 2.0, f"seed {seed}: Hausdorff {haus:.2f}"


def test_extract_roundtrip_loop_curves():
    for seed in range(4):
        gt, cl = _gt_and_extracted(seed, with_loop=True)
        assert cl is not None
        ratio = cl.arc_length() / polyline_length(gt)
        assert 0.95 <= ratio <= 1.05, f"seed {seed}: arc ratio {ratio:.3f}"


def test_extract_is_deterministic():
    cfg = SynthConfig(image_size=96, frames_per_seq=1, noise_sigma=0.0,
                      loop_probability=0.0)
    seq = generate_sequence(cfg, np.random.default_rng(17))
    pm = ProbabilityMap(seq.sequence.masks[0].data.astype(np.float64))
    a = extract_centerline(pm)
    b = extract_centerline(pm)
    assert np.array_equal(a.points, b.points)


def _extract_from_points(pts, w, h):
    mask = dilate_5x5(rasterize_curve(np.asarray(pts, float), w, h))
    return extract_centerline(ProbabilityMap(mask.data.astype(np.float64)))


def test_tip_prefers_interior_endpoint():
    cl = _extract_from_points([[0.0, 32.0], [16.0, 30.0], [32.0, 32.0]], 65, 65)
    assert np.linalg.norm(cl.tip - np.array([32.0, 32.0])) <= 2.0


def test_tip_tiebreak_larger_x():
    cl = _extract_from_points([[10.0, 20.0], [30.0, 20.0]], 41, 41)
    assert abs(cl.tip[0] - 30.0) <= 2.0


def test_tip_tiebreak_larger_y():
    cl = _extract_from_points([[20.0, 10.0], [20.0, 30.0]], 41, 41)
    assert abs(cl.tip[1] - 30.0) <= 2.0


def test_border_distance():
    assert border_distance((0.0, 5.0), 11, 11) == 0.0
    assert border_distance((5.0, 5.0), 11, 11) == 5.0


def test_resample_spacing_and_ends():
    pts = np.array([[0.0, 0.0], [10.0, 0.0]])
    out = resample_polyline(pts, 1.0)
    assert np.allclose(out[0], [0, 0]) and np.allclose(out[-1], [10, 0])
    gaps = np.linalg.norm(np.diff(out, axis=0), axis=1)
    assert np.all(gaps <= 1.0 + 1e-9)


def test_centerline_json_roundtrip(tmp_path):
    pts = np.array([[1.5, 2.25], [3.0, 4.0], [5.5, 6.0]])
    c = Centerline(pts)
    p = tmp_path / "c.json"
    save_centerline_json(c, 64, 48, p)
    back, w, h = load_centerline_json(p)
    assert (w, h) == (64, 48)
    assert np.allclose(back.points, pts)
    import json
    d = json.loads(p.read_text())
    assert set(d) >= {"width", "height", "tip_index", "points"}
    assert d["tip_index"] == 0


def test_centerline_json_empty_result(tmp_path):
    p = tmp_path / "none.json"
    save_centerline_json(None, 32, 32, p)
    back, w, h = load_centerline_json(p)
    assert back is None and (w, h) == (32, 32)
