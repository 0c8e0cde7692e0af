import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import qmc

from meshpose.evaluation import (Box3D, Detection, Frame, average_precision, box_to_label, bev_iou,
                                 confidence_scores, difficulty_from_mask, evaluate, iou_3d, label_to_box,
                                 mesh_to_box)
from meshpose.geometry import ObjectPose
from meshpose.manifold import car_manifold

MEAN_DIMS = (1.4954545454545454, 1.6353943614691713, 3.94)


def test_mesh_box_mean_shape():
    box = mesh_to_box(car_manifold(), np.zeros(3), ObjectPose(np.zeros(3), 0.0))
    np.testing.assert_allclose(box.dims, MEAN_DIMS, rtol=1e-12)


def test_mesh_box_translation():
    m = car_manifold()
    a = mesh_to_box(m, np.zeros(3), ObjectPose(np.zeros(3), 0.8))
    t = np.array([1.5, -0.2, 17.0])
    b = mesh_to_box(m, np.zeros(3), ObjectPose(t, 0.8))
    np.testing.assert_allclose(np.subtract(b.center, a.center), t, atol=1e-12)
    assert a.dims == b.dims and b.yaw == pytest.approx(0.8)


def test_mesh_box_length_basis():
    m = car_manifold()
    box = mesh_to_box(m, [1.0, 0.0, 0.0], ObjectPose(np.zeros(3), 0.0))
    assert box.l == pytest.approx(1.1 * MEAN_DIMS[2])
    assert box.h == pytest.approx(MEAN_DIMS[0]) and box.w == pytest.approx(MEAN_DIMS[1])


def _box(x, z, w=2.0, l=4.0, yaw=0.0, y=0.0, h=1.5):
    return Box3D((x, y, z), (h, w, l), yaw)


def test_bev_iou_examples():
    a = _box(0, 10)
    assert bev_iou(a, a) == pytest.approx(1.0)
    assert bev_iou(a, _box(10, 10)) == 0.0
    assert bev_iou(a, _box(0, 11)) == pytest.approx(0.6, abs=1e-12)


def test_bev_iou_degenerate():
    a = _box(0, 10)
    assert bev_iou(a, Box3D((0, 0, 10), (1.5, 1e-300, 4.0), 0.0)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1.0, 0.0, 1.0), 0.0)


def _inside(box: Box3D, pts: np.ndarray) -> np.ndarray:
    d = pts - [box.center[0], box.center[2]]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    lx = d[:, 0] * c - d[:, 1] * s
    lz = d[:, 0] * s + d[:, 1] * c
    return (np.abs(lx) <= box.w / 2) & (np.abs(lz) <= box.l / 2)


def _mc_iou(a: Box3D, b: Box3D, n_log2: int = 20) -> float:
    corners = np.vstack([a.bev_corners(), b.bev_corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = lo + qmc.Sobol(2, seed=0).random_base2(n_log2) * (hi - lo)
    ia, ib = _inside(a, pts), _inside(b, pts)
    union = np.sum(ia | ib)
    return float(np.sum(ia & ib) / union) if union else 0.0


def test_bev_iou_monte_carlo():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        a = _box(0.0, 0.0, rng.uniform(1, 3), rng.uniform(2, 6), rng.uniform(0, 2 * np.pi))
        b = _box(*rng.uniform(-2, 2, 2), rng.uniform(1, 3), rng.uniform(2, 6), rng.uniform(0, 2 * np.pi))
        worst = max(worst, abs(bev_iou(a, b) - _mc_iou(a, b)))
    assert worst < 1e-3


boxes = st.builds(lambda x, z, w, l, yaw: _box(x, z, w, l, yaw), st.floats(-3, 3), st.floats(-3, 3),
                  st.floats(0.5, 3), st.floats(0.5, 6), st.floats(0, 2 * np.pi))


@given(boxes, boxes, st.floats(-10, 10), st.floats(-10, 10), st.floats(-np.pi, np.pi))
def test_bev_iou_symmetric_and_rigid(a, b, tx, tz, rot):
    v = bev_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert bev_iou(b, a) == pytest.approx(v, abs=1e-9)

    def move(box):
        # rotate the center about the origin by -rot in the (x, z) plane, matching R_y(rot)
        c, s = np.cos(rot), np.sin(rot)
        x, y, z = box.center
        return Box3D((c * x + s * z + tx, y, -s * x + c * z + tz), box.dims, box.yaw + rot)

    assert bev_iou(move(a), move(b)) == pytest.approx(v, abs=1e-9)


def test_iou_3d_examples():
    a = _box(0, 10, h=2.0)
    assert iou_3d(a, a) == pytest.approx(1.0)
    assert iou_3d(a, _box(0, 10, h=2.0, y=3.0)) == 0.0
    assert iou_3d(a, _box(0, 10, h=2.0, y=1.0)) == pytest.approx(1 / 3)


def _dets(pairs):
    return [Detection(b, s) for b, s in pairs]


def test_ap_examples():
    g = [_box(0, 10)]
    assert average_precision(_dets([(_box(0, 10), 1.0)]), g) == pytest.approx(100.0)
    assert average_precision([], g) == 0.0
    assert average_precision(_dets([(_box(0, 10), 1.0)]), []) is None
    g2 = [_box(0, 10), _box(10, 30)]
    dets = _dets([(_box(-20, 50), 0.9), (_box(0, 10), 0.5)])
    assert average_precision(dets, g2) == pytest.approx(25.0)


def _oracle_ap(assign, n_gt) -> Fraction:
    """AP40 by direct enumeration, ``assign`` listing the gt each ranked detection overlaps (-1 none)."""
    used, tp, fp, points = set(), 0, 0, []
    for g in assign:
        if g >= 0 and g not in used:
            used.add(g)
            tp += 1
        else:
            fp += 1
        points.append((Fraction(tp, tp + fp), Fraction(tp, n_gt)))
    total = Fraction(0)
    for i in range(1, 41):
        r = Fraction(i, 40)
        cands = [p for p, rec in points if rec >= r]
        total += max(cands) if cands else 0
    return 100 * total / 40


def test_ap_brute_force_exhaustive():
    rng = np.random.default_rng(0)
    count = 0
    for n_gt in (1, 2, 3):
        gts = [_box(12.0 * j, 20.0) for j in range(n_gt)]
        for n in range(7):
            for assign in itertools.product(range(-1, n_gt), repeat=n):
                scores = np.arange(n, 0, -1, dtype=float)
                dets = [Detection(gts[g] if g >= 0 else _box(-50.0, 60.0 + 10 * k), scores[k])
                        for k, g in enumerate(assign)]
                perm = rng.permutation(n)
                got = average_precision([dets[i] for i in perm], gts)
                assert got == pytest.approx(float(_oracle_ap(assign, n_gt)), abs=1e-9)
                count += 1
    assert count == 5461 + 1093 + 127


@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=1, max_size=8), st.data())
def test_ap_monotone_under_fp_removal(items, data):
    gts = [_box(12.0 * j, 20.0) for j in range(len(items))]
    dets = [Detection(gts[k] if tp else _box(-50.0, 60.0 + 10 * k), s) for k, (tp, s) in enumerate(items)]
    fps = [k for k, (tp, _) in enumerate(items) if not tp]
    if not fps:
        return
    drop = data.draw(st.sampled_from(fps))
    before = average_precision(dets, gts)
    after = average_precision([d for k, d in enumerate(dets) if k != drop], gts)
    assert after >= before - 1e-9


def _mask_of_height(h):
    m = np.zeros((200, 300), np.uint8)
    m[50:50 + h, 100:180] = 1
    return m


def test_difficulty_rules():
    assert difficulty_from_mask(_mask_of_height(50)) == "easy"
    assert difficulty_from_mask(_mask_of_height(30)) == "moderate"
    assert difficulty_from_mask(_mask_of_height(20)) == "hard"
    border = np.zeros((200, 300), np.uint8)
    border[0:60, 100:180] = 1
    assert difficulty_from_mask(border) == "moderate"


def test_confidence_examples():
    s = confidence_scores([0.3], ["moderate"])
    assert 1.0 <= s[0] < 2.0
    s = confidence_scores([0.1, 0.2], ["easy", "easy"])
    assert s[0] > s[1]
    with pytest.raises(ValueError):
        confidence_scores([0.1], ["unknown"])


@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.sampled_from(["easy", "moderate", "hard"])),
                min_size=1, max_size=30))
def test_confidence_bands(items):
    losses = [v for v, _ in items]
    cats = [c for _, c in items]
    s = confidence_scores(losses, cats)
    by = {c: s[[k for k, cc in enumerate(cats) if cc == c]] for c in set(cats)}
    lows = {"hard": 0.0, "moderate": 1.0, "easy": 2.0}
    for c, v in by.items():
        assert np.all((v >= lows[c]) & (v < lows[c] + 1))
    if "easy" in by and "moderate" in by:
        assert by["easy"].min() > by["moderate"].max()
    if "moderate" in by and "hard" in by:
        assert by["moderate"].max() > by["hard"].max()
    if "easy" in by and "hard" in by:
        assert by["easy"].min() > by["hard"].max()
    # within a category a smaller loss never scores lower
    for i, j in itertools.combinations(range(len(items)), 2):
        if cats[i] == cats[j] and losses[i] < losses[j]:
            assert s[i] >= s[j]


@given(st.floats(-20, 20), st.floats(2, 60), st.floats(0, 2 * np.pi), st.floats(0.5, 3))
def test_label_box_roundtrip(x, z, yaw, h):
    box = Box3D((x, 1.0, z), (h, 1.7, 4.1), yaw)
    back = label_to_box(box_to_label(box))
    np.testing.assert_allclose(back.center, box.center, atol=1e-9)
    assert bev_iou(back, box) == pytest.approx(1.0, abs=1e-9)


def test_evaluate_difficulty_levels():
    gts = [_box(0, 10), _box(12, 30)]
    frame = Frame(gts, ["easy", "hard"], [Detection(gts[0], 2.5, "easy"), Detection(gts[1], 0.5, "hard")])
    rep = evaluate([frame])
    assert rep.ap_bev("easy") == pytest.approx(100.0)
    assert rep.ap_bev("hard") == pytest.approx(100.0)
    assert evaluate([Frame(gts[:1], ["moderate"], [])]).ap_bev("easy") is None
    assert "AP_BEV" in rep.to_json()
