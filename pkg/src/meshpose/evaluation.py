"""Detection metrics: boxes from meshes, oriented IoU, AP over 40 recall points."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .formats import KittiLabel
from .geometry import ObjectPose, ShapeManifold, normalize_yaw, rotation_y

DIFFICULTIES = ("easy", "moderate", "hard")
N_RECALL_POINTS = 40
EASY_MIN_HEIGHT = 40.0
MODERATE_MIN_HEIGHT = 25.0


@dataclass(frozen=True)
class Box3D:
    """Yaw-only box; ``center`` is the geometric center, ``dims`` are (h, w, l)."""

    center: tuple
    dims: tuple
    yaw: float

    def __post_init__(self):
        c = tuple(float(v) for v in np.asarray(self.center, dtype=np.float64).reshape(3))
        d = tuple(float(v) for v in np.asarray(self.dims, dtype=np.float64).reshape(3))
        if min(d) <= 0:
            raise ValueError("box dimensions must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", float(self.yaw))

    @property
    def h(self) -> float:
        return self.dims[0]

    @property
    def w(self) -> float:
        return self.dims[1]

    @property
    def l(self) -> float:  # noqa: E743
        return self.dims[2]

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise (x, z) footprint corners."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        ex = np.array([c, -s]) * self.w / 2  # local +x in the ground plane
        ez = np.array([s, c]) * self.l / 2  # local +z (heading)
        ctr = np.array([self.center[0], self.center[2]])
        pts = np.array([ctr + ex + ez, ctr - ex + ez, ctr - ex - ez, ctr + ex - ez])
        return pts if _signed_area(pts) > 0 else pts[::-1]

    def corners(self) -> np.ndarray:
        """Eight 3-D corners in the camera frame."""
        hx, hy, hz = self.w / 2, self.h / 2, self.l / 2
        local = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return local @ rotation_y(self.yaw).T + np.asarray(self.center)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "dims": list(self.dims), "yaw": self.yaw}

    def translated(self, t) -> "Box3D":
        return Box3D(np.asarray(self.center) + np.asarray(t, dtype=np.float64), self.dims, self.yaw)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    est_difficulty: str = "easy"
    bbox2d: tuple | None = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")
        if self.est_difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.est_difficulty!r}")


def mesh_to_box(manifold: ShapeManifold, z, pose: ObjectPose) -> Box3D:
    """Axis-aligned extent of the deformed mesh, posed like the mesh."""
    v = manifold.canonical_vertices(np.asarray(z, dtype=np.float64))
    lo, hi = v.min(axis=0), v.max(axis=0)
    mid = (lo + hi) / 2
    w, h, l = hi - lo
    center = rotation_y(pose.yaw) @ mid + pose.x
    return Box3D(center, (h, w, l), pose.yaw)


# --------------------------------------------------------------------------
# IoU


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    poly = clip_convex(a.bev_corners(), b.bev_corners())
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(poly))


def bev_iou(a: Box3D, b: Box3D) -> float:
    area_a, area_b = a.w * a.l, b.w * b.l
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    ya0, ya1 = a.center[1] - a.h / 2, a.center[1] + a.h / 2
    yb0, yb1 = b.center[1] - b.h / 2, b.center[1] + b.h / 2
    overlap = max(0.0, min(ya1, yb1) - max(ya0, yb0))
    if overlap == 0.0:
        return 0.0
    inter = bev_intersection(a, b) * overlap
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


IOU_FUNCTIONS = {"bev": bev_iou, "3d": iou_3d}


# --------------------------------------------------------------------------
# average precision

TP, FP, IGNORED = "tp", "fp", "ignored"


def match_frame(dets, gts, iou_fn=bev_iou, thresh: float = 0.7, gt_ignore=None, det_ignore=None):
    """Greedy matching in descending score order.

    Returns ``(status, gt_index)`` per detection in input order. A detection
    matching only an ignored ground truth, or flagged in ``det_ignore`` and
    unmatched, is neither a true nor a false positive.
    """
    n_gt = len(gts)
    gt_ignore = np.zeros(n_gt, bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    det_ignore = np.zeros(len(dets), bool) if det_ignore is None else np.asarray(det_ignore, bool)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    used = np.zeros(n_gt, bool)
    result = [None] * len(dets)
    for i in order:
        best, best_iou = -1, -1.0
        best_ign, best_ign_iou = -1, -1.0
        for j in range(n_gt):
            if used[j]:
                continue
            iou = iou_fn(dets[i].box, gts[j])
            if iou < thresh:
                continue
            if gt_ignore[j]:
                if iou > best_ign_iou:
                    best_ign, best_ign_iou = j, iou
            elif iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[best] = True
            result[i] = (TP, best)
        elif best_ign >= 0:
            used[best_ign] = True
            result[i] = (IGNORED, best_ign)
        elif det_ignore[i]:
            result[i] = (IGNORED, -1)
        else:
            result[i] = (FP, -1)
    return result


def precision_recall(scores, is_tp, n_gt: int):
    """Precision and recall after each detection in descending score order."""
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt
    return precision, recall


def ap_from_pr(precision, recall) -> float:
    """Mean interpolated precision at recalls 1/40 ... 40/40, in percent."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    total = 0.0
    for i in range(1, N_RECALL_POINTS + 1):
        r = i / N_RECALL_POINTS
        sel = recall >= r
        total += float(precision[sel].max()) if sel.any() else 0.0
    return 100.0 * total / N_RECALL_POINTS


def average_precision(dets, gts, iou_fn=bev_iou, thresh: float = 0.7, gt_ignore=None, det_ignore=None):
    """AP40 for one frame; ``None`` when there is no (non-ignored) ground truth."""
    gt_ignore = np.zeros(len(gts), bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    n_gt = int((~gt_ignore).sum())
    if n_gt == 0:
        return None
    matches = match_frame(dets, gts, iou_fn, thresh, gt_ignore, det_ignore)
    keep = [k for k, (status, _) in enumerate(matches) if status != IGNORED]
    scores = [dets[k].score for k in keep]
    is_tp = [matches[k][0] == TP for k in keep]
    if not keep:
        return 0.0
    precision, recall = precision_recall(scores, is_tp, n_gt)
    return ap_from_pr(precision, recall)


# --------------------------------------------------------------------------
# difficulty and confidence


def estimate_difficulty(bbox_height: float, truncated: bool = False) -> str:
    if bbox_height >= EASY_MIN_HEIGHT and not truncated:
        return "easy"
    if bbox_height >= MODERATE_MIN_HEIGHT:
        return "moderate"
    return "hard"


def mask_bbox(mask) -> tuple[float, float, float, float]:
    """(left, top, right, bottom) pixel bounds of a binary mask."""
    vs, us = np.nonzero(np.asarray(mask) > 0)
    if len(vs) == 0:
        raise ValueError("empty mask has no bounding box")
    return float(us.min()), float(vs.min()), float(us.max()), float(vs.max())


def mask_touches_border(mask) -> bool:
    m = np.asarray(mask) > 0
    return bool(m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


def difficulty_from_mask(mask) -> str:
    left, top, right, bottom = mask_bbox(mask)
    return estimate_difficulty(bottom - top + 1, mask_touches_border(mask))


def difficulty_from_label(label: KittiLabel) -> str:
    return estimate_difficulty(label.bbox[3] - label.bbox[1] + 1, label.truncated > 0)


_BAND_LOW = {"hard": 0.0, "moderate": 1.0, "easy": 2.0}
_BAND_SPAN = 0.9


def confidence_scores(single_losses, categories) -> np.ndarray:
    """Map ``1 - L_single`` into disjoint per-category bands.

    hard -> [0, 1), moderate -> [1, 2), easy -> [2, 3). Within a category the
    map is affine and increasing in ``1 - L_single``; a category with a single
    (or constant) value lands on its band midpoint.
    """
    losses = np.asarray(single_losses, dtype=np.float64).reshape(-1)
    cats = list(categories)
    if len(cats) != len(losses):
        raise ValueError("one category per loss value is required")
    if not np.all(np.isfinite(losses)):
        raise ValueError("single-image losses must be finite")
    base = 1.0 - losses
    scores = np.empty_like(base)
    for cat in set(cats):
        if cat not in _BAND_LOW:
            raise ValueError(f"unknown difficulty {cat!r}")
        sel = np.array([c == cat for c in cats])
        b = base[sel]
        lo, hi = b.min(), b.max()
        mid = _BAND_LOW[cat] + 0.5
        if hi > lo:
            scores[sel] = mid + _BAND_SPAN * ((b - lo) / (hi - lo) - 0.5)
        else:
            scores[sel] = mid
    return scores


# --------------------------------------------------------------------------
# KITTI label conversion


def wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    w = float(np.mod(a + np.pi, 2 * np.pi) - np.pi)
    return np.pi if w == -np.pi else w


def box_to_label(box: Box3D, bbox2d=(0.0, 0.0, 0.0, 0.0), truncated: float = 0.0,
                 occluded: int = 0, score: float | None = None) -> KittiLabel:
    # KITTI heading is along local +x; ours is along local +z
    ry = wrap_angle(box.yaw - np.pi / 2)
    x, y, zc = box.center
    alpha = wrap_angle(ry - np.arctan2(x, zc))
    return KittiLabel("Car", float(truncated), int(occluded), alpha, tuple(float(v) for v in bbox2d),
                      box.dims, (x, y + box.h / 2, zc), ry, score)


def label_to_box(label: KittiLabel) -> Box3D:
    h = label.dimensions[0]
    x, y, zc = label.location
    return Box3D((x, y - h / 2, zc), label.dimensions, normalize_yaw(label.rotation_y + np.pi / 2))


def label_to_detection(label: KittiLabel) -> Detection:
    score = 1.0 if label.score is None else label.score
    return Detection(label_to_box(label), score, difficulty_from_label(label), label.bbox)


# --------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class Frame:
    """Ground truth and detections of one image."""

    gts: list
    gt_difficulty: list
    dets: list


@dataclass
class EvalReport:
    ap: dict  # {"bev"|"3d": {difficulty: AP or None}}
    pr_curves: dict = field(default_factory=dict)  # {(metric, difficulty): (precision, recall)}
    matches: dict = field(default_factory=dict)  # {(metric, difficulty): per-frame matches}
    thresh: float = 0.7

    def ap_bev(self, difficulty: str):
        return self.ap["bev"][difficulty]

    def ap_3d(self, difficulty: str):
        return self.ap["3d"][difficulty]

    def to_json(self) -> str:
        return json.dumps({"iou_threshold": self.thresh, "AP_BEV": self.ap["bev"], "AP_3D": self.ap["3d"],
                           "matches": {f"{m}/{d}": v for (m, d), v in self.matches.items()}},
                          indent=2, sort_keys=True)

    def to_table(self, method: str = "meshpose") -> str:
        def fmt(v):
            return "   -  " if v is None else f"{v:6.2f}"

        head = (f"{'Method':<12} | AP_BEV,{self.thresh:g}: {'Easy':>6} {'Mode':>6} {'Hard':>6} "
                f"| AP_3D,{self.thresh:g}: {'Easy':>6} {'Mode':>6} {'Hard':>6}")
        row = (f"{method:<12} | {'':10}{' '.join(fmt(self.ap['bev'][d]) for d in DIFFICULTIES)} "
               f"| {'':9}{' '.join(fmt(self.ap['3d'][d]) for d in DIFFICULTIES)}")
        return head + "\n" + "-" * len(head) + "\n" + row + "\n"

    def pr_csv(self) -> str:
        lines = ["metric,difficulty,rank,precision,recall"]
        for (metric, diff), (prec, rec) in sorted(self.pr_curves.items()):
            for k, (p, r) in enumerate(zip(prec, rec)):
                lines.append(f"{metric},{diff},{k},{p!r},{r!r}")
        return "\n".join(lines) + "\n"


def evaluate(frames, thresh: float = 0.7) -> EvalReport:
    """KITTI-style AP40: difficulty D counts ground truth of difficulty <= D.

    Harder ground truth is ignored; unmatched detections estimated harder
    than D are ignored as well.
    """
    ap = {"bev": {}, "3d": {}}
    curves, matches = {}, {}
    for metric, fn in IOU_FUNCTIONS.items():
        for level, diff in enumerate(DIFFICULTIES):
            scores, is_tp, n_gt, per_frame = [], [], 0, []
            for fr in frames:
                gt_ign = [DIFFICULTIES.index(g) > level for g in fr.gt_difficulty]
                det_ign = [DIFFICULTIES.index(d.est_difficulty) > level for d in fr.dets]
                n_gt += len(gt_ign) - sum(gt_ign)
                m = match_frame(fr.dets, fr.gts, fn, thresh, gt_ign, det_ign)
                per_frame.append([[s, j] for s, j in m])
                for d, (status, _) in zip(fr.dets, m):
                    if status != IGNORED:
                        scores.append(d.score)
                        is_tp.append(status == TP)
            matches[(metric, diff)] = per_frame
            if n_gt == 0:
                ap[metric][diff] = None
                continue
            if not scores:
                ap[metric][diff] = 0.0
                curves[(metric, diff)] = (np.zeros(0), np.zeros(0))
                continue
            prec, rec = precision_recall(scores, is_tp, n_gt)
            curves[(metric, diff)] = (prec, rec)
            ap[metric][diff] = ap_from_pr(prec, rec)
    return EvalReport(ap, curves, matches, thresh)


# --------------------------------------------------------------------------
# bird's-eye-view plots


def bev_svg(gt_boxes, pred_boxes, x_range=(-20.0, 20.0), z_range=(0.0, 50.0), scale: float = 12.0) -> str:
    """Top-down SVG: ground truth in red, predictions in green."""
    width = (x_range[1] - x_range[0]) * scale
    height = (z_range[1] - z_range[0]) * scale

    def to_px(x, z):
        return (x - x_range[0]) * scale, height - (z - z_range[0]) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
             f'viewBox="0 0 {width:.0f} {height:.0f}">',
             f'<rect x="0" y="0" width="{width:.0f}" height="{height:.0f}" fill="white"/>']
    x0, y0 = to_px(0.0, z_range[0])
    x1, y1 = to_px(0.0, z_range[1])
    parts.append(f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" y2="{y1:.1f}" stroke="gray" stroke-width="1"/>')
    a0, b0 = to_px(x_range[0], z_range[0])
    a1, b1 = to_px(x_range[1], z_range[0])
    parts.append(f'<line x1="{a0:.1f}" y1="{b0 - 1:.1f}" x2="{a1:.1f}" y2="{b1 - 1:.1f}" stroke="gray" stroke-width="1"/>')
    for z in range(int(z_range[0]), int(z_range[1]) + 1, 10):
        tx, ty = to_px(x_range[0], z)
        parts.append(f'<text x="{tx + 2:.1f}" y="{ty - 2:.1f}" font-size="10" fill="gray">{z} m</text>')
    for boxes, color in ((gt_boxes, "red"), (pred_boxes, "green")):
        for box in boxes:
            pts = " ".join("{:.1f},{:.1f}".format(*to_px(x, z)) for x, z in box.bev_corners())
            parts.append(f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
            c, s = np.cos(box.yaw), np.sin(box.yaw)
            hx, hz = box.center[0] + s * box.l / 2, box.center[2] + c * box.l / 2
            p0, p1 = to_px(box.center[0], box.center[2]), to_px(hx, hz)
            parts.append(f'<line x1="{p0[0]:.1f}" y1="{p0[1]:.1f}" x2="{p1[0]:.1f}" y2="{p1[1]:.1f}" '
                         f'stroke="{color}" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
