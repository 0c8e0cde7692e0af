"""Training objectives.

Every loss that feeds an optimizer can return its gradient alongside its
value (``with_grad=True``). Image pyramids are linear operators, so losses
on pyramids are back-propagated through their exact adjoints.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _raster
from .geometry import (
    CameraIntrinsics,
    EmptyObject,
    ObjectPose,
    ShapeManifold,
    check_shape_coeffs,
    pose_gradients,
    pose_vertices,
    rotation_y,
)

BINOMIAL_5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
DEFAULT_LEVELS = 8


# --------------------------------------------------------------------------
# pyramids


def _reflect_index(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return i if i < n else period - i


@functools.lru_cache(maxsize=256)
def downsample_matrix(n: int) -> np.ndarray:
    """(ceil(n/2), n) operator: 5-tap binomial filter, reflect padding, stride 2."""
    m = (n + 1) // 2
    D = np.zeros((m, n))
    for i in range(m):
        for k, w in enumerate(BINOMIAL_5):
            D[i, _reflect_index(2 * i + k - 2, n)] += w
    D.setflags(write=False)
    return D


def downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return downsample_matrix(h) @ img @ downsample_matrix(w).T


def _level_shapes(shape, n: int) -> list[tuple[int, int]]:
    if n < 1:
        raise ValueError("pyramid needs at least one level")
    shapes = [tuple(shape)]
    while len(shapes) < n:
        h, w = shapes[-1]
        nh, nw = (h + 1) // 2, (w + 1) // 2
        if nh < 2 or nw < 2:
            break
        shapes.append((nh, nw))
    return shapes


@dataclass
class Pyramid:
    """Level 0 is the input; each further level halves the resolution."""

    levels: list[np.ndarray]
    requested: int

    @property
    def count(self) -> int:
        return len(self.levels)

    @property
    def truncated(self) -> bool:
        return self.count < self.requested


def build_pyramid(img, n: int = DEFAULT_LEVELS) -> Pyramid:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("pyramids are built from 2-D images")
    shapes = _level_shapes(img.shape, n)
    levels = [img]
    for _ in shapes[1:]:
        levels.append(downsample(levels[-1]))
    return Pyramid(levels, n)


def pyramid_adjoint(grads: list[np.ndarray]) -> np.ndarray:
    """Adjoint of ``build_pyramid``: sum of per-level cotangents pulled back to level 0."""
    g = np.array(grads[-1], dtype=np.float64)
    for lvl in range(len(grads) - 2, -1, -1):
        h, w = grads[lvl].shape
        g = grads[lvl] + downsample_matrix(h).T @ g @ downsample_matrix(w)
    return g


# --------------------------------------------------------------------------
# weights and bookkeeping


@dataclass(frozen=True)
class LossWeights:
    w_rec: float = 1.0
    w_cd: float = 1.0
    w_seg: float = 1.0
    huber_delta: float = 0.5

    def __post_init__(self):
        if min(self.w_rec, self.w_cd, self.w_seg) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


def single_image_loss(seg: float, cd: float, w: LossWeights) -> float:
    return w.w_cd * cd + w.w_seg * seg


def total_loss(singles, rec: float, w: LossWeights) -> float:
    """Reconstruction term plus the mean single-image loss of the three frames."""
    singles = [float(s) for s in singles]
    if len(singles) != 3:
        raise ValueError("total loss combines exactly three single-image losses")
    return w.w_rec * rec + sum(singles) / 3.0


@dataclass(frozen=True)
class LossBreakdown:
    seg: float
    cd: float
    rec: float
    single: float
    total: float

    CSV_FIELDS = ("seg", "cd", "rec", "single", "total")

    @classmethod
    def from_parts(cls, seg: float, cd: float, rec: float, w: LossWeights,
                   singles=None) -> "LossBreakdown":
        """Compose the breakdown; without other frames the current frame stands for all three."""
        single = single_image_loss(seg, cd, w)
        if singles is None:
            singles = (single, single, single)
        return cls(float(seg), float(cd), float(rec), single, total_loss(singles, rec, w))

    def to_csv_row(self) -> str:
        return ",".join(repr(float(getattr(self, k))) for k in self.CSV_FIELDS)

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS)

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.CSV_FIELDS}


def hindsight(losses) -> tuple[float, int]:
    """Minimum over hypotheses; ties go to the lowest index."""
    arr = np.asarray(losses, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("hindsight needs at least one hypothesis")
    masked = np.where(np.isnan(arr), np.inf, arr)
    i = int(np.argmin(masked))
    return float(arr[i]), i


# --------------------------------------------------------------------------
# segmentation


def seg_loss(mask_in, mask_rend, n_levels: int = DEFAULT_LEVELS, with_grad: bool = False):
    """Sum over pyramid levels of the mean squared mask difference.

    The gradient is taken w.r.t. ``mask_rend``.
    """
    a = np.asarray(mask_in, dtype=np.float64)
    b = np.asarray(mask_rend, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    diff = build_pyramid(a - b, n_levels).levels
    value = float(sum(np.mean(d * d) for d in diff))
    if not with_grad:
        return value
    grads = [-2.0 * d / d.size for d in diff]
    return value, pyramid_adjoint(grads)


# --------------------------------------------------------------------------
# chamfer


def huber(a, delta: float):
    a = np.asarray(a, dtype=np.float64)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_grad(a, delta: float):
    a = np.asarray(a, dtype=np.float64)
    return np.minimum(a, delta)


def nearest_vertices(points: np.ndarray, vertices: np.ndarray, method: str = "brute"):
    """Index of and distance to the nearest vertex for each point.

    ``"brute"`` is an exhaustive compiled search, ``"kdtree"`` uses a k-d
    tree; both are exact and agree except on exact distance ties.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    if method == "brute":
        return _raster.nearest_brute(points, vertices)
    if method == "kdtree":
        dist, idx = cKDTree(vertices).query(points)
        return np.asarray(idx, dtype=np.int64), np.asarray(dist)
    raise ValueError(f"unknown nearest-neighbour method {method!r}")


@dataclass
class ChamferResult:
    value: float
    grad_x: np.ndarray
    grad_yaw: float
    grad_z: np.ndarray
    nearest: np.ndarray = field(repr=False)


def chamfer_loss(points, manifold: ShapeManifold, z, x_eval, yaw: float, delta: float,
                 method: str = "brute") -> ChamferResult:
    """One-sided Huber chamfer from observed points to the posed mesh vertices.

    The argmin is treated as fixed when differentiating.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyObject("chamfer distance needs at least one point")
    z = check_shape_coeffs(z, manifold.n_bases)
    x_eval = np.asarray(x_eval, dtype=np.float64)
    canonical = manifold.canonical_vertices(z)
    # distances are rigid-invariant: query in the object frame
    local = (pts - x_eval) @ rotation_y(yaw)
    idx, dist = nearest_vertices(local, canonical, method)
    m = len(pts)
    value = float(huber(dist, delta).sum() / m)

    posed = pose_vertices(canonical[idx], x_eval, yaw)
    safe = np.where(dist > 0, dist, 1.0)
    coef = np.where(dist > 0, huber_grad(dist, delta) / safe, 0.0) / m
    g_near = coef[:, None] * (posed - pts)
    n = len(canonical)
    grad_vertices = np.column_stack([np.bincount(idx, weights=g_near[:, c], minlength=n) for c in range(3)])
    g_x, g_yaw, g_z = pose_gradients(canonical, manifold.bases, yaw, grad_vertices)
    return ChamferResult(value, g_x, g_yaw, g_z, idx)


@dataclass(frozen=True)
class FitState:
    """Per-object unknowns: main pose, shape coefficients and auxiliary position."""

    pose: ObjectPose
    z: np.ndarray
    x_aux: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=np.float64).reshape(-1)
        aux = np.array(self.x_aux, dtype=np.float64).reshape(-1)
        if aux.shape != (3,) or not np.all(np.isfinite(aux)):
            raise ValueError("x_aux must be a finite 3-vector")
        if not np.all(np.isfinite(z)):
            raise ValueError("shape coefficients must be finite")
        z.setflags(write=False)
        aux.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x_aux", aux)

    @property
    def x(self) -> np.ndarray:
        return self.pose.x

    @property
    def yaw(self) -> float:
        return self.pose.yaw

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "yaw": self.yaw, "z": self.z.tolist(), "x_aux": self.x_aux.tolist()}


@dataclass
class PoseCDResult:
    value: float
    grad_x: np.ndarray  # identically zero: the main position is cut off
    grad_x_aux: np.ndarray
    grad_yaw: float
    grad_z: np.ndarray


def pose_cd(state: FitState, points, manifold: ShapeManifold, delta: float,
            method: str = "brute") -> PoseCDResult:
    """Chamfer distance evaluated at the auxiliary position.

    No gradient reaches the main position; yaw, shape and ``x_aux`` receive
    the chamfer gradient.
    """
    r = chamfer_loss(points, manifold, state.z, state.x_aux, state.yaw, delta, method)
    return PoseCDResult(r.value, np.zeros(3), r.grad_x, r.grad_yaw, r.grad_z)


# --------------------------------------------------------------------------
# photometric reconstruction


def check_rigid(T, atol: float = 1e-9) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise ValueError("rigid transforms are 4x4 matrices")
    R = T[:3, :3]
    if not (np.allclose(R @ R.T, np.eye(3), atol=atol) and abs(np.linalg.det(R) - 1) < 1e-6
            and np.allclose(T[3], [0, 0, 0, 1])):
        raise ValueError("transform is not a proper rigid motion")
    return T


@dataclass(frozen=True)
class FrameTriplet:
    """Images at t-1, t, t+1 plus motions mapping frame-t points to the neighbours.

    ``ego_motion[j]`` maps camera-t coordinates to the camera frame of the
    j-th neighbour (j=0: t-1, j=1: t+1). ``object_motion[j]`` moves the
    object's points, expressed in camera-t coordinates, to where they are at
    that neighbour's time.
    """

    images: tuple
    ego_motion: tuple
    object_motion: tuple

    def __post_init__(self):
        if len(self.images) != 3:
            raise ValueError("a triplet has exactly three images")
        imgs = tuple(np.asarray(i, dtype=np.float64) for i in self.images)
        for im in imgs:
            if im.ndim != 2:
                raise ValueError("triplet images must be 2-D grayscale")
        if len(self.ego_motion) != 2 or len(self.object_motion) != 2:
            raise ValueError("need two ego motions and two object motions")
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "ego_motion", tuple(check_rigid(T) for T in self.ego_motion))
        object.__setattr__(self, "object_motion", tuple(check_rigid(T) for T in self.object_motion))

    @property
    def middle(self) -> np.ndarray:
        return self.images[1]

    @property
    def neighbours(self) -> tuple:
        return (self.images[0], self.images[2])


def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sample ``img`` at (u, v); returns values and d/du, d/dv.

    Callers guarantee 0 <= u <= W-1 and 0 <= v <= H-1.
    """
    h, w = img.shape
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = u - u0
    b = v - v0
    i00, i01 = img[v0, u0], img[v0, u1]
    i10, i11 = img[v1, u0], img[v1, u1]
    top = i00 + a * (i01 - i00)
    bottom = i10 + a * (i11 - i10)
    val = top + b * (bottom - top)
    du = (1 - b) * (i01 - i00) + b * (i11 - i10)
    dv = bottom - top
    return val, du, dv


def _warp(depth, mask, K: CameraIntrinsics, K_adj: CameraIntrinsics, ego, obj, adj_img):
    R_obj = ego[:3, :3] @ obj[:3, :3]
    t_obj = ego[:3, :3] @ obj[:3, 3] + ego[:3, 3]
    in_obj = np.ascontiguousarray(np.asarray(mask) > 0.5)
    return _raster.warp(np.ascontiguousarray(depth, dtype=np.float64), in_obj, K.fx, K.fy, K.cx, K.cy,
                        np.ascontiguousarray(ego[:3, :3]), np.ascontiguousarray(ego[:3, 3]), R_obj, t_obj,
                        K_adj.fx, K_adj.fy, K_adj.cx, K_adj.cy, np.ascontiguousarray(adj_img, dtype=np.float64))


def photometric_loss(triplet: FrameTriplet, depth, mask_in, K: CameraIntrinsics,
                     n_levels: int = DEFAULT_LEVELS, K_adjacent: CameraIntrinsics | None = None,
                     with_grad: bool = False):
    """L1 photometric error of both neighbours warped into the middle frame.

    Pixels inside ``mask_in`` move with the object motion, all others with
    the ego motion only. Out-of-bounds or invalid-depth pixels are excluded;
    each pyramid level is normalized by its share of valid pixels. The
    gradient is taken w.r.t. ``depth``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    target = triplet.middle
    if depth.shape != target.shape or depth.shape != K.shape:
        raise ValueError("depth, middle image and intrinsics must agree in size")
    if np.asarray(mask_in).shape != depth.shape:
        raise ValueError("mask shape does not match depth")
    K_adj = K if K_adjacent is None else K_adjacent
    value = 0.0
    grad = np.zeros_like(depth)
    for j, adj in enumerate(triplet.neighbours):
        if adj.shape != K_adj.shape:
            raise ValueError("neighbour image does not match its intrinsics")
        warped, valid, dwarp = _warp(depth, mask_in, K, K_adj, triplet.ego_motion[j],
                                     triplet.object_motion[j], adj)
        if not valid.any():
            continue
        filled = np.where(valid, warped, target)
        diffs = build_pyramid(target - filled, n_levels).levels
        weights = build_pyramid(valid.astype(np.float64), n_levels).levels
        level_grads = []
        for dl, wl in zip(diffs, weights):
            den = float(wl.sum())
            value += float(np.abs(dl).sum()) / den
            level_grads.append(np.sign(dl) / den)
        if with_grad:
            # d(target - filled)/d(warped) = -1 on valid pixels
            g_filled = -pyramid_adjoint(level_grads)
            grad += np.where(valid, g_filled * dwarp, 0.0)
    if with_grad:
        return value, grad
    return value


def rigid(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def yaw_motion(dyaw: float, t) -> np.ndarray:
    return rigid(rotation_y(dyaw), t)
