"""Camera model, mesh deformation and rigid transforms, depth back-projection.

Coordinate conventions follow the KITTI camera frame: +x right, +y down,
+z forward. Object meshes live in a canonical frame whose origin is the
ground-contact center of the mean mesh; at yaw 0 the vehicle length runs
along +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


class EmptyObject(ValueError):
    """Raised when an object has no usable pixels or points."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    y = float(np.mod(yaw, TWO_PI))
    # np.mod can return exactly 2*pi for tiny negative inputs
    return 0.0 if y >= TWO_PI else y


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; pixel (u, v) has its center at integer coords."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    def window(self, u0: float, v0: float, width: int, height: int, scale: float = 1.0) -> "CameraIntrinsics":
        """Intrinsics of a sub-window starting at pixel (u0, v0), resampled by ``scale``.

        The principal point of a window may lie outside it, so the bounds
        check is skipped.
        """
        if scale <= 0 or width <= 0 or height <= 0:
            raise ValueError("window size and scale must be positive")
        win = object.__new__(CameraIntrinsics)
        vals = (self.fx * scale, self.fy * scale, scale * (self.cx - u0 + 0.5) - 0.5,
                scale * (self.cy - v0 + 0.5) - 0.5, int(width), int(height))
        for name, val in zip(("fx", "fy", "cx", "cy", "width", "height"), vals):
            object.__setattr__(win, name, val)
        return win

    @classmethod
    def kitti(cls) -> "CameraIntrinsics":
        """Intrinsics of the KITTI left color camera (sequence 0 calibration)."""
        return cls(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)


@dataclass(frozen=True)
class ObjectPose:
    """Position (meters, camera frame) and yaw about the camera y-axis."""

    x: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        x = _frozen(self.x)
        if x.shape != (3,) or not np.all(np.isfinite(x)):
            raise ValueError("pose position must be a finite 3-vector")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices)
        f = _frozen(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be N x 3")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be F x 3")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)


def edge_manifold_ok(faces: np.ndarray) -> bool:
    """True when every undirected edge is shared by exactly two faces."""
    faces = np.asarray(faces)
    if faces.size == 0:
        return False
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


@dataclass(frozen=True)
class ShapeManifold:
    """Mean mesh plus K linear vertex displacement bases.

    ``bases`` has shape (K, N, 3). ``watertight`` is computed at construction;
    a non-watertight mesh is accepted but flagged.
    """

    mean_vertices: np.ndarray
    bases: np.ndarray
    faces: np.ndarray
    watertight: bool = field(init=False)

    def __post_init__(self):
        mean = _frozen(self.mean_vertices)
        bases = _frozen(self.bases)
        faces = _frozen(self.faces, dtype=np.int64)
        if mean.ndim != 2 or mean.shape[1] != 3:
            raise ValueError("mean_vertices must be N x 3")
        if bases.size == 0:
            bases = _frozen(np.zeros((0,) + mean.shape))
        if bases.ndim != 3 or bases.shape[1:] != mean.shape:
            raise ValueError("bases must be K x N x 3")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError("faces must be F x 3")
        if faces.size and (faces.min() < 0 or faces.max() >= len(mean)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "mean_vertices", mean)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "watertight", edge_manifold_ok(faces))

    @property
    def n_vertices(self) -> int:
        return self.mean_vertices.shape[0]

    @property
    def n_bases(self) -> int:
        return self.bases.shape[0]

    def canonical_vertices(self, z=None) -> np.ndarray:
        if z is None:
            return np.array(self.mean_vertices)
        z = check_shape_coeffs(z, self.n_bases)
        return self.mean_vertices + np.tensordot(z, self.bases, axes=1)


def check_shape_coeffs(z, k: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != k:
        raise ValueError(f"expected {k} shape coefficients, got {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise ValueError("shape coefficients must be finite")
    return z


def deform_mesh(manifold: ShapeManifold, z) -> TriMesh:
    """Deformed canonical mesh: mean vertices plus the z-weighted bases."""
    return TriMesh(manifold.canonical_vertices(np.asarray(z, dtype=np.float64)), manifold.faces)


def rotation_y(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_y_derivative(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def pose_vertices(canonical: np.ndarray, x, yaw: float) -> np.ndarray:
    """Apply v' = R_y(yaw) v + x to an (N, 3) array without building a mesh."""
    return canonical @ rotation_y(yaw).T + np.asarray(x, dtype=np.float64)


def transform_mesh(mesh: TriMesh, pose: ObjectPose) -> TriMesh:
    return TriMesh(pose_vertices(mesh.vertices, pose.x, pose.yaw), mesh.faces)


def transform_jacobians(vertices: np.ndarray, yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of posed vertices w.r.t. position and yaw.

    Returns ``(d_dx, d_dyaw)`` with shapes (N, 3, 3) and (N, 3); ``vertices``
    are the canonical (un-posed) positions.
    """
    n = vertices.shape[0]
    d_dx = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    d_dyaw = vertices @ rotation_y_derivative(yaw).T
    return d_dx, d_dyaw


def pose_gradients(canonical: np.ndarray, bases: np.ndarray, yaw: float,
                   grad_vertices: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Pull per-vertex gradients of posed vertices back to (x, yaw, z)."""
    g_x = grad_vertices.sum(axis=0)
    g_yaw = float(np.sum(grad_vertices * (canonical @ rotation_y_derivative(yaw).T)))
    local = grad_vertices @ rotation_y(yaw)  # R^T g per vertex
    g_z = np.einsum("knc,nc->k", bases, local) if bases.shape[0] else np.zeros(0)
    return g_x, g_yaw, g_z


def check_depth(depth, intrinsics: CameraIntrinsics | None = None) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth map must be 2-D")
    if intrinsics is not None and depth.shape != intrinsics.shape:
        raise ValueError(f"depth shape {depth.shape} does not match camera {intrinsics.shape}")
    return depth


def valid_depth(depth: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth) & (depth > 0)


def backproject(depth, intrinsics: CameraIntrinsics, return_pixels: bool = False):
    """Lift valid depth pixels to camera-frame points (row-major pixel order)."""
    depth = check_depth(depth, intrinsics)
    vs, us = np.nonzero(valid_depth(depth))
    d = depth[vs, us]
    pts = np.column_stack([
        (us - intrinsics.cx) / intrinsics.fx * d,
        (vs - intrinsics.cy) / intrinsics.fy * d,
        d,
    ])
    if return_pixels:
        return pts, np.column_stack([us, vs])
    return pts


def project(points, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Project (M, 3) camera-frame points to (M, 2) pixel coordinates (u, v)."""
    p = np.asarray(points, dtype=np.float64)
    z = p[:, 2]
    return np.column_stack([
        intrinsics.fx * p[:, 0] / z + intrinsics.cx,
        intrinsics.fy * p[:, 1] / z + intrinsics.cy,
    ])


@dataclass(frozen=True)
class FilterConfig:
    """Depth-outlier filter and subsampling for object point clouds."""

    tau_abs: float = 1.5
    tau_rel: float = 0.2
    max_points: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.tau_abs < 0 or self.tau_rel < 0:
            raise ValueError("filter thresholds must be non-negative")
        if self.max_points < 1:
            raise ValueError("max_points must be positive")


def extract_object_points(depth, mask, intrinsics: CameraIntrinsics,
                          cfg: FilterConfig = FilterConfig()) -> np.ndarray:
    """Back-project masked pixels and drop depth outliers around the median.

    Points whose depth differs from the masked median by more than
    ``max(tau_abs, tau_rel * median)`` are removed; clouds larger than
    ``cfg.max_points`` are subsampled without replacement with a seeded
    generator (original order preserved).
    """
    depth = check_depth(depth, intrinsics)
    mask = np.asarray(mask)
    if mask.shape != depth.shape:
        raise ValueError("mask and depth shapes differ")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("input mask must be binary")
    sel = (mask == 1) & valid_depth(depth)
    if not sel.any():
        raise EmptyObject("mask has no pixels with valid depth")
    d = depth[sel]
    med = float(np.median(d))
    keep_depth = np.abs(depth - med) <= max(cfg.tau_abs, cfg.tau_rel * med)
    sel &= keep_depth
    vs, us = np.nonzero(sel)
    dd = depth[vs, us]
    pts = np.column_stack([
        (us - intrinsics.cx) / intrinsics.fx * dd,
        (vs - intrinsics.cy) / intrinsics.fy * dd,
        dd,
    ])
    if len(pts) > cfg.max_points:
        rng = np.random.default_rng(cfg.seed)
        idx = np.sort(rng.choice(len(pts), cfg.max_points, replace=False))
        pts = pts[idx]
    return pts
