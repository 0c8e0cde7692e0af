"""Differentiable mesh rendering: soft silhouettes and composited depth maps.

The silhouette is ``sigmoid(signed_distance / sigma)`` per pixel, measured to
the boundary of the union of projected faces. Depth is a hard z-buffer whose
gradient flows through the exact ray/plane depth of the winning face.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _raster
from .geometry import CameraIntrinsics, TriMesh, check_depth


@dataclass(frozen=True)
class RenderConfig:
    sigma: float = 1.0
    near: float = 0.1
    far: float = 500.0
    cutoff: float = 10.0  # silhouette support radius, in units of sigma

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")


def project_mesh(vertices: np.ndarray, faces: np.ndarray, K: CameraIntrinsics, cfg: RenderConfig):
    """Screen coordinates of every vertex and the mask of renderable faces.

    Faces with any vertex at or in front of the near plane are dropped whole.
    """
    z = vertices[:, 2]
    safe_z = np.where(z > cfg.near, z, 1.0)
    uv = np.column_stack([
        K.fx * vertices[:, 0] / safe_z + K.cx,
        K.fy * vertices[:, 1] / safe_z + K.cy,
    ])
    if len(faces) == 0:
        return uv, np.zeros((0, 3, 2)), np.zeros(0, dtype=np.bool_)
    valid = np.all(z[faces] > cfg.near, axis=1)
    return uv, uv[faces], valid


def _uv_to_vertex_grad(vertices, uv, grad_uv, K: CameraIntrinsics, near: float):
    z = vertices[:, 2]
    inv_z = np.where(z > near, 1.0 / np.where(z > near, z, 1.0), 0.0)
    gu, gv = grad_uv[:, 0], grad_uv[:, 1]
    g = np.empty_like(vertices)
    g[:, 0] = gu * K.fx * inv_z
    g[:, 1] = gv * K.fy * inv_z
    g[:, 2] = -(gu * (uv[:, 0] - K.cx) + gv * (uv[:, 1] - K.cy)) * inv_z
    return g


@functools.lru_cache(maxsize=32)
def _edge_table(faces_bytes: bytes, n_faces: int):
    faces = np.frombuffer(faces_bytes, dtype=np.int64).reshape(n_faces, 3)
    half = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges, inverse = np.unique(np.sort(half, axis=1), axis=0, return_inverse=True)
    incident_face = np.tile(np.arange(n_faces), 3)
    return edges, inverse.reshape(-1), incident_face


def edge_table(faces: np.ndarray):
    """Unique undirected edges plus the (edge, face) incidence lists."""
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    return _edge_table(faces.tobytes(), len(faces))


def contour_edges(faces: np.ndarray, tri: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Edges on the projected contour: open edges or edges between faces of opposite facing."""
    edges, edge_of, face_of = edge_table(faces)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    w_valid = valid[face_of].astype(np.float64)
    n_edges = len(edges)
    n_valid = np.bincount(edge_of, weights=w_valid, minlength=n_edges)
    n_pos = np.bincount(edge_of, weights=w_valid * (area[face_of] > 0), minlength=n_edges)
    n_neg = np.bincount(edge_of, weights=w_valid * (area[face_of] < 0), minlength=n_edges)
    mixed = (n_pos != n_valid) & (n_neg != n_valid)
    return edges[(n_valid == 1) | ((n_valid >= 2) & mixed)]


def _band_scale(cfg: RenderConfig) -> float:
    return 1.0 - 2.0 * expit(-cfg.cutoff)


def _occupancy(sd: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """Sigmoid of the signed distance, stretched to reach exactly 0 and 1 at the cutoff.

    Beyond the cutoff the distance is clamped, so the stretch keeps the image
    continuous there.
    """
    s0 = expit(-cfg.cutoff)
    return np.clip((expit(sd / cfg.sigma) - s0) / _band_scale(cfg), 0.0, 1.0)


@dataclass
class Silhouette:
    """Soft silhouette with its vertex vector-Jacobian product.

    Occupancy is ``sigmoid(sd / sigma)``, affinely stretched to span [0, 1]
    over ``|sd| <= cutoff * sigma``, where ``sd`` is the signed distance from
    the pixel center to the outline of the projected mesh (positive inside).
    The outline is made of the pieces of contour edges not covered by any
    other projected face; where a piece ends at a crossing with another
    face's edge, gradients flow through the crossing point.
    """

    image: np.ndarray
    n_degenerate: int
    _vertices: np.ndarray = field(repr=False)
    _uv: np.ndarray = field(repr=False)
    _edges: np.ndarray = field(repr=False)
    _pieces: np.ndarray = field(repr=False)
    _owner: np.ndarray = field(repr=False)
    _ends: np.ndarray = field(repr=False)
    _arg: np.ndarray = field(repr=False)
    _covered: np.ndarray = field(repr=False)
    _sd: np.ndarray = field(repr=False)
    _K: CameraIntrinsics = field(repr=False)
    _cfg: RenderConfig = field(repr=False)

    @property
    def outline(self) -> np.ndarray:
        """Outline segments in pixel coordinates, shape (P, 2, 2)."""
        return self._pieces

    def vjp(self, grad_image: np.ndarray) -> np.ndarray:
        """Map dL/d(silhouette) to dL/d(vertices), shape (N, 3)."""
        grad_image = np.asarray(grad_image, dtype=np.float64)
        if grad_image.shape != self.image.shape:
            raise ValueError("cotangent shape does not match the silhouette")
        if len(self._pieces) == 0:
            return np.zeros_like(self._vertices)
        s = expit(self._sd / self._cfg.sigma)
        sign = np.where(self._covered, 1.0, -1.0)
        coef = grad_image * s * (1.0 - s) / (self._cfg.sigma * _band_scale(self._cfg)) * sign
        g_seg = _raster.contour_backward(self._pieces, self._arg, coef)
        grad_uv = _raster.pieces_backward(g_seg, self._owner, self._ends, self._edges,
                                          np.ascontiguousarray(self._uv))
        return _uv_to_vertex_grad(self._vertices, self._uv, grad_uv, self._K, self._cfg.near)


def render_silhouette(mesh: TriMesh, K: CameraIntrinsics, cfg: RenderConfig = RenderConfig()) -> Silhouette:
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    uv, tri, valid = project_mesh(verts, faces, K, cfg)
    if len(faces) == 0 or not valid.any():
        empty = np.zeros(K.shape)
        return Silhouette(empty, 0, verts, uv, np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2, 2)),
                          np.zeros(0, dtype=np.int64), np.zeros((0, 2, 3), dtype=np.int64),
                          np.full(K.shape, -1, dtype=np.int64), empty.astype(bool), empty, K, cfg)
    tri = np.ascontiguousarray(tri)
    covered, n_deg = _raster.coverage(tri, valid, K.height, K.width)
    edges = np.ascontiguousarray(contour_edges(faces, tri, valid))
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    usable = valid & (np.abs(area) >= _raster._MIN_AREA)
    pieces, owner, ends = _raster.outline_pieces(np.ascontiguousarray(uv), edges, faces, usable, 1e-9)
    dist, arg = _raster.contour_distance(pieces, K.height, K.width, cfg.cutoff * cfg.sigma)
    sd = np.where(covered, dist, -dist)
    return Silhouette(_occupancy(sd, cfg), int(n_deg), verts, uv, edges, pieces, owner, ends, arg, covered, sd,
                      K, cfg)


@dataclass
class CompositedDepth:
    """Object depth inside the input mask, background depth elsewhere."""

    image: np.ndarray
    hit: np.ndarray  # pixels whose depth comes from the mesh
    _vertices: np.ndarray = field(repr=False)
    _faces: np.ndarray = field(repr=False)
    _winner: np.ndarray = field(repr=False)
    _K: CameraIntrinsics = field(repr=False)

    def vjp(self, grad_image: np.ndarray) -> np.ndarray:
        grad_image = np.asarray(grad_image, dtype=np.float64)
        if grad_image.shape != self.image.shape:
            raise ValueError("cotangent shape does not match the depth map")
        coef = np.where(self.hit, grad_image, 0.0)
        K = self._K
        return _raster.zbuffer_backward(self._vertices, self._faces, self._winner, coef,
                                        K.fx, K.fy, K.cx, K.cy)


def zbuffer_depth(mesh: TriMesh, K: CameraIntrinsics, cfg: RenderConfig = RenderConfig()):
    """Raw hard z-buffer: (depth with inf where empty, winning face index or -1)."""
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if len(faces) == 0:
        return np.full(K.shape, np.inf), np.full(K.shape, -1, dtype=np.int64)
    uv, tri, valid = project_mesh(verts, faces, K, cfg)
    return _raster.zbuffer(verts, faces, np.ascontiguousarray(tri), valid, K.fx, K.fy, K.cx, K.cy,
                           K.height, K.width, cfg.near, cfg.far)


def render_depth_composited(mesh: TriMesh, K: CameraIntrinsics, background, mask_in,
                            cfg: RenderConfig = RenderConfig()) -> CompositedDepth:
    background = check_depth(background, K)
    mask_in = np.asarray(mask_in)
    if mask_in.shape != K.shape:
        raise ValueError("mask shape does not match camera")
    depth, winner = zbuffer_depth(mesh, K, cfg)
    hit = (mask_in > 0.5) & (winner >= 0)
    image = np.where(hit, depth, background)
    winner = np.where(hit, winner, -1)
    return CompositedDepth(image, hit, np.asarray(mesh.vertices, dtype=np.float64),
                           np.asarray(mesh.faces, dtype=np.int64), winner, K)


@dataclass
class RenderOutput:
    silhouette: Silhouette
    depth: CompositedDepth | None

    def vjp(self, grad_silhouette=None, grad_depth=None) -> np.ndarray:
        g = np.zeros_like(self.silhouette._vertices)
        if grad_silhouette is not None:
            g += self.silhouette.vjp(grad_silhouette)
        if grad_depth is not None and self.depth is not None:
            g += self.depth.vjp(grad_depth)
        return g


def render(mesh: TriMesh, K: CameraIntrinsics, background=None, mask_in=None,
           cfg: RenderConfig = RenderConfig()) -> RenderOutput:
    sil = render_silhouette(mesh, K, cfg)
    depth = None
    if background is not None:
        depth = render_depth_composited(mesh, K, background,
                                        np.ones(K.shape) if mask_in is None else mask_in, cfg)
    return RenderOutput(sil, depth)
