"""Synthetic driving scenes with exact ground truth.

A scene is a camera 1.65 m above a textured ground plane with one to three
cars from the shape manifold. Three frames (t-1, t, t+1) are rendered with
known ego and object motion. ``corrupt`` turns the exact depth and masks into
the kind of input an off-the-shelf depth and instance network would deliver.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _raster
from .evaluation import Box3D, box_to_label, difficulty_from_mask, label_to_box, mesh_to_box
from .formats import (KittiLabel, read_labels, read_mask, read_pfm, read_unit_image, write_labels,
                      write_mask, write_pfm, write_unit_image)
from .geometry import CameraIntrinsics, ObjectPose, ShapeManifold, rotation_y, valid_depth
from .losses import FrameTriplet, bilinear_sample, rigid
from .manifold import car_manifold
from .render import RenderConfig, project_mesh

log = logging.getLogger(__name__)

SCENE_FORMAT_VERSION = 1
SKY_INTENSITY = 0.8
_ORACLE_CFG = RenderConfig(far=1e4)


@dataclass(frozen=True)
class SynthConfig:
    """Scene sampler ranges; distances in meters, angles in radians."""

    min_objects: int = 1
    max_objects: int = 3
    depth_range: tuple = (5.0, 40.0)
    u_range: tuple = (0.1, 0.9)  # object center, as a fraction of the image width
    shape_range: float = 0.5
    camera_height: float = 1.65
    min_pixels: int = 100
    min_visible: float = 0.75  # visible share of the unoccluded silhouette
    min_separation: float = 5.0
    ego_step: tuple = (0.5, 1.0)
    ego_turn: float = 0.02
    object_speed: tuple = (0.0, 1.0)
    object_turn: float = 0.03
    max_ground_depth: float = 80.0
    image_scale: float = 1.0
    max_tries: int = 100

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.depth_range[0] <= self.depth_range[1]:
            raise ValueError("invalid depth range")
        if not 0 <= self.u_range[0] <= self.u_range[1] <= 1:
            raise ValueError("u_range must lie in [0, 1]")
        if self.shape_range < 0 or self.camera_height <= 0 or self.image_scale <= 0:
            raise ValueError("shape_range, camera_height and image_scale must be non-negative/positive")
        if not 0 <= self.min_visible <= 1:
            raise ValueError("min_visible must lie in [0, 1]")

    def camera(self) -> CameraIntrinsics:
        k = CameraIntrinsics.kitti()
        if self.image_scale == 1.0:
            return k
        s = self.image_scale
        w, h = max(int(round(k.width * s)), 1), max(int(round(k.height * s)), 1)
        return CameraIntrinsics(k.fx * s, k.fy * s, (k.cx + 0.5) * s - 0.5, (k.cy + 0.5) * s - 0.5, w, h)


@dataclass(frozen=True)
class SceneObject:
    """A car at time t plus its constant per-frame motion and appearance."""

    pose: ObjectPose
    z: np.ndarray
    speed: float = 0.0  # meters per frame along the heading
    turn: float = 0.0  # yaw change per frame
    albedo: float = 0.45

    def pose_at(self, k: int) -> ObjectPose:
        """Pose at frame offset k in {-1, 0, 1}."""
        heading = rotation_y(self.pose.yaw) @ np.array([0.0, 0.0, 1.0])
        return ObjectPose(self.pose.x + k * self.speed * heading, self.pose.yaw + k * self.turn)

    def to_dict(self) -> dict:
        return {"x": self.pose.x.tolist(), "yaw": self.pose.yaw, "z": np.asarray(self.z).tolist(),
                "speed": self.speed, "turn": self.turn, "albedo": self.albedo}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(ObjectPose(np.array(d["x"], dtype=np.float64), float(d["yaw"])),
                   np.array(d["z"], dtype=np.float64), float(d["speed"]), float(d["turn"]),
                   float(d["albedo"]))


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to re-render a scene bit-exactly."""

    K: CameraIntrinsics
    objects: tuple
    ego_step: float
    ego_turn: float
    camera_height: float = 1.65
    max_ground_depth: float = 80.0
    seed: int = 0
    index: int = 0

    def camera_pose(self, k: int) -> np.ndarray:
        """Camera-to-world transform at frame offset k; the world is camera t."""
        return rigid(rotation_y(k * self.ego_turn), [0.0, 0.0, k * self.ego_step])

    def to_dict(self) -> dict:
        return {"camera": self.K.to_dict(), "objects": [o.to_dict() for o in self.objects],
                "ego_step": self.ego_step, "ego_turn": self.ego_turn,
                "camera_height": self.camera_height, "max_ground_depth": self.max_ground_depth,
                "seed": self.seed, "index": self.index}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(CameraIntrinsics.from_dict(d["camera"]),
                   tuple(SceneObject.from_dict(o) for o in d["objects"]),
                   float(d["ego_step"]), float(d["ego_turn"]), float(d["camera_height"]),
                   float(d["max_ground_depth"]), int(d["seed"]), int(d["index"]))


@dataclass
class Frame:
    """One rendered frame: depth (0 = invalid), owner id per pixel and intensities.

    Owner ids: object index, -1 for ground, -2 for sky.
    """

    depth: np.ndarray
    owner: np.ndarray
    image: np.ndarray


@dataclass
class Scene:
    spec: SceneSpec
    frames: tuple  # Frame at t-1, t, t+1
    gt_masks: list
    gt_boxes: list
    difficulty: list
    labels: list
    manifold: ShapeManifold = field(repr=False, default=None)

    @property
    def K(self) -> CameraIntrinsics:
        return self.spec.K

    @property
    def objects(self) -> tuple:
        return self.spec.objects

    @property
    def gt_depth(self) -> np.ndarray:
        return self.frames[1].depth

    @property
    def images(self) -> tuple:
        return tuple(f.image for f in self.frames)

    @property
    def ego_motion(self) -> tuple:
        """Maps camera-t coordinates into the cameras at t-1 and t+1."""
        return tuple(np.linalg.inv(self.spec.camera_pose(k)) for k in (-1, 1))

    def object_motion(self, i: int) -> tuple:
        """Moves object i's points (camera-t coordinates) to their place at t-1 and t+1."""
        obj = self.spec.objects[i]
        p0 = _pose_matrix(obj.pose)
        return tuple(_pose_matrix(obj.pose_at(k)) @ np.linalg.inv(p0) for k in (-1, 1))

    def triplet(self, i: int) -> FrameTriplet:
        return FrameTriplet(self.images, self.ego_motion, self.object_motion(i))


def _pose_matrix(pose: ObjectPose) -> np.ndarray:
    return rigid(rotation_y(pose.yaw), pose.x)


# --------------------------------------------------------------------------
# textures


def car_texture(local: np.ndarray, albedo: float) -> np.ndarray:
    """Smooth procedural paint pattern in object coordinates."""
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    return (albedo + 0.12 * np.sin(2 * np.pi * z / 0.9) * np.cos(2 * np.pi * x / 0.8)
            + 0.08 * np.sin(2 * np.pi * (y / 0.6 + z / 1.3)))


def ground_texture(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """World-fixed road texture; contrast fades with distance to avoid aliasing."""
    amp = np.exp(-(z / 18.0) ** 2)
    return 0.35 + amp * (0.12 * np.sin(2 * np.pi * x / 2.3) * np.cos(2 * np.pi * z / 6.1)
                         + 0.06 * np.sin(2 * np.pi * (x / 3.1 + z / 7.3)))


# --------------------------------------------------------------------------
# oracle rendering


def _scene_mesh(spec: SceneSpec, manifold: ShapeManifold, k: int, include=None):
    cam_inv = np.linalg.inv(spec.camera_pose(k))
    verts, faces = [], []
    n = manifold.n_vertices
    ids = range(len(spec.objects)) if include is None else include
    for slot, i in enumerate(ids):
        obj = spec.objects[i]
        pose = obj.pose_at(k)
        world = manifold.canonical_vertices(obj.z) @ rotation_y(pose.yaw).T + pose.x
        verts.append(world @ cam_inv[:3, :3].T + cam_inv[:3, 3])
        faces.append(manifold.faces + slot * n)
    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), []
    return np.concatenate(verts), np.concatenate(faces), list(ids)


def _zbuffer(K: CameraIntrinsics, verts, faces):
    if len(faces) == 0:
        return np.full(K.shape, np.inf), np.full(K.shape, -1, dtype=np.int64)
    _, tri, valid = project_mesh(verts, faces, K, _ORACLE_CFG)
    return _raster.zbuffer(verts, faces, np.ascontiguousarray(tri), valid, K.fx, K.fy, K.cx, K.cy,
                           K.height, K.width, _ORACLE_CFG.near, _ORACLE_CFG.far)


def _ground_depth(spec: SceneSpec) -> np.ndarray:
    K = spec.K
    ry = (np.arange(K.height, dtype=np.float64) - K.cy) / K.fy
    with np.errstate(divide="ignore"):
        d = np.where(ry > 0, spec.camera_height / np.where(ry > 0, ry, 1.0), np.inf)
    d = np.where(d <= spec.max_ground_depth, d, np.inf)
    return np.broadcast_to(d[:, None], K.shape)


def oracle_depth(spec: SceneSpec, manifold: ShapeManifold, k: int = 0, include=None):
    """Hard z-buffer of the ground plus the selected objects at frame offset k.

    Returns depth (0 where nothing is hit within range) and owner ids.
    """
    verts, faces, ids = _scene_mesh(spec, manifold, k, include)
    obj_depth, winner = _zbuffer(spec.K, verts, faces)
    ground = _ground_depth(spec)
    if ids:
        lut = np.asarray(ids, dtype=np.int64)
        owner = np.where(winner >= 0, lut[np.maximum(winner, 0) // len(manifold.faces)], -1)
    else:
        owner = np.full(spec.K.shape, -1, dtype=np.int64)
    use_obj = obj_depth <= ground
    depth = np.where(use_obj, obj_depth, ground)
    owner = np.where(use_obj, owner, np.where(np.isfinite(ground), -1, -2))
    depth = np.where(np.isfinite(depth), depth, 0.0)
    return depth, owner


def render_frame(spec: SceneSpec, manifold: ShapeManifold, k: int) -> Frame:
    K = spec.K
    depth, owner = oracle_depth(spec, manifold, k)
    vs, us = np.mgrid[0:K.height, 0:K.width]
    rays = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones(K.shape)], axis=-1)
    cam = spec.camera_pose(k)
    world = (rays * depth[..., None]) @ cam[:3, :3].T + cam[:3, 3]
    image = np.full(K.shape, SKY_INTENSITY)
    ground = owner == -1
    image[ground] = ground_texture(world[ground][:, 0], world[ground][:, 2])
    for i, obj in enumerate(spec.objects):
        sel = owner == i
        if not sel.any():
            continue
        pose = obj.pose_at(k)
        local = (world[sel] - pose.x) @ rotation_y(pose.yaw)
        image[sel] = car_texture(local, obj.albedo)
    return Frame(depth, owner, np.clip(image, 0.0, 1.0))


def _truncation(spec: SceneSpec, manifold: ShapeManifold, i: int) -> float:
    obj = spec.objects[i]
    verts = manifold.canonical_vertices(obj.z) @ rotation_y(obj.pose.yaw).T + obj.pose.x
    u = spec.K.fx * verts[:, 0] / verts[:, 2] + spec.K.cx
    v = spec.K.fy * verts[:, 1] / verts[:, 2] + spec.K.cy
    full = (u.max() - u.min()) * (v.max() - v.min())
    cu = max(0.0, min(u.max(), spec.K.width - 1) - max(u.min(), 0.0))
    cv = max(0.0, min(v.max(), spec.K.height - 1) - max(v.min(), 0.0))
    return float(np.clip(1.0 - cu * cv / full, 0.0, 1.0)) if full > 0 else 1.0


def _visibility(spec: SceneSpec, manifold: ShapeManifold, owner: np.ndarray):
    """Visible pixel count and visible share of the unoccluded silhouette per object."""
    out = []
    for i in range(len(spec.objects)):
        visible = int((owner == i).sum())
        _, solo = oracle_depth(spec, manifold, 0, include=[i])
        alone = int((solo == i).sum())
        out.append((visible, visible / alone if alone else 0.0))
    return out


def build_scene(spec: SceneSpec, manifold: ShapeManifold | None = None) -> Scene:
    """Render all three frames and derive masks, boxes and labels."""
    manifold = car_manifold() if manifold is None else manifold
    frames = tuple(render_frame(spec, manifold, k) for k in (-1, 0, 1))
    owner = frames[1].owner
    masks, boxes, diffs, labels = [], [], [], []
    vis = _visibility(spec, manifold, owner)
    for i, obj in enumerate(spec.objects):
        mask = (owner == i).astype(np.uint8)
        masks.append(mask)
        box = mesh_to_box(manifold, obj.z, obj.pose)
        boxes.append(box)
        if mask.any():
            vs, us = np.nonzero(mask)
            bbox = (float(us.min()), float(vs.min()), float(us.max()), float(vs.max()))
            diffs.append(difficulty_from_mask(mask))
        else:
            bbox = (0.0, 0.0, 0.0, 0.0)
            diffs.append("hard")
        share = vis[i][1]
        occluded = 0 if share >= 0.9 else (1 if share >= 0.5 else 2)
        labels.append(box_to_label(box, bbox, _truncation(spec, manifold, i), occluded))
    return Scene(spec, frames, masks, boxes, diffs, labels, manifold)


def sample_scene(cfg: SynthConfig = SynthConfig(), seed: int = 0, index: int = 0,
                 manifold: ShapeManifold | None = None) -> Scene:
    """Draw a random scene; the generator is seeded by (seed, index)."""
    manifold = car_manifold() if manifold is None else manifold
    rng = np.random.default_rng([seed, index])
    K = cfg.camera()
    for _ in range(cfg.max_tries):
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objects = []
        for _ in range(n):
            for _ in range(cfg.max_tries):
                depth = rng.uniform(*cfg.depth_range)
                u = rng.uniform(*cfg.u_range) * (K.width - 1)
                x = (u - K.cx) * depth / K.fx
                if all(np.hypot(x - o.pose.x[0], depth - o.pose.x[2]) > cfg.min_separation for o in objects):
                    break
            else:
                continue
            yaw = rng.uniform(0.0, 2 * np.pi)
            z = rng.uniform(-cfg.shape_range, cfg.shape_range, manifold.n_bases)
            speed = rng.uniform(*cfg.object_speed)
            turn = rng.uniform(-cfg.object_turn, cfg.object_turn)
            albedo = rng.uniform(0.3, 0.6)
            objects.append(SceneObject(ObjectPose([x, cfg.camera_height, depth], yaw), z, speed, turn, albedo))
        ego_step = rng.uniform(*cfg.ego_step)
        ego_turn = rng.uniform(-cfg.ego_turn, cfg.ego_turn)
        # drop objects that end up too small or too occluded, then re-check
        while objects:
            spec = SceneSpec(K, tuple(objects), ego_step, ego_turn, cfg.camera_height,
                             cfg.max_ground_depth, seed, index)
            _, owner = oracle_depth(spec, manifold, 0)
            vis = _visibility(spec, manifold, owner)
            bad = [i for i, (px, share) in enumerate(vis) if px < cfg.min_pixels or share < cfg.min_visible]
            if not bad:
                return build_scene(spec, manifold)
            objects = [o for i, o in enumerate(objects) if i != bad[0]]
    raise RuntimeError(f"could not sample a valid scene for seed={seed}, index={index}")


# --------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class NoiseSpec:
    """Input degradation: depth = depth * scale_bias + N(0, gaussian_sigma).

    A fraction ``boundary_outlier_rate`` of mask-boundary pixels takes the
    depth of whatever lies behind the object; each mask is eroded or dilated
    by a random radius in [-mask_erode_dilate, mask_erode_dilate].
    """

    gaussian_sigma: float = 0.0
    scale_bias: float = 1.0
    boundary_outlier_rate: float = 0.0
    mask_erode_dilate: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be non-negative")
        if self.scale_bias <= 0:
            raise ValueError("scale_bias must be positive")
        if not 0 <= self.boundary_outlier_rate <= 1:
            raise ValueError("boundary_outlier_rate must lie in [0, 1]")
        if self.mask_erode_dilate < 0:
            raise ValueError("mask_erode_dilate must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.gaussian_sigma == 0 and self.scale_bias == 1 and self.boundary_outlier_rate == 0
                and self.mask_erode_dilate == 0)


@dataclass
class Observation:
    """What the estimator sees: a depth map and binary instance masks."""

    depth: np.ndarray
    masks: list


def _disk(r: int) -> np.ndarray:
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def corrupt(scene: Scene, spec: NoiseSpec = NoiseSpec()) -> Observation:
    depth = scene.gt_depth.copy()
    masks = [m.copy() for m in scene.gt_masks]
    if spec.is_identity:
        return Observation(depth, masks)
    rng = np.random.default_rng([spec.seed, scene.spec.index])
    manifold = scene.manifold or car_manifold()
    valid = valid_depth(depth)

    if spec.boundary_outlier_rate > 0:
        for i, m in enumerate(masks):
            inner = ndimage.binary_erosion(m > 0, structure=np.ones((3, 3), bool))
            boundary = (m > 0) & ~inner
            hit = boundary & (rng.random(depth.shape) < spec.boundary_outlier_rate)
            if hit.any():
                others = [j for j in range(len(scene.objects)) if j != i]
                behind, _ = oracle_depth(scene.spec, manifold, 0, include=others)
                depth[hit] = behind[hit]
        valid = valid_depth(depth)

    noise = rng.normal(0.0, spec.gaussian_sigma, depth.shape) if spec.gaussian_sigma > 0 else 0.0
    depth = np.where(valid, depth * spec.scale_bias + noise, 0.0)
    depth = np.where(depth > 0, depth, 0.0)

    if spec.mask_erode_dilate > 0:
        k = spec.mask_erode_dilate
        claimed = np.zeros(depth.shape, bool)
        originals = [m > 0 for m in masks]
        radii = rng.integers(-k, k + 1, len(masks))
        out = []
        for i, (m, r) in enumerate(zip(originals, radii)):
            if r > 0:
                grown = ndimage.binary_dilation(m, structure=_disk(int(r)))
                foreign = np.zeros_like(m)
                for j, o in enumerate(originals):
                    if j != i:
                        foreign |= o
                new = m | (grown & ~foreign & ~claimed)
            elif r < 0:
                new = ndimage.binary_erosion(m, structure=_disk(int(-r)))
                if not new.any():
                    new = m
            else:
                new = m
            claimed |= new
            out.append(new.astype(np.uint8))
        masks = out
    return Observation(depth, masks)


# --------------------------------------------------------------------------
# triplet consistency


def warp_residual(scene: Scene, neighbour: int, depth: np.ndarray | None = None):
    """Per-pixel |I_t - warp(I_neighbour)| using ground-truth motion.

    ``neighbour`` is 0 (t-1) or 1 (t+1). Pixels that leave the image or are
    hidden in the neighbouring frame are marked invalid.
    """
    K = scene.K
    depth = scene.gt_depth if depth is None else depth
    owner = scene.frames[1].owner
    adj = scene.frames[0 if neighbour == 0 else 2]
    ego = scene.ego_motion[neighbour]
    vs, us = np.mgrid[0:K.height, 0:K.width]
    pts = np.stack([(us - K.cx) / K.fx * depth, (vs - K.cy) / K.fy * depth, depth], axis=-1)
    moved = pts.copy()
    for i in range(len(scene.objects)):
        sel = owner == i
        T = scene.object_motion(i)[neighbour]
        moved[sel] = pts[sel] @ T[:3, :3].T + T[:3, 3]
    P = moved @ ego[:3, :3].T + ego[:3, 3]
    Z = P[..., 2]
    ok = valid_depth(depth) & (Z > 1e-6)
    Zs = np.where(ok, Z, 1.0)
    u = K.fx * P[..., 0] / Zs + K.cx
    v = K.fy * P[..., 1] / Zs + K.cy
    ok &= (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    uc, vc = np.where(ok, u, 0.0), np.where(ok, v, 0.0)
    # visibility: the neighbour's own depth must agree at the landing spot and
    # all four bilinear taps must see the same surface
    ui, vi = np.rint(uc).astype(np.int64), np.rint(vc).astype(np.int64)
    seen = adj.depth[vi, ui]
    ok &= (seen > 0) & (np.abs(seen - Zs) <= 0.02 * Zs)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    u1, v1 = np.minimum(u0 + 1, K.width - 1), np.minimum(v0 + 1, K.height - 1)
    want = np.where(owner >= 0, owner, -1)
    for uu, vv in ((u0, v0), (u1, v0), (u0, v1), (u1, v1)):
        ok &= adj.owner[vv, uu] == want
    warped, _, _ = bilinear_sample(adj.image, uc, vc)
    return np.abs(scene.images[1] - warped), ok


def triplet_consistency(scene: Scene) -> float:
    """Mean warp residual over both neighbours and all co-visible pixels."""
    total, count = 0.0, 0
    for j in (0, 1):
        res, ok = warp_residual(scene, j)
        total += float(res[ok].sum())
        count += int(ok.sum())
    return total / count if count else 0.0


def surface_consistency(scene: Scene) -> float:
    """Largest distance from a back-projected mask pixel to its object's mesh surface."""
    K = scene.K
    manifold = scene.manifold or car_manifold()
    worst = 0.0
    for i, (obj, mask) in enumerate(zip(scene.objects, scene.gt_masks)):
        vs, us = np.nonzero(mask)
        if len(vs) == 0:
            continue
        d = scene.gt_depth[vs, us]
        rays = np.column_stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones(len(us))])
        pts = rays * d[:, None]
        local = (pts - obj.pose.x) @ rotation_y(obj.pose.yaw)
        worst = max(worst, float(point_mesh_distance(local, manifold.canonical_vertices(obj.z),
                                                     manifold.faces).max()))
    return worst


def point_mesh_distance(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Exact distance from each point to the closest triangle (brute force)."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    out = np.empty(len(points))
    for k, p in enumerate(points):
        out[k] = float(np.sqrt(_point_triangle_sq(p, a, b, c).min()))
    return out


def _point_triangle_sq(p, a, b, c):
    # closest point on each triangle, Ericson's region tests, vectorized over faces
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.einsum("ij,ij->i", ab, ap), np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3, d4 = np.einsum("ij,ij->i", ab, bp), np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5, d6 = np.einsum("ij,ij->i", ab, cp), np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        closest = a + ab * v[:, None] + ac * w[:, None]
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    cases = [
        ((d1 <= 0) & (d2 <= 0), a),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[:, None]),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[:, None]),
        ((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + (c - b) * t_bc[:, None]),
    ]
    done = np.zeros(len(a), bool)
    for cond, q in cases:
        sel = cond & ~done
        closest[sel] = q[sel]
        done |= cond
    diff = closest - p
    return np.einsum("ij,ij->i", diff, diff)


# --------------------------------------------------------------------------
# dataset on disk


def scene_dir(root, index: int) -> Path:
    return Path(root) / "scenes" / f"{index:06d}"


def write_scene(root, scene: Scene, obs: Observation, noise: NoiseSpec) -> Path:
    d = scene_dir(root, scene.spec.index)
    d.mkdir(parents=True, exist_ok=True)
    write_pfm(d / "depth.pfm", obs.depth)
    for k, m in enumerate(obs.masks):
        write_mask(d / f"mask_{k}.pgm", m)
    for k, img in enumerate(scene.images):
        write_unit_image(d / f"img_{k}.pgm", img)
    meta = {
        "version": SCENE_FORMAT_VERSION,
        "scene": scene.spec.to_dict(),
        "noise": asdict(noise),
        "difficulty": scene.difficulty,
        "ego_motion": [T.tolist() for T in scene.ego_motion],
        "object_motion": [[T.tolist() for T in scene.object_motion(i)] for i in range(len(scene.objects))],
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    write_labels(d / "label.txt", scene.labels)
    return d


@dataclass
class SceneRecord:
    """A scene as read back from disk."""

    path: Path
    K: CameraIntrinsics
    depth: np.ndarray
    masks: list
    images: tuple
    ego_motion: tuple
    object_motion: list
    labels: list
    difficulty: list
    meta: dict

    @property
    def index(self) -> int:
        return int(self.meta["scene"]["index"])

    def triplet(self, i: int) -> FrameTriplet:
        return FrameTriplet(self.images, self.ego_motion, self.object_motion[i])


def read_scene(path) -> SceneRecord:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"{d}: unsupported scene format version {meta.get('version')!r}")
    K = CameraIntrinsics.from_dict(meta["scene"]["camera"])
    n = len(meta["scene"]["objects"])
    masks = [read_mask(d / f"mask_{k}.pgm") for k in range(n)]
    images = tuple(read_unit_image(d / f"img_{k}.pgm") for k in range(3))
    ego = tuple(np.array(T) for T in meta["ego_motion"])
    obj = [tuple(np.array(T) for T in pair) for pair in meta["object_motion"]]
    return SceneRecord(d, K, read_pfm(d / "depth.pfm"), masks, images, ego, obj,
                       read_labels(d / "label.txt"), list(meta["difficulty"]), meta)


def list_scenes(root) -> list[Path]:
    base = Path(root) / "scenes"
    if not base.is_dir():
        return []
    return sorted(p for p in base.iterdir() if p.is_dir() and (p / "meta.json").exists())


def regenerate(record: SceneRecord, manifold: ShapeManifold | None = None) -> tuple[Scene, Observation]:
    spec = SceneSpec.from_dict(record.meta["scene"])
    scene = build_scene(spec, manifold)
    return scene, corrupt(scene, NoiseSpec(**record.meta["noise"]))


@dataclass
class AuditResult:
    path: Path
    surface_error: float
    triplet_error: float
    problems: list

    @property
    def ok(self) -> bool:
        return not self.problems


def audit_scene(path, surface_tol: float = 1e-6, triplet_tol: float = 1e-3) -> AuditResult:
    """Re-render a stored scene and check it against its files and against itself."""
    rec = read_scene(path)
    scene, obs = regenerate(rec)
    problems = []
    if not np.array_equal(rec.depth, obs.depth.astype(np.float32).astype(np.float64)):
        problems.append("depth.pfm differs from the regenerated input depth")
    for k, (a, b) in enumerate(zip(rec.masks, obs.masks)):
        if not np.array_equal(a, (b > 0).astype(np.uint8)):
            problems.append(f"mask_{k}.pgm differs from the regenerated mask")
    for k, img in enumerate(scene.images):
        if np.abs(rec.images[k] - img).max() > 1.0 / 65535:
            problems.append(f"img_{k}.pgm differs from the regenerated image")
    stack = np.sum([m.astype(np.int64) for m in scene.gt_masks], axis=0) if scene.gt_masks else 0
    if np.any(stack > 1):
        problems.append("ground-truth masks overlap")
    expected = [KittiLabel.quantized(lab) for lab in scene.labels]
    if rec.labels != expected:
        problems.append("label.txt differs from the regenerated labels")
    surf = surface_consistency(scene)
    if surf > surface_tol:
        problems.append(f"depth/mesh mismatch {surf:.3g} m > {surface_tol:g} m")
    trip = triplet_consistency(scene)
    if trip > triplet_tol:
        problems.append(f"triplet warp residual {trip:.3g} > {triplet_tol:g}")
    return AuditResult(Path(path), surf, trip, problems)


def boxes_from_labels(labels) -> list[Box3D]:
    return [label_to_box(lab) for lab in labels]
