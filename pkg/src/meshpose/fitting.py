"""Per-instance pose and shape fitting by gradient descent through the renderer."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import (TWO_PI, CameraIntrinsics, EmptyObject, FilterConfig, ObjectPose, ShapeManifold,
                       TriMesh, check_depth, extract_object_points, pose_gradients, pose_vertices)
from .losses import (FitState, FrameTriplet, LossBreakdown, LossWeights, chamfer_loss, hindsight,
                     photometric_loss, pose_cd, seg_loss)
from .manifold import car_manifold
from .render import RenderConfig, render_depth_composited, render_silhouette

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    n_bins: int = 8
    max_iters: int = 300
    lr_x: float = 0.05
    lr_yaw: float = 0.02
    lr_z: float = 0.01
    lr_aux: float = 0.05
    tol: float = 1e-4  # stop when the best loss improved less than this (relative) ...
    patience: int = 25  # ... over this many iterations
    seed: int = 0
    pose_cd: bool = True
    optimize_shape: bool = False
    init_y: str = "max"  # "max": ground contact (+y down); "min": lowest y, i.e. the roof
    z_max: float = 3.0
    roi_size: int = 80
    align_iters: int = 60  # chamfer-only pre-alignment of each hypothesis; 0 disables it
    align_offsets: tuple = (0.0, 0.75, 1.5)  # start depths behind the anchor, along the ray
    n_levels: int = 8
    sigma: float = 1.0
    filter: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be at least 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if min(self.lr_x, self.lr_yaw, self.lr_z, self.lr_aux) <= 0:
            raise ValueError("step sizes must be positive")
        if self.tol < 0 or self.patience < 1:
            raise ValueError("tol must be non-negative and patience positive")
        if self.init_y not in ("max", "min"):
            raise ValueError("init_y must be 'max' or 'min'")
        if self.align_iters < 0 or not self.align_offsets:
            raise ValueError("align_iters must be non-negative and align_offsets non-empty")
        if self.roi_size < 8:
            raise ValueError("roi_size must be at least 8 pixels")


# --------------------------------------------------------------------------
# region of interest


@dataclass(frozen=True)
class Roi:
    """A possibly downscaled window of the image.

    ROI pixel (i, j) has its center at full-resolution coordinates
    ``(u0 - 0.5 + (i + 0.5) / scale, v0 - 0.5 + (j + 0.5) / scale)``.
    """

    K: CameraIntrinsics
    u0: int
    v0: int
    scale: float

    def full_coords(self, sub: int = 1):
        """Full-resolution sample positions, ``sub`` x ``sub`` per ROI pixel."""
        offs = (np.arange(sub) + 0.5) / sub
        us = self.u0 - 0.5 + (np.arange(self.K.width)[:, None] + offs[None, :]).reshape(-1) / self.scale
        vs = self.v0 - 0.5 + (np.arange(self.K.height)[:, None] + offs[None, :]).reshape(-1) / self.scale
        return us, vs


def make_roi(mask, K: CameraIntrinsics, roi_size: int = 80) -> Roi:
    """Window around the mask padded by max(8 px, 25%), shrunk to at most ``roi_size``."""
    vs, us = np.nonzero(np.asarray(mask) > 0)
    if len(vs) == 0:
        raise EmptyObject("mask is empty")
    lo_u, hi_u, lo_v, hi_v = us.min(), us.max(), vs.min(), vs.max()
    pad_u = max(8, int(math.ceil(0.25 * (hi_u - lo_u + 1))))
    pad_v = max(8, int(math.ceil(0.25 * (hi_v - lo_v + 1))))
    u0, u1 = max(0, lo_u - pad_u), min(K.width - 1, hi_u + pad_u)
    v0, v1 = max(0, lo_v - pad_v), min(K.height - 1, hi_v + pad_v)
    ext_u, ext_v = u1 - u0 + 1, v1 - v0 + 1
    s = min(1.0, roi_size / max(ext_u, ext_v))
    w, h = max(int(math.ceil(ext_u * s)), 2), max(int(math.ceil(ext_v * s)), 2)
    return Roi(K.window(u0, v0, w, h, s), int(u0), int(v0), float(s))


def _nearest(img: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ui = np.clip(np.floor(us + 0.5).astype(np.int64), 0, w - 1)
    vi = np.clip(np.floor(vs + 0.5).astype(np.int64), 0, h - 1)
    return img[np.ix_(vi, ui)]


def resample_mask(mask, roi: Roi) -> np.ndarray:
    """Area-averaged mask on the ROI grid (supersampled nearest lookups)."""
    sub = max(1, int(math.ceil(1.0 / roi.scale)))
    us, vs = roi.full_coords(sub)
    m = _nearest(np.asarray(mask, dtype=np.float64), us, vs)
    h, w = roi.K.height, roi.K.width
    return m.reshape(h, sub, w, sub).mean(axis=(1, 3))


def resample_image(img, roi: Roi, mode: str = "bilinear") -> np.ndarray:
    us, vs = roi.full_coords(1)
    img = np.asarray(img, dtype=np.float64)
    if mode == "nearest":
        return _nearest(img, us, vs)
    h, w = img.shape
    uu = np.clip(us, 0, w - 1)[None, :]
    vv = np.clip(vs, 0, h - 1)[:, None]
    u0 = np.clip(np.floor(uu).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vv).astype(np.int64), 0, max(h - 2, 0))
    a, b = uu - u0, vv - v0
    u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
    top = img[v0, u0] * (1 - a) + img[v0, u1] * a
    bottom = img[v1, u0] * (1 - a) + img[v1, u1] * a
    return top * (1 - b) + bottom * b


def neighbour_window(roi: Roi, bg_roi: np.ndarray, points: np.ndarray, triplet: FrameTriplet,
                     K: CameraIntrinsics, pad_frac: float = 0.2, pad_min: int = 32):
    """Part of the neighbour frames that the ROI can warp into.

    The observed background and object points are moved to both neighbours;
    the union of their projections is padded to allow for the fitted depth
    differing from the observed one. Returns (u0, v0, width, height).
    """
    Kr = roi.K
    vs, us = np.nonzero(np.isfinite(bg_roi))
    z = bg_roi[vs, us]
    bg = np.stack([(us - Kr.cx) * z / Kr.fx, (vs - Kr.cy) * z / Kr.fy, z], axis=1)
    uv = []
    for ego, obj in zip(triplet.ego_motion, triplet.object_motion):
        moved = [bg @ ego[:3, :3].T + ego[:3, 3]]
        if len(points):
            p = points @ obj[:3, :3].T + obj[:3, 3]
            moved.append(p @ ego[:3, :3].T + ego[:3, 3])
        q = np.concatenate(moved)
        q = q[q[:, 2] > 1e-3]
        uv.append(np.stack([K.fx * q[:, 0] / q[:, 2] + K.cx, K.fy * q[:, 1] / q[:, 2] + K.cy], axis=1))
    uv = np.concatenate(uv + [np.array([[roi.u0, roi.v0], [roi.u0 + Kr.width / roi.scale,
                                                             roi.v0 + Kr.height / roi.scale]])])
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    pad = np.maximum(pad_min, pad_frac * (hi - lo))
    lo = np.clip(np.floor(lo - pad), 0, [K.width - 2, K.height - 2]).astype(int)
    hi = np.clip(np.ceil(hi + pad), lo + 1, [K.width - 1, K.height - 1]).astype(int)
    return int(lo[0]), int(lo[1]), int(hi[0] - lo[0] + 1), int(hi[1] - lo[1] + 1)


# --------------------------------------------------------------------------
# objective


@dataclass
class Evaluation:
    breakdown: LossBreakdown
    grad_x: np.ndarray
    grad_yaw: float
    grad_z: np.ndarray
    grad_x_aux: np.ndarray

    def finite(self) -> bool:
        return bool(np.isfinite(self.breakdown.total) and np.all(np.isfinite(self.grad_x))
                    and np.isfinite(self.grad_yaw) and np.all(np.isfinite(self.grad_z))
                    and np.all(np.isfinite(self.grad_x_aux)))


class InstanceProblem:
    """Loss and gradients of one object instance as a function of its FitState.

    With ``pose_cd`` the chamfer term is evaluated at ``x_aux`` and the main
    position only sees the segmentation and reconstruction terms; otherwise
    the chamfer term acts on ``x`` directly and ``x_aux`` is unused.
    """

    def __init__(self, depth, mask, K: CameraIntrinsics, manifold: ShapeManifold | None = None,
                 weights: LossWeights = LossWeights(), cfg: FitConfig = FitConfig(),
                 triplet: FrameTriplet | None = None):
        self.manifold = car_manifold() if manifold is None else manifold
        self.weights = weights
        self.cfg = cfg
        self.K = K
        depth = check_depth(depth, K)
        mask = (np.asarray(mask) > 0).astype(np.uint8)
        self.points = extract_object_points(depth, mask, K, replace(cfg.filter, seed=cfg.filter.seed + cfg.seed))
        self.roi = make_roi(mask, K, cfg.roi_size)
        self.mask_roi = resample_mask(mask, self.roi)
        self.render_cfg = RenderConfig(sigma=cfg.sigma)
        self.triplet = triplet if weights.w_rec > 0 else None
        self.has_triplet = self.triplet is not None
        if self.triplet is not None:
            bg = resample_image(np.where(np.isfinite(depth), depth, 0.0), self.roi, "nearest")
            self.bg_roi = np.where(bg > 0, bg, np.nan)
            u0, v0, w, h = neighbour_window(self.roi, self.bg_roi, self.points, self.triplet, K)
            self.K_adjacent = K.window(u0, v0, w, h)
            imgs = self.triplet.images
            crop = (slice(v0, v0 + h), slice(u0, u0 + w))
            # copies, so the full-resolution frames can be released
            self.triplet_roi = FrameTriplet((imgs[0][crop].copy(), resample_image(imgs[1], self.roi),
                                             imgs[2][crop].copy()),
                                            self.triplet.ego_motion, self.triplet.object_motion)
            self.triplet = None

    @property
    def n_bases(self) -> int:
        return self.manifold.n_bases

    def evaluate(self, state: FitState, with_grad: bool = True) -> Evaluation:
        m, w = self.manifold, self.weights
        canonical = m.canonical_vertices(state.z)
        verts = pose_vertices(canonical, state.x, state.yaw)
        mesh = TriMesh(verts, m.faces)
        Kr = self.roi.K
        sil = render_silhouette(mesh, Kr, self.render_cfg)
        seg, g_sil = seg_loss(self.mask_roi, sil.image, self.cfg.n_levels, with_grad=True)
        g_verts = w.w_seg * sil.vjp(g_sil) if with_grad and w.w_seg > 0 else np.zeros_like(verts)

        rec = 0.0
        if self.has_triplet:
            in_mask = self.mask_roi > 0.5
            comp = render_depth_composited(mesh, Kr, self.bg_roi, in_mask, self.render_cfg)
            rec, g_depth = photometric_loss(self.triplet_roi, comp.image, in_mask, Kr, self.cfg.n_levels,
                                            K_adjacent=self.K_adjacent, with_grad=True)
            if with_grad:
                g_verts = g_verts + w.w_rec * comp.vjp(np.nan_to_num(g_depth))

        delta = w.huber_delta
        if self.cfg.pose_cd:
            cd = pose_cd(state, self.points, m, delta)
            gx_cd, gaux_cd = np.zeros(3), w.w_cd * cd.grad_x_aux
        else:
            cd = chamfer_loss(self.points, m, state.z, state.x, state.yaw, delta)
            gx_cd, gaux_cd = w.w_cd * cd.grad_x, np.zeros(3)
        bd = LossBreakdown.from_parts(seg, cd.value, rec, w)
        if not with_grad:
            zero = np.zeros(3)
            return Evaluation(bd, zero, 0.0, np.zeros(m.n_bases), zero)
        g_x, g_yaw, g_z = pose_gradients(canonical, m.bases, state.yaw, g_verts)
        return Evaluation(bd, g_x + gx_cd, g_yaw + w.w_cd * cd.grad_yaw, g_z + w.w_cd * cd.grad_z, gaux_cd)


# --------------------------------------------------------------------------
# optimization


def initial_position(points, init_y: str = "max") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyObject("cannot initialize from an empty point cloud")
    y = pts[:, 1].max() if init_y == "max" else pts[:, 1].min()
    return np.array([np.median(pts[:, 0]), y, np.median(pts[:, 2])])


def bin_yaws(n_bins: int) -> np.ndarray:
    return TWO_PI * np.arange(n_bins) / n_bins


def init_hypotheses(points, n_bins: int = 8, init_y: str = "max", n_bases: int = 3) -> list[FitState]:
    """One state per orientation bin, all at the point-cloud anchor with the mean shape."""
    x = initial_position(points, init_y)
    return [FitState(ObjectPose(x, yaw), np.zeros(n_bases), x) for yaw in bin_yaws(n_bins)]


def align_hypothesis(points, manifold: ShapeManifold, state: FitState, cfg: FitConfig,
                     delta: float = 0.5) -> FitState:
    """Move a hypothesis onto the point cloud by chamfer descent at fixed yaw.

    The visible surface lies in front of the object center, and one-sided
    chamfer has a spurious minimum with the far side of the mesh on the
    points, so several starts pushed back along the viewing ray are tried.
    """
    if cfg.align_iters == 0:
        return state
    ray = state.x / np.linalg.norm(state.x)
    best_x, best_val = state.x, math.inf
    for off in cfg.align_offsets:
        x = state.x + off * ray
        opt = Adam(np.full(3, cfg.lr_aux))
        for _ in range(cfg.align_iters):
            r = chamfer_loss(points, manifold, state.z, x, state.yaw, delta)
            x = opt.step(x, r.grad_x)
        val = chamfer_loss(points, manifold, state.z, x, state.yaw, delta).value
        if val < best_val:
            best_x, best_val = x, val
    return FitState(ObjectPose(best_x, state.yaw), state.z, best_x)


class Adam:
    """Adam on a flat parameter vector with per-coordinate step sizes."""

    def __init__(self, lr: np.ndarray, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = np.asarray(lr, dtype=np.float64)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(self.lr)
        self.v = np.zeros_like(self.lr)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _pack(state: FitState) -> np.ndarray:
    return np.concatenate([state.x, [state.yaw], state.z, state.x_aux])


def _unpack(p: np.ndarray, k: int) -> FitState:
    return FitState(ObjectPose(p[:3], p[3]), p[4:4 + k], p[4 + k:7 + k])


@dataclass
class BinTrace:
    state: FitState
    breakdown: LossBreakdown | None
    initial_total: float
    iterations: int
    converged: bool
    error: str | None = None


def optimize_bin(problem: InstanceProblem, init: FitState, cfg: FitConfig) -> BinTrace:
    """Adam from ``init``; returns the best iterate seen (never worse than ``init``)."""
    k = problem.n_bases
    lr = np.concatenate([np.full(3, cfg.lr_x), [cfg.lr_yaw], np.full(k, cfg.lr_z), np.full(3, cfg.lr_aux)])
    mask = np.ones_like(lr)
    if not cfg.optimize_shape:
        mask[4:4 + k] = 0.0
    if not cfg.pose_cd:
        mask[4 + k:] = 0.0
    opt = Adam(lr)
    params = _pack(init)
    best_state, best_bd, initial = init, None, math.inf
    history = []
    it = 0
    for it in range(cfg.max_iters + 1):
        state = _unpack(params, k)
        try:
            ev = problem.evaluate(state, with_grad=it < cfg.max_iters)
        except (FloatingPointError, ValueError) as exc:
            return BinTrace(best_state, best_bd, initial, it, False, f"evaluation failed: {exc}")
        if not ev.finite():
            return BinTrace(best_state, best_bd, initial, it, False, "non-finite loss or gradient")
        total = ev.breakdown.total
        if it == 0:
            initial = total
        if best_bd is None or total < best_bd.total:
            best_state, best_bd = state, ev.breakdown
        history.append(best_bd.total)
        if it == cfg.max_iters:
            break
        if len(history) > cfg.patience:
            past = history[-1 - cfg.patience]
            if past - best_bd.total <= cfg.tol * abs(past):
                return BinTrace(best_state, best_bd, initial, it, True)
        grad = np.concatenate([ev.grad_x, [ev.grad_yaw], ev.grad_z, ev.grad_x_aux]) * mask
        params = params + (opt.step(params, grad) - params) * mask
        params[4:4 + k] = np.clip(params[4:4 + k], -cfg.z_max, cfg.z_max)
        if not cfg.pose_cd:
            params[4 + k:] = params[:3]
    return BinTrace(best_state, best_bd, initial, it, False)


@dataclass
class FitResult:
    best: FitState
    breakdown: LossBreakdown
    per_bin_losses: list
    iterations: list
    converged: bool
    best_bin: int
    diagnostics: list = field(default_factory=list)
    per_bin_states: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "state": self.best.to_dict(),
            "breakdown": self.breakdown.as_dict(),
            "per_bin_losses": [float(v) if np.isfinite(v) else None for v in self.per_bin_losses],
            "iterations": list(self.iterations),
            "converged": self.converged,
            "best_bin": self.best_bin,
            "diagnostics": list(self.diagnostics),
        }


def fit_problem(problem: InstanceProblem, cfg: FitConfig | None = None, inits=None) -> FitResult:
    cfg = problem.cfg if cfg is None else cfg
    if inits is None:
        inits = init_hypotheses(problem.points, cfg.n_bins, cfg.init_y, problem.n_bases)
        # with no iteration budget the result is the raw initial hypothesis
        if cfg.max_iters > 0:
            inits = [align_hypothesis(problem.points, problem.manifold, s, cfg, problem.weights.huber_delta)
                     for s in inits]
    traces = [optimize_bin(problem, s, cfg) for s in inits]
    losses = [t.breakdown.total if t.breakdown is not None else math.inf for t in traces]
    diagnostics = [f"bin {b}: {t.error}" for b, t in enumerate(traces) if t.error]
    if all(t.breakdown is None for t in traces):
        raise FloatingPointError("every orientation bin failed: " + "; ".join(diagnostics))
    _, b = hindsight(losses)
    win = traces[b]
    return FitResult(win.state, win.breakdown, losses, [t.iterations for t in traces], win.converged, b,
                     diagnostics, [t.state for t in traces])


def fit_instance(depth, mask, K: CameraIntrinsics, manifold: ShapeManifold | None = None,
                 weights: LossWeights = LossWeights(), cfg: FitConfig = FitConfig(),
                 triplet: FrameTriplet | None = None) -> FitResult:
    """Fit pose (and optionally shape) of the object under ``mask``.

    Without a triplet the reconstruction term is dropped.
    """
    problem = InstanceProblem(depth, mask, K, manifold, weights, cfg, triplet)
    return fit_problem(problem, cfg)


class InstanceFitter(BaseEstimator):
    """Estimator wrapper: ``predict`` fits each (depth, mask, K[, triplet]) instance.

    There is nothing to learn, so ``fit`` only validates the parameters.
    """

    def __init__(self, n_bins: int = 8, max_iters: int = 300, pose_cd: bool = True,
                 optimize_shape: bool = False, init_y: str = "max", roi_size: int = 80,
                 w_rec: float = 1.0, w_cd: float = 1.0, w_seg: float = 1.0, huber_delta: float = 0.5,
                 seed: int = 0):
        self.n_bins = n_bins
        self.max_iters = max_iters
        self.pose_cd = pose_cd
        self.optimize_shape = optimize_shape
        self.init_y = init_y
        self.roi_size = roi_size
        self.w_rec = w_rec
        self.w_cd = w_cd
        self.w_seg = w_seg
        self.huber_delta = huber_delta
        self.seed = seed

    def _configs(self):
        cfg = FitConfig(n_bins=self.n_bins, max_iters=self.max_iters, pose_cd=self.pose_cd,
                        optimize_shape=self.optimize_shape, init_y=self.init_y, roi_size=self.roi_size,
                        seed=self.seed)
        return cfg, LossWeights(self.w_rec, self.w_cd, self.w_seg, self.huber_delta)

    def fit(self, X=None, y=None):
        self._configs()
        return self

    def predict(self, X) -> list[FitResult]:
        cfg, weights = self._configs()
        out = []
        for item in X:
            depth, mask, K = item[:3]
            triplet = item[3] if len(item) > 3 else None
            out.append(fit_instance(depth, mask, K, None, weights, cfg, triplet))
        return out


def config_dict(cfg: FitConfig) -> dict:
    return asdict(cfg)
