"""Finite-difference checks of every analytic gradient in the loss stack.

Each check draws a seeded random instance and returns the relative error
``|g_analytic - g_fd| / max(|g_fd|, floor)`` (vector 2-norms) of central
differences against the analytic gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, ObjectPose, TriMesh, pose_gradients, pose_vertices
from .learner import EncoderParams, EncoderShape, PARAM_NAMES, backward, forward
from .losses import FitState, FrameTriplet, chamfer_loss, photometric_loss, pose_cd, seg_loss
from .manifold import car_manifold
from .render import RenderConfig, render_silhouette

SMALL_K = CameraIntrinsics(120.0, 120.0, 63.5, 47.5, 128, 96)
TOLERANCES = {"silhouette": 1e-2, "chamfer": 1e-3, "pose_cd": 1e-3, "photometric": 1e-3, "encoder": 1e-3}


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), floor))


def central_diff(f, p: np.ndarray, h: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    g = np.zeros_like(p)
    for i in range(len(p)):
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (f(p + e) - f(p - e)) / (2 * h)
    return g


def _random_pose(rng) -> ObjectPose:
    return ObjectPose(np.array([rng.uniform(-1, 1), rng.uniform(0.5, 1.2), rng.uniform(9, 14)]),
                      rng.uniform(0, 2 * np.pi))


def _state_params(state: FitState) -> np.ndarray:
    return np.concatenate([state.x, [state.yaw], state.z, state.x_aux])


def _params_state(p: np.ndarray, k: int) -> FitState:
    return FitState(ObjectPose(p[:3], p[3]), p[4:4 + k], p[4 + k:7 + k])


def check_silhouette(seed: int) -> float:
    """seg_loss(render_silhouette(pose, z)) against a mask from a perturbed pose."""
    rng = np.random.default_rng([seed, 1])
    m = car_manifold()
    pose = _random_pose(rng)
    z = rng.normal(0, 0.5, m.n_bases)
    cfg = RenderConfig(sigma=1.0)
    target_pose = ObjectPose(pose.x + rng.normal(0, 0.2, 3), pose.yaw + rng.normal(0, 0.1))
    target = render_silhouette(TriMesh(pose_vertices(m.canonical_vertices(np.zeros(m.n_bases)),
                                                     target_pose.x, target_pose.yaw), m.faces), SMALL_K, cfg)
    mask = (target.image > 0.5).astype(np.float64)

    def loss(p, with_grad=False):
        canon = m.canonical_vertices(p[4:])
        verts = pose_vertices(canon, p[:3], p[3])
        sil = render_silhouette(TriMesh(verts, m.faces), SMALL_K, cfg)
        if not with_grad:
            return seg_loss(mask, sil.image)
        v, g = seg_loss(mask, sil.image, with_grad=True)
        gx, gyaw, gz = pose_gradients(canon, m.bases, p[3], sil.vjp(g))
        return v, np.concatenate([gx, [gyaw], gz])

    p = np.concatenate([pose.x, [pose.yaw], z])
    _, g = loss(p, True)
    return rel_error(g, central_diff(loss, p, 1e-6))


def _cloud(rng, m, pose: ObjectPose, z, n: int = 60) -> np.ndarray:
    verts = pose_vertices(m.canonical_vertices(z), pose.x, pose.yaw)
    pick = rng.choice(len(verts), n, replace=False)
    return verts[pick] + rng.normal(0, 0.15, (n, 3))


def check_chamfer(seed: int) -> float:
    rng = np.random.default_rng([seed, 2])
    m = car_manifold()
    pose = _random_pose(rng)
    z = rng.normal(0, 0.5, m.n_bases)
    pts = _cloud(rng, m, pose, z)
    delta = 0.1
    p = np.concatenate([pose.x + rng.normal(0, 0.1, 3), [pose.yaw + rng.normal(0, 0.05)],
                        z + rng.normal(0, 0.2, m.n_bases)])

    def f(q):
        return chamfer_loss(pts, m, q[4:], q[:3], q[3], delta).value

    r = chamfer_loss(pts, m, p[4:], p[:3], p[3], delta)
    g = np.concatenate([r.grad_x, [r.grad_yaw], r.grad_z])
    return rel_error(g, central_diff(f, p, 1e-6))


def check_pose_cd(seed: int) -> float:
    """Gradient w.r.t. the full state, including the exact zero w.r.t. x."""
    rng = np.random.default_rng([seed, 3])
    m = car_manifold()
    pose = _random_pose(rng)
    pts = _cloud(rng, m, pose, np.zeros(m.n_bases))
    state = FitState(ObjectPose(pose.x + rng.normal(0, 0.5, 3), pose.yaw + rng.normal(0, 0.05)),
                     rng.normal(0, 0.2, m.n_bases), pose.x + rng.normal(0, 0.1, 3))
    k = m.n_bases

    def f(q):
        return pose_cd(_params_state(q, k), pts, m, 0.1).value

    r = pose_cd(state, pts, m, 0.1)
    g = np.concatenate([r.grad_x, [r.grad_yaw], r.grad_z, r.grad_x_aux])
    return rel_error(g, central_diff(f, _state_params(state), 1e-6))


def check_photometric(seed: int, n_probe: int = 24) -> float:
    """Photometric loss gradient w.r.t. depth, probed at random pixels."""
    rng = np.random.default_rng([seed, 4])
    h, w = 40, 56
    K = CameraIntrinsics(60.0, 60.0, 27.5, 19.5, w, h)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))

    def texture(u, v, phase):
        return 0.5 + 0.2 * np.sin(0.37 * u + phase) * np.cos(0.29 * v - phase) + 0.1 * np.sin(0.11 * (u + v))

    images = tuple(texture(uu, vv, ph) for ph in rng.uniform(0, 1, 3))
    ego = tuple(np.array([[1, 0, 0, s * 0.05], [0, 1, 0, 0.0], [0, 0, 1, s * 0.4], [0, 0, 0, 1.0]]) for s in (-1, 1))
    obj = tuple(np.array([[1, 0, 0, s * 0.1], [0, 1, 0, 0.0], [0, 0, 1, 0.0], [0, 0, 0, 1.0]]) for s in (-1, 1))
    trip = FrameTriplet(images, ego, obj)
    depth = rng.uniform(6, 12, (h, w))
    mask = np.zeros((h, w))
    mask[10:30, 15:40] = 1.0
    _, g = photometric_loss(trip, depth, mask, K, n_levels=4, with_grad=True)
    probes = [tuple(x) for x in np.stack([rng.integers(2, h - 2, n_probe), rng.integers(2, w - 2, n_probe)], 1)]
    ga, gn = [], []
    hstep = 1e-6
    for (i, j) in probes:
        d1, d2 = depth.copy(), depth.copy()
        d1[i, j] += hstep
        d2[i, j] -= hstep
        gn.append((photometric_loss(trip, d1, mask, K, 4) - photometric_loss(trip, d2, mask, K, 4)) / (2 * hstep))
        ga.append(g[i, j])
    return rel_error(ga, gn)


def check_encoder(seed: int) -> float:
    """Tiny encoder (8 points, 4 hidden units) under a random smooth surrogate loss.

    The shared layers are checked with the auxiliary output held out of the
    loss (the gradient barrier drops that path by design); the auxiliary
    head is checked on the full loss.
    """
    rng = np.random.default_rng([seed, 5])
    shape = EncoderShape(h1=4, h2=4, trunk=4, aux_hidden=4, n_bins=4, n_bases=3)
    params = EncoderParams.init(shape, seed=seed, head_scale=0.5)
    pts = rng.normal(0, 1, (8, 3)) + [0.0, 1.0, 10.0]
    a, b, c, d = (rng.normal(size=n) for n in (3, shape.n_bins, shape.n_bases, 3))

    def loss(flat, aux_weight):
        q = params.copy()
        q.set_flat(flat)
        o = forward(q, pts)
        return a @ o.x + b @ o.yaws + c @ o.z + 0.5 * o.x @ o.x + aux_weight * (d @ o.x_aux + 0.5 * o.x_aux @ o.x_aux)

    out = forward(params, pts)
    grads = backward(params, out, a + out.x, b, c, d + out.x_aux)
    analytic = np.concatenate([grads[k].reshape(-1) for k in PARAM_NAMES])
    flat = params.flat()
    shared = central_diff(lambda f: loss(f, 0.0), flat, 1e-6)
    full = central_diff(lambda f: loss(f, 1.0), flat, 1e-6)
    numeric, off = np.zeros_like(flat), 0
    for k in PARAM_NAMES:
        n = params.arrays[k].size
        src = full if k.startswith(("Wa", "ba")) else shared
        numeric[off:off + n] = src[off:off + n]
        off += n
    return rel_error(analytic, numeric)


CHECKS = {
    "silhouette": check_silhouette,
    "chamfer": check_chamfer,
    "pose_cd": check_pose_cd,
    "photometric": check_photometric,
    "encoder": check_encoder,
}


@dataclass
class CheckRow:
    name: str
    n: int
    worst: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def run_suite(n_instances: int = 20, seed: int = 0, names=None) -> list[CheckRow]:
    rows = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        errs = [CHECKS[name](seed + i) for i in range(n_instances)]
        rows.append(CheckRow(name, n_instances, max(errs), TOLERANCES[name], time.perf_counter() - t0))
    return rows


def format_rows(rows) -> str:
    lines = [f"{'check':<12} {'n':>3} {'worst rel err':>14} {'tol':>8} {'time':>7}  result"]
    for r in rows:
        lines.append(f"{r.name:<12} {r.n:>3} {r.worst:>14.3e} {r.tol:>8.0e} {r.seconds:>6.1f}s  "
                     f"{'PASS' if r.ok else 'FAIL'}")
    return "\n".join(lines)
