import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshpose.geometry import CameraIntrinsics, TriMesh, pose_vertices
from meshpose.manifold import car_manifold
from meshpose.render import RenderConfig, render, render_depth_composited, render_silhouette

K = CameraIntrinsics(120.0, 120.0, 63.5, 47.5, 128, 96)


def quad(z0: float, half: float = 2.0, tilt: float = 0.0) -> TriMesh:
    """Square in the plane z = z0 + tilt * x."""
    xy = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    v = np.column_stack([xy, z0 + tilt * xy[:, 0]])
    return TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def test_no_faces_gives_empty_silhouette():
    sil = render_silhouette(TriMesh(np.zeros((3, 3)), np.zeros((0, 3), np.int64)), K)
    assert sil.image.shape == K.shape
    assert not sil.image.any()
    np.testing.assert_array_equal(sil.vjp(np.ones(K.shape)), np.zeros((3, 3)))


def test_mesh_behind_camera_is_empty():
    sil = render_silhouette(quad(-5.0), K)
    assert not sil.image.any()


def test_saturated_interior():
    tri = TriMesh(np.array([[-20.0, -20.0, 5.0], [20.0, -20.0, 5.0], [0.0, 20.0, 5.0]]), np.array([[0, 1, 2]]))
    sil = render_silhouette(tri, K)
    assert sil.image[47, 63] > 1 - 1e-3


def test_silhouette_range_and_coverage():
    sil = render_silhouette(quad(10.0), K)
    assert sil.image.min() >= 0 and sil.image.max() <= 1
    # square spans +-24 px around the principal point
    assert sil.image[47, 63] > 0.999
    assert sil.image[47, 63 + 30] < 1e-2
    assert sil.image[47, 63 + 24] == pytest.approx(0.5, abs=0.15)


def test_degenerate_triangles_counted():
    v = np.array([[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [2.0, 0.0, 5.0], [0.0, 1.0, 5.0]])
    sil = render_silhouette(TriMesh(v, np.array([[0, 1, 2], [0, 1, 3]])), K)
    assert sil.n_degenerate == 1
    assert sil.image.max() > 0.5


def _has_medial_tie(uv: np.ndarray, eps: float = 0.01) -> bool:
    """True when some pixel center lies within ``eps`` of the medial axis of the outline.

    There the distance to the outline has a kink and finite differences are
    meaningless, so such scenes are excluded by construction.
    """
    vs, us = np.mgrid[0:K.height, 0:K.width]
    p = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
    near, dist = [], []
    for i in range(3):
        a, b = uv[i], uv[(i + 1) % 3]
        t = np.clip((p - a) @ (b - a) / ((b - a) @ (b - a)), 0, 1)
        q = a + t[:, None] * (b - a)
        near.append(q)
        dist.append(np.linalg.norm(p - q, axis=1))
    dist = np.array(dist)
    order = np.argsort(dist, axis=0)
    i0, i1 = order[0], order[1]
    idx = np.arange(len(p))
    gap = dist[i1, idx] - dist[i0, idx]
    near = np.array(near)
    n0 = (p - near[i0, idx]) / np.maximum(dist[i0, idx], 1e-12)[:, None]
    n1 = (p - near[i1, idx]) / np.maximum(dist[i1, idx], 1e-12)[:, None]
    # a kink needs the two distance gradients to disagree
    bent = np.linalg.norm(n0 - n1, axis=1) > 0.1
    return bool(np.any((gap < eps) & bent & (dist[i0, idx] < 10.0)))


def _fd_triangle_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = rng.uniform(4, 8, 3)
    uv = rng.uniform([20, 15], [108, 81], (3, 2))
    while _has_medial_tie(uv):
        uv = rng.uniform([20, 15], [108, 81], (3, 2))
    v = np.column_stack([(uv[:, 0] - K.cx) / K.fx * z, (uv[:, 1] - K.cy) / K.fy * z, z])
    G = rng.normal(size=K.shape)
    faces = np.array([[0, 1, 2]])

    def f(verts):
        return float(np.sum(G * render_silhouette(TriMesh(verts, faces), K).image))

    sil = render_silhouette(TriMesh(v, faces), K)
    analytic = sil.vjp(G).reshape(-1)
    # h = 1e-3 px in screen space, converted to meters at each vertex depth
    numeric = np.zeros(9)
    for i in range(9):
        h = 1e-3 * z[i // 3] / K.fx
        e = np.zeros(9)
        e[i] = h
        numeric[i] = (f(v + e.reshape(3, 3)) - f(v - e.reshape(3, 3))) / (2 * h)
    return np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)


def test_single_triangle_gradient_matches_fd():
    errs = [_fd_triangle_check(s) for s in range(20)]
    assert max(errs) < 1e-3


def _car(seed: int, scale: float = 1.0):
    m = car_manifold()
    rng = np.random.default_rng(seed)
    v = pose_vertices(m.canonical_vertices(rng.normal(0, 0.5, 3)),
                      [rng.uniform(-1, 1), rng.uniform(0.5, 1.2), rng.uniform(6, 14)], rng.uniform(0, 2 * np.pi))
    c = v.mean(axis=0)
    return TriMesh(c + scale * (v - c), m.faces)


@given(st.integers(0, 10 ** 6), st.floats(1.0, 1.5))
def test_silhouette_monotone_under_enlargement(seed, scale):
    a = render_silhouette(_car(seed), K).image
    b = render_silhouette(_car(seed, scale), K).image
    assert np.all(b >= a - 1e-12)


def test_silhouette_exact_beyond_cutoff():
    from scipy import ndimage
    big = CameraIntrinsics(480.0, 480.0, 255.5, 191.5, 512, 384)
    sil = render_silhouette(_car(3), big)
    inside = sil.image > 0.5
    deep = ndimage.distance_transform_edt(inside) > 11
    far = ndimage.distance_transform_edt(~inside) > 11
    assert deep.any() and far.any()
    assert np.all(sil.image[deep] == 1.0)
    assert np.all(sil.image[far] == 0.0)


def test_silhouette_deterministic():
    a = render_silhouette(_car(7), K)
    b = render_silhouette(_car(7), K)
    np.testing.assert_array_equal(a.image, b.image)
    g = np.random.default_rng(0).normal(size=K.shape)
    np.testing.assert_array_equal(a.vjp(g), b.vjp(g))


def test_vjp_shape_check():
    with pytest.raises(ValueError):
        render_silhouette(_car(1), K).vjp(np.ones((3, 3)))


def test_depth_fronto_parallel():
    bg = np.full(K.shape, 50.0)
    mask = np.zeros(K.shape)
    mask[40:56, 55:72] = 1
    out = render_depth_composited(quad(10.0), K, bg, mask)
    np.testing.assert_allclose(out.image[mask > 0], 10.0, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(out.image[mask == 0], 50.0)


def test_depth_empty_mask_is_background():
    bg = np.random.default_rng(0).uniform(5, 60, K.shape)
    out = render_depth_composited(quad(10.0), K, bg, np.zeros(K.shape))
    np.testing.assert_array_equal(out.image, bg)


def test_depth_missed_pixels_use_background():
    bg = np.full(K.shape, 30.0)
    out = render_depth_composited(quad(10.0), K, bg, np.ones(K.shape))
    assert out.image[0, 0] == 30.0
    assert out.image[47, 63] == pytest.approx(10.0)


def test_depth_tilted_plane():
    tilt = 0.5
    out = render_depth_composited(quad(10.0, tilt=tilt), K, np.zeros(K.shape), np.ones(K.shape))
    vs, us = np.nonzero(out.hit)
    # ray (a, b, 1) * d meets z = 10 + tilt * x  =>  d = 10 / (1 - tilt * a)
    a = (us - K.cx) / K.fx
    np.testing.assert_allclose(out.image[vs, us], 10.0 / (1 - tilt * a), rtol=0, atol=1e-6)


def test_depth_vjp_fd():
    rng = np.random.default_rng(2)
    mesh = quad(10.0, tilt=0.3)
    mask = np.ones(K.shape)
    G = rng.normal(size=K.shape)
    out = render_depth_composited(mesh, K, np.zeros(K.shape), mask)
    g = out.vjp(G)
    v = np.asarray(mesh.vertices)
    h = 1e-6
    fd = np.zeros_like(v)
    for i in range(v.shape[0]):
        for c in range(3):
            e = np.zeros_like(v)
            e[i, c] = h
            plus = render_depth_composited(TriMesh(v + e, mesh.faces), K, np.zeros(K.shape), mask)
            minus = render_depth_composited(TriMesh(v - e, mesh.faces), K, np.zeros(K.shape), mask)
            # fixed winners: compare on pixels covered in both
            both = plus.hit & minus.hit & out.hit
            fd[i, c] = np.sum(G[both] * (plus.image[both] - minus.image[both])) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4)


def test_depth_positive_inside_silhouette():
    mesh = _car(11)
    out = render(mesh, K, np.zeros(K.shape), np.ones(K.shape))
    inside = out.silhouette.image > 0.5
    assert np.all(out.depth.image[inside] > 0)


def test_render_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(sigma=0.0)
    with pytest.raises(ValueError):
        RenderConfig(near=5.0, far=1.0)
