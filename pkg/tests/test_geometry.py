import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meshpose.geometry import (CameraIntrinsics, EmptyObject, FilterConfig, ObjectPose, ShapeManifold, TriMesh,
                               backproject, deform_mesh, extract_object_points, pose_gradients, pose_vertices,
                               project, rotation_y, transform_jacobians, transform_mesh)
from meshpose.manifold import car_manifold, load_manifold, save_manifold
from meshpose.synth import SynthConfig, point_mesh_distance, sample_scene

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
coeffs = arrays(np.float64, 3, elements=finite)


def test_manifold_is_closed_car(manifold):
    assert manifold.watertight
    assert manifold.n_bases == 3
    assert 150 <= manifold.n_vertices <= 250
    v = manifold.mean_vertices
    # ground contact at y = 0, body above it (+y down)
    assert v[:, 1].max() == pytest.approx(0.0, abs=1e-12)
    assert v[:, 1].min() < -1.0
    assert np.ptp(v[:, 2]) > np.ptp(v[:, 0])


def test_deform_zero_is_mean(manifold):
    np.testing.assert_array_equal(deform_mesh(manifold, np.zeros(3)).vertices, manifold.mean_vertices)


def test_deform_first_basis(manifold):
    v = deform_mesh(manifold, [1.0, 0.0, 0.0]).vertices
    np.testing.assert_allclose(v, manifold.mean_vertices + manifold.bases[0], rtol=0, atol=1e-15)


def test_first_basis_lengthens(manifold):
    a = deform_mesh(manifold, [0.0, 0.0, 0.0]).vertices
    b = deform_mesh(manifold, [1.0, 0.0, 0.0]).vertices
    assert np.ptp(b[:, 2]) > np.ptp(a[:, 2])


@given(coeffs)
def test_deform_linear(z):
    m = car_manifold()
    d0 = deform_mesh(m, np.zeros(3)).vertices
    d1 = deform_mesh(m, z).vertices
    d2 = deform_mesh(m, 2 * z).vertices
    np.testing.assert_allclose(d2 - d1, d1 - d0, atol=1e-12)


@given(coeffs, coeffs, st.floats(-2, 2))
def test_deform_collinear(a, b, t):
    m = car_manifold()
    da, db = deform_mesh(m, a).vertices, deform_mesh(m, b).vertices
    dt = deform_mesh(m, a + t * (b - a)).vertices
    np.testing.assert_allclose(dt, da + t * (db - da), atol=1e-11)


def test_deform_rejects_wrong_length(manifold):
    with pytest.raises(ValueError):
        deform_mesh(manifold, [1.0, 2.0])


def test_transform_identity(manifold):
    mesh = deform_mesh(manifold, np.zeros(3))
    out = transform_mesh(mesh, ObjectPose(np.zeros(3), 0.0))
    np.testing.assert_array_equal(out.vertices, mesh.vertices)


def test_transform_half_turn(manifold):
    mesh = deform_mesh(manifold, np.zeros(3))
    out = transform_mesh(mesh, ObjectPose(np.zeros(3), np.pi)).vertices
    v = mesh.vertices
    np.testing.assert_allclose(out, np.column_stack([-v[:, 0], v[:, 1], -v[:, 2]]), atol=1e-12)


def test_transform_quarter_turn():
    mesh = TriMesh(np.array([[0.0, 0.0, 1.0], [0, 0, 0], [1, 0, 0]]), np.array([[0, 1, 2]]))
    out = transform_mesh(mesh, ObjectPose(np.array([1.0, 0.0, 0.0]), np.pi / 2))
    np.testing.assert_allclose(out.vertices[0], [2.0, 0.0, 0.0], atol=1e-12)


@given(arrays(np.float64, 3, elements=finite), st.floats(-10, 10))
def test_transform_rigid(x, yaw):
    v = car_manifold().mean_vertices[::7]
    w = pose_vertices(v, x, yaw)
    dv = np.linalg.norm(v[:, None] - v[None], axis=-1)
    dw = np.linalg.norm(w[:, None] - w[None], axis=-1)
    np.testing.assert_allclose(dw, dv, rtol=1e-9, atol=1e-12)


def test_rotation_orthonormal():
    R = rotation_y(0.7)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-15)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_transform_jacobians_fd(manifold, rng):
    v = manifold.mean_vertices[:10]
    yaw, h = 0.4, 1e-6
    dx, dyaw = transform_jacobians(v, yaw)
    fd = (pose_vertices(v, np.zeros(3), yaw + h) - pose_vertices(v, np.zeros(3), yaw - h)) / (2 * h)
    np.testing.assert_allclose(dyaw, fd, atol=1e-8)
    np.testing.assert_array_equal(dx, np.broadcast_to(np.eye(3), (len(v), 3, 3)))


def test_pose_gradients_fd(manifold, rng):
    z = rng.normal(0, 0.5, 3)
    x = np.array([0.5, 1.0, 10.0])
    yaw = 0.3
    G = rng.normal(size=(manifold.n_vertices, 3))

    def f(p):
        return float(np.sum(G * pose_vertices(manifold.canonical_vertices(p[4:]), p[:3], p[3])))

    gx, gyaw, gz = pose_gradients(manifold.canonical_vertices(z), manifold.bases, yaw, G)
    p = np.concatenate([x, [yaw], z])
    fd = np.array([(f(p + e) - f(p - e)) / 2e-6 for e in np.eye(len(p)) * 1e-6])
    np.testing.assert_allclose(np.concatenate([gx, [gyaw], gz]), fd, rtol=1e-6, atol=1e-6)


def test_manifold_file_roundtrip(manifold, tmp_path):
    path = tmp_path / "car.txt"
    save_manifold(manifold, path)
    back = load_manifold(path)
    np.testing.assert_array_equal(back.mean_vertices, manifold.mean_vertices)
    np.testing.assert_array_equal(back.bases, manifold.bases)
    np.testing.assert_array_equal(back.faces, manifold.faces)
    assert path.read_text().split("\n")[0] == f"{manifold.n_vertices} 3 {len(manifold.faces)}"


def test_manifold_file_truncated(manifold, tmp_path):
    path = tmp_path / "car.txt"
    save_manifold(manifold, path)
    path.write_text(path.read_text()[:-20])
    with pytest.raises(ValueError):
        load_manifold(path)


def test_manifold_validation():
    with pytest.raises(ValueError):
        ShapeManifold(np.zeros((4, 3)), np.zeros((1, 5, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        ShapeManifold(np.zeros((4, 3)), np.zeros((1, 4, 3)), np.array([[0, 1, 7]]))


K = CameraIntrinsics(100.0, 110.0, 31.5, 23.5, 64, 48)


def test_backproject_principal_point():
    Kc = CameraIntrinsics(100.0, 110.0, 30.0, 20.0, 64, 48)
    d = np.zeros(Kc.shape)
    d[20, 30] = 5.0
    np.testing.assert_allclose(backproject(d, Kc), [[0.0, 0.0, 5.0]])


def test_backproject_unit_tangent():
    Kc = CameraIntrinsics(10.0, 10.0, 30.0, 20.0, 64, 48)
    d = np.zeros(Kc.shape)
    d[20, 40] = 2.0
    np.testing.assert_allclose(backproject(d, Kc), [[2.0, 0.0, 2.0]])


def test_backproject_size_mismatch():
    with pytest.raises(ValueError):
        backproject(np.ones((10, 10)), K)


depths = st.one_of(st.just(0.0), st.floats(0.05, 80.0))


@given(arrays(np.float64, (48, 64), elements=depths))
def test_project_backproject_roundtrip(depth):
    pts, pix = backproject(depth, K, return_pixels=True)
    if len(pts) == 0:
        return
    uv = project(pts, K)
    np.testing.assert_allclose(uv, pix, rtol=0, atol=1e-9 * max(K.width, K.height))
    back = np.zeros(K.shape)
    back[pix[:, 1], pix[:, 0]] = pts[:, 2]
    valid = depth > 0
    np.testing.assert_allclose(back[valid], depth[valid], rtol=1e-9)


def test_backproject_skips_invalid():
    d = np.full(K.shape, 3.0)
    d[0, 0] = 0.0
    d[1, 1] = np.nan
    d[2, 2] = -1.0
    assert len(backproject(d, K)) == K.width * K.height - 3


def test_extract_filters_outliers():
    rng = np.random.default_rng(0)
    d = np.full(K.shape, 10.0) + rng.uniform(-0.1, 0.1, K.shape)
    mask = np.zeros(K.shape, np.uint8)
    mask[10:30, 10:40] = 1
    vs, us = np.nonzero(mask)
    bad = rng.choice(len(vs), len(vs) // 10, replace=False)
    d[vs[bad], us[bad]] = 20.0
    pts = extract_object_points(d, mask, K, FilterConfig(tau_abs=0.0, tau_rel=0.3, max_points=10 ** 6))
    assert len(pts) == len(vs) - len(bad)
    assert pts[:, 2].max() < 11.0


def test_extract_subsamples_deterministically():
    cfg = FilterConfig(max_points=512, seed=3)
    d = np.full(K.shape, 10.0)
    mask = np.zeros(K.shape, np.uint8)
    mask.reshape(-1)[:612] = 1
    a = extract_object_points(d, mask, K, cfg)
    b = extract_object_points(d, mask, K, cfg)
    assert a.shape == (512, 3)
    np.testing.assert_array_equal(a, b)


def test_extract_empty_mask():
    with pytest.raises(EmptyObject):
        extract_object_points(np.ones(K.shape), np.zeros(K.shape, np.uint8), K)
    mask = np.ones(K.shape, np.uint8)
    with pytest.raises(EmptyObject):
        extract_object_points(np.zeros(K.shape), mask, K)


def test_extract_rejects_non_binary_mask():
    with pytest.raises(ValueError):
        extract_object_points(np.ones(K.shape), np.full(K.shape, 2), K)


@given(arrays(np.float64, (48, 64), elements=st.floats(0.0, 30.0)),
       arrays(np.uint8, (48, 64), elements=st.integers(0, 1)))
def test_extract_subset_of_backprojection(depth, mask):
    try:
        pts = extract_object_points(depth, mask, K, FilterConfig(max_points=100))
    except EmptyObject:
        assert not np.any((mask == 1) & (depth > 0))
        return
    full, pix = backproject(np.where(mask == 1, depth, 0.0), K, return_pixels=True)
    keys = {tuple(p) for p in full}
    assert all(tuple(p) in keys for p in pts)


def test_extract_points_on_mesh_surface():
    scene = sample_scene(SynthConfig(), seed=5, index=0)
    m = scene.manifold
    for obj, mask in zip(scene.objects, scene.gt_masks):
        if not mask.any():
            continue
        pts = extract_object_points(scene.gt_depth, mask, scene.K)
        local = (pts - obj.pose.x) @ rotation_y(obj.pose.yaw)
        dist = point_mesh_distance(local, m.canonical_vertices(obj.z), m.faces)
        assert dist.max() < 0.01


def test_pose_validation():
    with pytest.raises(ValueError):
        ObjectPose(np.array([0.0, np.nan, 1.0]), 0.0)
    assert 0 <= ObjectPose(np.zeros(3), -0.5).yaw < 2 * np.pi


def test_window_intrinsics():
    Kw = K.window(10, 5, 20, 16)
    assert (Kw.cx, Kw.cy) == (K.cx - 10, K.cy - 5)
    Ks = K.window(0, 0, 128, 96, scale=2.0)
    # a pixel center maps to the corresponding pixel center at double resolution
    p = np.array([[0.3, -0.2, 4.0]])
    np.testing.assert_allclose(project(p, Ks), (project(p, K) + 0.5) * 2 - 0.5)
