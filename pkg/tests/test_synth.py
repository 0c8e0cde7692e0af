import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshpose.formats import KittiLabel, LabelParseError, read_labels, read_pfm, write_labels, write_pfm
from meshpose.geometry import CameraIntrinsics, ObjectPose, ShapeManifold, TriMesh, pose_vertices
from meshpose.render import render_silhouette
from meshpose.synth import (NoiseSpec, SceneObject, SceneSpec, SynthConfig, audit_scene, corrupt, oracle_depth,
                            read_scene, sample_scene, surface_consistency, triplet_consistency, write_scene)

K = CameraIntrinsics(120.0, 120.0, 63.5, 47.5, 128, 96)


def _quad_manifold(half: float = 1.0, height: float = 2.0) -> ShapeManifold:
    # upright square facing the camera, standing on y = 0
    v = np.array([[-half, -height, 0.0], [half, -height, 0.0], [half, 0.0, 0.0], [-half, 0.0, 0.0]])
    return ShapeManifold(v, np.zeros((0, 4, 3)), np.array([[0, 1, 2], [0, 2, 3]]))


def _spec(*xs) -> SceneSpec:
    objs = tuple(SceneObject(ObjectPose(np.array(x, float), 0.0), np.zeros(0), 0.0, 0.0, 0.5) for x in xs)
    return SceneSpec(K, objs, 0.0, 0.0)


def test_oracle_quad_depth():
    depth, owner = oracle_depth(_spec([0.0, 1.65, 10.0]), _quad_manifold())
    inside = owner == 0
    # the quad spans +-12 px wide and 24 px tall above the horizon line at v = cy + 19.8
    assert inside.sum() > 400
    np.testing.assert_allclose(depth[inside], 10.0, rtol=0, atol=1e-9)


def test_oracle_nearer_object_owns_overlap():
    depth, owner = oracle_depth(_spec([0.0, 1.65, 10.0], [2.0, 1.65, 15.0]), _quad_manifold())
    _, far_alone = oracle_depth(_spec([0.0, 1.65, 10.0], [2.0, 1.65, 15.0]), _quad_manifold(), include=[1])
    overlap = (far_alone == 1) & (owner == 0)
    assert overlap.any()
    np.testing.assert_allclose(depth[overlap], 10.0, atol=1e-9)
    assert (owner == 1).any()


@pytest.fixture(scope="module")
def scene():
    return sample_scene(SynthConfig(), seed=3, index=1)


def test_masks_disjoint_and_consistent(scene):
    stack = np.sum(scene.gt_masks, axis=0)
    assert stack.max() <= 1
    assert surface_consistency(scene) < 1e-6


def test_triplet_consistency(scene):
    assert triplet_consistency(scene) < 1e-3


def test_differentiable_silhouette_matches_oracle_mask():
    sc = sample_scene(SynthConfig(max_objects=1, shape_range=0.5), seed=4, index=2)
    obj, m = sc.objects[0], sc.manifold
    mesh = TriMesh(pose_vertices(m.canonical_vertices(obj.z), obj.pose.x, obj.pose.yaw), m.faces)
    hard = render_silhouette(mesh, sc.K).image > 0.5
    gt = sc.gt_masks[0] > 0
    assert np.sum(hard != gt) < 0.02 * gt.sum()


def test_sampler_deterministic():
    a = sample_scene(SynthConfig(), seed=9, index=4)
    b = sample_scene(SynthConfig(), seed=9, index=4)
    assert a.spec.to_dict() == b.spec.to_dict()
    np.testing.assert_array_equal(a.gt_depth, b.gt_depth)
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)


def test_sampler_ranges():
    cfg = SynthConfig()
    for idx in range(4):
        sc = sample_scene(cfg, seed=1, index=idx)
        assert 1 <= len(sc.objects) <= 3
        for o in sc.objects:
            assert 5.0 <= o.pose.x[2] <= 40.0
            assert np.all(np.abs(o.z) <= 0.5)


def test_corrupt_identity(scene):
    obs = corrupt(scene, NoiseSpec())
    np.testing.assert_array_equal(obs.depth, scene.gt_depth)
    for a, b in zip(obs.masks, scene.gt_masks):
        np.testing.assert_array_equal(a, b)


def test_corrupt_scale_bias(scene):
    obs = corrupt(scene, NoiseSpec(scale_bias=1.1, gaussian_sigma=0.01, seed=2))
    m = scene.gt_masks[0] > 0
    ratio = np.median(obs.depth[m] / scene.gt_depth[m])
    # sigma 1 cm on depths of several meters moves the median ratio by far less than 1e-2
    assert ratio == pytest.approx(1.1, abs=1e-2)


def test_corrupt_deterministic(scene):
    spec = NoiseSpec(gaussian_sigma=0.05, scale_bias=1.1, boundary_outlier_rate=0.2, mask_erode_dilate=2, seed=5)
    a, b = corrupt(scene, spec), corrupt(scene, spec)
    np.testing.assert_array_equal(a.depth, b.depth)
    for x, y in zip(a.masks, b.masks):
        np.testing.assert_array_equal(x, y)
    stack = np.sum(a.masks, axis=0)
    assert stack.max() <= 1


def test_noise_spec_validation():
    for bad in (dict(gaussian_sigma=-1.0), dict(scale_bias=0.0), dict(boundary_outlier_rate=1.5),
                dict(mask_erode_dilate=-1)):
        with pytest.raises(ValueError):
            NoiseSpec(**bad)


REFERENCE = ("Car 0.000000 0 -1.570796 100.000000 120.000000 180.000000 170.000000 "
             "1.520000 1.650000 3.900000 0.000000 1.650000 20.000000 -1.570796")


def test_reference_label_line():
    lab = KittiLabel.from_line(REFERENCE)
    assert lab.type == "Car" and lab.score is None and lab.occluded == 0
    assert lab.dimensions == (1.52, 1.65, 3.9)
    assert lab.location == (0.0, 1.65, 20.0)
    assert lab.bbox == (100.0, 120.0, 180.0, 170.0)
    assert lab.to_line() == REFERENCE


six = st.integers(-10 ** 8, 10 ** 8).map(lambda i: i / 1e6)
labels = st.builds(KittiLabel, st.just("Car"), six, st.integers(0, 2), six, st.tuples(six, six, six, six),
                   st.tuples(six, six, six), st.tuples(six, six, six), six, st.one_of(st.none(), six))


@given(st.lists(labels, max_size=6))
def test_label_roundtrip(tmp_path_factory, labs):
    path = tmp_path_factory.mktemp("lab") / "label.txt"
    write_labels(path, labs)
    assert read_labels(path) == labs


def test_empty_label_file(tmp_path):
    p = tmp_path / "label.txt"
    p.write_text("")
    assert read_labels(p) == []
    p.write_text("\n\n")
    assert read_labels(p) == []


def test_label_parse_error_line_number(tmp_path):
    p = tmp_path / "label.txt"
    p.write_text(REFERENCE + "\n\n" + "Car 0 0 1 2 3\n")
    with pytest.raises(LabelParseError) as err:
        read_labels(p)
    assert err.value.lineno == 3
    assert ":3:" in str(err.value)
    p.write_text(REFERENCE.replace("1.520000", "abc") + "\n")
    with pytest.raises(LabelParseError):
        read_labels(p)


def test_pfm_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 50, (7, 5)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "d.pfm", img)
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), img)


def test_write_read_and_audit(tmp_path, scene):
    noise = NoiseSpec(gaussian_sigma=0.02, scale_bias=1.05, seed=1)
    obs = corrupt(scene, noise)
    d = write_scene(tmp_path, scene, obs, noise)
    assert d.name == f"{scene.spec.index:06d}"
    rec = read_scene(d)
    np.testing.assert_array_equal(rec.depth, obs.depth.astype(np.float32))
    for a, b in zip(rec.masks, obs.masks):
        np.testing.assert_array_equal(a, b)
    assert rec.difficulty == scene.difficulty
    assert rec.labels == [lab.quantized() for lab in scene.labels]
    meta = json.loads((d / "meta.json").read_text())
    assert meta["noise"]["scale_bias"] == 1.05
    res = audit_scene(d)
    assert res.ok, res.problems


def test_audit_detects_tampering(tmp_path, scene):
    obs = corrupt(scene)
    d = write_scene(tmp_path, scene, obs, NoiseSpec())
    depth = read_pfm(d / "depth.pfm")
    depth[0, 0] += 1.0
    write_pfm(d / "depth.pfm", depth)
    assert not audit_scene(d).ok
