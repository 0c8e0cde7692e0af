import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshpose.fitting import InstanceProblem
from meshpose.geometry import EmptyObject
from meshpose.gradcheck import check_encoder
from meshpose.learner import (AUX_PARAMS, PARAM_NAMES, EncoderParams, EncoderShape, PoseEncoder, TrainConfig,
                              TrainHistory, backward, forward, predict_instance, train)
from meshpose.synth import SynthConfig, sample_scene

TINY = EncoderShape(h1=8, h2=8, trunk=8, aux_hidden=4, n_bins=4, n_bases=3)


@pytest.fixture(scope="module")
def problem():
    sc = sample_scene(SynthConfig(shape_range=0.0, max_objects=1), seed=11, index=0)
    return InstanceProblem(sc.gt_depth, sc.gt_masks[0], sc.K, triplet=sc.triplet(0))


def _cloud(seed, n=40):
    return np.random.default_rng(seed).normal(0, 1, (n, 3)) + [1.0, 0.5, 12.0]


def _same_output(a, b):
    for k in ("x", "z", "yaws", "x_aux"):
        np.testing.assert_allclose(getattr(a, k), getattr(b, k), rtol=0, atol=1e-12)


@given(st.integers(0, 10 ** 6))
def test_permutation_invariance(seed):
    params = EncoderParams.init(seed=seed % 7)
    pts = _cloud(seed)
    perm = np.random.default_rng(seed).permutation(len(pts))
    _same_output(forward(params, pts), forward(params, pts[perm]))


@given(st.integers(0, 10 ** 6))
def test_duplicate_invariance(seed):
    params = EncoderParams.init(seed=1)
    pts = _cloud(seed)
    # duplicating every point leaves the pooled feature and the centroid unchanged
    _same_output(forward(params, pts), forward(params, np.vstack([pts, pts])))


@given(st.integers(0, 10 ** 6), st.integers(1, 16))
def test_fresh_residuals_bounded(seed, n_bins):
    params = EncoderParams.init(EncoderShape(n_bins=n_bins), seed=seed)
    out = forward(params, _cloud(seed))
    assert np.all(np.abs(out.residuals) < np.pi / n_bins)
    np.testing.assert_allclose(out.yaws - out.residuals, 2 * np.pi * np.arange(n_bins) / n_bins)


def test_residuals_bounded_when_saturated():
    params = EncoderParams.init(seed=0, head_scale=100.0)
    out = forward(params, _cloud(0) * 50)
    assert np.all(np.abs(out.residuals) <= np.pi / 8)


def test_hypotheses_share_position():
    out = forward(EncoderParams.init(), _cloud(3))
    hyps = out.hypotheses()
    assert len(hyps) == 8
    for h in hyps:
        np.testing.assert_array_equal(h.x, out.x)
        np.testing.assert_array_equal(h.x_aux, out.x_aux)


def test_empty_input_rejected():
    with pytest.raises(EmptyObject):
        forward(EncoderParams.init(), np.zeros((0, 3)))


def test_encoder_gradients_match_fd():
    errs = [check_encoder(s) for s in range(20)]
    assert max(errs) < 1e-2


def test_gradient_cut():
    params = EncoderParams.init(TINY, seed=4, head_scale=0.5)
    pts = _cloud(4, 8)
    rng = np.random.default_rng(0)
    g = [rng.normal(size=3), rng.normal(size=4), rng.normal(size=3), rng.normal(size=3)]
    base = backward(params, forward(params, pts), *g)
    other = params.copy()
    for k in AUX_PARAMS:
        other.arrays[k] = other.arrays[k] + rng.normal(size=other.arrays[k].shape)
    moved = backward(other, forward(other, pts), *g)
    for k in PARAM_NAMES:
        if k not in AUX_PARAMS:
            np.testing.assert_array_equal(moved[k], base[k])
    # and an aux-only gradient touches no shared parameter
    aux_only = backward(params, forward(params, pts), np.zeros(3), np.zeros(4), np.zeros(3), g[3])
    for k in PARAM_NAMES:
        if k not in AUX_PARAMS:
            assert not aux_only[k].any()


def test_zero_lr_keeps_params(problem):
    p0 = EncoderParams.init(TrainConfig().encoder_shape(3), 0)
    params, hist = train([problem], TrainConfig(epochs=1, lr=0.0))
    np.testing.assert_array_equal(params.flat(), p0.flat())
    assert hist.rows[0][2] == 1


def test_single_sample_overfit(problem):
    p0 = EncoderParams.init(TrainConfig().encoder_shape(3), 0)
    before = predict_instance(p0, problem).breakdown.total
    params, _ = train([problem], TrainConfig(epochs=200, batch_size=1))
    after = predict_instance(params, problem).breakdown.total
    assert after < 0.2 * before


def test_train_deterministic_across_threads(problem):
    a, ha = train([problem, problem], TrainConfig(epochs=2, batch_size=2, threads=1))
    b, hb = train([problem, problem], TrainConfig(epochs=2, batch_size=2, threads=2))
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert ha.to_csv() == hb.to_csv()


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train([], TrainConfig(epochs=1))


def test_checkpoint_roundtrip(tmp_path):
    params = EncoderParams.init(TINY, seed=2)
    path = tmp_path / "encoder.bin"
    params.save(path, extra={"learn_shape": False})
    back = EncoderParams.load(path)
    np.testing.assert_array_equal(back.flat(), params.flat())
    assert back.shape == TINY
    manifest = json.loads((tmp_path / "encoder.bin.json").read_text())
    assert manifest["count"] == params.flat().size
    assert path.stat().st_size == 8 * params.flat().size


def test_checkpoint_validation(tmp_path):
    path = tmp_path / "encoder.bin"
    EncoderParams.init(TINY).save(path)
    meta = json.loads((tmp_path / "encoder.bin.json").read_text())
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        EncoderParams.load(path)
    EncoderParams.init(TINY).save(path)
    meta["version"] = 99
    (tmp_path / "encoder.bin.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError):
        EncoderParams.load(path)
    EncoderParams.init(TINY).save(path)
    meta = json.loads((tmp_path / "encoder.bin.json").read_text())
    meta["arrays"][0]["shape"] = [3, 9]
    (tmp_path / "encoder.bin.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError):
        EncoderParams.load(path)


def test_set_flat_length_check():
    params = EncoderParams.init(TINY)
    with pytest.raises(ValueError):
        params.set_flat(np.zeros(params.flat().size + 1))


def test_history_csv():
    h = TrainHistory([(0, 0.5, 3, 1), (1, 0.25, 4, 0)])
    assert h.to_csv() == "epoch,mean_total,n_used,n_skipped\n0,0.5,3,1\n1,0.25,4,0\n"
    assert h.final_loss == 0.25


def test_train_config_validation():
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(lr=-1.0), dict(threads=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_pose_encoder_estimator(problem):
    est = PoseEncoder(epochs=1)
    with pytest.raises(RuntimeError):
        est.predict([problem])
    est.fit([problem])
    pred = est.predict([problem])[0]
    assert pred.breakdown.total == min(pred.per_bin_losses)
    assert est.get_params()["epochs"] == 1
