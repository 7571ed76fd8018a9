from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rotation_flow
from scenes import ego_motion_scene, relative_rotation, sliding_board_scene
from stream4d.errors import SequenceTooShort
from stream4d.fields import FlowField
from stream4d.flow import (CoarseMask, FramePair, IdentityRefiner, RegionGrowRefiner, binarize, ego_flow,
                           make_pairs, mask_iou, percentile_threshold, predict, refine, residual_mask)
from stream4d.geometry import SE3Pose, transform
from stream4d.synth import SceneFlowProvider, render_frame


def test_make_pairs():
    assert make_pairs(2) == [FramePair(0, 1)]
    assert len(make_pairs(5)) == 4
    with pytest.raises(SequenceTooShort):
        make_pairs(1)


def test_ego_flow_identical_frames_is_zero(bundles):
    p = bundles[(1, 2)].pointmap
    e12, e21 = ego_flow(p, p)
    assert e12.valid.any()
    assert np.abs(e12.flow).max() < 1e-6 and np.abs(e21.flow).max() < 1e-6


def test_ego_flow_requires_shared_frame(bundles):
    p = bundles[(1, 2)].pointmap
    with pytest.raises(ValueError):
        ego_flow(p, p.with_frame("sequence"))


@pytest.mark.parametrize("kind", ["translation", "rotation", "combined"])
def test_ego_flow_matches_ray_cast_flow(kind):
    sc = ego_motion_scene(kind)
    flows = SceneFlowProvider(sc, 0)
    b = [render_frame(sc, i, 0) for i in range(2)]
    e12, e21 = ego_flow(b[0].pointmap, b[1].pointmap)
    f12, f21 = flows.flow(0, 1)
    for e, f in ((e12, f12), (e21, f21)):
        ok = e.valid & f.valid
        assert ok.sum() > 5000
        assert np.abs(e.flow - f.flow)[ok].max() < 0.05


def test_rotation_flow_matches_homography():
    sc = ego_motion_scene("rotation")
    b1, b2 = render_frame(sc, 0, 0), render_frame(sc, 1, 0)
    e12, _ = ego_flow(b1.pointmap, b2.pointmap)
    H = rotation_flow(sc.intrinsics[0], relative_rotation(sc, 0, 1), *b1.depth.shape)
    assert np.abs(e12.flow - H)[e12.valid].max() < 0.05


def test_ego_flow_invariant_to_shared_frame(bundles):
    p1, p2 = bundles[(1, 0)].pointmap, bundles[(2, 0)].pointmap
    T = SE3Pose.from_rotvec([0.3, -0.2, 1.0], [4.0, -7.0, 2.0])
    a12, _ = ego_flow(p1, p2)
    b12, _ = ego_flow(transform(p1, T, "sequence"), transform(p2, T, "sequence"))
    ok = a12.valid & b12.valid
    assert np.abs(a12.flow - b12.flow)[ok].max() < 1e-6


def test_residual_averages_over_pairs_containing_each_frame(static_scene):
    p = render_frame(static_scene, 0, 0).pointmap
    h, w = p.shape
    one, three = (FlowField(np.full((h, w, 2), v / np.sqrt(2)), np.ones((h, w), bool)) for v in (1.0, 3.0))
    cams = [(static_scene.intrinsics[0], static_scene.camera_pose(0, 0))] * 3
    res = residual_mask([p, p, p], [(one, one), (three, three)], cams)
    v = p.valid
    assert np.allclose(res[0].residual[v], 1.0)
    assert np.allclose(res[1].residual[v], 2.0)  # interior frame: two contributing pairs
    assert np.allclose(res[2].residual[v], 3.0)
    assert not res[0].valid[~v].any()


def test_residual_static_scene_below_tenth_pixel(static_scene):
    seq = [render_frame(static_scene, i, 3) for i in range(5)]
    res = residual_mask([b.pointmap for b in seq], [SceneFlowProvider(static_scene, 3).flow(i, i + 1)
                                                     for i in range(4)])
    for r in res:
        assert r.valid.any() and r.residual[r.valid].max() < 0.1


def test_residual_sliding_board():
    sc = sliding_board_scene(px_per_frame=2.0)
    seq = [render_frame(sc, i, 0) for i in range(3)]
    flows = [SceneFlowProvider(sc, 0).flow(i, i + 1) for i in range(2)]
    res = residual_mask([b.pointmap for b in seq], flows)
    for b, r in zip(seq, res):
        board = b.dynamic_mask & r.valid
        # front face at depth 7.99 shifts by 2 * 8 / 7.99 px
        assert np.median(r.residual[board]) == pytest.approx(2.0 * 8.0 / 7.99, abs=0.02)
        assert r.residual[r.valid & ~b.dynamic_mask].max() < 0.1


def test_binarize_examples():
    r = np.zeros((6, 6))
    m = CoarseMask(r, np.ones((6, 6), bool))
    assert not binarize(m).any()
    r[1:3, 1:4] = 3.0
    out = binarize(CoarseMask(r, np.ones((6, 6), bool)), 1.5)
    assert out.sum() == 6 and out[1:3, 1:4].all()
    invalid = CoarseMask(r, np.zeros((6, 6), bool))
    assert not binarize(invalid).any()
    with pytest.raises(ValueError):
        binarize(m, 0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t1=st.floats(0.01, 5), t2=st.floats(0.01, 5))
def test_binarize_monotone_in_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    m = CoarseMask(rng.exponential(1.5, (16, 16)), rng.random((16, 16)) > 0.2)
    lo, hi = sorted((t1, t2))
    assert not (binarize(m, hi) & ~binarize(m, lo)).any()


def test_percentile_threshold_floor():
    m = CoarseMask(np.linspace(0, 1, 100).reshape(10, 10), np.ones((10, 10), bool))
    assert percentile_threshold(m) == 1.5
    m = CoarseMask(np.linspace(0, 10, 100).reshape(10, 10), np.ones((10, 10), bool))
    assert percentile_threshold(m, 50) == pytest.approx(5.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_refine_only_grows(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((24, 24)) > 0.9
    image = rng.random((24, 24))
    out = refine(mask, image, RegionGrowRefiner())
    assert out.shape == mask.shape and not (mask & ~out).any()


def test_refine_identity_and_empty():
    rng = np.random.default_rng(0)
    mask = rng.random((10, 10)) > 0.5
    image = rng.random((10, 10))
    assert np.array_equal(refine(mask, image, IdentityRefiner()), mask)
    assert not refine(np.zeros((10, 10), bool), image, RegionGrowRefiner()).any()


def test_region_grow_recovers_box_from_half_seed(bundles, scene):
    b = bundles[(0, 0)]
    car = b.hit_id == scene.dynamic_ids()[0]
    assert car.sum() > 500
    cols = np.nonzero(car)[1]
    seed = car & (np.arange(car.shape[1])[None, :] < np.median(cols))
    out = refine(seed, b.image, RegionGrowRefiner())
    assert mask_iou(out, car) >= 0.95


def test_predict_static_sequence_is_empty(static_scene):
    seq = [render_frame(static_scene, i, 1) for i in range(5)]
    pred = predict([b.pointmap for b in seq], [b.image for b in seq], SceneFlowProvider(static_scene, 1))
    assert all(not m.any() for m in pred.masks)


def test_predict_moving_cars_iou(scene, bundles):
    worst = 1.0
    for c in range(scene.num_sensors):
        seq = [bundles[(i, c)] for i in range(5)]
        pred = predict([b.pointmap for b in seq], [b.image for b in seq], SceneFlowProvider(scene, c))
        for b, m in zip(seq, pred.masks):
            worst = min(worst, mask_iou(m, b.dynamic_mask))
    assert worst >= 0.9


def test_predict_finds_both_bodies(scene, bundles):
    ids = scene.dynamic_ids()
    seq = [bundles[(i, 0)] for i in range(5)]
    pred = predict([b.pointmap for b in seq], [b.image for b in seq], SceneFlowProvider(scene, 0))
    found = set()
    for b, m in zip(seq, pred.masks):
        for bid in ids:
            body = b.hit_id == bid
            if body.sum() > 50 and (m & body).sum() / body.sum() > 0.9:
                found.add(bid)
    assert found == set(ids)


def test_mask_iou_conventions():
    a = np.zeros((4, 4), bool)
    assert mask_iou(a, a) == 1.0
    b = a.copy()
    b[0, 0] = True
    assert mask_iou(a, b) == 0.0
