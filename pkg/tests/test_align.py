from __future__ import annotations

import numpy as np
import pytest

from stream4d.align import assemble_scene, align_to_world, pixel_alignment_error, surface_residuals
from stream4d.backbone import oracle_confidence
from stream4d.fields import ConfidenceMap
from stream4d.geometry import Pointmap, SE3Pose, transform
from stream4d.synth import covisible_mask


def in_sequence_frame(bundles, ti, c):
    return transform(bundles[(ti, c)].pointmap, bundles[(0, c)].pose.inverse(), "sequence")


@pytest.mark.parametrize("ti,c", [(0, 0), (2, 3), (4, 5)])
def test_ground_truth_is_a_fixed_point(bundles, ti, c):
    b = bundles[(ti, c)]
    out = align_to_world(in_sequence_frame(bundles, ti, c), b.intrinsics, b.pose)
    assert out.frame == "world"
    assert np.array_equal(out.valid, b.pointmap.valid)
    assert np.abs(out.points - b.pointmap.points)[out.valid].max() < 1e-6
    assert pixel_alignment_error(out, b.intrinsics, b.pose) < 1e-6


def test_frame_choice_collapses(bundles):
    b = bundles[(1, 2)]
    a = align_to_world(b.pointmap, b.intrinsics, b.pose)
    s = align_to_world(in_sequence_frame(bundles, 1, 2), b.intrinsics, b.pose)
    cam = align_to_world(transform(b.pointmap, b.pose.inverse(), "camera"), b.intrinsics, b.pose)
    assert np.abs(a.points - s.points)[a.valid].max() < 1e-6
    assert np.abs(a.points - cam.points)[a.valid].max() < 1e-6


@pytest.mark.parametrize("scale", [0.25, 3.0])
def test_uniform_scale_scales_depth_along_rays(bundles, scale):
    b = bundles[(3, 1)]
    p = b.pointmap
    scaled = Pointmap(p.points * scale, p.valid, p.frame)
    out = align_to_world(scaled, b.intrinsics, b.pose)
    centre = b.pose.translation
    expected = centre + scale * (p.points - centre)
    assert np.abs(out.points - expected)[p.valid].max() < 1e-5 * scale


def test_rigid_equivariance(bundles):
    b = bundles[(2, 4)]
    rng = np.random.default_rng(0)
    base = align_to_world(b.pointmap, b.intrinsics, b.pose)
    for _ in range(3):
        T = SE3Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3) * 20)
        out = align_to_world(transform(b.pointmap, T, "sequence"), b.intrinsics, b.pose)
        assert np.abs(out.points - base.points)[base.valid].max() < 1e-6


def test_given_camera_skips_estimation(bundles):
    b = bundles[(0, 1)]
    out = align_to_world(b.pointmap, b.intrinsics, b.pose, camera=(b.intrinsics, b.pose))
    assert np.abs(out.points - b.pointmap.points)[out.valid].max() < 1e-9


def frames_with_confidence(bundles, ti):
    return [(t, c, b.pointmap, ConfidenceMap(np.where(b.depth.valid, oracle_confidence(b.depth.depth), 1.0)))
            for (t, c), b in bundles.items() if t == ti]


def test_assemble_scene_gamma(bundles):
    frames = frames_with_confidence(bundles, 2)
    total_valid = sum(int(f[2].valid.sum()) for f in frames)
    all_pts = assemble_scene(frames, gamma=1.0)[2]
    assert len(all_pts) == total_valid
    assert set(np.unique(all_pts.sensor)) == set(range(6)) and np.all(all_pts.time_index == 2)
    top = max(float(f[3].values.max()) for f in frames)
    assert len(assemble_scene(frames, gamma=top + 1.0)[2]) == 0
    counts = [len(assemble_scene(frames, g)[2]) for g in (1.0, 1.5, 2.0, 4.0, 8.0)]
    assert counts == sorted(counts, reverse=True) and counts[0] > counts[-1]
    kept = assemble_scene(frames, 1.5)[2]
    assert kept.confidence.min() >= 1.5


def test_assemble_scene_groups_by_time_and_rejects_other_frames(bundles):
    frames = frames_with_confidence(bundles, 0) + frames_with_confidence(bundles, 1)
    out = assemble_scene(frames, 1.0)
    assert sorted(out) == [0, 1]
    t, c, pm, conf = frames[0]
    with pytest.raises(ValueError):
        assemble_scene([(t, c, pm.with_frame("sequence"), conf)])


def test_surface_residuals_between_neighbours_are_tiny(bundles):
    for ti in (0, 4):
        for c in range(6):
            a, b = bundles[(ti, c)], bundles[(ti, (c + 1) % 6)]
            cov = covisible_mask(a, b)
            r = surface_residuals(a.pointmap, b.pointmap, b.intrinsics, b.pose, cov)
            assert len(r) > 100
            assert r.max() <= 1e-3


def test_surface_residuals_detect_offset(bundles):
    a, b = bundles[(1, 0)], bundles[(1, 1)]
    shifted = Pointmap(a.pointmap.points + np.full(3, 0.05), a.pointmap.valid, "world")
    r = surface_residuals(shifted, b.pointmap, b.intrinsics, b.pose, covisible_mask(a, b))
    assert np.median(r) > 0.01
