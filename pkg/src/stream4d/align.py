"""Optimisation-free registration of per-frame pointmaps into world coordinates.

Each pointmap, expressed in whatever frame its sequence used, yields an
estimated camera. Its depth in that estimated camera is then lifted back
onto the same pixel grid with the ground-truth intrinsics and pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import ConfidenceMap
from .geometry import (DepthMap, Intrinsics, Pointmap, SE3Pose, Z_EPS, pixel_grid, pose_estimate,
                       transform, unproject)

DEFAULT_GAMMA = 1.5


def align_to_world(
    p: Pointmap,
    gt_k: Intrinsics,
    gt_pose: SE3Pose,
    *,
    camera: tuple[Intrinsics, SE3Pose] | None = None,
    ransac: bool = False,
) -> Pointmap:
    """World-frame pointmap, pixel-aligned with ``p``.

    ``camera`` short-circuits pose estimation with an already estimated
    ``(K, T)`` for ``p``.
    """
    _, t_est = camera if camera is not None else pose_estimate(p, ransac=ransac)
    z = transform(p, t_est.inverse(), "camera").points[..., 2]
    valid = p.valid & (z > Z_EPS)
    return unproject(DepthMap(np.where(valid, z, 0.0), valid), gt_k, gt_pose, "world")


@dataclass(eq=False)
class MergedCloud:
    """Points of one timestamp gathered from every sensor."""

    points: np.ndarray
    confidence: np.ndarray
    sensor: np.ndarray
    time_index: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def assemble_scene(
    frames: Sequence[tuple[int, int, Pointmap, ConfidenceMap]],
    gamma: float = DEFAULT_GAMMA,
) -> dict[int, MergedCloud]:
    """Concatenate confident valid points per timestamp index.

    ``frames`` holds ``(time_index, sensor, world_pointmap, confidence)``.
    No deduplication is performed.
    """
    buckets: dict[int, list] = {}
    for ti, c, pm, conf in frames:
        if pm.frame != "world":
            raise ValueError(f"frame ({ti}, {c}) is not in world coordinates")
        keep = pm.valid & (conf.values >= gamma)
        n = int(keep.sum())
        buckets.setdefault(ti, []).append((pm.points[keep], conf.values[keep],
                                           np.full(n, c, dtype=np.int64), np.full(n, ti, dtype=np.int64)))
    out = {}
    for ti in sorted(buckets):
        parts = buckets[ti]
        out[ti] = MergedCloud(*(np.concatenate([p[i] for p in parts]) for i in range(4)))
    return out


def surface_residuals(
    world_a: Pointmap,
    world_b: Pointmap,
    k_b: Intrinsics,
    pose_b: SE3Pose,
    covisible: np.ndarray | None = None,
    planarity: float = 1e-6,
) -> np.ndarray:
    """Distance from each point of ``a`` to the surface reconstructed by ``b``.

    ``a``'s points are projected into camera ``b``; the surface there is the
    plane of the pixel-grid triangle of ``b``'s pointmap containing the
    projection, intersected with ``b``'s viewing ray. Cells whose four
    corners are not coplanar (depth edges) or not valid are skipped, as are
    projections outside ``b``'s image. Returns one distance per used point
    of ``a``; ``covisible`` (an ``a``-shaped mask) restricts which points are
    tested.
    """
    pts = world_a.points[world_a.valid if covisible is None else world_a.valid & covisible]
    cam = pose_b.inverse().apply(pts)
    front = cam[:, 2] > Z_EPS
    cam = cam[front]
    u = k_b.fx * cam[:, 0] / cam[:, 2] + k_b.cx
    v = k_b.fy * cam[:, 1] / cam[:, 2] + k_b.cy
    h, w = world_b.shape
    inside = (u >= 0) & (u < w - 1) & (v >= 0) & (v < h - 1)
    u, v, cam = u[inside], v[inside], cam[inside]
    j, i = np.floor(u).astype(int), np.floor(v).astype(int)
    fu, fv = u - j, v - i
    B = pose_b.inverse().apply(world_b.points)  # b's points in b's camera frame
    corners_ok = world_b.valid[i, j] & world_b.valid[i, j + 1] & world_b.valid[i + 1, j] & world_b.valid[i + 1, j + 1]
    p00, p01, p10, p11 = B[i, j], B[i, j + 1], B[i + 1, j], B[i + 1, j + 1]
    # pick the triangle of the cell containing (fu, fv)
    upper = fu + fv <= 1.0
    a0 = np.where(upper[:, None], p00, p11)
    a1, a2 = p01, p10
    n = np.cross(a1 - a0, a2 - a0)
    nn = np.linalg.norm(n, axis=1)
    n = n / np.where(nn > 0, nn, 1.0)[:, None]
    other = np.where(upper[:, None], p11, p00)
    scale = np.maximum(np.linalg.norm(a0, axis=1), 1.0)
    planar = np.abs(((other - a0) * n).sum(axis=1)) <= planarity * scale
    ray = cam / cam[:, 2:3]
    denom = (ray * n).sum(axis=1)
    ok = corners_ok & planar & (nn > 0) & (np.abs(denom) > 1e-12)
    lam = (a0 * n).sum(axis=1) / np.where(ok, denom, 1.0)
    hit = ray * lam[:, None]
    return np.linalg.norm(hit[ok] - cam[ok], axis=1)


def pixel_alignment_error(world: Pointmap, gt_k: Intrinsics, gt_pose: SE3Pose) -> float:
    """Max pixel offset between ``world``'s reprojection and the grid."""
    cam = gt_pose.inverse().apply(world.points[world.valid])
    uv = np.stack([gt_k.fx * cam[:, 0] / cam[:, 2] + gt_k.cx, gt_k.fy * cam[:, 1] / cam[:, 2] + gt_k.cy], 1)
    grid = pixel_grid(*world.shape)[world.valid]
    return float(np.abs(uv - grid).max()) if len(uv) else 0.0
