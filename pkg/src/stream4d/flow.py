"""Dynamic-object masks from flow residuals.

Observed flow between temporally adjacent frames is compared with the flow
that camera motion alone would induce. The latter comes from cross
projecting each frame's pointmap through both frames' cameras, where the
cameras are recovered from the pointmaps themselves. Pixels whose residual
exceeds a threshold seed a segmentation refinement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import SequenceTooShort
from .fields import FlowField
from .geometry import Intrinsics, Pointmap, SE3Pose, pixel_grid, pose_estimate, project, transform

DEFAULT_TAU = 1.5
REGION_TOLERANCE = 0.05

Camera = tuple[Intrinsics, SE3Pose]


@dataclass(frozen=True)
class FramePair:
    """Indices of two consecutive frames of one sensor's sequence (0-based)."""

    i1: int
    i2: int


@dataclass(frozen=True, eq=False)
class CoarseMask:
    """Mean flow-residual magnitude per pixel, in pixels."""

    residual: np.ndarray
    valid: np.ndarray


class FlowProvider(Protocol):
    def flow(self, i1: int, i2: int) -> tuple[FlowField, FlowField]:
        """Forward (i1 -> i2) and backward (i2 -> i1) flow."""


class MaskRefiner(Protocol):
    def refine(self, mask: np.ndarray, image: np.ndarray) -> np.ndarray: ...


def make_pairs(length: int) -> list[FramePair]:
    if length < 2:
        raise SequenceTooShort(f"need at least two frames, got {length}")
    return [FramePair(t, t + 1) for t in range(length - 1)]


def estimate_cameras(pointmaps: Sequence[Pointmap], *, ransac: bool = False) -> list[Camera]:
    return [pose_estimate(p, ransac=ransac) for p in pointmaps]


def _cross_flow(p: Pointmap, src: Camera, dst: Camera) -> FlowField:
    k1, t1 = src
    k2, t2 = dst
    uv_dst, d_dst = project(transform(p, t2.inverse(), "camera"), k2)
    uv_src, d_src = project(transform(p, t1.inverse(), "camera"), k1)
    valid = d_dst.valid & d_src.valid
    return FlowField(np.where(valid[..., None], uv_dst - uv_src, 0.0), valid)


def ego_flow(p1: Pointmap, p2: Pointmap, cameras: tuple[Camera, Camera] | None = None
             ) -> tuple[FlowField, FlowField]:
    """Camera-motion-induced flow in both directions.

    ``cameras`` overrides pose estimation, e.g. with ground-truth cameras
    expressed in the pointmaps' shared frame.
    """
    if p1.frame != p2.frame:
        raise ValueError(f"pointmaps live in different frames: {p1.frame} vs {p2.frame}")
    if cameras is None:
        cameras = (pose_estimate(p1), pose_estimate(p2))
    c1, c2 = cameras
    return _cross_flow(p1, c1, c2), _cross_flow(p2, c2, c1)


def residual_mask(
    pointmaps: Sequence[Pointmap],
    flows: Sequence[tuple[FlowField, FlowField]],
    cameras: Sequence[Camera] | None = None,
) -> list[CoarseMask]:
    """Average ``|F - E|`` over every pair that contains each frame.

    ``flows[i]`` belongs to ``make_pairs(len(pointmaps))[i]``. A pixel's
    average only counts pairs where both the observed and the ego flow are
    valid; pixels with no contribution are invalid.
    """
    pairs = make_pairs(len(pointmaps))
    if len(flows) != len(pairs):
        raise ValueError(f"expected {len(pairs)} flow pairs, got {len(flows)}")
    if cameras is None:
        cameras = estimate_cameras(pointmaps)
    shape = pointmaps[0].shape
    total = [np.zeros(shape) for _ in pointmaps]
    count = [np.zeros(shape, dtype=np.int64) for _ in pointmaps]
    for pair, (f12, f21) in zip(pairs, flows):
        e12, e21 = ego_flow(pointmaps[pair.i1], pointmaps[pair.i2], (cameras[pair.i1], cameras[pair.i2]))
        for t, f, e in ((pair.i1, f12, e12), (pair.i2, f21, e21)):
            ok = f.valid & e.valid
            total[t] += np.where(ok, np.linalg.norm(f.flow - e.flow, axis=-1), 0.0)
            count[t] += ok
    out = []
    for s, n in zip(total, count):
        valid = n > 0
        out.append(CoarseMask(np.where(valid, s / np.maximum(n, 1), 0.0), valid))
    return out


def binarize(m: CoarseMask, tau: float = DEFAULT_TAU) -> np.ndarray:
    if tau <= 0:
        raise ValueError("threshold must be positive")
    return m.valid & (m.residual > tau)


def percentile_threshold(m: CoarseMask, q: float = 95.0, floor: float = DEFAULT_TAU) -> float:
    """Adaptive threshold: the ``q``-th residual percentile, never below ``floor``."""
    if not m.valid.any():
        return floor
    return max(float(np.percentile(m.residual[m.valid], q)), floor)


class IdentityRefiner:
    def refine(self, mask: np.ndarray, image: np.ndarray) -> np.ndarray:
        return mask.copy()


class RegionGrowRefiner:
    """Grow every mask component over similar-intensity neighbours, then close.

    Two 4-adjacent pixels are joined when their intensities differ by at most
    ``tolerance`` (image values are on a [0, 1] scale); every intensity
    region touched by the mask is added.
    """

    def __init__(self, tolerance: float = REGION_TOLERANCE, closing: int = 3):
        self.tolerance = tolerance
        self.closing = closing

    def refine(self, mask: np.ndarray, image: np.ndarray) -> np.ndarray:
        mask = np.asarray(mask, bool)
        if mask.shape != image.shape:
            raise ValueError("mask and image shapes differ")
        if not mask.any():
            return mask.copy()
        h, w = mask.shape
        idx = np.arange(h * w).reshape(h, w)
        right = np.abs(image[:, 1:] - image[:, :-1]) <= self.tolerance
        down = np.abs(image[1:, :] - image[:-1, :]) <= self.tolerance
        rows = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
        cols = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
        graph = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
        _, labels = connected_components(graph, directed=False)
        labels = labels.reshape(h, w)
        grown = np.isin(labels, np.unique(labels[mask]))
        pad = self.closing
        padded = np.pad(grown, pad)
        closed = ndimage.binary_closing(padded, structure=np.ones((self.closing, self.closing), bool))
        return closed[pad:-pad, pad:-pad] | grown


def refine(mask: np.ndarray, image: np.ndarray, refiner: MaskRefiner) -> np.ndarray:
    """Union of the refiner's output with the binary mask; can only grow."""
    out = np.asarray(refiner.refine(mask, image), bool)
    if out.shape != mask.shape:
        raise ValueError("refiner changed the mask shape")
    return out | mask


@dataclass(eq=False)
class FlowPrediction:
    masks: list[np.ndarray]
    residuals: list[CoarseMask]
    cameras: list[Camera]


def predict(
    pointmaps: Sequence[Pointmap],
    images: Sequence[np.ndarray],
    provider: FlowProvider,
    refiner: MaskRefiner | None = None,
    tau: float = DEFAULT_TAU,
    *,
    cameras: Sequence[Camera] | None = None,
    ransac: bool = False,
) -> FlowPrediction:
    """Dynamic masks for one sensor's sequence."""
    pairs = make_pairs(len(pointmaps))
    refiner = refiner if refiner is not None else RegionGrowRefiner()
    flows = [provider.flow(p.i1, p.i2) for p in pairs]
    cams = list(cameras) if cameras is not None else estimate_cameras(pointmaps, ransac=ransac)
    residuals = residual_mask(pointmaps, flows, cams)
    masks = [refine(binarize(r, tau), img, refiner) for r, img in zip(residuals, images)]
    return FlowPrediction(masks, residuals, cams)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks; two empty masks count as a perfect match."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def grid_flow_from_pixels(uv: np.ndarray) -> np.ndarray:
    """Displacement of projected positions relative to the pixel grid."""
    return uv - pixel_grid(*uv.shape[:2])
