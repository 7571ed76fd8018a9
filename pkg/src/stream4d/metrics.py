"""Reconstruction and depth metrics.

Reconstruction: accuracy (prediction -> nearest ground truth), completion
(ground truth -> nearest prediction) and normal consistency, each as mean
and median. Depth: the usual Abs Rel / Sq Rel / RMSE / RMSE(log) / delta
thresholds over the shared valid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyMask, NonPositiveDepth
from .geometry import DepthMap, Pointmap

PCA_NEIGHBOURS = 16


@dataclass
class ReconReport:
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    nc_mean: float
    nc_median: float

    def to_dict(self) -> dict:
        return {
            "Acc": {"Mean": self.acc_mean, "Median": self.acc_median},
            "Comp": {"Mean": self.comp_mean, "Median": self.comp_median},
            "NC": {"Mean": self.nc_mean, "Median": self.nc_median},
        }


@dataclass
class DepthReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self) -> dict:
        return {
            "Abs Rel": self.abs_rel,
            "Sq Rel": self.sq_rel,
            "RMSE": self.rmse,
            "RMSE(log)": self.rmse_log,
            "δ < 1.25": self.delta1,
            "δ < 1.25^2": self.delta2,
            "δ < 1.25^3": self.delta3,
        }


def _cloud(x) -> np.ndarray:
    if isinstance(x, Pointmap):
        x = x.valid_points()
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise EmptyCloud("point cloud is empty")
    return x


def nearest_distances(query, reference) -> tuple[np.ndarray, np.ndarray]:
    """Distance and index of each query point's nearest reference point."""
    q, r = _cloud(query), _cloud(reference)
    return cKDTree(r).query(q, k=1)


def accuracy(pred, gt) -> tuple[float, float]:
    d, _ = nearest_distances(pred, gt)
    return float(d.mean()), float(np.median(d))


def completion(pred, gt) -> tuple[float, float]:
    d, _ = nearest_distances(gt, pred)
    return float(d.mean()), float(np.median(d))


def grid_normals(p: Pointmap) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals from forward differences on the pixel grid.

    ``n(i, j) = (P[i, j+1] - P[i, j]) x (P[i+1, j] - P[i, j])``, invalid on the
    last row/column and wherever a neighbour is invalid or the cross
    product vanishes.
    """
    P = p.points
    dx = P[:-1, 1:] - P[:-1, :-1]
    dy = P[1:, :-1] - P[:-1, :-1]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok = p.valid[:-1, :-1] & p.valid[:-1, 1:] & p.valid[1:, :-1] & (norm > 0)
    normals = np.zeros_like(P)
    valid = np.zeros(p.shape, bool)
    normals[:-1, :-1] = np.divide(n, norm[..., None], out=np.zeros_like(n), where=norm[..., None] > 0)
    valid[:-1, :-1] = ok
    return normals, valid


def pca_normals(points: np.ndarray, k: int = PCA_NEIGHBOURS) -> np.ndarray:
    """Unoriented normals of an unstructured cloud from its k-NN covariance."""
    pts = _cloud(points)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx.reshape(len(pts), k)]
    cov = np.einsum("nki,nkj->nij", nb - nb.mean(axis=1, keepdims=True), nb - nb.mean(axis=1, keepdims=True))
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _oriented_cloud(x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, Pointmap):
        x = [x]
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], Pointmap):
        pts, nrm = [], []
        for grid in x:
            n, ok = grid_normals(grid)
            pts.append(grid.points[ok])
            nrm.append(n[ok])
        pts, nrm = np.concatenate(pts), np.concatenate(nrm)
        if not len(pts):
            raise EmptyCloud("no valid grid normals")
        return pts, nrm
    pts = _cloud(x)
    return pts, pca_normals(pts)


def normal_consistency(pred, gt) -> tuple[float, float]:
    """Mean and median of ``|n_pred . n_gt|`` over nearest-neighbour pairs.

    Both directions (prediction -> ground truth and back) are evaluated and
    their statistics averaged. Pointmaps use grid normals; bare ``(N, 3)``
    clouds fall back to 16-NN PCA normals. A list of pointmaps is treated
    as one cloud carrying each grid's normals.
    """
    pp, pn = _oriented_cloud(pred)
    gp, gn = _oriented_cloud(gt)
    _, i_pg = cKDTree(gp).query(pp)
    _, i_gp = cKDTree(pp).query(gp)
    d1 = np.abs((pn * gn[i_pg]).sum(axis=1))
    d2 = np.abs((gn * pn[i_gp]).sum(axis=1))
    d1, d2 = np.minimum(d1, 1.0), np.minimum(d2, 1.0)
    return float((d1.mean() + d2.mean()) / 2), float((np.median(d1) + np.median(d2)) / 2)


def recon_report(pred, gt, pred_grid: Pointmap | None = None, gt_grid: Pointmap | None = None) -> ReconReport:
    am, amed = accuracy(pred, gt)
    cm, cmed = completion(pred, gt)
    nm, nmed = normal_consistency(pred_grid if pred_grid is not None else pred,
                                  gt_grid if gt_grid is not None else gt)
    return ReconReport(am, amed, cm, cmed, nm, nmed)


def depth_metrics(pred: DepthMap, gt: DepthMap) -> DepthReport:
    """Standard depth errors over pixels valid in both maps."""
    if pred.shape != gt.shape:
        raise ValueError("depth maps differ in shape")
    both = pred.valid & gt.valid
    if not both.any():
        raise EmptyMask("no pixel is valid in both depth maps")
    return depth_metrics_values(pred.depth[both], gt.depth[both])


def depth_metrics_values(d_pred: np.ndarray, d_gt: np.ndarray) -> DepthReport:
    d_pred = np.asarray(d_pred, dtype=np.float64).ravel()
    d_gt = np.asarray(d_gt, dtype=np.float64).ravel()
    if len(d_gt) == 0:
        raise EmptyMask("no depth samples")
    if (d_pred <= 0).any() or (d_gt <= 0).any():
        raise NonPositiveDepth("depths must be positive")
    diff = d_pred - d_gt
    ratio = np.maximum(d_pred / d_gt, d_gt / d_pred)
    return DepthReport(
        abs_rel=float(np.mean(np.abs(diff) / d_gt)),
        sq_rel=float(np.mean(diff**2 / d_gt)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(d_pred) - np.log(d_gt)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )
