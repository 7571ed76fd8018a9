"""Confidence-aware regression and scale hinge on masked (dynamic) pixels.

For every frame ``(t, c)`` with supervision mask ``M``::

    conf  = sum_{i in M} C_i * |p_i / s_p - g_i / s_g| - alpha * log C_i
    scale = max(0, mean_{i in M} |p_i| - mean_{i in M} |g_i|)

where ``s_p``, ``s_g`` are the mean point norms over ``M`` and
``C = 1 + exp(raw)``. The total loss sums both terms over all frames.
Analytic gradients w.r.t. the predicted points and raw confidences are
returned alongside the values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyMask

DEFAULT_ALPHA = 0.5


@dataclass(eq=False)
class SupervisionFrame:
    pred: np.ndarray  # H x W x 3
    raw_conf: np.ndarray  # H x W, confidence = 1 + exp(raw)
    target: np.ndarray  # H x W x 3
    mask: np.ndarray  # H x W bool
    time_index: int = 0
    sensor: int = 0

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.raw_conf = np.asarray(self.raw_conf, dtype=np.float64)
        if self.pred.shape != self.target.shape or self.pred.shape[:2] != self.raw_conf.shape:
            raise ValueError("prediction, target and confidence shapes disagree")
        self.mask = (np.asarray(self.mask, bool) & np.isfinite(self.target).all(-1)
                     & np.isfinite(self.pred).all(-1))

    @property
    def confidence(self) -> np.ndarray:
        return 1.0 + np.exp(self.raw_conf)


@dataclass(eq=False)
class LossValue:
    total: float
    conf: float
    scale: float
    grad_points: list[np.ndarray] = field(default_factory=list)
    grad_raw: list[np.ndarray] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"total": self.total, "conf": self.conf, "scale": self.scale}


def normalize(points: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, float]:
    """Divide by the mean norm of the masked points."""
    points = np.asarray(points, dtype=np.float64)
    mask = np.asarray(mask, bool) & np.isfinite(points).all(-1)
    if not mask.any():
        raise EmptyMask("normalisation needs at least one masked point")
    scale = float(np.linalg.norm(points[mask], axis=-1).mean())
    if scale <= 0:
        raise EmptyMask("masked points all sit at the origin")
    return points / scale, scale


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _frame_conf(f: SupervisionFrame, alpha: float, mean: bool):
    m = f.mask
    if not m.any():
        raise EmptyMask(f"frame (t={f.time_index}, c={f.sensor}) has an empty supervision mask")
    p = f.pred[m]
    _, s = normalize(f.pred, m)
    g, _ = normalize(f.target, m)
    g = g[m]
    raw = f.raw_conf[m]
    C = 1.0 + np.exp(raw)
    e = p / s - g
    r = np.linalg.norm(e, axis=1)
    u = _unit_rows(e)
    weight = 1.0 / len(p) if mean else 1.0
    value = weight * float((C * r - alpha * np.log(C)).sum())

    # d/dp through both the point itself and the normaliser s = mean |p_j|
    grad = C[:, None] * u / s
    coupling = (C * (u * p).sum(axis=1)).sum() / s**2
    grad -= coupling * _unit_rows(p) / len(p)
    gp = np.zeros_like(f.pred)
    gp[m] = weight * grad
    gr = np.zeros_like(f.raw_conf)
    gr[m] = weight * (r - alpha / C) * (C - 1.0)
    return value, gp, gr


def conf_loss(frames: Sequence[SupervisionFrame], alpha: float = DEFAULT_ALPHA, *, mean: bool = False):
    """Returns ``(value, grad_points, grad_raw)``; ``mean`` averages per frame instead of summing."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    value, gps, grs = 0.0, [], []
    for f in frames:
        v, gp, gr = _frame_conf(f, alpha, mean)
        value += v
        gps.append(gp)
        grs.append(gr)
    return value, gps, grs


def scale_loss(frames: Sequence[SupervisionFrame]):
    """Returns ``(value, grad_points)``. The subgradient at the hinge kink is 0."""
    value, gps = 0.0, []
    for f in frames:
        m = f.mask
        if not m.any():
            raise EmptyMask(f"frame (t={f.time_index}, c={f.sensor}) has an empty supervision mask")
        p = f.pred[m]
        x_pred = np.linalg.norm(p, axis=1).mean()
        x_sup = np.linalg.norm(f.target[m], axis=1).mean()
        gp = np.zeros_like(f.pred)
        if x_pred > x_sup:
            value += float(x_pred - x_sup)
            gp[m] = _unit_rows(p) / len(p)
        gps.append(gp)
    return value, gps


def total_loss(frames: Sequence[SupervisionFrame], alpha: float = DEFAULT_ALPHA, *, mean: bool = False) -> LossValue:
    c, gpc, grc = conf_loss(frames, alpha, mean=mean)
    s, gps = scale_loss(frames)
    return LossValue(c + s, c, s, [a + b for a, b in zip(gpc, gps)], grc)


def supervision_mask(dynamic: np.ndarray, valid: np.ndarray, step: int = 0, warmup_steps: int = 0,
                     dynamic_only: bool = True) -> np.ndarray:
    """Full valid frame during warm-up, dynamic pixels afterwards."""
    valid = np.asarray(valid, bool)
    if not dynamic_only or step < warmup_steps:
        return valid.copy()
    return valid & np.asarray(dynamic, bool)


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-5,
    directions: int = 8,
    seed: int = 0,
) -> float:
    """Worst relative gap between analytic and central-difference directional derivatives."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    _, grad = fn(x)
    worst = 0.0
    for _ in range(directions):
        d = rng.normal(size=x.shape)
        d /= np.linalg.norm(d)
        fd = (fn(x + h * d)[0] - fn(x - h * d)[0]) / (2 * h)
        an = float((grad * d).sum())
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    return worst
