"""Dense per-pixel fields shared by the renderer and the flow predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel 2D displacement ``(du, dv)`` in pixels with a validity mask."""

    flow: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.flow, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 2:
            raise ValueError(f"flow must be H x W x 2, got {f.shape}")
        valid = np.asarray(self.valid, dtype=bool) & np.isfinite(f).all(axis=-1)
        f = np.where(valid[..., None], f, 0.0)
        object.__setattr__(self, "flow", f)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.flow, axis=-1)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.ones((height, width), bool))


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Per-pixel confidence, always >= 1 (``1 + exp(raw)``)."""

    values: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.values, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError("confidence must be an H x W grid")
        if not (c >= 1.0).all():
            raise ValueError("confidence values must be >= 1")
        object.__setattr__(self, "values", c)

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "ConfidenceMap":
        return cls(1.0 + np.exp(raw))

    @classmethod
    def ones(cls, height: int, width: int) -> "ConfidenceMap":
        return cls(np.ones((height, width)))
