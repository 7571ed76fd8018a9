"""Backbones and the per-frame streaming step.

A backbone supplies five maps: image encoder, paired decoder, point/
confidence head, memory encoder and query head. Two implementations ship:

* :class:`OracleBackbone` replays ground-truth pointmaps, with fixed
  image-derived features; it exercises all memory bookkeeping while
  producing exact geometry.
* :class:`ToyLinearBackbone` is a seeded stack of affine maps whose point
  head is differentiable, for attention and loss experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .fields import ConfidenceMap
from .geometry import Pointmap
from .memory import PoolConfig, Selection, SensorPool, attend, select_related

PATCH = 16


@dataclass(eq=False)
class FrameInput:
    image: np.ndarray
    timestamp: float
    sensor: int
    time_index: int = 0
    gt_pointmap: Pointmap | None = None  # sequence frame; read only by the oracle
    gt_depth: np.ndarray | None = None


class Backbone(Protocol):
    dim: int

    def encode(self, frame: FrameInput) -> np.ndarray: ...

    def decode(self, f_star: np.ndarray, f_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def point_head(self, f_ref: np.ndarray) -> tuple[Pointmap, ConfidenceMap]: ...

    def memory_encode(self, f_ref: np.ndarray, f: np.ndarray, pointmap: Pointmap
                      ) -> tuple[np.ndarray, np.ndarray]: ...

    def query_head(self, f_tar: np.ndarray) -> np.ndarray: ...


def positional_encoding(rows: int, cols: int, dim: int) -> np.ndarray:
    """2D sinusoidal encoding, half the channels per axis. Shape ``(rows*cols, dim)``."""
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    r, c = np.mgrid[0:rows, 0:cols]
    r = r.reshape(-1, 1) * freqs
    c = c.reshape(-1, 1) * freqs
    pe = np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)
    if pe.shape[1] < dim:
        pe = np.pad(pe, ((0, 0), (0, dim - pe.shape[1])))
    return pe


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    h, w = image.shape
    gh, gw = h // patch, w // patch
    x = image[:gh * patch, :gw * patch].reshape(gh, patch, gw, patch)
    return x.transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)


def unpatchify(tokens: np.ndarray, rows: int, cols: int, patch: int, channels: int) -> np.ndarray:
    x = tokens.reshape(rows, cols, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * patch, cols * patch, channels)


def oracle_confidence(depth: np.ndarray) -> np.ndarray:
    """Confidence falling off with range: 10 at the camera, about 1.2 at 80 m."""
    return 1.0 + 9.0 * np.exp(-np.asarray(depth, dtype=np.float64) / 20.0)


class OracleBackbone:
    """Emits the frame's ground-truth pointmap.

    Features are a positional encoding plus a fixed random projection of
    the image patches, so tokens differ between frames exactly as much as
    the image content does.
    """

    def __init__(self, dim: int = 64, patch: int = PATCH, seed: int = 0):
        self.dim = dim
        self.patch = patch
        pp = patch * patch
        self.embed = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(pp), (pp, dim))
        self._frame: FrameInput | None = None

    def encode(self, frame: FrameInput) -> np.ndarray:
        if frame.gt_pointmap is None:
            raise ValueError("OracleBackbone needs frames carrying a ground-truth pointmap")
        self._frame = frame
        h, w = frame.image.shape
        pe = positional_encoding(h // self.patch, w // self.patch, self.dim)
        return pe + patchify(np.asarray(frame.image, float), self.patch) @ self.embed

    def decode(self, f_star, f_ref):
        return f_star, f_star

    def point_head(self, f_ref):
        pm = self._frame.gt_pointmap
        if self._frame.gt_depth is not None:
            conf = np.where(pm.valid, oracle_confidence(self._frame.gt_depth), 1.0)
        else:
            conf = np.ones(pm.shape)
        return pm, ConfidenceMap(conf)

    def memory_encode(self, f_ref, f, pointmap):
        return f.copy(), f.copy()

    def query_head(self, f_tar):
        return f_tar


class ToyLinearBackbone:
    """Seeded affine maps on a fixed patch grid.

    Only the point head is meant to be trained; :meth:`head_gradients`
    back-propagates pointmap and raw-confidence gradients into its weight
    and bias.
    """

    def __init__(self, height: int, width: int, dim: int = 64, patch: int = PATCH, seed: int = 0,
                 depth_offset: float = 10.0):
        self.dim = dim
        self.patch = patch
        self.rows, self.cols = height // patch, width // patch
        rng = np.random.default_rng(seed)
        s = dim
        pp = patch * patch
        self.params = {
            "embed": rng.normal(0, 1 / np.sqrt(pp), (pp, s)),
            "dec_tar": rng.normal(0, 1 / np.sqrt(2 * s), (2 * s, s)),
            "dec_ref": rng.normal(0, 1 / np.sqrt(2 * s), (2 * s, s)),
            "head_w": rng.normal(0, 0.1 / np.sqrt(s), (s, pp * 4)),
            "head_b": np.zeros(pp * 4),
            "mem_k": rng.normal(0, 1 / np.sqrt(2 * s), (2 * s, s)),
            "mem_v": rng.normal(0, 1 / np.sqrt(s + 3), (s + 3, s)),
            "query": rng.normal(0, 1 / np.sqrt(s), (s, s)),
        }
        # bias every patch pixel's z forward so the untrained head emits points ahead of the camera
        self.params["head_b"].reshape(pp, 4)[:, 2] = depth_offset
        self.pe = positional_encoding(self.rows, self.cols, dim)

    def encode(self, frame: FrameInput) -> np.ndarray:
        return patchify(np.asarray(frame.image, float), self.patch) @ self.params["embed"] + self.pe

    def decode(self, f_star, f_ref):
        x = np.concatenate([f_star, f_ref], axis=1)
        return np.tanh(x @ self.params["dec_tar"]), np.tanh(x @ self.params["dec_ref"])

    def head_raw(self, f_ref: np.ndarray) -> np.ndarray:
        out = f_ref @ self.params["head_w"] + self.params["head_b"]
        return unpatchify(out, self.rows, self.cols, self.patch, 4)

    def point_head(self, f_ref):
        out = self.head_raw(f_ref)
        pts = out[..., :3]
        return Pointmap(pts, np.ones(pts.shape[:2], bool), "sequence"), ConfidenceMap.from_raw(out[..., 3])

    def head_gradients(self, f_ref: np.ndarray, grad_points: np.ndarray, grad_raw: np.ndarray):
        """Gradients of a scalar loss w.r.t. ``head_w`` and ``head_b``."""
        g = np.concatenate([grad_points, grad_raw[..., None]], axis=-1)
        rows, cols, p = self.rows, self.cols, self.patch
        g = g.reshape(rows, p, cols, p, 4).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * 4)
        return f_ref.T @ g, g.sum(axis=0)

    def memory_encode(self, f_ref, f, pointmap):
        keys = np.concatenate([f_ref, f], axis=1) @ self.params["mem_k"]
        pooled = patchify_points(pointmap.points, self.patch)
        values = np.concatenate([f_ref, pooled], axis=1) @ self.params["mem_v"]
        return keys, values

    def query_head(self, f_tar):
        return f_tar @ self.params["query"]


def patchify_points(points: np.ndarray, patch: int) -> np.ndarray:
    """Mean 3D point of every patch, ``(tokens, 3)``."""
    h, w, _ = points.shape
    gh, gw = h // patch, w // patch
    x = np.nan_to_num(points[:gh * patch, :gw * patch]).reshape(gh, patch, gw, patch, 3)
    return x.mean(axis=(1, 3)).reshape(gh * gw, 3)


# --------------------------------------------------------------------------
# streaming step


@dataclass
class StreamState:
    """Per-sensor carry-over between consecutive steps."""

    query: np.ndarray | None = None
    ref: np.ndarray | None = None


@dataclass(eq=False)
class StepResult:
    pointmap: Pointmap
    confidence: ConfidenceMap
    keys: np.ndarray
    values: np.ndarray
    selected: int  # number of memory entries attended to
    sensors_hit: tuple[int, ...]
    ops: int  # query-key dot products spent on attention
    state: StreamState = field(default_factory=StreamState)


def step(
    frame: FrameInput,
    state: StreamState,
    pools: Sequence[SensorPool],
    backbone: Backbone,
    *,
    stage: str = "temporal",
    adjacency: np.ndarray | None = None,
    insert: bool = True,
) -> StepResult:
    """One streaming update for ``frame``.

    encode -> select + attend -> decode -> heads -> memory encode -> insert.
    With ``insert=False`` the emitted keys/values are returned without being
    stored, so a caller can hold all inserts for a timestamp until every
    sensor has read the pools.
    """
    f = backbone.encode(frame)
    q = state.query if state.query is not None else f
    sel: Selection = select_related(pools, frame.timestamp, frame.sensor, stage,
                                    adjacency=adjacency, queries=q)
    f_star = attend(q, sel)
    f_tar, f_ref = backbone.decode(f_star, state.ref if state.ref is not None else f)
    pointmap, conf = backbone.point_head(f_ref)
    keys, values = backbone.memory_encode(f_ref, f, pointmap)
    if insert:
        pools[frame.sensor].insert(keys, values, frame.timestamp)
    hit = tuple(sorted(set(int(s) for s in sel.sensors())))
    return StepResult(pointmap, conf, keys, values, len(sel), hit, len(q) * len(sel),
                      StreamState(backbone.query_head(f_tar), f_ref))


def make_pools(num_sensors: int, config: PoolConfig = PoolConfig()) -> list[SensorPool]:
    return [SensorPool(c, config) for c in range(num_sensors)]
