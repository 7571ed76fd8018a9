"""Sensor-aware key/value memory.

Each sensor owns a :class:`SensorPool` holding a *working* memory (entries
of the most recent frames) and a bounded *long-term* memory. Both stores
keep entries in chronological order. New entries pass a cosine-similarity
gate, recent frames roll from working into long-term memory, and long-term
memory is pruned by accumulated attention when it overflows.

Features are updated by residual soft attention over a selected entry set::

    f* = softmax(q K^T / sqrt(s)) V + q
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, OutOfOrderTimestamp, TruncatedFile, BadMagic
from .geometry import Intrinsics, SE3Pose

WORKING_FRAMES = 5
RELATED_TIMESTAMPS = 4
LONG_TERM_CAPACITY = 4096
SIMILARITY_GATE = 0.95
FEATURE_DIM = 64
OVERLAP_RANGE = 20.0


@dataclass(frozen=True)
class PoolConfig:
    dim: int = FEATURE_DIM
    working_frames: int = WORKING_FRAMES
    capacity: int = LONG_TERM_CAPACITY
    sim_threshold: float = SIMILARITY_GATE
    related_timestamps: int = RELATED_TIMESTAMPS

    def __post_init__(self):
        if min(self.dim, self.working_frames, self.capacity, self.related_timestamps) < 1:
            raise ValueError("pool sizes must be >= 1")
        if not 0 < self.sim_threshold:
            raise ValueError("similarity threshold must be positive")


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    key: np.ndarray
    value: np.ndarray
    timestamp: float
    sensor: int
    attention: float
    uid: int


class EntryStore:
    """Column store of memory entries, kept in chronological order."""

    def __init__(self, dim: int):
        self.dim = dim
        self.keys = np.zeros((0, dim))
        self.values = np.zeros((0, dim))
        self.timestamps = np.zeros(0)
        self.sensors = np.zeros(0, dtype=np.int64)
        self.attention = np.zeros(0)
        self.uids = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.uids)

    def append(self, keys, values, timestamps, sensors, attention, uids) -> None:
        self.keys = np.concatenate([self.keys, keys])
        self.values = np.concatenate([self.values, values])
        self.timestamps = np.concatenate([self.timestamps, timestamps])
        self.sensors = np.concatenate([self.sensors, sensors])
        self.attention = np.concatenate([self.attention, attention])
        self.uids = np.concatenate([self.uids, uids])

    def columns(self, sel) -> tuple:
        return (self.keys[sel], self.values[sel], self.timestamps[sel], self.sensors[sel],
                self.attention[sel], self.uids[sel])

    def keep(self, sel: np.ndarray) -> None:
        (self.keys, self.values, self.timestamps, self.sensors,
         self.attention, self.uids) = self.columns(sel)

    def entries(self) -> list[MemoryEntry]:
        return [MemoryEntry(self.keys[i].copy(), self.values[i].copy(), float(self.timestamps[i]),
                            int(self.sensors[i]), float(self.attention[i]), int(self.uids[i]))
                for i in range(len(self))]


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


class SensorPool:
    def __init__(self, sensor: int, config: PoolConfig = PoolConfig()):
        self.sensor = sensor
        self.config = config
        self.working = EntryStore(config.dim)
        self.longterm = EntryStore(config.dim)
        self.next_uid = 0
        self.pruned = 0
        self.discarded = 0

    def __len__(self) -> int:
        return len(self.working) + len(self.longterm)

    @property
    def stores(self) -> tuple[EntryStore, EntryStore]:
        return self.longterm, self.working

    def timestamps(self) -> np.ndarray:
        return np.concatenate([self.longterm.timestamps, self.working.timestamps])

    def all_keys(self) -> np.ndarray:
        return np.concatenate([self.longterm.keys, self.working.keys])

    def entries(self) -> list[MemoryEntry]:
        """All entries, oldest first."""
        return self.longterm.entries() + self.working.entries()

    def working_timestamps(self) -> np.ndarray:
        return np.unique(self.working.timestamps)

    def insert(self, keys: np.ndarray, values: np.ndarray, t: float) -> int:
        """Gate, append and roll. Returns the number of entries kept."""
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if keys.shape != values.shape or keys.shape[1] != self.config.dim:
            raise DimensionMismatch(f"expected (n, {self.config.dim}) keys and values, got "
                                    f"{keys.shape} and {values.shape}")
        stored = self.timestamps()
        if len(stored) and t < stored.max():
            raise OutOfOrderTimestamp(f"timestamp {t} precedes stored timestamp {stored.max()}")
        existing = self.all_keys()
        if len(existing) and len(keys):
            sim = _unit(keys) @ _unit(existing).T
            fresh = sim.max(axis=1) < self.config.sim_threshold
        else:
            fresh = np.ones(len(keys), bool)
        n = int(fresh.sum())
        self.discarded += len(keys) - n
        uids = np.arange(self.next_uid, self.next_uid + n)
        self.next_uid += n
        self.working.append(keys[fresh], values[fresh], np.full(n, float(t)),
                            np.full(n, self.sensor, dtype=np.int64), np.zeros(n), uids)
        self._roll()
        if len(self.longterm) > self.config.capacity:
            self.prune()
        return n

    def _roll(self) -> None:
        ts = self.working_timestamps()
        if len(ts) <= self.config.working_frames:
            return
        cutoff = ts[-self.config.working_frames]
        old = self.working.timestamps < cutoff
        self.longterm.append(*self.working.columns(old))
        self.working.keep(~old)

    def prune(self) -> int:
        """Drop the least-attended long-term entries down to capacity.

        Ties on accumulated attention go to the older timestamp, then to the
        earlier insertion.
        """
        excess = len(self.longterm) - self.config.capacity
        if excess <= 0:
            return 0
        lt = self.longterm
        order = np.lexsort((lt.uids, lt.timestamps, lt.attention))
        keep = np.ones(len(lt), bool)
        keep[order[:excess]] = False
        lt.keep(keep)
        self.pruned += excess
        return excess

    # -- snapshots ---------------------------------------------------------
    _MAGIC = b"D4MP"
    _HEADER = struct.Struct("<4sIIIIIdQQQ")

    def to_bytes(self) -> bytes:
        c = self.config
        head = self._HEADER.pack(self._MAGIC, 1, self.sensor, c.dim, c.working_frames, c.capacity,
                                 c.sim_threshold, self.next_uid, self.pruned, self.discarded)
        parts = [head, struct.pack("<I", c.related_timestamps)]
        for store in self.stores:
            parts.append(struct.pack("<Q", len(store)))
            parts += [store.keys.astype("<f8").tobytes(), store.values.astype("<f8").tobytes(),
                      store.timestamps.astype("<f8").tobytes(), store.sensors.astype("<i8").tobytes(),
                      store.attention.astype("<f8").tobytes(), store.uids.astype("<i8").tobytes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "SensorPool":
        hs = cls._HEADER.size
        if len(blob) < 4 or blob[:4] != cls._MAGIC:
            raise BadMagic(f"{source}: not a pool snapshot")
        if len(blob) < hs + 4:
            raise TruncatedFile(f"{source}: truncated snapshot header")
        _, _version, sensor, dim, wf, cap, sim, next_uid, pruned, discarded = cls._HEADER.unpack_from(blob)
        (k,) = struct.unpack_from("<I", blob, hs)
        pool = cls(sensor, PoolConfig(dim, wf, cap, sim, k))
        pool.next_uid, pool.pruned, pool.discarded = next_uid, pruned, discarded
        off = hs + 4
        for store in pool.stores:
            if len(blob) < off + 8:
                raise TruncatedFile(f"{source}: truncated snapshot")
            (n,) = struct.unpack_from("<Q", blob, off)
            off += 8
            need = n * (2 * dim + 4) * 8
            if len(blob) < off + need:
                raise TruncatedFile(f"{source}: truncated snapshot body")

            def take(count, dtype):
                nonlocal off
                arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).copy()
                off += count * 8
                return arr

            keys = take(n * dim, "<f8").reshape(n, dim)
            values = take(n * dim, "<f8").reshape(n, dim)
            store.append(keys, values, take(n, "<f8"), take(n, "<i8").astype(np.int64),
                         take(n, "<f8"), take(n, "<i8").astype(np.int64))
        return pool


# --------------------------------------------------------------------------
# selection and attention


@dataclass(eq=False)
class Selection:
    """Entries gathered from one or more stores, with write-back of attention."""

    segments: list[tuple[EntryStore, np.ndarray]] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(idx) for _, idx in self.segments)

    def _gather(self, name: str, dim: int | None = None) -> np.ndarray:
        arrays = [getattr(store, name)[idx] for store, idx in self.segments]
        if not arrays:
            return np.zeros((0, dim)) if dim else np.zeros(0)
        return np.concatenate(arrays)

    def keys(self, dim: int) -> np.ndarray:
        return self._gather("keys", dim)

    def values(self, dim: int) -> np.ndarray:
        return self._gather("values", dim)

    def sensors(self) -> np.ndarray:
        return self._gather("sensors").astype(np.int64)

    def timestamps(self) -> np.ndarray:
        return self._gather("timestamps")

    def uids(self) -> np.ndarray:
        return self._gather("uids").astype(np.int64)

    def accumulate(self, mass: np.ndarray) -> None:
        off = 0
        for store, idx in self.segments:
            np.add.at(store.attention, idx, mass[off:off + len(idx)])
            off += len(idx)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attend(queries: np.ndarray, selection: Selection | None) -> np.ndarray:
    """Residual attention read-out; accumulates per-entry attention mass.

    Each selected entry's accumulated attention grows by its attention
    weight averaged over the query tokens.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2:
        raise DimensionMismatch(f"queries must be (n, s), got {q.shape}")
    if selection is None or len(selection) == 0:
        return q.copy()
    s = q.shape[1]
    K = selection.keys(s)
    V = selection.values(s)
    if K.shape[1] != s:
        raise DimensionMismatch(f"query dimension {s} != key dimension {K.shape[1]}")
    A = softmax(q @ K.T / np.sqrt(s), axis=1)
    selection.accumulate(A.mean(axis=0))
    return A @ V + q


def rig_adjacency(intrinsics: Sequence[Intrinsics], rig: Sequence[SE3Pose],
                  max_range: float = OVERLAP_RANGE, samples: int = 9) -> np.ndarray:
    """Which sensors' viewing frusta (cut at ``max_range``) intersect.

    Points sampled over one frustum's pixel grid and depth range are
    projected into the other camera; any hit inside its image and range
    counts as overlap. The result is symmetric with a false diagonal.
    """
    n = len(rig)
    adj = np.zeros((n, n), bool)
    depths = np.linspace(0.05 * max_range, max_range, 4 * samples)
    for a in range(n):
        ka = intrinsics[a]
        us = np.linspace(0, ka.width - 1, samples)
        vs = np.linspace(0, ka.height - 1, samples)
        uu, vv, dd = np.meshgrid(us, vs, depths, indexing="ij")
        cam = np.stack([(uu - ka.cx) / ka.fx * dd, (vv - ka.cy) / ka.fy * dd, dd], axis=-1).reshape(-1, 3)
        ego = rig[a].apply(cam)
        for b in range(n):
            if a == b:
                continue
            kb = intrinsics[b]
            pb = rig[b].inverse().apply(ego)
            z = pb[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = kb.fx * pb[:, 0] / z + kb.cx
                v = kb.fy * pb[:, 1] / z + kb.cy
            inside = (z > 0) & (z <= max_range) & (u >= 0) & (u <= kb.width - 1) & (v >= 0) & (v <= kb.height - 1)
            if inside.any():
                adj[a, b] = adj[b, a] = True
    return adj


def _frame_groups(store: EntryStore, mask: np.ndarray):
    """Split the masked entries of a store by (sensor, timestamp)."""
    idx = np.flatnonzero(mask)
    groups = {}
    for i in idx:
        groups.setdefault((int(store.sensors[i]), float(store.timestamps[i])), []).append(i)
    return [(key, store, np.asarray(v, dtype=np.int64)) for key, v in groups.items()]


def select_related(
    pools: Sequence[SensorPool],
    t: float,
    c: int,
    stage: str = "temporal",
    *,
    adjacency: np.ndarray | None = None,
    queries: np.ndarray | None = None,
) -> Selection:
    """Entries the frame ``(t, c)`` should attend to.

    temporal: every entry of sensor ``c``'s own pool not newer than ``t``.

    spatial: candidate frames are sensor ``c``'s working-memory frames plus
    the frames of overlapping sensors from the previous ``k`` timestamps;
    the ``W`` candidates whose keys are most similar to ``queries`` (mean
    cosine similarity) form the selection.
    """
    own = pools[c]
    if stage == "temporal":
        segs = [(store, np.flatnonzero(store.timestamps <= t)) for store in own.stores]
        return Selection([(s, i) for s, i in segs if len(i)])
    if stage != "spatial":
        raise ValueError(f"unknown stage {stage!r}")
    if adjacency is None:
        raise ValueError("spatial selection needs the sensor adjacency")
    cfg = own.config
    candidates = _frame_groups(own.working, own.working.timestamps <= t)
    neighbours = [pools[j] for j in range(len(pools)) if j != c and adjacency[c, j]]
    stamps = np.unique(np.concatenate([p.timestamps() for p in [own, *neighbours]] + [np.zeros(0)]))
    previous = stamps[stamps < t][-cfg.related_timestamps:]
    for pool in neighbours:
        for store in pool.stores:
            candidates += _frame_groups(store, np.isin(store.timestamps, previous))
    if not candidates:
        return Selection()
    if queries is not None and len(candidates) > cfg.working_frames:
        qmean = _unit(np.asarray(queries, dtype=np.float64)).mean(axis=0)
        scores = [float(_unit(store.keys[idx]).mean(axis=0) @ qmean) for _, store, idx in candidates]
        # most similar first; ties go to the more recent frame, then the lower sensor id
        order = sorted(range(len(candidates)),
                       key=lambda i: (-scores[i], -candidates[i][0][1], candidates[i][0][0]))
        candidates = [candidates[i] for i in order[:cfg.working_frames]]
    elif len(candidates) > cfg.working_frames:
        candidates = sorted(candidates, key=lambda g: (-g[0][1], g[0][0]))[:cfg.working_frames]
    # chronological, then by sensor, for a deterministic concatenation order
    candidates.sort(key=lambda g: (g[0][1], g[0][0]))
    return Selection([(store, idx) for _, store, idx in candidates])
