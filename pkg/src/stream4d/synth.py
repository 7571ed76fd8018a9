"""Analytic multi-camera dynamic scenes.

Scenes are built from infinite planes and boxes; boxes either stay put or
move with constant linear velocity and yaw rate. Every frame is ray cast
exactly, so depth, pointmaps, flow and dynamic masks are all ground truth.

World frame is z-up. Ego frame: x forward, y left, z up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import FlowField
from .geometry import DepthMap, Intrinsics, Pointmap, SE3Pose, Z_EPS, pixel_grid, unproject


@dataclass
class Plane:
    point: tuple
    normal: tuple
    albedo: float = 0.25


@dataclass
class Box:
    """Oriented box; ``size`` is the full extent along the body axes."""

    center: tuple
    size: tuple
    albedo: float = 0.6
    yaw: float = 0.0
    velocity: tuple = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0

    def pose_at(self, t: float) -> SE3Pose:
        R = _yaw_matrix(self.yaw + self.yaw_rate * t)
        return SE3Pose(R, np.asarray(self.center, float) + np.asarray(self.velocity, float) * t)


@dataclass
class SceneSpec:
    planes: list[Plane]
    static_boxes: list[Box]
    dynamic_boxes: list[Box]
    rig: list[SE3Pose]  # camera-to-ego
    intrinsics: list[Intrinsics]
    ego_poses: list[SE3Pose]  # ego-to-world, one per timestamp
    timestamps: list[float]
    max_depth: float = 80.0
    light: tuple = (0.3, 0.5, 1.0)
    ambient: float = 0.3
    image_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        ts = np.asarray(self.timestamps, float)
        if len(ts) == 0 or np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be non-empty and strictly increasing")
        if len(self.rig) < 1 or len(self.rig) != len(self.intrinsics):
            raise ValueError("need one intrinsics entry per rig camera and at least one camera")
        if len(self.ego_poses) != len(ts):
            raise ValueError("need one ego pose per timestamp")
        for b in self.static_boxes + self.dynamic_boxes:
            if min(b.size) <= 0:
                raise ValueError(f"box extents must be positive: {b.size}")

    @property
    def num_sensors(self) -> int:
        return len(self.rig)

    @property
    def num_bodies(self) -> int:
        return len(self.planes) + len(self.static_boxes) + len(self.dynamic_boxes)

    def dynamic_ids(self) -> list[int]:
        start = len(self.planes) + len(self.static_boxes)
        return list(range(start, start + len(self.dynamic_boxes)))

    def camera_pose(self, ti: int, c: int) -> SE3Pose:
        """Camera-to-world pose of sensor ``c`` at timestamp index ``ti``."""
        return self.ego_poses[ti] @ self.rig[c]

    def body_pose(self, body_id: int, t: float) -> SE3Pose:
        """Body-to-world pose; identity for planes and static boxes."""
        dyn = self.dynamic_ids()
        if body_id in dyn:
            return self.dynamic_boxes[body_id - dyn[0]].pose_at(t)
        return SE3Pose.identity()

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        def box(b: Box):
            return {"center": list(b.center), "size": list(b.size), "albedo": b.albedo, "yaw": b.yaw,
                    "velocity": list(b.velocity), "yaw_rate": b.yaw_rate}

        return {
            "planes": [{"point": list(p.point), "normal": list(p.normal), "albedo": p.albedo} for p in self.planes],
            "static_boxes": [box(b) for b in self.static_boxes],
            "dynamic_boxes": [box(b) for b in self.dynamic_boxes],
            "rig": [p.to_dict() for p in self.rig],
            "intrinsics": [k.to_dict() for k in self.intrinsics],
            "ego_poses": [p.to_dict() for p in self.ego_poses],
            "timestamps": list(self.timestamps),
            "max_depth": self.max_depth,
            "light": list(self.light),
            "ambient": self.ambient,
            "image_noise": self.image_noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        def box(b):
            return Box(tuple(b["center"]), tuple(b["size"]), b.get("albedo", 0.6), b.get("yaw", 0.0),
                       tuple(b.get("velocity", (0.0, 0.0, 0.0))), b.get("yaw_rate", 0.0))

        return cls(
            planes=[Plane(tuple(p["point"]), tuple(p["normal"]), p.get("albedo", 0.25)) for p in d["planes"]],
            static_boxes=[box(b) for b in d.get("static_boxes", [])],
            dynamic_boxes=[box(b) for b in d.get("dynamic_boxes", [])],
            rig=[SE3Pose.from_dict(p) for p in d["rig"]],
            intrinsics=[Intrinsics.from_dict(k) for k in d["intrinsics"]],
            ego_poses=[SE3Pose.from_dict(p) for p in d["ego_poses"]],
            timestamps=[float(t) for t in d["timestamps"]],
            max_depth=d.get("max_depth", 80.0),
            light=tuple(d.get("light", (0.3, 0.5, 1.0))),
            ambient=d.get("ambient", 0.3),
            image_noise=d.get("image_noise", 0.0),
            seed=d.get("seed", 0),
        )


@dataclass(eq=False)
class FrameBundle:
    timestamp: float
    time_index: int
    sensor: int
    depth: DepthMap
    pointmap: Pointmap  # world frame
    intrinsics: Intrinsics
    pose: SE3Pose  # camera-to-world
    dynamic_mask: np.ndarray
    image: np.ndarray
    hit_id: np.ndarray  # -1 where nothing was hit
    normals: np.ndarray = field(repr=False, default=None)


# --------------------------------------------------------------------------
# rigs and default scene


def camera_to_ego(yaw: float, position) -> SE3Pose:
    """Horizontal camera looking along ego-frame heading ``yaw``."""
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    return SE3Pose(R, np.asarray(position, float))


def ring_rig(n: int = 6, radius: float = 0.8, height: float = 1.6) -> list[SE3Pose]:
    yaws = [2 * np.pi * i / n for i in range(n)]
    return [camera_to_ego(y, (radius * np.cos(y), radius * np.sin(y), height)) for y in yaws]


def straight_trajectory(timestamps, speed: float = 5.0, yaw_rate: float = 0.0) -> list[SE3Pose]:
    return [SE3Pose(_yaw_matrix(yaw_rate * t), (speed * t, 0.0, 0.0)) for t in timestamps]


def default_scene(num_timestamps: int = 5, dt: float = 0.5, size: int = 224, dynamic: bool = True,
                  seed: int = 0) -> SceneSpec:
    """Street canyon seen by a six-camera ring on a vehicle driving at 5 m/s.

    Ground plane, two building blocks flanking the road, and (unless
    ``dynamic`` is false) two cars: one crossing at 4 m/s and one oncoming
    at 8 m/s.
    """
    ts = [i * dt for i in range(num_timestamps)]
    k = Intrinsics.centered(size / 2.0, size, size)  # 90 degree horizontal field of view
    cars = []
    if dynamic:
        cars = [
            Box((12.0, -4.0, 0.75), (4.0, 2.0, 1.5), albedo=1.0, yaw=np.pi / 2, velocity=(0.0, 4.0, 0.0)),
            Box((35.0, -3.0, 0.8), (4.5, 2.0, 1.6), albedo=0.95, velocity=(-8.0, 0.0, 0.0)),
        ]
    return SceneSpec(
        planes=[Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), albedo=0.25)],
        static_boxes=[
            Box((0.0, 11.0, 4.0), (80.0, 6.0, 8.0), albedo=0.6),
            Box((0.0, -11.0, 4.0), (80.0, 6.0, 8.0), albedo=0.6),
        ],
        dynamic_boxes=cars,
        rig=ring_rig(6),
        intrinsics=[k] * 6,
        ego_poses=straight_trajectory(ts, speed=5.0),
        timestamps=ts,
        seed=seed,
    )


# --------------------------------------------------------------------------
# ray casting


def _ray_plane(o, d, plane: Plane):
    n = np.asarray(plane.normal, float)
    n = n / np.linalg.norm(n)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((np.asarray(plane.point, float) - o) @ n) / denom
    t = np.where((np.abs(denom) > 1e-12) & (t > Z_EPS), t, np.inf)
    normals = np.broadcast_to(n, d.shape).copy()
    flip = denom > 0
    normals[flip] *= -1
    return t, normals


def _ray_box(o, d, box: Box, pose: SE3Pose):
    R = pose.rotation
    ob = (o - pose.translation) @ R
    db = d @ R
    half = np.asarray(box.size, float) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - ob) / db
        t2 = (half - ob) / db
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = db == 0
    inside = np.abs(ob) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    hit = (tmax >= tmin) & (tmin > Z_EPS)
    t = np.where(hit, tmin, np.inf)
    axis = lo.argmax(axis=1)
    nb = np.zeros_like(db)
    rows = np.arange(len(db))
    nb[rows, axis] = -np.sign(db[rows, axis])
    return t, nb @ R.T


def cast_rays(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray, t: float):
    """Nearest hit along each ray. Returns ``(param, body_id, normal)``."""
    n = len(dirs)
    best = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=np.int64)
    normals = np.zeros((n, 3))
    body = 0
    candidates = []
    for plane in scene.planes:
        candidates.append((body, *_ray_plane(origin, dirs, plane)))
        body += 1
    for box in scene.static_boxes:
        candidates.append((body, *_ray_box(origin, dirs, box, SE3Pose(_yaw_matrix(box.yaw), box.center))))
        body += 1
    for box in scene.dynamic_boxes:
        candidates.append((body, *_ray_box(origin, dirs, box, box.pose_at(t))))
        body += 1
    for bid, tp, nrm in candidates:
        closer = tp < best
        best[closer] = tp[closer]
        ids[closer] = bid
        normals[closer] = nrm[closer]
    return best, ids, normals


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _albedos(scene: SceneSpec) -> np.ndarray:
    vals = [p.albedo for p in scene.planes] + [b.albedo for b in scene.static_boxes]
    vals += [b.albedo for b in scene.dynamic_boxes]
    return np.asarray(vals, float)


def render_frame(scene: SceneSpec, ti: int, c: int) -> FrameBundle:
    """Ray cast camera ``c`` at timestamp index ``ti``."""
    if not 0 <= ti < len(scene.timestamps):
        raise IndexError(f"timestamp index {ti} out of range")
    if not 0 <= c < scene.num_sensors:
        raise IndexError(f"sensor {c} out of range")
    k = scene.intrinsics[c]
    pose = scene.camera_pose(ti, c)
    t = scene.timestamps[ti]
    h, w = k.height, k.width
    uv = pixel_grid(h, w).reshape(-1, 2)
    rays_cam = np.stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy, np.ones(len(uv))], axis=1)
    dirs = rays_cam @ pose.rotation.T
    param, ids, normals = cast_rays(scene, pose.translation, dirs, t)
    valid = np.isfinite(param) & (param <= scene.max_depth)
    ids = np.where(valid, ids, -1)
    depth = DepthMap(np.where(valid, param, 0.0).reshape(h, w), valid.reshape(h, w))
    pointmap = unproject(depth, k, pose, "world")

    light = np.asarray(scene.light, float)
    light /= np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, None)
    shade = scene.ambient + (1.0 - scene.ambient) * lambert
    albedo = _albedos(scene)[np.maximum(ids, 0)]
    image = np.where(valid, albedo * shade, 0.0).reshape(h, w)
    if scene.image_noise > 0:
        rng = np.random.default_rng([scene.seed, ti, c])
        image = np.clip(image + rng.normal(0.0, scene.image_noise, image.shape), 0.0, 1.0)

    ids = ids.reshape(h, w)
    dynamic = np.isin(ids, scene.dynamic_ids())
    return FrameBundle(t, ti, c, depth, pointmap, k, pose, dynamic, image, ids,
                       normals.reshape(h, w, 3))


def gt_flow(scene: SceneSpec, t1: int, t2: int, c: int, frame: FrameBundle | None = None) -> FlowField:
    """Exact optical flow of sensor ``c`` from timestamp index ``t1`` to ``t2``.

    Each visible surface point moves with its body; occlusion is ignored, so
    every source pixel with a hit gets a flow vector unless its advanced
    position lies behind the camera.
    """
    src = frame if frame is not None else render_frame(scene, t1, c)
    ta, tb = scene.timestamps[t1], scene.timestamps[t2]
    X = src.pointmap.points.copy()
    ids = src.hit_id
    for bid in scene.dynamic_ids():
        sel = ids == bid
        if sel.any():
            move = scene.body_pose(bid, tb) @ scene.body_pose(bid, ta).inverse()
            X[sel] = move.apply(X[sel])
    cam = scene.camera_pose(t2, c).inverse().apply(X)
    k = scene.intrinsics[c]
    z = cam[..., 2]
    valid = src.depth.valid & (z > Z_EPS)
    zs = np.where(valid, z, 1.0)
    uv = np.stack([k.fx * cam[..., 0] / zs + k.cx, k.fy * cam[..., 1] / zs + k.cy], axis=-1)
    flow = uv - pixel_grid(k.height, k.width)
    return FlowField(np.where(valid[..., None], flow, 0.0), valid)


class SceneFlowProvider:
    """Flow provider backed by :func:`gt_flow` for one sensor of a scene."""

    def __init__(self, scene: SceneSpec, sensor: int, time_indices: list[int] | None = None):
        self.scene = scene
        self.sensor = sensor
        self.time_indices = list(time_indices) if time_indices is not None else list(range(len(scene.timestamps)))

    def flow(self, i1: int, i2: int) -> tuple[FlowField, FlowField]:
        a, b = self.time_indices[i1], self.time_indices[i2]
        return gt_flow(self.scene, a, b, self.sensor), gt_flow(self.scene, b, a, self.sensor)


def render_all(scene: SceneSpec) -> dict[tuple[int, int], FrameBundle]:
    return {(ti, c): render_frame(scene, ti, c)
            for ti in range(len(scene.timestamps)) for c in range(scene.num_sensors)}


def covisible_mask(a: FrameBundle, b: FrameBundle) -> np.ndarray:
    """Pixels of ``a`` whose surface point camera ``b`` also sees.

    A pixel qualifies when it projects inside ``b``'s image, all four
    pixels of ``b`` around the projection hit the same face (same body and
    surface normal), and its depth in ``b`` lies within the depths of those
    four pixels (so a face of the same body hidden from ``b`` does not count).
    """
    h, w = a.hit_id.shape
    cam = b.pose.inverse().apply(a.pointmap.points)
    k = b.intrinsics
    z = cam[..., 2]
    zs = np.where(z > Z_EPS, z, 1.0)
    u = k.fx * cam[..., 0] / zs + k.cx
    v = k.fy * cam[..., 1] / zs + k.cy
    inside = a.depth.valid & (z > Z_EPS) & (u >= 0) & (u < k.width - 1) & (v >= 0) & (v < k.height - 1)
    j = np.clip(np.floor(u), 0, k.width - 2).astype(int)
    i = np.clip(np.floor(v), 0, k.height - 2).astype(int)
    same = np.ones((h, w), bool)
    for di in (0, 1):
        for dj in (0, 1):
            same &= b.hit_id[i + di, j + dj] == a.hit_id
            if a.normals is not None and b.normals is not None:
                same &= (b.normals[i + di, j + dj] * a.normals).sum(axis=-1) > 1.0 - 1e-9
    corners = np.stack([b.depth.depth[i + di, j + dj] for di in (0, 1) for dj in (0, 1)])
    tol = 1e-6 * np.maximum(z, 1.0)
    between = (z >= corners.min(axis=0) - tol) & (z <= corners.max(axis=0) + tol)
    return inside & same & between
