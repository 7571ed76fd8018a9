"""Camera models, rigid transforms and pointmap-based camera recovery.

Conventions
-----------
* Camera frame: x right, y down, z forward (optical axis).
* Pixel coordinates ``(u, v)`` are column/row indices; integer values are
  pixel centres, so the grid of an ``H x W`` image is ``u = 0..W-1``,
  ``v = 0..H-1``.
* :class:`SE3Pose` stores a *camera-to-world* (more generally
  source-to-target) transform ``x_target = R @ x_source + t``.
* Estimation fixes the principal point at ``(W / 2, H / 2)`` and shares a
  single focal length between both axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import rq
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from .errors import BadDimensions, DegenerateGeometry, NonConvergence

Z_EPS = 1e-6
FRAMES = ("camera", "sequence", "world")

MIN_FOCAL_POINTS = 32
MIN_POSE_POINTS = 6
GN_MAX_ITER = 50
RANSAC_ITERATIONS = 256
RANSAC_THRESHOLD_PX = 2.0


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite intrinsics: {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        """Shared focal, principal point at the image centre."""
        return cls(float(focal), float(focal), width / 2.0, height / 2.0, int(width), int(height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform ``x -> R x + t`` (camera-to-world by convention)."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SE3Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "SE3Pose":
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        """Composition: ``(self @ other)(x) == self(other(x))``."""
        return SE3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SE3Pose":
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Pointmap:
    """``H x W`` grid of 3D points tagged with the frame they live in.

    Non-finite points are never valid: the validity mask is intersected
    with ``isfinite`` on construction.
    """

    points: np.ndarray
    valid: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError(f"points must be H x W x 3, got {pts.shape}")
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != pts.shape[:2]:
            raise ValueError(f"valid mask {valid.shape} does not match points {pts.shape[:2]}")
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame tag {self.frame!r}")
        valid = valid & np.isfinite(pts).all(axis=-1)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def with_frame(self, frame: str) -> "Pointmap":
        return Pointmap(self.points, self.valid, frame)


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2 or valid.shape != d.shape:
            raise ValueError("depth and mask must be matching H x W grids")
        valid = valid & np.isfinite(d) & (d > 0)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``H x W x 2`` array of ``(u, v)`` pixel coordinates."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def project(points: Pointmap, k: Intrinsics) -> tuple[np.ndarray, DepthMap]:
    """Pinhole projection of a camera-frame pointmap.

    Returns the ``H x W x 2`` pixel coordinates and the depth map. Points with
    ``z <= Z_EPS`` become invalid (their pixel coordinates are NaN).
    """
    if points.frame != "camera":
        raise ValueError(f"project expects a camera-frame pointmap, got {points.frame!r}")
    p = points.points
    z = p[..., 2]
    valid = points.valid & (z > Z_EPS)
    zs = np.where(valid, z, 1.0)
    uv = np.stack([k.fx * p[..., 0] / zs + k.cx, k.fy * p[..., 1] / zs + k.cy], axis=-1)
    uv[~valid] = np.nan
    return uv, DepthMap(np.where(valid, z, 0.0), valid)


def unproject(d: DepthMap, k: Intrinsics, pose: SE3Pose | None = None, frame: str | None = None) -> Pointmap:
    """Lift a depth map to 3D on the pixel grid, optionally moving it by ``pose``."""
    h, w = d.shape
    uv = pixel_grid(h, w)
    z = np.where(d.valid, d.depth, 0.0)
    cam = np.stack([(uv[..., 0] - k.cx) * z / k.fx, (uv[..., 1] - k.cy) * z / k.fy, z], axis=-1)
    if pose is None:
        return Pointmap(cam, d.valid, frame or "camera")
    return Pointmap(pose.apply(cam), d.valid, frame or "world")


def transform(p: Pointmap, pose: SE3Pose, frame: str = "world") -> Pointmap:
    return Pointmap(pose.apply(p.points), p.valid, frame)


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest proper rotation in Frobenius norm."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


# --------------------------------------------------------------------------
# focal length


def estimate_focal(p: Pointmap, max_iter: int = 10, rtol: float = 1e-6) -> float:
    """Shared focal length of a camera-frame pointmap.

    Minimises ``sum_i |(u_i - cx, v_i - cy) - f (x_i, y_i) / z_i|`` with the
    principal point at the image centre, by iteratively reweighted least
    squares initialised from the closed-form L2 solution.
    """
    h, w = p.shape
    centred = pixel_grid(h, w) - np.array([w / 2.0, h / 2.0])
    mask = p.valid & (p.points[..., 2] > Z_EPS)
    if mask.sum() < MIN_FOCAL_POINTS:
        raise DegenerateGeometry(f"focal estimation needs >= {MIN_FOCAL_POINTS} points, got {mask.sum()}")
    pix = centred[mask]
    pts = p.points[mask]
    xy = pts[:, :2] / pts[:, 2:3]

    num = (xy * pix).sum(axis=1)
    den = (xy * xy).sum(axis=1)
    if den.mean() < 1e-12:
        raise DegenerateGeometry("all rays are collinear with the optical axis")
    f = num.mean() / den.mean()
    for _ in range(max_iter):
        resid = np.linalg.norm(pix - f * xy, axis=1)
        wts = 1.0 / np.maximum(resid, 1e-8)
        wden = (wts * den).sum()
        if wden < 1e-12:
            raise DegenerateGeometry("IRLS weight denominator vanished")
        f_new = (wts * num).sum() / wden
        done = abs(f_new - f) <= rtol * abs(f)
        f = f_new
        if done:
            break
    if not np.isfinite(f) or f <= 0:
        raise DegenerateGeometry(f"focal estimate is not positive: {f}")
    return float(f)


# --------------------------------------------------------------------------
# pose


def _normalize_2d(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = np.sqrt(2.0) / max(np.linalg.norm(x - mean, axis=1).mean(), 1e-300)
    T = np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1.0]])
    return (x - mean) * scale, T


def _normalize_3d(X: np.ndarray):
    mean = X.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.linalg.norm(X - mean, axis=1).mean(), 1e-300)
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = -scale * mean
    return (X - mean) * scale, T


def _dlt(x: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Projection matrix ``P`` (3x4) with ``x ~ P [X; 1]``, Hartley-normalised."""
    xn, Tx = _normalize_2d(x)
    Xn, TX = _normalize_3d(X)
    n = len(x)
    Xh = np.hstack([Xn, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateGeometry("DLT system is rank deficient")
    Pn = vt[-1].reshape(3, 4)
    return np.linalg.inv(Tx) @ Pn @ TX


def _calibrated_from_projection(P: np.ndarray, X: np.ndarray):
    """Split a normalised-coordinate projection matrix into ``R, t``."""
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = P[:, :3]
    u, s, vt = np.linalg.svd(M)
    R = u @ vt
    t = P[:, 3] / s.mean()
    return R, t


def _check_support(X: np.ndarray) -> None:
    if len(X) < MIN_POSE_POINTS:
        raise DegenerateGeometry(f"pose estimation needs >= {MIN_POSE_POINTS} points, got {len(X)}")
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[2] < 1e-9 * s[0]:
        raise DegenerateGeometry("supporting points are coplanar or collinear")


def _subsample(n: int, limit: int) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.linspace(0, n - 1, limit).round().astype(np.int64)


def _reproject(R, t, X, k: Intrinsics):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    uv = np.stack([k.fx * Xc[:, 0] / z + k.cx, k.fy * Xc[:, 1] / z + k.cy], axis=1)
    return uv, Xc


def _gauss_newton(R, t, X, pix, k: Intrinsics, max_iter: int = GN_MAX_ITER):
    """Minimise squared reprojection error over a world-to-camera ``(R, t)``."""

    def cost(R, t):
        uv, Xc = _reproject(R, t, X, k)
        front = Xc[:, 2] > Z_EPS
        if not front.all():
            return np.inf
        return float(((uv - pix) ** 2).sum())

    c0 = c = cost(R, t)
    if not np.isfinite(c):
        raise NonConvergence("initial pose places points behind the camera")
    tol = 1e-30 * len(X)
    for _ in range(max_iter):
        if c <= tol:
            return R, t
        uv, Xc = _reproject(R, t, X, k)
        r = (uv - pix).reshape(-1)
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        # d(uv)/d(Xc)
        du = np.stack([k.fx / z, np.zeros_like(z), -k.fx * x / z**2], axis=1)
        dv = np.stack([np.zeros_like(z), k.fy / z, -k.fy * y / z**2], axis=1)
        # d(Xc)/d(omega) = -[Xc]_x under the left update exp(omega) (R X + t) + delta
        def dxc_domega(g):
            return np.cross(Xc, g)

        J = np.empty((2 * len(X), 6))
        J[0::2, :3] = dxc_domega(du)
        J[1::2, :3] = dxc_domega(dv)
        J[0::2, 3:] = du
        J[1::2, 3:] = dv
        JtJ = J.T @ J
        try:
            step = -np.linalg.solve(JtJ, J.T @ r)
        except np.linalg.LinAlgError as exc:
            raise DegenerateGeometry("singular Gauss-Newton system") from exc
        accepted = False
        alpha = 1.0
        for _ in range(12):
            dR = Rotation.from_rotvec(alpha * step[:3]).as_matrix()
            Rn, tn = dR @ R, dR @ t + alpha * step[3:]
            cn = cost(Rn, tn)
            if cn < c:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no descent direction left at working precision
            return R, t
        rel = (c - cn) / max(c, 1e-300)
        R, t, c = Rn, tn, cn
        if rel < 1e-10 or np.linalg.norm(alpha * step) < 1e-13:
            return R, t
    if not c < c0:
        raise NonConvergence(f"Gauss-Newton did not reduce the residual in {max_iter} iterations")
    return R, t


def _ransac_inliers(rays, X, pix, k: Intrinsics, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    best = None
    best_count = -1
    for _ in range(RANSAC_ITERATIONS):
        idx = rng.choice(n, MIN_POSE_POINTS, replace=False)
        try:
            P = _dlt(rays[idx], X[idx])
        except (DegenerateGeometry, np.linalg.LinAlgError):
            continue
        R, t = _calibrated_from_projection(P, X[idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            uv, Xc = _reproject(R, t, X, k)
            err = np.linalg.norm(uv - pix, axis=1)
        inl = (Xc[:, 2] > Z_EPS) & (err < RANSAC_THRESHOLD_PX)
        count = int(inl.sum())
        if count > best_count:
            best, best_count = inl, count
    if best is None or best_count < MIN_POSE_POINTS:
        raise DegenerateGeometry("RANSAC found no consensus set")
    return best


def _correspondences(p: Pointmap):
    pix = pixel_grid(*p.shape)[p.valid]
    return pix, p.points[p.valid]


def estimate_pose(
    p: Pointmap,
    k: Intrinsics,
    *,
    ransac: bool = False,
    seed: int = 0,
    dlt_samples: int = 4000,
) -> SE3Pose:
    """Pose of the camera that sees ``p`` on its pixel grid.

    The pointmap may live in any frame; the result maps camera coordinates
    into that frame (camera-to-external). Initialised with a linear DLT on a
    subsample, then refined by Gauss-Newton on every valid pixel. With
    ``ransac=True`` a 6-point consensus search (256 iterations, 2 px) first
    discards outliers.
    """
    pix, X = _correspondences(p)
    _check_support(X)
    rays = np.stack([(pix[:, 0] - k.cx) / k.fx, (pix[:, 1] - k.cy) / k.fy], axis=1)
    if ransac:
        inl = _ransac_inliers(rays, X, pix, k, np.random.default_rng(seed))
        pix, X, rays = pix[inl], X[inl], rays[inl]
        _check_support(X)
    sub = _subsample(len(X), dlt_samples)
    R, t = _calibrated_from_projection(_dlt(rays[sub], X[sub]), X[sub])
    if np.median((X @ R.T + t)[:, 2]) < 0:
        raise DegenerateGeometry("DLT solution places the scene behind the camera")
    front = (X @ R.T + t)[:, 2] > Z_EPS
    R, t = _gauss_newton(R, t, X[front], pix[front], k)
    R = nearest_rotation(R)
    return SE3Pose(R, t).inverse()


def _camera_frame_guess(p: Pointmap, dlt_samples: int = 4000) -> Pointmap:
    """Express ``p`` in the frame of the camera implied by an uncalibrated DLT."""
    pix, X = _correspondences(p)
    _check_support(X)
    sub = _subsample(len(X), dlt_samples)
    P = _dlt(pix[sub], X[sub])
    Kq, Rq = rq(P[:, :3])
    signs = np.sign(np.diag(Kq))
    signs[signs == 0] = 1.0
    S = np.diag(signs)
    Kq, Rq = Kq @ S, S @ Rq
    t = np.linalg.solve(Kq, P[:, 3])
    if np.linalg.det(Rq) < 0:
        Rq, t = -Rq, -t
    R = nearest_rotation(Rq)
    cam = p.points @ R.T + t
    if np.median(cam[p.valid][:, 2]) < 0:
        raise DegenerateGeometry("DLT solution places the scene behind the camera")
    return Pointmap(cam, p.valid, "camera")


def pose_estimate(p: Pointmap, *, ransac: bool = False, seed: int = 0) -> tuple[Intrinsics, SE3Pose]:
    """Recover ``(K, T)`` from a pointmap alone.

    The focal comes from :func:`estimate_focal` applied to the pointmap
    expressed in a provisional camera frame (the identity when the pointmap
    already is camera-frame); the pose then comes from
    :func:`estimate_pose` with that focal.
    """
    h, w = p.shape
    cam = p if p.frame == "camera" else _camera_frame_guess(p)
    f = estimate_focal(cam)
    k = Intrinsics.centered(f, w, h)
    return k, estimate_pose(p, k, ransac=ransac, seed=seed)


# --------------------------------------------------------------------------
# virtual cameras

VIRTUAL_SIZE = 224


def split_virtual_cameras(image: np.ndarray, k: Intrinsics, size: int = VIRTUAL_SIZE
                          ) -> list[tuple[np.ndarray, Intrinsics]]:
    """Split a wide camera into left and right square sub-cameras.

    Each half (``W/2 x H``) is scaled isotropically so that its shorter side
    becomes ``size`` and then centre-cropped to ``size x size``. A half
    starting at column ``off`` maps pixel ``u`` to ``s * (u - off) - crop_u``,
    so the new intrinsics are ``f' = s f``, ``cx' = s (cx - off) - crop_u``,
    ``cy' = s cy - crop_v``. The image is resampled bilinearly under the same
    mapping.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if w <= h or (k.width, k.height) != (w, h):
        raise BadDimensions(f"expected a landscape image matching the intrinsics, got {w}x{h}")
    half = w / 2.0
    s = size / min(half, h)
    crop_u = (s * half - size) / 2.0
    crop_v = (s * h - size) / 2.0
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for off in (0.0, half):
        src_u = (uu + crop_u) / s + off
        src_v = (vv + crop_v) / s
        if image.ndim == 2:
            img = map_coordinates(image, [src_v, src_u], order=1, mode="nearest")
        else:
            img = np.stack([map_coordinates(image[..., ch], [src_v, src_u], order=1, mode="nearest")
                            for ch in range(image.shape[2])], axis=-1)
        kv = Intrinsics(s * k.fx, s * k.fy, s * (k.cx - off) - crop_u, s * k.cy - crop_v, size, size)
        out.append((img, kv))
    return out
