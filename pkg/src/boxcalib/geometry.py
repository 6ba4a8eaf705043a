"""Pinhole cameras, rigid poses and depth de-projection.

Conventions used throughout the package:

* depth is in meters; 0 marks an invalid pixel
* pixel (u, v) is (column, row) with the origin at the top-left pixel center
* camera frame: x right, y down, z along the viewing direction
* a ``RigidPose`` maps camera-space points into the structure's global frame
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width, height):
        """Same field of view at another resolution."""
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def default_intrinsics(width=320, height=240):
    # ~65 deg horizontal FOV, typical of active-stereo depth sensors
    fx = 0.5 * width / np.tan(np.radians(32.5))
    return Intrinsics(fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def intrinsics_pool(width=320, height=240):
    """Small pool of synthetic pinhole models around the default one."""
    base = default_intrinsics(width, height)
    pool = []
    for f_scale, dcx, dcy in [(1.0, 0.0, 0.0), (0.96, 1.5, -1.0), (1.04, -2.0, 1.5), (0.92, 0.5, 2.0)]:
        pool.append(Intrinsics(base.fx * f_scale, base.fy * f_scale,
                               base.cx + dcx * width / 320, base.cy + dcy * height / 240,
                               width, height))
    return pool


def _check_rotation(r, tol=1e-9):
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol) or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")


@dataclass(frozen=True, eq=False)
class RigidPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        _check_rotation(r)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Map an (N, 3) array of points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def __repr__(self):
        return f"RigidPose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a, b):
    """Pose equivalent to applying ``b`` first, then ``a``."""
    return RigidPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a):
    rt = a.rotation.T
    return RigidPose(rt, -rt @ a.translation)


def orthonormalize(r):
    """Closest proper rotation to ``r`` in the Frobenius sense."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_angle(r):
    """Geodesic angle (radians) of a rotation matrix."""
    # arccos is ill-conditioned near 0; the skew part keeps precision there
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = 0.5 * (np.trace(r) - 1.0)
    return float(np.arctan2(s, c))


def pose_error(estimate, truth):
    """(rotation error in degrees, translation error in meters)."""
    dr = estimate.rotation @ truth.rotation.T
    return np.degrees(rotation_angle(dr)), float(np.linalg.norm(estimate.translation - truth.translation))


def axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True, eq=False)
class VertexMap:
    """Per-pixel camera-space points, shape (3, H, W), plus a validity mask."""

    points: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.valid.shape

    def valid_points(self):
        return self.points[:, self.valid].T


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if n.shape != p.shape:
                raise ValueError(f"normals shape {n.shape} does not match points {p.shape}")
            if len(n) and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)


def deproject(depth, k):
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (k.height, k.width):
        raise ValueError(f"depth map is {depth.shape[1]}x{depth.shape[0]} but intrinsics are "
                         f"{k.width}x{k.height}")
    v, u = np.mgrid[0:k.height, 0:k.width]
    x = (u - k.cx) * depth / k.fx
    y = (v - k.cy) * depth / k.fy
    valid = depth > 0
    points = np.stack([x, y, depth])
    points[:, ~valid] = 0.0
    return VertexMap(points, valid)


def transform(pose, cloud):
    normals = None if cloud.normals is None else cloud.normals @ pose.rotation.T
    return PointCloud(pose.apply(cloud.points), normals)


def depth_to_cloud(depth, k, pose=None):
    pts = deproject(depth, k).valid_points()
    if pose is not None:
        pts = pose.apply(pts)
    return PointCloud(pts)


def save_depth_mm(path, depth):
    """Write a depth map as little-endian uint16 millimeters."""
    mm = np.round(np.asarray(depth) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise ValueError("depth exceeds 65.535 m and cannot be stored as uint16 millimeters")
    mm.astype("<u2").tofile(path)


def load_depth_mm(path, width, height):
    raw = np.fromfile(path, dtype="<u2")
    if raw.size != width * height:
        raise ValueError(f"{path}: expected {width * height} pixels, found {raw.size}")
    return raw.reshape(height, width).astype(float) / 1000.0
