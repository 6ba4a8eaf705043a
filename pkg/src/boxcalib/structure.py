"""Virtual calibration structure and the synthetic training-data generator.

The structure is a set of axis-aligned boxes in the global coordinate system
(origin at the structure center, y up).  Every box face is either labeled
(one class per face, ids 1..K) or excluded from labeling; excluded faces
still occlude.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import PointCloud, RigidPose, deproject

FACE_IDS = ("+x", "-x", "+y", "-y", "+z", "-z")
STRUCTURE_FORMAT = "boxcalib.structure/v1"

_FACE_AXIS = {f: (i // 2, 1.0 if f[0] == "+" else -1.0) for i, f in enumerate(FACE_IDS)}


class DegenerateViewError(ValueError):
    """Raised when a camera cannot observe the structure (e.g. it is inside a box)."""


@dataclass(frozen=True)
class BoxSpec:
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        c = tuple(float(x) for x in self.center)
        h = tuple(float(x) for x in self.half_extents)
        if len(c) != 3 or len(h) != 3:
            raise ValueError("box center and half extents must be 3-vectors")
        if min(h) <= 0:
            raise ValueError(f"half extents must be positive, got {h}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)

    @property
    def lo(self):
        return np.subtract(self.center, self.half_extents)

    @property
    def hi(self):
        return np.add(self.center, self.half_extents)

    def face_center(self, face):
        axis, sign = _FACE_AXIS[face]
        c = np.array(self.center)
        c[axis] += sign * self.half_extents[axis]
        return c


@dataclass(frozen=True, eq=False)
class StructureModel:
    boxes: tuple
    labeled: tuple  # ((box index, face id), ...) in class order 1..K
    excluded: tuple
    side_centers: np.ndarray = field(init=False)  # 3 x K

    def __post_init__(self):
        if len(self.labeled) == 0:
            raise ValueError("structure has no labeled sides")
        s = np.stack([self.boxes[b].face_center(f) for b, f in self.labeled], axis=1)
        s.flags.writeable = False
        object.__setattr__(self, "side_centers", s)

    @property
    def K(self):
        return len(self.labeled)

    @property
    def num_classes(self):
        return self.K + 1

    def class_of(self, box, face):
        try:
            return self.labeled.index((box, face)) + 1
        except ValueError:
            return 0

    def face_class_table(self):
        """(num boxes, 6) int array mapping box faces to class ids."""
        table = np.zeros((len(self.boxes), 6), dtype=np.int64)
        for cls, (b, f) in enumerate(self.labeled, start=1):
            table[b, FACE_IDS.index(f)] = cls
        return table

    def face_plane(self, cls):
        """(axis, coordinate) of the plane holding labeled side ``cls``."""
        b, f = self.labeled[cls - 1]
        axis, _ = _FACE_AXIS[f]
        return axis, self.boxes[b].face_center(f)[axis]

    def bounds(self):
        lo = np.min([b.lo for b in self.boxes], axis=0)
        hi = np.max([b.hi for b in self.boxes], axis=0)
        return lo, hi

    def contains(self, p, strict=True):
        p = np.asarray(p, dtype=float)
        for b in self.boxes:
            if strict and np.all(p > b.lo) and np.all(p < b.hi):
                return True
            if not strict and np.all(p >= b.lo) and np.all(p <= b.hi):
                return True
        return False

    def surface_cloud(self, spacing=0.005, include_excluded=False):
        """Grid samples of the exposed structure surface with outward normals.

        Samples that fall strictly inside another box or on a face shared with
        another box are dropped.
        """
        pts, nrm = [], []
        skip = set() if include_excluded else set(self.excluded)
        for bi, box in enumerate(self.boxes):
            for face in FACE_IDS:
                if (bi, face) in skip:
                    continue
                axis, sign = _FACE_AXIS[face]
                u_ax, v_ax = [a for a in range(3) if a != axis]
                us = _grid(box.lo[u_ax], box.hi[u_ax], spacing)
                vs = _grid(box.lo[v_ax], box.hi[v_ax], spacing)
                uu, vv = np.meshgrid(us, vs, indexing="ij")
                p = np.empty((uu.size, 3))
                p[:, u_ax] = uu.ravel()
                p[:, v_ax] = vv.ravel()
                p[:, axis] = box.face_center(face)[axis]
                keep = np.ones(len(p), dtype=bool)
                probe = p.copy()
                probe[:, axis] += sign * 1e-6
                for bj, other in enumerate(self.boxes):
                    if bj == bi:
                        continue
                    inside = np.all((probe >= other.lo - 1e-9) & (probe <= other.hi + 1e-9), axis=1)
                    keep &= ~inside
                n = np.zeros((keep.sum(), 3))
                n[:, axis] = sign
                pts.append(p[keep])
                nrm.append(n)
        return PointCloud(np.concatenate(pts), np.concatenate(nrm))

    def to_dict(self):
        return {
            "format": STRUCTURE_FORMAT,
            "boxes": [{"center": list(b.center), "half_extents": list(b.half_extents)}
                      for b in self.boxes],
            "excluded": [{"box": b, "face": f} for b, f in self.excluded],
        }


def _grid(lo, hi, spacing):
    n = max(int(np.floor((hi - lo) / spacing + 1e-9)), 1)
    offset = 0.5 * ((hi - lo) - n * spacing)
    return lo + offset + spacing * (np.arange(n) + 0.5)


def _overlap(a, b, tol=1e-9):
    return bool(np.all(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo) > tol))


def build_structure(boxes, excluded):
    boxes = tuple(boxes)
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if _overlap(boxes[i], boxes[j]):
                raise ValueError(f"boxes {i} and {j} overlap beyond a shared face")
    excluded = tuple((int(b), str(f)) for b, f in excluded)
    for b, f in excluded:
        if f not in FACE_IDS:
            raise ValueError(f"unknown face id {f!r}; expected one of {FACE_IDS}")
        if not 0 <= b < len(boxes):
            raise ValueError(f"excluded face refers to missing box {b}")
    if len(set(excluded)) != len(excluded):
        raise ValueError("a face is listed more than once")
    labeled = tuple((b, f) for b in range(len(boxes)) for f in FACE_IDS if (b, f) not in excluded)
    return StructureModel(boxes, labeled, excluded)


def load_structure(description):
    """Parse a structure description (JSON text, path-free dict or file-like).

    Schema::

        {"format": "boxcalib.structure/v1",
         "boxes": [{"center": [x, y, z], "half_extents": [hx, hy, hz]}, ...],
         "excluded": [{"box": 0, "face": "-y"}, ...],
         "labeled": [{"box": 0, "face": "+x"}, ...]}   # optional

    When ``labeled`` is given it must list exactly the complement of
    ``excluded``; a face in both lists is an error.
    """
    if hasattr(description, "read"):
        description = description.read()
    doc = json.loads(description) if isinstance(description, (str, bytes)) else dict(description)
    fmt = doc.get("format")
    if fmt != STRUCTURE_FORMAT:
        raise ValueError(f"unsupported structure format {fmt!r}")
    boxes = [BoxSpec(b["center"], b["half_extents"]) for b in doc["boxes"]]
    excluded = [(e["box"], e["face"]) for e in doc.get("excluded", [])]
    model = build_structure(boxes, excluded)
    if "labeled" in doc:
        listed = [(e["box"], e["face"]) for e in doc["labeled"]]
        both = set(listed) & set(excluded)
        if both:
            raise ValueError(f"faces listed as both labeled and excluded: {sorted(both)}")
        if sorted(listed) != sorted(model.labeled):
            raise ValueError("labeled faces must cover every non-excluded face exactly once")
    return model


# Box footprint 0.56 x 0.36, height 0.36.  Two boxes lie side by side with a
# third across their +x ends, forming an L on the floor; the fourth sits
# exactly on top of box 0.
DEFAULT_STRUCTURE = {
    "format": STRUCTURE_FORMAT,
    "boxes": [
        {"center": [-0.18, -0.18, -0.19], "half_extents": [0.28, 0.18, 0.18]},
        {"center": [0.28, -0.18, 0.09], "half_extents": [0.18, 0.18, 0.28]},
        {"center": [-0.18, -0.18, 0.17], "half_extents": [0.28, 0.18, 0.18]},
        {"center": [-0.18, 0.18, -0.19], "half_extents": [0.28, 0.18, 0.18]},
    ],
    "excluded": [{"box": 0, "face": "-y"}, {"box": 1, "face": "-y"}, {"box": 2, "face": "-y"}],
}


def default_structure():
    return load_structure(DEFAULT_STRUCTURE)


# --------------------------------------------------------------------------
# rendering


def camera_rays(k):
    """Camera-space ray directions with unit z, shape (H*W, 3), row-major."""
    v, u = np.mgrid[0:k.height, 0:k.width]
    d = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u, dtype=float)], axis=-1)
    return d.reshape(-1, 3)


def intersect_boxes(origin, dirs, boxes):
    """Nearest forward hit of each ray against a list of boxes (slab test).

    Returns (t, box index, face index) with t = inf / -1 / -1 for misses.
    """
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_box = np.full(n, -1)
    best_face = np.full(n, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for bi, box in enumerate(boxes):
            t1 = (box.lo - origin) * inv
            t2 = (box.hi - origin) * inv
            tmin = np.fmin(t1, t2)
            tmax = np.fmax(t1, t2)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            axis = np.argmax(tmin, axis=1)
            t_in = tmin[np.arange(n), axis]
            t_out = tmax.min(axis=1)
            hit = (t_in <= t_out) & (t_in > 0) & (t_in < best_t)
            # entering through the low slab means the -axis face
            entering_lo = dirs[np.arange(n), axis] > 0
            face = 2 * axis + entering_lo.astype(int)
            best_t = np.where(hit, t_in, best_t)
            best_box = np.where(hit, bi, best_box)
            best_face = np.where(hit, face, best_face)
    return best_t, best_box, best_face


def render(model, pose, k):
    """Ray-cast depth (camera z, meters) and class labels for one view."""
    origin = np.asarray(pose.translation)
    if model.contains(origin):
        raise DegenerateViewError("camera center lies inside a box of the structure")
    dirs = camera_rays(k) @ pose.rotation.T
    t, box, face = intersect_boxes(origin, dirs, model.boxes)
    hit = box >= 0
    depth = np.where(hit, t, 0.0).reshape(k.height, k.width)
    table = model.face_class_table()
    labels = np.zeros(len(t), dtype=np.uint8)
    labels[hit] = table[box[hit], face[hit]]
    return depth, labels.reshape(k.height, k.width)


# --------------------------------------------------------------------------
# pose sampling


@dataclass(frozen=True)
class PoseSamplerConfig:
    rho: tuple = (1.50, 2.25)        # meters, horizontal distance to the origin
    phi: tuple = (0.0, 360.0)        # degrees
    height: tuple = (-0.15, 0.75)    # meters, GCS y of the camera center
    look_radius: float = 0.20        # meters
    max_roll: float = 5.0            # degrees
    seed: int = 0

    def __post_init__(self):
        for name in ("rho", "phi", "height"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty {name} range {lo}..{hi}")
        if self.look_radius < 0 or self.max_roll < 0:
            raise ValueError("look radius and roll bound must be non-negative")

    def to_dict(self):
        return {"rho": list(self.rho), "phi": list(self.phi), "height": list(self.height),
                "look_radius": self.look_radius, "max_roll": self.max_roll, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["rho"]), tuple(d["phi"]), tuple(d["height"]),
                   float(d["look_radius"]), float(d["max_roll"]), int(d.get("seed", 0)))


# rho ranges of the three trained model families
RHO_PRESETS = {"225": (1.50, 2.25), "275": (1.50, 2.75), "350": (1.50, 3.50)}


def look_at(position, target, roll=0.0):
    """Camera-to-GCS pose looking from ``position`` at ``target``.

    The camera x axis is horizontal before the roll (radians) about the
    viewing axis is applied.
    """
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 1.0, 0.0])
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise DegenerateViewError("viewing direction is vertical; camera x axis undefined")
    x /= nx
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    c, s = np.cos(roll), np.sin(roll)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidPose(r @ rz, position)


def sample_pose(cfg, rng):
    rho = rng.uniform(*cfg.rho)
    phi = np.radians(rng.uniform(*cfg.phi))
    h = rng.uniform(*cfg.height)
    position = np.array([rho * np.cos(phi), h, rho * np.sin(phi)])
    # uniform point in the look-at ball
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    target = d * cfg.look_radius * rng.uniform() ** (1.0 / 3.0)
    roll = np.radians(rng.uniform(-cfg.max_roll, cfg.max_roll))
    return look_at(position, target, roll)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class NoiseConfig:
    erosion: tuple = (0, 2)        # border erosion width in pixels, uniform integer
    holes: tuple = (0, 6)          # hole count, uniform integer
    hole_radius: tuple = (2.0, 8.0)  # pixels, uniform
    seed: int = 0

    def __post_init__(self):
        for name in ("erosion", "holes", "hole_radius"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid {name} range {lo}..{hi}")

    @classmethod
    def none(cls):
        return cls((0, 0), (0, 0), (0.0, 0.0))

    def to_dict(self):
        return {"erosion": list(self.erosion), "holes": list(self.holes),
                "hole_radius": list(self.hole_radius), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["erosion"]), tuple(d["holes"]), tuple(d["hole_radius"]),
                   int(d.get("seed", 0)))


def label_edges(labels):
    """Pixels with a 4-neighbor of a different label."""
    e = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    e[1:, :] |= dv
    e[:-1, :] |= dv
    e[:, 1:] |= dh
    e[:, :-1] |= dh
    return e


def hole_mask(shape, centers, radius):
    v, u = np.mgrid[0:shape[0], 0:shape[1]]
    m = np.zeros(shape, dtype=bool)
    for cv, cu in centers:
        m |= (v - cv) ** 2 + (u - cu) ** 2 <= radius * radius
    return m


def augment(depth, labels, cfg, rng):
    """Zero depth along label borders and inside random circular holes.

    Hole centers are drawn from the pixels with valid depth.  Labels are never
    modified and no depth value is changed other than being zeroed.
    """
    out = np.array(depth, dtype=float, copy=True)
    width = int(rng.integers(cfg.erosion[0], cfg.erosion[1] + 1))
    if width > 0:
        edges = label_edges(labels)
        if width > 1:
            edges = ndimage.binary_dilation(edges, np.ones((3, 3), bool), iterations=width - 1)
        out[edges] = 0.0
    count = int(rng.integers(cfg.holes[0], cfg.holes[1] + 1))
    if count > 0 and cfg.hole_radius[1] > 0:
        fg = np.argwhere(out > 0)
        if len(fg):
            centers = fg[rng.integers(0, len(fg), size=count)]
            for c in centers:
                r = rng.uniform(*cfg.hole_radius)
                out[hole_mask(out.shape, [c], r)] = 0.0
    return out


def visibility_mask(labels, model, min_pixels=16):
    """3 x K {0,1} mask; side k is visible when it covers >= min_pixels pixels."""
    counts = np.bincount(np.asarray(labels).ravel(), minlength=model.K + 1)[1:model.K + 1]
    vis = (counts >= min_pixels).astype(float)
    return np.repeat(vis[None, :], 3, axis=0)


def check_render_planes(model, pose, k, depth, labels):
    """Max distance of labeled pixels (mapped to the GCS) to their face planes."""
    vm = deproject(depth, k)
    worst = 0.0
    for cls in range(1, model.K + 1):
        sel = (labels == cls) & vm.valid
        if not sel.any():
            continue
        p = pose.apply(vm.points[:, sel].T)
        axis, coord = model.face_plane(cls)
        worst = max(worst, float(np.abs(p[:, axis] - coord).max()))
    return worst
